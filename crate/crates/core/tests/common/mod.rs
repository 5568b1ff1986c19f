#![allow(dead_code)]

use std::path::PathBuf;

use stylebank_core::cache::{write_cache, CacheReader};
use stylebank_core::embedding::{average_embeddings, mock_image_embed, project, ProjectionWeights, StyleEmbedding, EMBED_DIM};
use stylebank_core::model::{ModelConfig, ToyModel};
use stylebank_core::pipeline::{generate_average_image, invert_style_image, NormStats};
use stylebank_core::synth;
use tempfile::TempDir;

/// Inverted style caches, averaged style tokens and normalization stats for
/// a small style family.
pub struct StyleSet {
    pub model: ToyModel,
    pub dir: TempDir,
    pub cache_paths: Vec<PathBuf>,
    pub phi: StyleEmbedding,
    pub norm: NormStats,
    pub steps: usize,
}

impl StyleSet {
    pub fn build(family: u64, n: usize, style_px: usize, steps: usize) -> Self {
        let model = ToyModel::build(ModelConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let adapter = ProjectionWeights::seeded(EMBED_DIM, model.config().dim, 11);
        let mut cache_paths = Vec::new();
        let mut tokens = Vec::new();
        for v in 0..n {
            let img = synth::style_image(family, v as u64, style_px, style_px);
            let (_, entries) = invert_style_image(&model, &img, steps).unwrap();
            let path = dir.path().join(format!("style{v}.skvc"));
            write_cache(&entries, v as u64, &path).unwrap();
            cache_paths.push(path);
            tokens.push(project(&adapter, &mock_image_embed(&img).unwrap()).unwrap());
        }
        let phi = average_embeddings(&tokens).unwrap();
        let (_, norm) = generate_average_image(&model, &phi, steps, 77, (8, 8)).unwrap();
        Self {
            model,
            dir,
            cache_paths,
            phi,
            norm,
            steps,
        }
    }

    pub fn readers(&self) -> Vec<CacheReader> {
        self.cache_paths.iter().map(|p| CacheReader::open(p).unwrap()).collect()
    }
}

/// Median over pixels of `|a − b| / |b|` with RGB vector norms.
pub fn median_relative_deviation(a: &stylebank_core::image::RgbImage, b: &stylebank_core::image::RgbImage) -> f64 {
    let mut rel: Vec<f64> = a
        .pixels()
        .zip(b.pixels())
        .map(|(p, q)| {
            let d: f32 = (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f32>().sqrt();
            let n: f32 = q.iter().map(|v| v * v).sum::<f32>().sqrt();
            d as f64 / (n as f64).max(1e-6)
        })
        .collect();
    rel.sort_by(f64::total_cmp);
    rel[rel.len() / 2]
}

pub fn latent_l2(a: &stylebank_core::model::LatentImage, b: &stylebank_core::model::LatentImage) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}
