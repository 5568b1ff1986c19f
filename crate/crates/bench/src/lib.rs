//! Shared fixtures for the benchmarks.

use std::path::PathBuf;

use stylebank_core::cache::{write_cache, CacheReader};
use stylebank_core::embedding::{average_embeddings, mock_image_embed, project, ProjectionWeights, StyleEmbedding, EMBED_DIM};
use stylebank_core::model::{ModelConfig, ToyModel};
use stylebank_core::pipeline::{generate_average_image, invert_style_image, NormStats};
use stylebank_core::synth;
use tempfile::TempDir;

/// On-disk style caches with matching style tokens and statistics.
pub struct Fixture {
    pub model: ToyModel,
    pub dir: TempDir,
    pub caches: Vec<PathBuf>,
    pub phi: StyleEmbedding,
    pub norm: NormStats,
}

impl Fixture {
    pub fn new(n_styles: usize, style_px: usize, steps: usize) -> Self {
        let model = ToyModel::build(ModelConfig::default()).expect("default model builds");
        let dir = tempfile::tempdir().expect("temp dir");
        let adapter = ProjectionWeights::seeded(EMBED_DIM, model.config().dim, 1);
        let mut caches = Vec::new();
        let mut tokens = Vec::new();
        for v in 0..n_styles {
            let img = synth::style_image(2, v as u64, style_px, style_px);
            let (_, entries) = invert_style_image(&model, &img, steps).expect("inversion");
            let path = dir.path().join(format!("s{v}.skvc"));
            write_cache(&entries, v as u64, &path).expect("cache write");
            caches.push(path);
            tokens.push(project(&adapter, &mock_image_embed(&img).expect("embed")).expect("project"));
        }
        let phi = average_embeddings(&tokens).expect("average");
        let (_, norm) = generate_average_image(&model, &phi, steps, 0, (8, 8)).expect("average image");
        Self {
            model,
            dir,
            caches,
            phi,
            norm,
        }
    }

    pub fn readers(&self) -> Vec<CacheReader> {
        self.caches
            .iter()
            .map(|p| CacheReader::open(p).expect("cache opens"))
            .collect()
    }
}
