//! Image-prompt conditioning: a deterministic mock image embedder, the
//! affine adapter that turns an embedding into condition tokens, token
//! averaging over a style set, crop sampling, and adapter fine-tuning
//! against the frozen denoiser.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::binio::{read_file, write_file_synced, LeCursor, LeWriter};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::matrix::{FeatureMatrix, Matrix};
use crate::model::{noise_loss_grad, LatentImage, ToyModel};

/// Width of a mock image embedding.
pub const EMBED_DIM: usize = 32;
/// Condition tokens produced per image.
pub const STYLE_TOKENS: usize = 4;
pub const ADAPTER_MAGIC: [u8; 4] = *b"ADP1";

const MOCK_FEATURES: usize = 3 + 3 + 27 + 1;
const MOCK_SEED: u64 = 0x0e3b_ed00;

/// Unit-length image descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub vector: Vec<f32>,
}

impl ImageEmbedding {
    /// Normalizes `vector` to unit length.
    pub fn normalized(vector: Vec<f32>) -> Result<Self> {
        let norm = vector.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if vector.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(Error::invalid("embedding must be finite and non-zero"));
        }
        Ok(Self {
            vector: vector.iter().map(|&v| (v as f64 / norm) as f32).collect(),
        })
    }
}

/// Deterministic stand-in for an image encoder. Global channel means and
/// variances, channel means over a 3×3 grid of blocks and a constant term
/// are projected by a fixed seeded matrix and normalized. The constant term
/// keeps the projection away from zero for flat mid-gray images.
pub fn mock_image_embed(image: &RgbImage) -> Result<ImageEmbedding> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 {
        return Err(Error::EmptyInput);
    }
    let mut features = Vec::with_capacity(MOCK_FEATURES);
    let n = (w * h) as f64;
    let mut mean = [0f64; 3];
    for p in image.pixels() {
        for c in 0..3 {
            mean[c] += p[c] as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0f64; 3];
    for p in image.pixels() {
        for c in 0..3 {
            var[c] += (p[c] as f64 - mean[c]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    features.extend(mean);
    features.extend(var);
    for by in 0..3 {
        for bx in 0..3 {
            let (y0, y1) = (by * h / 3, ((by + 1) * h / 3).max(by * h / 3 + 1).min(h));
            let (x0, x1) = (bx * w / 3, ((bx + 1) * w / 3).max(bx * w / 3 + 1).min(w));
            let mut acc = [0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = image.pixel(x, y);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            let cnt = ((y1 - y0) * (x1 - x0)) as f64;
            features.extend(acc.map(|a| a / cnt));
        }
    }
    features.push(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(MOCK_SEED);
    let proj: Vec<f64> = (0..EMBED_DIM * MOCK_FEATURES)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let out = (0..EMBED_DIM)
        .map(|r| {
            proj[r * MOCK_FEATURES..(r + 1) * MOCK_FEATURES]
                .iter()
                .zip(&features)
                .map(|(a, b)| a * b)
                .sum::<f64>() as f32
        })
        .collect();
    ImageEmbedding::normalized(out)
}

/// The condition-token sequence derived from one or more images.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding {
    pub tokens: FeatureMatrix,
}

impl StyleEmbedding {
    pub fn new(tokens: FeatureMatrix) -> Result<Self> {
        if tokens.rows() != STYLE_TOKENS || tokens.cols() == 0 {
            return Err(Error::shape(format!(
                "style embedding must be {STYLE_TOKENS} x dim, got {}x{}",
                tokens.rows(),
                tokens.cols()
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::NonFinite("style embedding".into()));
        }
        Ok(Self { tokens })
    }
}

/// Affine map from an embedding to `4 × dim` tokens: `tokens = W·e + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    /// `4·dim × E`, row-major.
    pub w: FeatureMatrix,
    pub b: Vec<f32>,
    pub dim: usize,
}

impl ProjectionWeights {
    pub fn zeros(embed_dim: usize, dim: usize) -> Self {
        Self {
            w: FeatureMatrix::zeros(STYLE_TOKENS * dim, embed_dim),
            b: vec![0.0; STYLE_TOKENS * dim],
            dim,
        }
    }

    /// Weights with unit-variance entries, so a unit embedding maps to
    /// roughly unit-variance tokens; zero bias.
    pub fn seeded(embed_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self::zeros(embed_dim, dim);
        out.w.as_mut_slice().iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        out
    }

    pub fn embed_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w.as_slice().len() + self.b.len()
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.w.cols() == 0 {
            return Err(Error::invalid("adapter dimensions must be positive"));
        }
        if self.w.rows() != STYLE_TOKENS * self.dim || self.b.len() != STYLE_TOKENS * self.dim {
            return Err(Error::shape("adapter weight and bias sizes disagree with dim"));
        }
        if !self.w.all_finite() || !self.b.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("adapter weights".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::new(Vec::new());
        let write = |w: &mut LeWriter<Vec<u8>>| -> std::io::Result<()> {
            w.bytes(&ADAPTER_MAGIC)?;
            w.u32(self.embed_dim() as u32)?;
            w.u32(self.dim as u32)?;
            w.f32s(self.w.as_slice())?;
            w.f32s(&self.b)
        };
        write(&mut w).expect("writing to a Vec cannot fail");
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let malformed = |reason: &str| Error::Malformed {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let mut cur = LeCursor::new(bytes);
        let magic = cur.array::<4>().ok_or_else(|| malformed("missing header"))?;
        if magic != ADAPTER_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: ADAPTER_MAGIC,
                found: magic,
            });
        }
        let e = cur.u32().ok_or_else(|| malformed("missing header"))? as usize;
        let dim = cur.u32().ok_or_else(|| malformed("missing header"))? as usize;
        let rows = STYLE_TOKENS
            .checked_mul(dim)
            .filter(|r| r.checked_mul(e).is_some_and(|n| n <= bytes.len()))
            .ok_or_else(|| malformed("dimensions exceed file size"))?;
        let w = cur.f32s(rows * e).ok_or_else(|| malformed("truncated weights"))?;
        let b = cur.f32s(rows).ok_or_else(|| malformed("truncated bias"))?;
        if cur.remaining() != 0 {
            return Err(malformed("trailing bytes"));
        }
        let out = Self {
            w: FeatureMatrix::new(rows, e, w)?,
            b,
            dim,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file_synced(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// `reshape(W·e + b)` into `4 × dim` tokens.
pub fn project(a: &ProjectionWeights, e: &ImageEmbedding) -> Result<StyleEmbedding> {
    a.validate()?;
    if e.vector.len() != a.embed_dim() {
        return Err(Error::shape(format!(
            "embedding has {} values, adapter expects {}",
            e.vector.len(),
            a.embed_dim()
        )));
    }
    let flat: Vec<f32> = a
        .w
        .row_iter()
        .zip(&a.b)
        .map(|(row, &b)| {
            (row.iter().zip(&e.vector).map(|(&w, &x)| w as f64 * x as f64).sum::<f64>() + b as f64) as f32
        })
        .collect();
    StyleEmbedding::new(FeatureMatrix::new(STYLE_TOKENS, a.dim, flat)?)
}

/// Elementwise mean of the token sequences.
pub fn average_embeddings(list: &[StyleEmbedding]) -> Result<StyleEmbedding> {
    let first = list.first().ok_or(Error::EmptyInput)?;
    let (r, c) = (first.tokens.rows(), first.tokens.cols());
    if list.iter().any(|s| (s.tokens.rows(), s.tokens.cols()) != (r, c)) {
        return Err(Error::shape("style embeddings differ in shape"));
    }
    let n = list.len() as f64;
    let mut acc = vec![0f64; r * c];
    for s in list {
        for (a, &v) in acc.iter_mut().zip(s.tokens.as_slice()) {
            *a += v as f64;
        }
    }
    StyleEmbedding::new(FeatureMatrix::new(r, c, acc.iter().map(|a| (a / n) as f32).collect())?)
}

/// `n_crops` square crops of side `crop_px` at seeded uniform positions.
pub fn extract_crops(image: &RgbImage, crop_px: usize, n_crops: usize, seed: u64) -> Result<Vec<RgbImage>> {
    if crop_px == 0 || crop_px > image.width() || crop_px > image.height() {
        return Err(Error::invalid(format!(
            "crop of {crop_px}px does not fit a {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_crops)
        .map(|_| {
            let x = rng.random_range(0..=image.width() - crop_px);
            let y = rng.random_range(0..=image.height() - crop_px);
            image.crop(x, y, crop_px, crop_px)
        })
        .collect()
}

/// One style image for adapter fine-tuning: its clean latent and embedding.
#[derive(Clone, Debug)]
pub struct StyleSample {
    pub latent: LatentImage,
    pub embedding: ImageEmbedding,
}

#[derive(Clone, Debug)]
pub struct FinetuneOptions {
    pub steps: usize,
    /// Initial learning rate; decays along a half cosine to zero.
    pub lr: f64,
    pub seed: u64,
    /// Prompt whose tokens precede the image tokens in cross-attention.
    pub prompt: String,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 1.0,
            seed: 0,
            prompt: String::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub weights: ProjectionWeights,
    /// Loss at every step, measured before that step's update.
    pub losses: Vec<f64>,
}

/// Condition sequence for fine-tuning and generation: the prompt tokens
/// followed by the image tokens.
pub fn condition_tokens(model: &ToyModel, prompt: &str, style: &StyleEmbedding) -> Result<FeatureMatrix> {
    Matrix::vstack(&[&model.encode_prompt(prompt), &style.tokens])
}

/// Loss and gradient with respect to every adapter parameter for one
/// training sample. Gradients are laid out as `W` row-major, then `b`.
pub fn adapter_loss_grad(
    model: &ToyModel,
    a: &ProjectionWeights,
    sample: &StyleSample,
    timestep: usize,
    noise: &LatentImage,
    prompt: &str,
) -> Result<(f64, Vec<f64>)> {
    let x_t = noised_latent(model, &sample.latent, noise, timestep)?;
    let style = project(a, &sample.embedding)?;
    let cond = condition_tokens(model, prompt, &style)?.cast::<f64>();
    let grid = (x_t.height(), x_t.width());
    let g = noise_loss_grad(
        model,
        &x_t.to_tokens().cast(),
        grid,
        timestep,
        &cond,
        None,
        &noise.to_tokens().cast(),
    )?;
    let prompt_rows = cond.rows() - STYLE_TOKENS;
    let d_tokens = &g.d_cond.as_slice()[prompt_rows * a.dim..];
    let e = &sample.embedding.vector;
    let mut grad = Vec::with_capacity(a.param_count());
    for &dt in d_tokens {
        grad.extend(e.iter().map(|&x| dt * x as f64));
    }
    grad.extend_from_slice(d_tokens);
    Ok((g.loss, grad))
}

/// `x_t = √ᾱ_t · x_0 + √(1 − ᾱ_t) · ε`.
pub fn noised_latent(model: &ToyModel, x0: &LatentImage, noise: &LatentImage, timestep: usize) -> Result<LatentImage> {
    if !x0.same_shape(noise) {
        return Err(Error::shape("noise does not match the latent"));
    }
    let ab = model.schedule().alpha_bar(timestep);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.clone();
    for (o, &n) in out.as_mut_slice().iter_mut().zip(noise.as_slice()) {
        *o = (sa * *o as f64 + sb * n as f64) as f32;
    }
    Ok(out)
}

/// Gradient descent on the adapter parameters only. Each step draws a
/// style image, a timestep uniformly over the training schedule and a
/// Gaussian noise sample from a generator seeded with `opts.seed`.
pub fn finetune_adapter(
    a0: &ProjectionWeights,
    styles: &[StyleSample],
    model: &ToyModel,
    opts: &FinetuneOptions,
) -> Result<FinetuneReport> {
    if styles.is_empty() {
        return Err(Error::EmptyInput);
    }
    a0.validate()?;
    if a0.dim != model.config().dim {
        return Err(Error::shape("adapter token width differs from the model"));
    }
    if !(opts.lr.is_finite() && opts.lr >= 0.0) {
        return Err(Error::invalid("learning rate must be finite and non-negative"));
    }
    let mut a = a0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let sample = &styles[rng.random_range(0..styles.len())];
        let timestep = rng.random_range(0..model.config().train_steps);
        let l = &sample.latent;
        let noise = LatentImage::new(
            l.channels(),
            l.height(),
            l.width(),
            (0..l.as_slice().len()).map(|_| normal.sample(&mut rng)).collect(),
        )?;
        let (loss, grad) = adapter_loss_grad(model, &a, sample, timestep, &noise, &opts.prompt)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "fine-tuning step {step}: loss {loss}, timestep {timestep}"
            )));
        }
        losses.push(loss);
        let lr = opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / opts.steps as f64).cos());
        let nw = a.w.as_slice().len();
        for (p, g) in a.w.as_mut_slice().iter_mut().zip(&grad[..nw]) {
            *p = (*p as f64 - lr * g) as f32;
        }
        for (p, g) in a.b.iter_mut().zip(&grad[nw..]) {
            *p = (*p as f64 - lr * g) as f32;
        }
    }
    Ok(FinetuneReport { weights: a, losses })
}

/// Trailing moving average with the given window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    values
        .windows(window.min(values.len()).max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}
