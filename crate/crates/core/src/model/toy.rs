//! A small fixed-weight latent denoiser.
//!
//! Tokens are latent pixels. Each block applies pre-norm multi-head
//! self-attention, multi-head cross-attention over a short condition
//! sequence, and a per-token two-layer MLP, all with residual connections.
//! Weights are drawn once from a seeded generator; nothing is trained.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::cache::CacheKey;
use crate::digest::{fnv1a64, Fnv1a};
use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Matrix, Scalar};
use crate::model::attention::attention;
use crate::model::hooks::{AttentionHook, SelfAttentionInputs};
use crate::model::latent::{ControlMaps, LatentCodec, LatentImage};
use crate::model::schedule::NoiseSchedule;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub seed: u64,
    pub latent_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub cond_tokens: usize,
    pub train_steps: usize,
    pub min_alpha_bar: f64,
    pub output_gain: f32,
    /// Scale of the latent input projection.
    pub input_gain: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_channels: 4,
            dim: 16,
            heads: 2,
            blocks: 2,
            mlp_hidden: 32,
            cond_tokens: 4,
            train_steps: 1000,
            min_alpha_bar: 0.3,
            output_gain: 0.7,
            input_gain: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} is not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::invalid("dim must be a multiple of 4"));
        }
        if self.blocks == 0 || self.latent_channels == 0 || self.cond_tokens == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("model sizes must be positive"));
        }
        if self.blocks > u16::MAX as usize || self.heads > u16::MAX as usize {
            return Err(Error::invalid("too many blocks or heads for cache keys"));
        }
        if !(0.0..1.0).contains(&self.min_alpha_bar) || self.train_steps < 2 {
            return Err(Error::invalid("bad noise schedule"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Linear {
    /// `in × out`.
    pub w: FeatureMatrix,
    pub b: Vec<f32>,
}

impl Linear {
    fn seeded(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let w = FeatureMatrix::from_fn(fan_in, fan_out, |_, _| dist.sample(rng) as f32);
        let b = if bias {
            (0..fan_out).map(|_| dist.sample(rng) as f32 * 0.1).collect()
        } else {
            vec![0.0; fan_out]
        };
        Self { w, b }
    }

    pub fn apply<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul(&self.w)?;
        y.add_row_vector(&self.b);
        Ok(y)
    }
}

/// Per-head projections; `o` maps the concatenated heads back to `dim`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AttentionWeights {
    pub q: Vec<FeatureMatrix>,
    pub k: Vec<FeatureMatrix>,
    pub v: Vec<FeatureMatrix>,
    pub o: FeatureMatrix,
}

impl AttentionWeights {
    fn seeded(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        let hd = dim / heads;
        let std = (1.0 / dim as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let mut proj = || FeatureMatrix::from_fn(dim, hd, |_, _| dist.sample(rng) as f32);
        let q = (0..heads).map(|_| proj()).collect();
        let k = (0..heads).map(|_| proj()).collect();
        let v = (0..heads).map(|_| proj()).collect();
        let o = FeatureMatrix::from_fn(dim, dim, |_, _| dist.sample(rng) as f32);
        Self { q, k, v, o }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Block {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

/// Index and training timestep of one sampler step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    pub index: usize,
    pub timestep: usize,
}

/// Conditioning for one denoiser call: the cross-attention token sequence
/// and optional structural control maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub tokens: FeatureMatrix,
    pub control: Option<ControlMaps>,
}

impl ConditionSet {
    pub fn tokens_only(tokens: FeatureMatrix) -> Self {
        Self {
            tokens,
            control: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    pub(crate) input: Linear,
    pub(crate) lineart_proj: Vec<f32>,
    pub(crate) depth_proj: Vec<f32>,
    pub(crate) blocks: Vec<Block>,
    pub(crate) output: Linear,
    codec: LatentCodec,
    schedule: NoiseSchedule,
}

impl ToyModel {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c, d) = (config.latent_channels, config.dim);
        let mut input = Linear::seeded(&mut rng, c, d, true);
        input.w.scale(config.input_gain);
        let mut control = || -> Vec<f32> {
            (0..d)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32)
                .collect()
        };
        let lineart_proj = control();
        let depth_proj = control();
        let blocks = (0..config.blocks)
            .map(|_| Block {
                self_attn: AttentionWeights::seeded(&mut rng, d, config.heads),
                cross_attn: AttentionWeights::seeded(&mut rng, d, config.heads),
                mlp_in: Linear::seeded(&mut rng, d, config.mlp_hidden, true),
                mlp_out: Linear::seeded(&mut rng, config.mlp_hidden, d, true),
            })
            .collect();
        let output = Linear::seeded(&mut rng, d, c, false);
        let codec = LatentCodec::new(c, config.seed ^ 0x5eed_c0de_c0de_5eed)?;
        Ok(Self {
            config,
            input,
            lineart_proj,
            depth_proj,
            blocks,
            output,
            codec,
            schedule: NoiseSchedule {
                train_steps: config.train_steps,
                min_alpha_bar: config.min_alpha_bar,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn codec(&self) -> &LatentCodec {
        &self.codec
    }

    /// FNV-1a over every weight, in a fixed order.
    pub fn weights_digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        let lin = |l: &Linear, h: &mut Fnv1a| {
            h.update_f32s(l.w.as_slice());
            h.update_f32s(&l.b);
        };
        lin(&self.input, &mut h);
        h.update_f32s(&self.lineart_proj);
        h.update_f32s(&self.depth_proj);
        for b in &self.blocks {
            for a in [&b.self_attn, &b.cross_attn] {
                for m in a.q.iter().chain(&a.k).chain(&a.v) {
                    h.update_f32s(m.as_slice());
                }
                h.update_f32s(a.o.as_slice());
            }
            lin(&b.mlp_in, &mut h);
            lin(&b.mlp_out, &mut h);
        }
        lin(&self.output, &mut h);
        h.finish()
    }

    /// Four condition tokens drawn from a generator seeded with the
    /// prompt's FNV-1a hash.
    pub fn encode_prompt(&self, prompt: &str) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(prompt.as_bytes()));
        FeatureMatrix::from_fn(self.config.cond_tokens, self.config.dim, |_, _| {
            StandardNormal.sample(&mut rng)
        })
    }

    pub(crate) fn attention_scale(&self) -> f64 {
        1.0 / (self.config.head_dim() as f64).sqrt()
    }

    /// Input projection plus time and position embeddings and control
    /// residuals.
    pub(crate) fn embed<T: Scalar>(
        &self,
        x: &Matrix<T>,
        grid: (usize, usize),
        timestep: usize,
        control: Option<&ControlMaps>,
    ) -> Result<Matrix<T>> {
        let (h, w) = grid;
        if x.rows() != h * w || x.cols() != self.config.latent_channels {
            return Err(Error::shape(format!(
                "latent tokens {}x{} do not match grid {h}x{w} with {} channels",
                x.rows(),
                x.cols(),
                self.config.latent_channels
            )));
        }
        let d = self.config.dim;
        let mut out = self.input.apply(x)?;
        let time = time_embedding(timestep, d);
        out.add_row_vector(&time);
        for r in 0..h {
            for c in 0..w {
                let pos = position_embedding(r, c, h, w, d);
                for (v, p) in out.row_mut(r * w + c).iter_mut().zip(pos) {
                    *v = *v + T::from_f64(p);
                }
            }
        }
        if let Some(ctrl) = control {
            ctrl.validate()?;
            if (ctrl.height, ctrl.width) != grid {
                return Err(Error::shape(format!(
                    "control maps are {}x{}, latent grid is {h}x{w}",
                    ctrl.height, ctrl.width
                )));
            }
            if ctrl.lineart_strength != 0.0 || ctrl.depth_strength != 0.0 {
                let wl = T::from_f32(ctrl.lineart_strength);
                let wd = T::from_f32(ctrl.depth_strength);
                for t in 0..h * w {
                    let l = wl * T::from_f32(ctrl.lineart[t]);
                    let dd = wd * T::from_f32(ctrl.depth[t]);
                    for ((v, &pl), &pd) in out.row_mut(t).iter_mut().zip(&self.lineart_proj).zip(&self.depth_proj) {
                        *v = *v + l * T::from_f32(pl) + dd * T::from_f32(pd);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Noise estimate for latent tokens `x` (`h·w × channels`).
    pub fn predict_noise<T: Scalar>(
        &self,
        x: &Matrix<T>,
        grid: (usize, usize),
        step: StepContext,
        cond: &Matrix<T>,
        control: Option<&ControlMaps>,
        hook: &mut dyn AttentionHook<T>,
    ) -> Result<Matrix<T>> {
        if cond.cols() != self.config.dim || cond.rows() == 0 {
            return Err(Error::shape(format!(
                "condition tokens must be n x {}, got {}x{}",
                self.config.dim,
                cond.rows(),
                cond.cols()
            )));
        }
        let heads = self.config.heads;
        let scale = T::from_f64(self.attention_scale());
        let mut h = self.embed(x, grid, step.timestep, control)?;

        for (layer, block) in self.blocks.iter().enumerate() {
            let n = layer_norm(&h);
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let mut qkv = SelfAttentionInputs {
                    q: n.matmul(&block.self_attn.q[head])?,
                    k: n.matmul(&block.self_attn.k[head])?,
                    v: n.matmul(&block.self_attn.v[head])?,
                };
                let site = CacheKey::new(layer as u16, step.index as u16, head as u16);
                let q_shape = (qkv.q.rows(), qkv.q.cols());
                hook.self_attention(site, &mut qkv)?;
                if (qkv.q.rows(), qkv.q.cols()) != q_shape {
                    return Err(Error::shape(format!("hook changed the query shape at {site}")));
                }
                outs.push(attention(&qkv.q, &qkv.k, &qkv.v, scale)?);
            }
            let cat = Matrix::hstack(&outs.iter().collect::<Vec<_>>())?;
            h.add_assign(&cat.matmul(&block.self_attn.o)?)?;

            let n = layer_norm(&h);
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let q = n.matmul(&block.cross_attn.q[head])?;
                let k = cond.matmul(&block.cross_attn.k[head])?;
                let v = cond.matmul(&block.cross_attn.v[head])?;
                outs.push(attention(&q, &k, &v, scale)?);
            }
            let cat = Matrix::hstack(&outs.iter().collect::<Vec<_>>())?;
            h.add_assign(&cat.matmul(&block.cross_attn.o)?)?;

            let n = layer_norm(&h);
            let hidden = block.mlp_in.apply(&n)?.map(|v| v.tanh());
            h.add_assign(&block.mlp_out.apply(&hidden)?)?;
        }

        let mut eps = layer_norm(&h).matmul(&self.output.w)?;
        eps.scale(T::from_f32(self.config.output_gain));
        Ok(eps)
    }

    /// `f32` noise estimate for a latent image.
    pub fn denoise_step(
        &self,
        x_t: &LatentImage,
        step: StepContext,
        cond: &ConditionSet,
        hook: &mut dyn AttentionHook<f32>,
    ) -> Result<LatentImage> {
        let grid = (x_t.height(), x_t.width());
        let eps = self.predict_noise(
            &x_t.to_tokens(),
            grid,
            step,
            &cond.tokens,
            cond.control.as_ref(),
            hook,
        )?;
        LatentImage::from_tokens(&eps, grid.0, grid.1)
    }
}

/// Row-wise normalization to zero mean and unit variance, no affine part.
pub(crate) fn layer_norm<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    let d = T::from_f64(x.cols() as f64);
    let eps = T::from_f64(LAYER_NORM_EPS);
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let inv = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

pub(crate) fn time_embedding(timestep: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = timestep as f64 * freq;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

/// Resolution-independent position features from normalized coordinates.
pub(crate) fn position_embedding(r: usize, c: usize, h: usize, w: usize, dim: usize) -> Vec<f64> {
    let u = (r as f64 + 0.5) / h as f64;
    let v = (c as f64 + 0.5) / w as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 4 {
        let f = PI * (i + 1) as f64;
        out.extend([(f * u).sin(), (f * u).cos(), (f * v).sin(), (f * v).cos()].map(|x| 0.5 * x));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ddim::{ddim_invert, ddim_sample};
    use crate::model::hooks::{KvRecorder, NoHook};

    struct Identity;
    impl AttentionHook<f32> for Identity {
        fn self_attention(&mut self, _site: CacheKey, qkv: &mut SelfAttentionInputs<f32>) -> Result<()> {
            let copy = qkv.clone();
            *qkv = copy;
            Ok(())
        }
    }

    fn model() -> ToyModel {
        ToyModel::build(ModelConfig::default()).unwrap()
    }

    #[test]
    fn weights_are_seed_determined() {
        let a = model();
        assert_eq!(a, model());
        let b = ToyModel::build(ModelConfig { seed: 1, ..Default::default() }).unwrap();
        assert!(a.output.w.max_abs_diff(&b.output.w) > 0.0);
        assert_ne!(a.weights_digest(), b.weights_digest());
    }

    #[test]
    fn prompts_hash_to_distinct_tokens() {
        let m = model();
        assert_ne!(m.encode_prompt(""), m.encode_prompt("a"));
        assert_eq!(m.encode_prompt("a").rows(), 4);
    }

    #[test]
    fn hook_and_control_transparency() {
        let m = model();
        let x = LatentImage::noise(4, 4, 4, 1);
        let cond = ConditionSet::tokens_only(m.encode_prompt(""));
        let step = StepContext { index: 0, timestep: 999 };
        let plain = m.denoise_step(&x, step, &cond, &mut NoHook).unwrap();
        assert_eq!(plain, m.denoise_step(&x, step, &cond, &mut Identity).unwrap());

        let image = crate::synth::content_image(0, 8, 8);
        let zero_strength = ConditionSet {
            control: Some(ControlMaps::from_image(&image, 0.0, 0.0).unwrap()),
            ..cond.clone()
        };
        assert_eq!(plain, m.denoise_step(&x, step, &zero_strength, &mut NoHook).unwrap());
        let mut zero_maps = ControlMaps::from_image(&image, 1.5, 0.7).unwrap();
        zero_maps.lineart.iter_mut().chain(zero_maps.depth.iter_mut()).for_each(|v| *v = 0.0);
        let zero_maps = ConditionSet {
            control: Some(zero_maps),
            ..cond.clone()
        };
        assert_eq!(plain, m.denoise_step(&x, step, &zero_maps, &mut NoHook).unwrap());
        let strong = ConditionSet {
            control: Some(ControlMaps::from_image(&image, 1.0, 1.0).unwrap()),
            ..cond
        };
        assert_ne!(plain, m.denoise_step(&x, step, &strong, &mut NoHook).unwrap());
    }

    #[test]
    fn control_strength_is_continuous() {
        let m = model();
        let x = LatentImage::noise(4, 4, 4, 2);
        let image = crate::synth::content_image(3, 8, 8);
        let step = StepContext { index: 0, timestep: 500 };
        let at = |w: f32| {
            let cond = ConditionSet {
                tokens: m.encode_prompt(""),
                control: Some(ControlMaps::from_image(&image, w, w).unwrap()),
            };
            m.denoise_step(&x, step, &cond, &mut NoHook).unwrap()
        };
        let base = at(1.0);
        for dw in [1e-2f32, 1e-3] {
            let d = at(1.0 + dw);
            let diff: f32 = d.as_slice().iter().zip(base.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff / dw < 10.0, "slope {}", diff / dw);
        }
    }

    #[test]
    fn trajectories_and_recorded_keys() {
        let m = model();
        let cond = ConditionSet::tokens_only(m.encode_prompt(""));
        let x0 = m.codec().encode(&crate::synth::style_image(2, 0, 8, 8)).unwrap();
        let mut rec = KvRecorder::new();
        let inv = ddim_invert(&m, &x0, &cond, 3, &mut rec).unwrap();
        assert_eq!(inv.latents.len(), 4);
        assert_eq!(inv.clean(), &x0);
        let entries = rec.into_entries();
        assert_eq!(entries.len(), 2 * 3 * 2);
        assert_eq!(entries[0].key, CacheKey::new(0, 0, 0));
        assert_eq!(entries.last().unwrap().key, CacheKey::new(1, 2, 1));
        assert_eq!(ddim_sample(&m, inv.noisy(), &cond, 1, &mut NoHook).unwrap().latents.len(), 2);
        let a = ddim_sample(&m, inv.noisy(), &cond, 3, &mut NoHook).unwrap();
        assert_eq!(a, ddim_sample(&m, inv.noisy(), &cond, 3, &mut NoHook).unwrap());
    }

    #[test]
    fn round_trip_error_shrinks_with_steps() {
        let m = model();
        let cond = ConditionSet::tokens_only(m.encode_prompt(""));
        let x0 = m.codec().encode(&crate::synth::content_image(5, 16, 16)).unwrap();
        let errs: Vec<f64> = [5, 10, 20]
            .iter()
            .map(|&s| {
                let inv = ddim_invert(&m, &x0, &cond, s, &mut NoHook).unwrap();
                ddim_sample(&m, inv.noisy(), &cond, s, &mut NoHook).unwrap().clean().relative_l2(&x0)
            })
            .collect();
        assert!(errs[1] <= 0.05, "{errs:?}");
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ToyModel::build(ModelConfig { heads: 3, ..Default::default() }).is_err());
        assert!(ToyModel::build(ModelConfig { min_alpha_bar: 1.0, ..Default::default() }).is_err());
    }
}
