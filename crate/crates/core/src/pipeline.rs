//! Stylization: statistics capture from an average style image, attention
//! feature injection, latent statistics alignment and the two-stage
//! resolution schedule.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file_synced, LeCursor, LeWriter};
use crate::cache::{iter_group, CacheKey, CacheReader};
use crate::distill::StyleBank;
use crate::embedding::{condition_tokens, StyleEmbedding};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::matrix::FeatureMatrix;
use crate::cache::CacheEntry;
use crate::model::{
    ddim_invert, ddim_sample, ddim_sample_range, DdimTrajectory, KvRecorder, AttentionHook, ConditionSet, ControlMaps, LatentImage, SelfAttentionInputs,
    ToyModel, MAX_CONTROL_STRENGTH,
};
use crate::stats::{align_moments, compute_moments, MomentOrder, MomentStats};

pub const NORM_MAGIC: [u8; 4] = *b"SNRM";
pub const NORM_VERSION: u32 = 1;

/// Normalization targets captured while generating the average style
/// image: Q and K moments for every (layer, step, head) and latent channel
/// moments after every step.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub steps: usize,
    pub blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub latent_channels: usize,
    pub seed: u64,
    pub q: BTreeMap<CacheKey, MomentStats>,
    pub k: BTreeMap<CacheKey, MomentStats>,
    /// Entry `i` describes the latent produced by step `i`.
    pub latents: Vec<MomentStats>,
}

impl NormStats {
    fn expected_keys(&self) -> impl Iterator<Item = CacheKey> + '_ {
        (0..self.blocks).flat_map(move |l| {
            (0..self.steps)
                .flat_map(move |t| (0..self.heads).map(move |h| CacheKey::new(l as u16, t as u16, h as u16)))
        })
    }

    /// Checks that every key the model produces at this step count is
    /// present, with the right channel counts.
    pub fn validate(&self) -> Result<()> {
        let n_keys = self.blocks * self.steps * self.heads;
        if self.q.len() != n_keys || self.k.len() != n_keys || self.latents.len() != self.steps {
            return Err(Error::shape(format!(
                "normalization stats cover {} query keys, {} key keys and {} steps; expected {n_keys} keys and {} steps",
                self.q.len(),
                self.k.len(),
                self.latents.len(),
                self.steps
            )));
        }
        for key in self.expected_keys() {
            for map in [&self.q, &self.k] {
                let s = map.get(&key).ok_or(Error::EntryNotFound(key))?;
                if s.channels() != self.head_dim {
                    return Err(Error::shape(format!("stats for {key} have {} channels", s.channels())));
                }
            }
        }
        if self.latents.iter().any(|s| s.channels() != self.latent_channels) {
            return Err(Error::shape("latent stats have the wrong channel count"));
        }
        Ok(())
    }

    /// Errors unless the stats were captured with this model's layout and
    /// the given step count.
    pub fn check_compatible(&self, model: &ToyModel, steps: usize) -> Result<()> {
        let cfg = model.config();
        if (self.blocks, self.heads, self.head_dim, self.latent_channels)
            != (cfg.blocks, cfg.heads, cfg.head_dim(), cfg.latent_channels)
        {
            return Err(Error::shape("normalization stats were captured with a different model layout"));
        }
        if self.steps != steps {
            return Err(Error::invalid(format!(
                "normalization stats cover {} steps, config asks for {steps}",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::new(Vec::new());
        let mut write = || -> std::io::Result<()> {
            w.bytes(&NORM_MAGIC)?;
            w.u32(NORM_VERSION)?;
            for v in [self.steps, self.blocks, self.heads, self.head_dim, self.latent_channels] {
                w.u32(v as u32)?;
            }
            w.u64(self.seed)?;
            for key in self.expected_keys() {
                write_moments(&mut w, &self.q[&key])?;
                write_moments(&mut w, &self.k[&key])?;
            }
            for s in &self.latents {
                write_moments(&mut w, s)?;
            }
            Ok(())
        };
        write().expect("writing to a Vec cannot fail");
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let truncated = || malformed("truncated".into());
        let mut cur = LeCursor::new(bytes);
        let magic = cur.array::<4>().ok_or_else(truncated)?;
        if magic != NORM_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: NORM_MAGIC,
                found: magic,
            });
        }
        let version = cur.u32().ok_or_else(truncated)?;
        if version != NORM_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                expected: NORM_VERSION,
                found: version,
            });
        }
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            *h = cur.u32().ok_or_else(truncated)? as usize;
        }
        let [steps, blocks, heads, head_dim, latent_channels] = header;
        let seed = cur.u64().ok_or_else(truncated)?;
        if steps > u16::MAX as usize + 1 || blocks > u16::MAX as usize + 1 || heads > u16::MAX as usize + 1 {
            return Err(malformed("layout exceeds key range".into()));
        }
        let mut out = Self {
            steps,
            blocks,
            heads,
            head_dim,
            latent_channels,
            seed,
            q: BTreeMap::new(),
            k: BTreeMap::new(),
            latents: Vec::new(),
        };
        let keys: Vec<CacheKey> = out.expected_keys().collect();
        for key in keys {
            let q = read_moments(&mut cur).ok_or_else(truncated)?;
            let k = read_moments(&mut cur).ok_or_else(truncated)?;
            out.q.insert(key, q);
            out.k.insert(key, k);
        }
        for _ in 0..steps {
            out.latents.push(read_moments(&mut cur).ok_or_else(truncated)?);
        }
        if cur.remaining() != 0 {
            return Err(malformed(format!("{} trailing bytes", cur.remaining())));
        }
        out.validate().map_err(|e| malformed(e.to_string()))?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file_synced(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// Moment block: `u32` sample count, `u32` channel count, four `f32`
/// arrays (mean, variance, skewness, excess kurtosis), one degenerate byte
/// per channel.
fn write_moments(w: &mut LeWriter<Vec<u8>>, s: &MomentStats) -> std::io::Result<()> {
    w.u32(s.n_samples as u32)?;
    w.u32(s.channels() as u32)?;
    w.f32s(&s.mean)?;
    w.f32s(&s.variance)?;
    w.f32s(&s.skewness)?;
    w.f32s(&s.excess_kurtosis)?;
    for &d in &s.degenerate {
        w.u8(d as u8)?;
    }
    Ok(())
}

fn read_moments(cur: &mut LeCursor<'_>) -> Option<MomentStats> {
    let n_samples = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    if c.checked_mul(17)? > cur.remaining() {
        return None;
    }
    let mean = cur.f32s(c)?;
    let variance = cur.f32s(c)?;
    let skewness = cur.f32s(c)?;
    let excess_kurtosis = cur.f32s(c)?;
    let degenerate = (0..c).map(|_| cur.u8().map(|b| b != 0)).collect::<Option<_>>()?;
    Some(MomentStats {
        mean,
        variance,
        skewness,
        excess_kurtosis,
        degenerate,
        n_samples,
    })
}

/// DDIM-inverts a style image under the empty prompt and returns the
/// trajectory with the self-attention keys and values seen at every
/// (layer, step, head), sorted for [`crate::cache::write_cache`].
pub fn invert_style_image(
    model: &ToyModel,
    image: &RgbImage,
    steps: usize,
) -> Result<(DdimTrajectory, Vec<CacheEntry>)> {
    let x0 = model.codec().encode(image)?;
    let cond = ConditionSet::tokens_only(model.encode_prompt(""));
    let mut rec = KvRecorder::new();
    let traj = ddim_invert(model, &x0, &cond, steps, &mut rec)?;
    Ok((traj, rec.into_entries()))
}

/// Records Q/K moments at every self-attention site and latent moments
/// after every step.
#[derive(Debug, Default)]
struct StatsRecorder {
    q: BTreeMap<CacheKey, MomentStats>,
    k: BTreeMap<CacheKey, MomentStats>,
    latents: Vec<MomentStats>,
}

impl AttentionHook<f32> for StatsRecorder {
    fn self_attention(&mut self, site: CacheKey, qkv: &mut SelfAttentionInputs<f32>) -> Result<()> {
        self.q.insert(site, compute_moments(&qkv.q)?);
        self.k.insert(site, compute_moments(&qkv.k)?);
        Ok(())
    }

    fn after_step(&mut self, _step: usize, latent: &mut LatentImage) -> Result<()> {
        self.latents.push(compute_moments(&latent.to_tokens())?);
        Ok(())
    }
}

/// Samples an image from seeded noise conditioned on the style tokens
/// alone (after the empty prompt) and records its normalization stats.
/// `grid` is the latent `(height, width)`.
pub fn generate_average_image(
    model: &ToyModel,
    phi: &StyleEmbedding,
    steps: usize,
    seed: u64,
    grid: (usize, usize),
) -> Result<(LatentImage, NormStats)> {
    let cfg = model.config();
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::invalid("average image grid must be non-empty"));
    }
    let noise = LatentImage::noise(cfg.latent_channels, grid.0, grid.1, seed);
    let cond = ConditionSet::tokens_only(condition_tokens(model, "", phi)?);
    let mut rec = StatsRecorder::default();
    let traj = ddim_sample(model, &noise, &cond, steps, &mut rec)?;
    let stats = NormStats {
        steps,
        blocks: cfg.blocks,
        heads: cfg.heads,
        head_dim: cfg.head_dim(),
        latent_channels: cfg.latent_channels,
        seed,
        q: rec.q,
        k: rec.k,
        latents: rec.latents,
    };
    stats.validate()?;
    Ok((traj.clean().clone(), stats))
}

/// Image size in pixels, `[width, height]`.
pub type ImageSize = [usize; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StylizeConfig {
    pub steps: usize,
    /// Share of the steps run at low resolution by the two-stage schedule.
    pub structure_fraction: f64,
    pub moment_order: MomentOrder,
    pub lineart_strength: f32,
    pub depth_strength: f32,
    pub inject_self: bool,
    pub inject_cross: bool,
    pub align_latents: bool,
    /// Size the content image is resized to before stylization.
    pub high_res: Option<ImageSize>,
    /// Low-resolution stage size; defaults to half of `high_res`.
    pub low_res: Option<ImageSize>,
    pub seed: u64,
}

impl Default for StylizeConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            structure_fraction: 0.3,
            moment_order: MomentOrder::Two,
            lineart_strength: 1.0,
            depth_strength: 1.0,
            inject_self: true,
            inject_cross: true,
            align_latents: true,
            high_res: None,
            low_res: None,
            seed: 0,
        }
    }
}

impl StylizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > u16::MAX as usize {
            return Err(Error::invalid(format!("steps {} out of range", self.steps)));
        }
        if !(0.0..=1.0).contains(&self.structure_fraction) {
            return Err(Error::invalid(format!(
                "structure_fraction {} outside [0, 1]",
                self.structure_fraction
            )));
        }
        for s in [self.lineart_strength, self.depth_strength] {
            if !s.is_finite() || !(0.0..=MAX_CONTROL_STRENGTH).contains(&s) {
                return Err(Error::invalid(format!("control strength {s} outside [0, 2]")));
            }
        }
        Ok(())
    }

    /// Steps run at low resolution: `⌈f · steps⌉`.
    pub fn low_res_steps(&self) -> usize {
        ((self.structure_fraction * self.steps as f64).ceil() as usize).min(self.steps)
    }
}

/// Where injected style keys and values come from.
pub trait StyleSource: Sync {
    /// Style (K, V) rows for one site.
    fn style_kv(&self, key: CacheKey) -> Result<(Cow<'_, FeatureMatrix>, Cow<'_, FeatureMatrix>)>;

    /// Steps the source was recorded with.
    fn steps(&self) -> usize;
}

impl StyleSource for StyleBank {
    fn style_kv(&self, key: CacheKey) -> Result<(Cow<'_, FeatureMatrix>, Cow<'_, FeatureMatrix>)> {
        let e = self.get(key)?;
        Ok((Cow::Borrowed(&e.k), Cow::Borrowed(&e.v)))
    }

    fn steps(&self) -> usize {
        StyleBank::steps(self)
    }
}

/// Reads and concatenates every cache's rows from disk on each request.
pub struct CacheStream<'a> {
    pub readers: &'a [CacheReader],
}

impl StyleSource for CacheStream<'_> {
    fn style_kv(&self, key: CacheKey) -> Result<(Cow<'_, FeatureMatrix>, Cow<'_, FeatureMatrix>)> {
        let (k, v) = iter_group(self.readers, key)?;
        Ok((Cow::Owned(k), Cow::Owned(v)))
    }

    fn steps(&self) -> usize {
        self.readers
            .iter()
            .flat_map(|r| r.keys())
            .map(|k| k.timestep as usize + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Style features and normalization targets for one resolution.
#[derive(Clone, Copy)]
pub struct StyleInputs<'a> {
    pub source: &'a dyn StyleSource,
    pub norm: &'a NormStats,
}

/// The stylization hook: aligns Q and K to the captured statistics and
/// appends style keys and values at every self-attention call, and aligns
/// the latent after every step.
pub struct InjectionHook<'a> {
    inputs: StyleInputs<'a>,
    order: MomentOrder,
    inject_self: bool,
    align_latents: bool,
}

impl<'a> InjectionHook<'a> {
    pub fn new(inputs: StyleInputs<'a>, cfg: &StylizeConfig) -> Self {
        Self {
            inputs,
            order: cfg.moment_order,
            inject_self: cfg.inject_self,
            align_latents: cfg.align_latents,
        }
    }
}

impl AttentionHook<f32> for InjectionHook<'_> {
    fn self_attention(&mut self, site: CacheKey, qkv: &mut SelfAttentionInputs<f32>) -> Result<()> {
        if !self.inject_self {
            return Ok(());
        }
        let norm = self.inputs.norm;
        let q_target = norm.q.get(&site).ok_or(Error::EntryNotFound(site))?;
        let k_target = norm.k.get(&site).ok_or(Error::EntryNotFound(site))?;
        let (style_k, style_v) = self.inputs.source.style_kv(site)?;
        qkv.q = align_moments(&qkv.q, q_target, self.order)?.features;
        let k_hat = align_moments(&qkv.k, k_target, self.order)?.features;
        qkv.k = FeatureMatrix::vstack(&[&k_hat, &style_k])?;
        qkv.v = FeatureMatrix::vstack(&[&qkv.v, &style_v])?;
        Ok(())
    }

    fn after_step(&mut self, step: usize, latent: &mut LatentImage) -> Result<()> {
        if !self.align_latents {
            return Ok(());
        }
        let target = self
            .inputs
            .norm
            .latents
            .get(step)
            .ok_or_else(|| Error::invalid(format!("no latent stats for step {step}")))?;
        let aligned = align_moments(&latent.to_tokens(), target, self.order)?.features;
        *latent = LatentImage::from_tokens(&aligned, latent.height(), latent.width())?;
        Ok(())
    }
}

/// A stylized result: final latent, its decoded image and the latent after
/// every denoising step (before any final upsampling).
#[derive(Clone, Debug, PartialEq)]
pub struct Stylized {
    pub latent: LatentImage,
    pub image: RgbImage,
    pub trajectory: Vec<LatentImage>,
}

fn check_inputs(model: &ToyModel, inputs: StyleInputs<'_>, cfg: &StylizeConfig) -> Result<()> {
    inputs.norm.check_compatible(model, cfg.steps)?;
    if cfg.inject_self && inputs.source.steps() != cfg.steps {
        return Err(Error::invalid(format!(
            "style features cover {} steps, config asks for {}",
            inputs.source.steps(),
            cfg.steps
        )));
    }
    Ok(())
}

fn cross_tokens(model: &ToyModel, phi: &StyleEmbedding, cfg: &StylizeConfig) -> Result<FeatureMatrix> {
    if cfg.inject_cross {
        condition_tokens(model, "", phi)
    } else {
        Ok(model.encode_prompt(""))
    }
}

fn content_at(content: &RgbImage, size: Option<ImageSize>) -> Result<Cow<'_, RgbImage>> {
    match size {
        Some([w, h]) if (w, h) != (content.width(), content.height()) => {
            Ok(Cow::Owned(content.resize_bilinear(w, h)?))
        }
        _ => Ok(Cow::Borrowed(content)),
    }
}

/// Runs steps `range` of the schedule on `x` with control maps from
/// `content` and the given style inputs.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &ToyModel,
    x: &LatentImage,
    content: &RgbImage,
    inputs: StyleInputs<'_>,
    tokens: &FeatureMatrix,
    cfg: &StylizeConfig,
    range: std::ops::Range<usize>,
    trace: &mut Vec<LatentImage>,
) -> Result<LatentImage> {
    let control = ControlMaps::from_image(content, cfg.lineart_strength, cfg.depth_strength)?;
    if (control.height, control.width) != (x.height(), x.width()) {
        return Err(Error::shape("content image does not match the latent grid"));
    }
    let cond = ConditionSet {
        tokens: tokens.clone(),
        control: Some(control),
    };
    let mut hook = InjectionHook::new(inputs, cfg);
    ddim_sample_range(model, x, &cond, cfg.steps, range, &mut hook, trace)
}

fn finish(model: &ToyModel, latent: LatentImage, trajectory: Vec<LatentImage>) -> Result<Stylized> {
    let image = model.codec().decode(&latent)?;
    Ok(Stylized {
        latent,
        image,
        trajectory,
    })
}

/// Single-resolution stylization of `content` (resized to `cfg.high_res`
/// when set), starting from noise seeded with `cfg.seed`.
pub fn stylize(
    model: &ToyModel,
    content: &RgbImage,
    inputs: StyleInputs<'_>,
    phi: &StyleEmbedding,
    cfg: &StylizeConfig,
) -> Result<Stylized> {
    cfg.validate()?;
    check_inputs(model, inputs, cfg)?;
    let content = content_at(content, cfg.high_res)?;
    let grid = model.codec().latent_grid(&content)?;
    let noise = LatentImage::noise(model.config().latent_channels, grid.0, grid.1, cfg.seed);
    let tokens = cross_tokens(model, phi, cfg)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    let x = run_stage(model, &noise, &content, inputs, &tokens, cfg, 0..cfg.steps, &mut trace)?;
    finish(model, x, trace)
}

/// Runs the first `⌈f · steps⌉` steps at low resolution, upsamples the
/// latent bilinearly and finishes at high resolution with control maps
/// recomputed from the high-resolution content.
pub fn stylize_two_stage(
    model: &ToyModel,
    content: &RgbImage,
    low: StyleInputs<'_>,
    high: StyleInputs<'_>,
    phi: &StyleEmbedding,
    cfg: &StylizeConfig,
) -> Result<Stylized> {
    cfg.validate()?;
    let n_low = cfg.low_res_steps();
    if n_low == 0 {
        return stylize(model, content, high, phi, cfg);
    }
    check_inputs(model, low, cfg)?;
    if n_low < cfg.steps {
        check_inputs(model, high, cfg)?;
    }
    let content_hi = content_at(content, cfg.high_res)?;
    let (hw, hh) = (content_hi.width(), content_hi.height());
    let [lw, lh] = cfg.low_res.unwrap_or([hw / 2, hh / 2]);
    if lw == 0 || lh == 0 || hw % lw != 0 || hh % lh != 0 || hw / lw != hh / lh {
        return Err(Error::invalid(format!(
            "high resolution {hw}x{hh} is not an integer multiple of low resolution {lw}x{lh}"
        )));
    }
    let factor = hw / lw;
    let content_lo = content_hi.downscale_box(factor)?;
    let grid = model.codec().latent_grid(&content_lo)?;
    let noise = LatentImage::noise(model.config().latent_channels, grid.0, grid.1, cfg.seed);
    let tokens = cross_tokens(model, phi, cfg)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    let x = run_stage(model, &noise, &content_lo, low, &tokens, cfg, 0..n_low, &mut trace)?;
    let x = x.upsample_bilinear(factor)?;
    if n_low == cfg.steps {
        return finish(model, x, trace);
    }
    let x = run_stage(model, &x, &content_hi, high, &tokens, cfg, n_low..cfg.steps, &mut trace)?;
    finish(model, x, trace)
}

/// Stylization that streams the full concatenation of every style cache
/// from disk at each attention call instead of using a distilled bank.
pub fn stylize_full_concat(
    model: &ToyModel,
    content: &RgbImage,
    caches: &[CacheReader],
    norm: &NormStats,
    phi: &StyleEmbedding,
    cfg: &StylizeConfig,
) -> Result<Stylized> {
    if caches.is_empty() {
        return Err(Error::EmptyInput);
    }
    let source = CacheStream { readers: caches };
    stylize(model, content, StyleInputs { source: &source, norm }, phi, cfg)
}
