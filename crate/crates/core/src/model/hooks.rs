//! Interception points inside the denoiser.
//!
//! A hook sees the per-head queries, keys and values of every self-attention
//! call before attention is computed and may replace them; this is the seam
//! used both to record style features during inversion and to inject them
//! during stylization. `after_step` runs on the latent after every DDIM
//! update.

use crate::cache::{CacheEntry, CacheKey};
use crate::error::Result;
use crate::matrix::{Matrix, Scalar};
use crate::model::latent::LatentImage;

/// Per-head self-attention operands. `k` and `v` may be replaced by
/// matrices with more rows (extra keys/values), `q` must keep its shape.
#[derive(Clone, Debug)]
pub struct SelfAttentionInputs<T: Scalar = f32> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

pub trait AttentionHook<T: Scalar = f32> {
    /// `site.timestep` is the sampler's step index.
    fn self_attention(&mut self, _site: CacheKey, _qkv: &mut SelfAttentionInputs<T>) -> Result<()> {
        Ok(())
    }

    /// Called with the latent produced by DDIM step `step`.
    fn after_step(&mut self, _step: usize, _latent: &mut LatentImage) -> Result<()> {
        Ok(())
    }
}

/// Does nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoHook;

impl<T: Scalar> AttentionHook<T> for NoHook {}

/// Runs several hooks in order.
pub struct HookChain<'a, T: Scalar = f32>(pub Vec<&'a mut dyn AttentionHook<T>>);

impl<T: Scalar> AttentionHook<T> for HookChain<'_, T> {
    fn self_attention(&mut self, site: CacheKey, qkv: &mut SelfAttentionInputs<T>) -> Result<()> {
        for h in self.0.iter_mut() {
            h.self_attention(site, qkv)?;
        }
        Ok(())
    }

    fn after_step(&mut self, step: usize, latent: &mut LatentImage) -> Result<()> {
        for h in self.0.iter_mut() {
            h.after_step(step, latent)?;
        }
        Ok(())
    }
}

/// Records the self-attention keys and values the model computes.
#[derive(Debug, Default)]
pub struct KvRecorder {
    entries: Vec<CacheEntry>,
}

impl KvRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Recorded entries sorted by key, ready for [`crate::cache::write_cache`].
    pub fn into_entries(mut self) -> Vec<CacheEntry> {
        self.entries.sort_by_key(|e| e.key);
        self.entries
    }
}

impl AttentionHook<f32> for KvRecorder {
    fn self_attention(&mut self, site: CacheKey, qkv: &mut SelfAttentionInputs<f32>) -> Result<()> {
        self.entries
            .push(CacheEntry::new(site, qkv.k.clone(), qkv.v.clone())?);
        Ok(())
    }
}
