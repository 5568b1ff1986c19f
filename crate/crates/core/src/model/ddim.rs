//! Deterministic DDIM (η = 0) sampling and inversion.

use crate::error::{Error, Result};
use crate::model::hooks::AttentionHook;
use crate::model::latent::LatentImage;
use crate::model::toy::{ConditionSet, StepContext, ToyModel};

/// Latents from the most noised state to the clean one, `steps + 1` long.
#[derive(Clone, Debug, PartialEq)]
pub struct DdimTrajectory {
    pub latents: Vec<LatentImage>,
}

impl DdimTrajectory {
    pub fn noisy(&self) -> &LatentImage {
        &self.latents[0]
    }

    pub fn clean(&self) -> &LatentImage {
        self.latents.last().expect("trajectory is never empty")
    }

    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }
}

/// One DDIM move from `ᾱ_from` to `ᾱ_to` given a noise estimate.
pub fn ddim_update(x: &LatentImage, eps: &LatentImage, alpha_from: f64, alpha_to: f64) -> LatentImage {
    let (sa_from, sb_from) = (alpha_from.sqrt(), (1.0 - alpha_from).sqrt());
    let (sa_to, sb_to) = (alpha_to.sqrt(), (1.0 - alpha_to).sqrt());
    let mut out = x.clone();
    for (o, &e) in out.as_mut_slice().iter_mut().zip(eps.as_slice()) {
        let xv = *o as f64;
        let e = e as f64;
        let x0 = (xv - sb_from * e) / sa_from;
        *o = (sa_to * x0 + sb_to * e) as f32;
    }
    out
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 || steps > u16::MAX as usize {
        return Err(Error::invalid(format!("step count {steps} out of range")));
    }
    Ok(())
}

/// Runs sampler steps `start..steps` of an `steps`-step schedule from
/// `x`, appending every produced latent to `out`. Used directly by the
/// two-stage schedule, which splits one schedule across resolutions.
pub fn ddim_sample_range(
    model: &ToyModel,
    x: &LatentImage,
    cond: &ConditionSet,
    steps: usize,
    range: std::ops::Range<usize>,
    hook: &mut dyn AttentionHook<f32>,
    out: &mut Vec<LatentImage>,
) -> Result<LatentImage> {
    check_steps(steps)?;
    let schedule = model.schedule();
    let timesteps = schedule.timesteps(steps);
    let mut x = x.clone();
    for i in range {
        let ctx = StepContext {
            index: i,
            timestep: timesteps[i],
        };
        let eps = model.denoise_step(&x, ctx, cond, hook)?;
        x = ddim_update(
            &x,
            &eps,
            schedule.alpha_bar_at(steps, i),
            schedule.alpha_bar_at(steps, i + 1),
        );
        hook.after_step(i, &mut x)?;
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("latent after step {i}")));
        }
        out.push(x.clone());
    }
    Ok(x)
}

/// Denoises `x_t` (taken to be at the most noised schedule index) to a
/// clean latent.
pub fn ddim_sample(
    model: &ToyModel,
    x_t: &LatentImage,
    cond: &ConditionSet,
    steps: usize,
    hook: &mut dyn AttentionHook<f32>,
) -> Result<DdimTrajectory> {
    let mut latents = Vec::with_capacity(steps + 1);
    latents.push(x_t.clone());
    ddim_sample_range(model, x_t, cond, steps, 0..steps, hook, &mut latents)?;
    Ok(DdimTrajectory { latents })
}

/// Runs the DDIM recursion backwards from a clean latent. Step `i` of the
/// inversion evaluates the model at schedule index `i` on the latent of
/// index `i + 1`, so features a hook records under timestep `i` line up
/// with sampler step `i`. The returned trajectory is ordered noisy to clean.
pub fn ddim_invert(
    model: &ToyModel,
    x_0: &LatentImage,
    cond: &ConditionSet,
    steps: usize,
    hook: &mut dyn AttentionHook<f32>,
) -> Result<DdimTrajectory> {
    check_steps(steps)?;
    let schedule = model.schedule();
    let timesteps = schedule.timesteps(steps);
    let mut latents = Vec::with_capacity(steps + 1);
    let mut x = x_0.clone();
    latents.push(x.clone());
    for i in (0..steps).rev() {
        let ctx = StepContext {
            index: i,
            timestep: timesteps[i],
        };
        let eps = model.denoise_step(&x, ctx, cond, hook)?;
        x = ddim_update(
            &x,
            &eps,
            schedule.alpha_bar_at(steps, i + 1),
            schedule.alpha_bar_at(steps, i),
        );
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("latent after inversion step {i}")));
        }
        latents.push(x.clone());
    }
    latents.reverse();
    Ok(DdimTrajectory { latents })
}
