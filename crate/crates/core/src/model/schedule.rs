use std::f64::consts::FRAC_PI_2;

/// Cosine `ᾱ` schedule, lifted so that `ᾱ` never drops below a floor.
///
/// `ᾱ(t) = floor + (1 − floor) · c(t) / c(0)` with
/// `c(t) = cos²(((t / T) + s) / (1 + s) · π/2)` and `s = 0.008`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    pub min_alpha_bar: f64,
}

const COSINE_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        let f = |t: f64| {
            let x = (t / self.train_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
            x.cos().powi(2)
        };
        let c = (f(t as f64) / f(0.0)).clamp(0.0, 1.0);
        self.min_alpha_bar + (1.0 - self.min_alpha_bar) * c
    }

    /// Training timesteps visited by an `steps`-step sampler, most noised
    /// first. Index `i` of the returned vector is the schedule index used as
    /// the cache timestep.
    pub fn timesteps(&self, steps: usize) -> Vec<usize> {
        (0..steps)
            .map(|i| (steps - i) * self.train_steps / steps - 1)
            .collect()
    }

    /// `ᾱ` at schedule index `i` of an `steps`-step sampler; index `steps`
    /// is the clean end of the trajectory (`ᾱ = 1`).
    pub fn alpha_bar_at(&self, steps: usize, i: usize) -> f64 {
        if i >= steps {
            1.0
        } else {
            self.alpha_bar(self.timesteps(steps)[i])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timesteps_descend_and_alpha_rises() {
        let s = NoiseSchedule {
            train_steps: 1000,
            min_alpha_bar: 0.05,
        };
        assert_eq!(s.timesteps(10), vec![999, 899, 799, 699, 599, 499, 399, 299, 199, 99]);
        assert_eq!(s.timesteps(1), vec![999]);
        let a: Vec<f64> = (0..=10).map(|i| s.alpha_bar_at(10, i)).collect();
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a[0] >= 0.05 && a[10] == 1.0);
        assert!((s.alpha_bar(0) - 1.0).abs() < 1e-12);
    }
}
