//! Channel-wise moments and distribution alignment.
//!
//! Variances are population (biased) variances on both sides of every
//! alignment. Kurtosis is stored as excess kurtosis, so a normal
//! distribution has kurtosis 0.

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Variance at or below this value marks a channel as degenerate.
const DEGENERATE_VARIANCE: f64 = 1e-30;

/// Per-channel moments of a token-by-channel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentStats {
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
    pub skewness: Vec<f32>,
    pub excess_kurtosis: Vec<f32>,
    /// Set for constant channels; their skewness and kurtosis are undefined
    /// and stored as 0.
    pub degenerate: Vec<bool>,
    pub n_samples: usize,
}

impl MomentStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check_consistent(&self) -> Result<()> {
        let c = self.mean.len();
        if self.variance.len() != c
            || self.skewness.len() != c
            || self.excess_kurtosis.len() != c
            || self.degenerate.len() != c
        {
            return Err(Error::shape("moment arrays have different lengths"));
        }
        Ok(())
    }
}

/// Moments of a single channel, accumulated in `f64`.
#[derive(Clone, Copy, Debug)]
struct ChannelMoments {
    mean: f64,
    variance: f64,
    skewness: f64,
    excess_kurtosis: f64,
    degenerate: bool,
}

fn channel_moments(values: impl Iterator<Item = f64> + Clone, n: usize) -> ChannelMoments {
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let variance = m2 / nf;
    if variance <= DEGENERATE_VARIANCE {
        return ChannelMoments {
            mean,
            variance: 0.0,
            skewness: 0.0,
            excess_kurtosis: 0.0,
            degenerate: true,
        };
    }
    ChannelMoments {
        mean,
        variance,
        skewness: (m3 / nf) / variance.powf(1.5),
        excess_kurtosis: (m4 / nf) / (variance * variance) - 3.0,
        degenerate: false,
    }
}

fn column_f64(x: &FeatureMatrix, c: usize) -> impl Iterator<Item = f64> + Clone + '_ {
    x.row_iter().map(move |r| r[c] as f64)
}

/// Mean, variance, skewness and excess kurtosis of every channel, taken over
/// tokens. Summation runs sequentially per channel, so results are
/// bit-stable for identical inputs.
pub fn compute_moments(x: &FeatureMatrix) -> Result<MomentStats> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = x.rows();
    let mut stats = MomentStats {
        mean: Vec::with_capacity(x.cols()),
        variance: Vec::with_capacity(x.cols()),
        skewness: Vec::with_capacity(x.cols()),
        excess_kurtosis: Vec::with_capacity(x.cols()),
        degenerate: Vec::with_capacity(x.cols()),
        n_samples: n,
    };
    for c in 0..x.cols() {
        let m = channel_moments(column_f64(x, c), n);
        stats.mean.push(m.mean as f32);
        stats.variance.push(m.variance as f32);
        stats.skewness.push(m.skewness as f32);
        stats.excess_kurtosis.push(m.excess_kurtosis as f32);
        stats.degenerate.push(m.degenerate);
    }
    Ok(stats)
}

fn check_channels(x: &FeatureMatrix, target: &MomentStats) -> Result<()> {
    target.check_consistent()?;
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    if x.cols() != target.channels() {
        return Err(Error::shape(format!(
            "input has {} channels, target stats have {}",
            x.cols(),
            target.channels()
        )));
    }
    Ok(())
}

fn write_column(out: &mut FeatureMatrix, c: usize, values: impl Iterator<Item = f64>) -> Result<()> {
    for (r, v) in values.enumerate() {
        let v = v as f32;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("aligned channel {c}, token {r}")));
        }
        out.set(r, c, v);
    }
    Ok(())
}

/// Adaptive instance normalization: shifts and scales each channel of `x` so
/// that its mean and variance equal the target's. A constant input channel
/// becomes the constant target mean.
pub fn adain(x: &FeatureMatrix, target: &MomentStats) -> Result<FeatureMatrix> {
    check_channels(x, target)?;
    let mut out = FeatureMatrix::zeros(x.rows(), x.cols());
    for c in 0..x.cols() {
        let src = channel_moments(column_f64(x, c), x.rows());
        let t_mean = target.mean[c] as f64;
        let t_std = (target.variance[c].max(0.0) as f64).sqrt();
        if src.degenerate {
            write_column(&mut out, c, std::iter::repeat(t_mean).take(x.rows()))?;
        } else {
            let inv = 1.0 / src.variance.sqrt();
            write_column(
                &mut out,
                c,
                column_f64(x, c).map(|v| (v - src.mean) * inv * t_std + t_mean),
            )?;
        }
    }
    Ok(out)
}

/// Which moments [`align_moments`] matches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum MomentOrder {
    /// Mean and variance (AdaIN).
    #[default]
    Two,
    /// Mean, variance, skewness and excess kurtosis.
    Four,
}

impl TryFrom<u8> for MomentOrder {
    type Error = Error;

    fn try_from(order: u8) -> Result<Self> {
        match order {
            2 => Ok(MomentOrder::Two),
            4 => Ok(MomentOrder::Four),
            other => Err(Error::invalid(format!("moment order must be 2 or 4, got {other}"))),
        }
    }
}

impl From<MomentOrder> for u8 {
    fn from(order: MomentOrder) -> u8 {
        match order {
            MomentOrder::Two => 2,
            MomentOrder::Four => 4,
        }
    }
}

/// Result of [`align_moments`].
#[derive(Clone, Debug)]
pub struct MomentAlignment {
    pub features: FeatureMatrix,
    /// Channels where the higher-order fit did not converge and the
    /// mean/variance result was used instead.
    pub fallback_channels: Vec<usize>,
}

pub const CUBIC_FIT_MAX_ITERS: usize = 100;
const CUBIC_FIT_TOL: f64 = 1e-7;
/// A fit that stalls above `CUBIC_FIT_TOL` is still used when its shape
/// residual is below this.
const CUBIC_ACCEPT_TOL: f64 = 1e-3;

/// Aligns `x` to `target` up to the given moment order.
///
/// Order 2 is [`adain`]. Order 4 maps each standardized channel `z` through a
/// cubic `z + c·z² + d·z³` whose coefficients are fitted with damped Newton
/// steps so that the sample skewness and excess kurtosis of the result equal
/// the target's; the map is kept strictly increasing over the observed range
/// of `z`. The result is then rescaled to the target mean and variance.
/// Channels whose fit fails within [`CUBIC_FIT_MAX_ITERS`] fall back to the
/// order-2 result and are listed in [`MomentAlignment::fallback_channels`].
pub fn align_moments(
    x: &FeatureMatrix,
    target: &MomentStats,
    order: MomentOrder,
) -> Result<MomentAlignment> {
    if order == MomentOrder::Two {
        return Ok(MomentAlignment {
            features: adain(x, target)?,
            fallback_channels: Vec::new(),
        });
    }
    check_channels(x, target)?;
    let n = x.rows();
    let mut out = FeatureMatrix::zeros(n, x.cols());
    let mut fallback_channels = Vec::new();
    for c in 0..x.cols() {
        let src = channel_moments(column_f64(x, c), n);
        let t_mean = target.mean[c] as f64;
        let t_std = (target.variance[c].max(0.0) as f64).sqrt();
        if src.degenerate {
            write_column(&mut out, c, std::iter::repeat(t_mean).take(n))?;
            continue;
        }
        let inv = 1.0 / src.variance.sqrt();
        let z: Vec<f64> = column_f64(x, c).map(|v| (v - src.mean) * inv).collect();

        let coeffs = if target.degenerate[c] {
            None
        } else {
            fit_cubic(
                &z,
                target.skewness[c] as f64,
                target.excess_kurtosis[c] as f64,
            )
        };
        let Some((c2, c3)) = coeffs else {
            if !target.degenerate[c] {
                fallback_channels.push(c);
            }
            write_column(&mut out, c, z.iter().map(|&v| v * t_std + t_mean))?;
            continue;
        };
        let y: Vec<f64> = z.iter().map(|&z| z + c2 * z * z + c3 * z * z * z).collect();
        let ym = channel_moments(y.iter().copied(), n);
        if ym.degenerate {
            write_column(&mut out, c, std::iter::repeat(t_mean).take(n))?;
            continue;
        }
        let y_inv = 1.0 / ym.variance.sqrt();
        write_column(
            &mut out,
            c,
            y.iter().map(|&v| (v - ym.mean) * y_inv * t_std + t_mean),
        )?;
    }
    Ok(MomentAlignment {
        features: out,
        fallback_channels,
    })
}

/// Sample raw moments `E[z^k]` for `k = 0..=12`.
fn raw_moments(z: &[f64]) -> [f64; 13] {
    let mut m = [0.0; 13];
    for &v in z {
        let mut p = 1.0;
        for slot in m.iter_mut() {
            *slot += p;
            p *= v;
        }
    }
    let n = z.len() as f64;
    for slot in m.iter_mut() {
        *slot /= n;
    }
    m
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Standardized skewness and excess kurtosis of `z + c·z² + d·z³` computed
/// from the raw moments of `z`.
fn cubic_shape(raw: &[f64; 13], c: f64, d: f64) -> Option<(f64, f64)> {
    let p = [0.0, 1.0, c, d];
    let expect = |poly: &[f64]| poly.iter().zip(raw.iter()).map(|(a, m)| a * m).sum::<f64>();
    let p2 = poly_mul(&p, &p);
    let p3 = poly_mul(&p2, &p);
    let p4 = poly_mul(&p2, &p2);
    let (e1, e2, e3, e4) = (expect(&p), expect(&p2), expect(&p3), expect(&p4));
    let var = e2 - e1 * e1;
    if !(var > 1e-12) {
        return None;
    }
    let mu3 = e3 - 3.0 * e1 * e2 + 2.0 * e1.powi(3);
    let mu4 = e4 - 4.0 * e1 * e3 + 6.0 * e1 * e1 * e2 - 3.0 * e1.powi(4);
    Some((mu3 / var.powf(1.5), mu4 / (var * var) - 3.0))
}

/// Whether `1 + 2c·z + 3d·z²` stays positive on `[lo, hi]`.
fn increasing_on(c: f64, d: f64, lo: f64, hi: f64) -> bool {
    let slope = |z: f64| 1.0 + 2.0 * c * z + 3.0 * d * z * z;
    if slope(lo) <= 0.0 || slope(hi) <= 0.0 {
        return false;
    }
    if d != 0.0 {
        let vertex = -c / (3.0 * d);
        if vertex > lo && vertex < hi && slope(vertex) <= 0.0 {
            return false;
        }
    }
    true
}

/// Damped Newton fit of `(c, d)`. Returns `None` when the fit fails to reach
/// the target shape within the iteration budget.
fn fit_cubic(z: &[f64], skew: f64, kurt: f64) -> Option<(f64, f64)> {
    let raw = raw_moments(z);
    let (lo, hi) = z
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let residual = |c: f64, d: f64| {
        cubic_shape(&raw, c, d).map(|(s, k)| [s - skew, k - kurt])
    };
    let norm = |r: [f64; 2]| r[0].abs().max(r[1].abs());

    let (mut c, mut d) = (0.0, 0.0);
    let mut r = residual(c, d)?;
    for _ in 0..CUBIC_FIT_MAX_ITERS {
        if norm(r) < CUBIC_FIT_TOL {
            return Some((c, d));
        }
        const H: f64 = 1e-6;
        let (rc_p, rc_m) = (residual(c + H, d)?, residual(c - H, d)?);
        let (rd_p, rd_m) = (residual(c, d + H)?, residual(c, d - H)?);
        let j = [
            [(rc_p[0] - rc_m[0]) / (2.0 * H), (rd_p[0] - rd_m[0]) / (2.0 * H)],
            [(rc_p[1] - rc_m[1]) / (2.0 * H), (rd_p[1] - rd_m[1]) / (2.0 * H)],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !det.is_finite() || det.abs() < 1e-14 {
            return None;
        }
        let dc = -(j[1][1] * r[0] - j[0][1] * r[1]) / det;
        let dd = -(-j[1][0] * r[0] + j[0][0] * r[1]) / det;

        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-4 {
            let (nc, nd) = (c + step * dc, d + step * dd);
            if increasing_on(nc, nd, lo, hi) {
                if let Some(nr) = residual(nc, nd) {
                    if norm(nr) < norm(r) {
                        c = nc;
                        d = nd;
                        r = nr;
                        accepted = true;
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (norm(r) < CUBIC_ACCEPT_TOL).then_some((c, d))
}
