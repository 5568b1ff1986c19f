//! Chamfer color distance between images and the pairwise evaluation
//! driver.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{read_ppm, RgbImage};

pub const DEFAULT_SUBSAMPLE: usize = 4096;

/// Pixel colors of an image as a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorCloud {
    pub points: Vec<[f32; 3]>,
    pub n_pixels: usize,
}

impl ColorCloud {
    /// Up to `subsample` pixels chosen without replacement by a seeded
    /// generator, kept in pixel order; `0` keeps every pixel.
    pub fn from_image(image: &RgbImage, subsample: usize, seed: u64) -> Result<Self> {
        let n = image.pixel_count();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let all: Vec<[f32; 3]> = image.pixels().collect();
        let points = if subsample == 0 || subsample >= n {
            all
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, n, subsample).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        };
        Ok(Self { points, n_pixels: n })
    }
}

fn mean_nearest(from: &[[f32; 3]], to: &[[f32; 3]]) -> f64 {
    let total: f64 = from
        .par_iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / from.len() as f64
}

/// Symmetric Chamfer distance between the color sets of two images: the
/// mean squared RGB distance from each point to its nearest neighbour in
/// the other set, averaged over both directions. Identical images give 0
/// and a black pixel against a white one gives 3.
pub fn chamfer_color(a: &RgbImage, b: &RgbImage, subsample: usize, seed: u64) -> Result<f64> {
    let ca = ColorCloud::from_image(a, subsample, seed)?;
    let cb = ColorCloud::from_image(b, subsample, seed ^ 0x5151_5151)?;
    Ok(0.5 * (mean_nearest(&ca.points, &cb.points) + mean_nearest(&cb.points, &ca.points)))
}

/// One evaluated (stylized output, style image) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub group: String,
    pub output: PathBuf,
    pub style: PathBuf,
    pub chamfer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Every evaluated pair, grouped and in a fixed order.
    pub pairs: Vec<PairScore>,
    /// Mean Chamfer distance per style group, by group name.
    pub group_means: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,output,style,chamfer\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{},{},{:.9}\n",
                p.group,
                p.output.display(),
                p.style.display(),
                p.chamfer
            ));
        }
        for (g, m) in &self.group_means {
            out.push_str(&format!("{g},mean,,{m:.9}\n"));
        }
        out
    }
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    Ok(files)
}

/// Style groups: one per subdirectory holding `.ppm` files, or the
/// directory itself when it holds images directly.
fn groups(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Ok(vec![(String::new(), dir.to_path_buf())]);
    }
    Ok(subdirs
        .into_iter()
        .map(|p| (p.file_name().unwrap_or_default().to_string_lossy().into_owned(), p))
        .collect())
}

/// Number of pairs drawn from `total` combinations at `fraction`: rounded,
/// at least one.
pub fn sample_count(total: usize, fraction: f64) -> usize {
    if total == 0 {
        return 0;
    }
    ((fraction * total as f64).round() as usize).clamp(1, total)
}

/// Scores a seeded random `fraction` of all (output, style image) pairs
/// within each group. A group's outputs live in `stylized/<group>` and its
/// style images in `styles/<group>`; flat directories form a single group.
pub fn eval_pairs(
    stylized: &Path,
    styles: &Path,
    fraction: f64,
    seed: u64,
    subsample: usize,
) -> Result<EvalReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut combos = Vec::new();
    for (group, style_dir) in groups(styles)? {
        let out_dir = if group.is_empty() {
            stylized.to_path_buf()
        } else {
            stylized.join(&group)
        };
        let outputs = ppm_files(&out_dir)?;
        for o in &outputs {
            for s in ppm_files(&style_dir)? {
                combos.push((group.clone(), o.clone(), s));
            }
        }
    }
    if combos.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, combos.len(), sample_count(combos.len(), fraction)).into_vec();
    chosen.sort_unstable();
    let pairs = chosen
        .par_iter()
        .map(|&i| {
            let (group, output, style) = &combos[i];
            let pair_seed = seed.wrapping_add(i as u64);
            Ok(PairScore {
                group: group.clone(),
                output: output.clone(),
                style: style.clone(),
                chamfer: chamfer_color(&read_ppm(output)?, &read_ppm(style)?, subsample, pair_seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut group_means: Vec<(String, f64, usize)> = Vec::new();
    for p in &pairs {
        match group_means.last_mut() {
            Some((g, sum, n)) if *g == p.group => {
                *sum += p.chamfer;
                *n += 1;
            }
            _ => group_means.push((p.group.clone(), p.chamfer, 1)),
        }
    }
    Ok(EvalReport {
        pairs,
        group_means: group_means.into_iter().map(|(g, s, n)| (g, s / n as f64)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::write_ppm;
    use crate::synth;

    #[test]
    fn chamfer_fixed_points() {
        let black = RgbImage::from_fn(1, 1, |_, _| [0.0; 3]);
        let white = RgbImage::from_fn(1, 1, |_, _| [1.0; 3]);
        assert_eq!(chamfer_color(&black, &white, 0, 0).unwrap(), 3.0);
        let a = synth::style_image(1, 0, 20, 20);
        assert_eq!(chamfer_color(&a, &a, 0, 0).unwrap(), 0.0);
        let b = synth::content_image(2, 20, 20);
        let ab = chamfer_color(&a, &b, 0, 0).unwrap();
        assert!((ab - chamfer_color(&b, &a, 0, 0).unwrap()).abs() < 1e-6);
        assert!(ab > 0.0);
    }

    #[test]
    fn one_sided_hand_value() {
        // a = {0, 1} on red, b = {0}: a→b mean 0.5, b→a mean 0, half sum 0.25.
        let a = RgbImage::from_fn(2, 1, |x, _| [x as f32, 0.0, 0.0]);
        let b = RgbImage::from_fn(1, 1, |_, _| [0.0; 3]);
        assert_eq!(chamfer_color(&a, &b, 0, 0).unwrap(), 0.25);
    }

    #[test]
    fn subsampling_is_seeded() {
        let a = synth::style_image(3, 1, 40, 40);
        let c1 = ColorCloud::from_image(&a, 100, 5).unwrap();
        assert_eq!(c1.points.len(), 100);
        assert_eq!(c1, ColorCloud::from_image(&a, 100, 5).unwrap());
        assert_ne!(c1, ColorCloud::from_image(&a, 100, 6).unwrap());
        assert_eq!(ColorCloud::from_image(&a, 0, 5).unwrap().points.len(), 1600);
    }

    #[test]
    fn resolution_robustness() {
        let a = synth::style_image(2, 0, 32, 32);
        let small = a.downscale_nearest(2).unwrap();
        let other = synth::content_image(9, 32, 32);
        assert!(chamfer_color(&a, &small, 0, 0).unwrap() <= chamfer_color(&a, &other, 0, 0).unwrap());
    }

    #[test]
    fn pair_sampling() {
        let dir = tempfile::tempdir().unwrap();
        let (out, sty) = (dir.path().join("out"), dir.path().join("sty"));
        std::fs::create_dir_all(&out).unwrap();
        std::fs::create_dir_all(&sty).unwrap();
        for i in 0..2 {
            write_ppm(&synth::content_image(i, 4, 4), &out.join(format!("o{i}.ppm"))).unwrap();
            write_ppm(&synth::style_image(i, 0, 4, 4), &sty.join(format!("s{i}.ppm"))).unwrap();
        }
        let half = eval_pairs(&out, &sty, 0.5, 3, 0).unwrap();
        assert_eq!(half.pairs.len(), 2);
        assert_eq!(half, eval_pairs(&out, &sty, 0.5, 3, 0).unwrap());
        assert_eq!(eval_pairs(&out, &sty, 1.0, 3, 0).unwrap().pairs.len(), 4);
        assert!(eval_pairs(&out, &sty, 0.0, 3, 0).is_err());
        assert_eq!(sample_count(40, 0.1), 4);
        assert_eq!(sample_count(3, 0.01), 1);
    }
}
