use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{blur, downscale_plane, resize_plane_bilinear, sobel_magnitude, RgbImage};
use crate::matrix::FeatureMatrix;

/// Channel-major latent, `channels × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LatentImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{channels}x{height}x{width} latent needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Standard normal noise from a seeded generator.
    pub fn noise(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * height * width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Pixels as tokens: `(height·width) × channels`.
    pub fn to_tokens(&self) -> FeatureMatrix {
        let n = self.height * self.width;
        FeatureMatrix::from_fn(n, self.channels, |t, c| self.data[c * n + t])
    }

    pub fn from_tokens(tokens: &FeatureMatrix, height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if tokens.rows() != n {
            return Err(Error::shape(format!(
                "{} tokens do not fill a {height}x{width} grid",
                tokens.rows()
            )));
        }
        let c = tokens.cols();
        let mut data = vec![0.0; c * n];
        for t in 0..n {
            for (ch, &v) in tokens.row(t).iter().enumerate() {
                data[ch * n + t] = v;
            }
        }
        Self::new(c, height, width, data)
    }

    /// Bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("upsampling factor must be positive"));
        }
        let (h, w) = (self.height * factor, self.width * factor);
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            data.extend(resize_plane_bilinear(self.plane(c), self.width, self.height, w, h));
        }
        Self::new(self.channels, h, w, data)
    }

    pub fn relative_l2(&self, reference: &Self) -> f64 {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (&a, &b) in self.data.iter().zip(&reference.data) {
            num += ((a - b) as f64).powi(2);
            den += (b as f64).powi(2);
        }
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Fixed seeded affine map between RGB images and latents: every 2×2 pixel
/// patch (12 values) is projected onto 4 orthonormal directions. Decoding
/// applies the transpose, so `encode(decode(z)) = z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    /// `channels × 12`, orthonormal rows.
    basis: FeatureMatrix,
    scale: f32,
}

pub const PATCH: usize = 2;
const PATCH_VALUES: usize = PATCH * PATCH * 3;

impl LatentCodec {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 || channels > PATCH_VALUES {
            return Err(Error::invalid(format!(
                "latent channels must be in 1..={PATCH_VALUES}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(channels);
        while rows.len() < channels {
            let mut v: Vec<f64> = (0..PATCH_VALUES).map(|_| StandardNormal.sample(&mut rng)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let basis = FeatureMatrix::from_fn(channels, PATCH_VALUES, |r, c| rows[r][c] as f32);
        Ok(Self { basis, scale: 0.5 })
    }

    pub fn channels(&self) -> usize {
        self.basis.rows()
    }

    /// Latent `(height, width)` for an image, which must have even sides.
    pub fn latent_grid(&self, image: &RgbImage) -> Result<(usize, usize)> {
        if image.width() % PATCH != 0 || image.height() % PATCH != 0 || image.width() == 0 || image.height() == 0 {
            return Err(Error::invalid(format!(
                "image size {}x{} is not a positive multiple of {PATCH}",
                image.width(),
                image.height()
            )));
        }
        Ok((image.height() / PATCH, image.width() / PATCH))
    }

    pub fn encode(&self, image: &RgbImage) -> Result<LatentImage> {
        let (h, w) = self.latent_grid(image)?;
        let mut latent = LatentImage::zeros(self.channels(), h, w);
        let n = h * w;
        let mut patch = [0.0f32; PATCH_VALUES];
        for y in 0..h {
            for x in 0..w {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let p = image.pixel(x * PATCH + dx, y * PATCH + dy);
                        for c in 0..3 {
                            patch[(dy * PATCH + dx) * 3 + c] = 2.0 * p[c] - 1.0;
                        }
                    }
                }
                for (ch, row) in self.basis.row_iter().enumerate() {
                    let v: f32 = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    latent.data[ch * n + y * w + x] = v * self.scale;
                }
            }
        }
        Ok(latent)
    }

    pub fn decode(&self, latent: &LatentImage) -> Result<RgbImage> {
        if latent.channels() != self.channels() {
            return Err(Error::shape(format!(
                "latent has {} channels, codec expects {}",
                latent.channels(),
                self.channels()
            )));
        }
        let (h, w) = (latent.height(), latent.width());
        let n = h * w;
        let mut data = vec![0.0f32; h * PATCH * w * PATCH * 3];
        let out_w = w * PATCH;
        for y in 0..h {
            for x in 0..w {
                let mut patch = [0.0f32; PATCH_VALUES];
                for (ch, row) in self.basis.row_iter().enumerate() {
                    let z = latent.data[ch * n + y * w + x] / self.scale;
                    for (p, &b) in patch.iter_mut().zip(row) {
                        *p += b * z;
                    }
                }
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let o = ((y * PATCH + dy) * out_w + x * PATCH + dx) * 3;
                        for c in 0..3 {
                            data[o + c] = ((patch[(dy * PATCH + dx) * 3 + c] + 1.0) * 0.5).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        RgbImage::new(out_w, h * PATCH, data)
    }
}

/// Structural conditioning at latent resolution: an edge map standing in for
/// line art and a blurred luminance map standing in for depth, each with a
/// strength in `[0, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlMaps {
    pub height: usize,
    pub width: usize,
    pub lineart: Vec<f32>,
    pub depth: Vec<f32>,
    pub lineart_strength: f32,
    pub depth_strength: f32,
}

pub const MAX_CONTROL_STRENGTH: f32 = 2.0;

impl ControlMaps {
    /// Computes both maps from a content image whose size is twice the
    /// latent grid.
    pub fn from_image(image: &RgbImage, lineart_strength: f32, depth_strength: f32) -> Result<Self> {
        if image.width() % PATCH != 0 || image.height() % PATCH != 0 {
            return Err(Error::invalid("content image size must be even"));
        }
        let (w, h) = (image.width(), image.height());
        let gray = image.grayscale();
        let edges: Vec<f32> = sobel_magnitude(&gray, w, h).iter().map(|v| v * 0.25).collect();
        let depth = blur(&gray, w, h);
        let maps = Self {
            height: h / PATCH,
            width: w / PATCH,
            lineart: downscale_plane(&edges, w, h, PATCH),
            depth: downscale_plane(&depth, w, h, PATCH),
            lineart_strength,
            depth_strength,
        };
        maps.validate()?;
        Ok(maps)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.lineart.len() != n || self.depth.len() != n {
            return Err(Error::shape("control map size does not match its grid"));
        }
        for (name, s) in [("lineart", self.lineart_strength), ("depth", self.depth_strength)] {
            if !s.is_finite() || !(0.0..=MAX_CONTROL_STRENGTH).contains(&s) {
                return Err(Error::invalid(format!(
                    "{name} strength {s} outside [0, {MAX_CONTROL_STRENGTH}]"
                )));
            }
        }
        Ok(())
    }
}
