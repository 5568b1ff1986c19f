//! RGB images in `[0, 1]`, binary PPM I/O and the small amount of image
//! processing the pipeline needs (resizing, crops, edge and blur maps).

use std::path::Path;

use crate::binio::{read_file, write_file_synced};
use crate::error::{Error, Result};

/// Interleaved RGB, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Rec. 601 luma per pixel.
    pub fn grayscale(&self) -> Vec<f32> {
        self.pixels()
            .map(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h} at ({x0},{y0}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, |x, y| self.pixel(x0 + x, y0 + y)))
    }

    /// Averages non-overlapping `factor × factor` blocks.
    pub fn downscale_box(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::invalid(format!(
                "{}x{} image is not divisible by {factor}",
                self.width, self.height
            )));
        }
        let inv = 1.0 / (factor * factor) as f32;
        Ok(Self::from_fn(self.width / factor, self.height / factor, |x, y| {
            let mut acc = [0.0f32; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = self.pixel(x * factor + dx, y * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            acc.map(|v| v * inv)
        }))
    }

    /// Nearest-neighbour downscale by an integer factor.
    pub fn downscale_nearest(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width < factor || self.height < factor {
            return Err(Error::invalid(format!("cannot downscale by {factor}")));
        }
        Ok(Self::from_fn(self.width / factor, self.height / factor, |x, y| {
            self.pixel(x * factor, y * factor)
        }))
    }

    /// Bilinear resize (pixel centers aligned, edges clamped).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput);
        }
        let planes: Vec<Vec<f32>> = (0..3)
            .map(|c| {
                let plane: Vec<f32> = self.data.iter().skip(c).step_by(3).copied().collect();
                resize_plane_bilinear(&plane, self.width, self.height, width, height)
            })
            .collect();
        let mut data = Vec::with_capacity(width * height * 3);
        for i in 0..width * height {
            for plane in &planes {
                data.push(plane[i].clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, data)
    }
}

/// Bilinear resampling of one `w × h` plane with half-pixel centers.
pub fn resize_plane_bilinear(src: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    let sample = |pos: f32, len: usize| -> (usize, usize, f32) {
        let p = pos.clamp(0.0, (len - 1) as f32);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f32)
    };
    let sx = w as f32 / out_w as f32;
    let sy = h as f32 / out_h as f32;
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = sample((y as f32 + 0.5) * sy - 0.5, h);
        for x in 0..out_w {
            let (x0, x1, fx) = sample((x as f32 + 0.5) * sx - 0.5, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Sobel gradient magnitude of a single-channel plane, edges replicated.
pub fn sobel_magnitude(plane: &[f32], w: usize, h: usize) -> Vec<f32> {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        plane[y * w + x]
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Separable binomial blur (kernel 1-4-6-4-1), edges replicated.
pub fn blur(plane: &[f32], w: usize, h: usize) -> Vec<f32> {
    const KERNEL: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in KERNEL.iter().enumerate() {
                    let o = i as isize - 2;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                    };
                    acc += k * src[sy * w + sx];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Averages `factor × factor` blocks of a plane.
pub fn downscale_plane(plane: &[f32], w: usize, h: usize, factor: usize) -> Vec<f32> {
    let (ow, oh) = (w / factor, h / factor);
    let inv = 1.0 / (factor * factor) as f32;
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += plane[(y * factor + dy) * w + x * factor + dx];
                }
            }
            out.push(acc * inv);
        }
    }
    out
}

/// Reads a binary (P6) 8-bit PPM.
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = read_file(path)?;
    decode_ppm(&bytes).map_err(|reason| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header number {s:?}"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(format!("only 8-bit PPM supported, maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height * 3;
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes"))?;
    let data = raster.iter().map(|&b| b as f32 / 255.0).collect();
    RgbImage::new(width, height, data).map_err(|e| e.to_string())
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(
        image
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_ppm(image: &RgbImage, path: &Path) -> Result<()> {
    write_file_synced(path, &encode_ppm(image))
}
