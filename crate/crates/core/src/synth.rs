//! Procedural images used as toy style and content fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::RgbImage;

fn palette(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f32; 3]> {
    (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
}

/// A textured "style" image: one of stripes, checkers, rings or blobs in a
/// seeded palette. Images from the same `family` share a palette and pattern
/// kind but differ in layout, like several paintings in one style.
pub fn style_image(family: u64, variant: u64, width: usize, height: usize) -> RgbImage {
    let mut frng = ChaCha8Rng::seed_from_u64(family.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let colors = palette(&mut frng, 3);
    let kind = family % 4;
    let base_freq: f32 = frng.random_range(2.0..5.0);
    let mut vrng = ChaCha8Rng::seed_from_u64(family ^ variant.wrapping_mul(0xd1b5_4a32_d192_ed03) ^ 1);
    let angle: f32 = vrng.random_range(0.0..std::f32::consts::PI);
    let phase: f32 = vrng.random_range(0.0..6.28);
    let freq = base_freq * vrng.random_range(0.8..1.25);
    let (cx, cy): (f32, f32) = (vrng.random_range(0.2..0.8), vrng.random_range(0.2..0.8));
    let blobs: Vec<(f32, f32, f32)> = (0..5)
        .map(|_| (vrng.random(), vrng.random(), vrng.random_range(0.05..0.25)))
        .collect();
    let mix = |a: [f32; 3], b: [f32; 3], t: f32| {
        [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
    };
    RgbImage::from_fn(width, height, |x, y| {
        let u = x as f32 / width as f32;
        let v = y as f32 / height as f32;
        let s = match kind {
            0 => {
                let d = u * angle.cos() + v * angle.sin();
                0.5 + 0.5 * (d * freq * 6.28 + phase).sin()
            }
            1 => {
                let a = ((u * freq * 2.0 + phase).floor() as i32 + (v * freq * 2.0).floor() as i32) & 1;
                a as f32
            }
            2 => {
                let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                0.5 + 0.5 * (r * freq * 12.0 + phase).cos()
            }
            _ => {
                let mut acc = 0.0f32;
                for &(bx, by, br) in &blobs {
                    let d2 = (u - bx).powi(2) + (v - by).powi(2);
                    acc += (-d2 / (br * br)).exp();
                }
                acc.min(1.0)
            }
        };
        let grain = ((x * 7 + y * 13) % 5) as f32 / 40.0;
        let c = if s < 0.5 {
            mix(colors[0], colors[1], s * 2.0)
        } else {
            mix(colors[1], colors[2], (s - 0.5) * 2.0)
        };
        c.map(|ch| ch * 0.9 + grain)
    })
}

/// A simple "content" scene: a few flat shapes on a gradient background.
pub fn content_image(seed: u64, width: usize, height: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_47e7);
    let bg_top = [rng.random::<f32>() * 0.5, rng.random::<f32>() * 0.5, 0.6];
    let bg_bottom = [0.8, 0.7, rng.random::<f32>() * 0.4];
    let shapes: Vec<(bool, f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            (
                rng.random(),
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.1..0.3),
                [rng.random(), rng.random(), rng.random()],
            )
        })
        .collect();
    RgbImage::from_fn(width, height, |x, y| {
        let u = x as f32 / width as f32;
        let v = y as f32 / height as f32;
        let mut c = [0, 1, 2].map(|i| bg_top[i] * (1.0 - v) + bg_bottom[i] * v);
        for &(circle, sx, sy, r, color) in &shapes {
            let inside = if circle {
                (u - sx).powi(2) + (v - sy).powi(2) < r * r
            } else {
                (u - sx).abs() < r && (v - sy).abs() < r * 0.6
            };
            if inside {
                c = color;
            }
        }
        c
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        assert_eq!(style_image(1, 0, 16, 16), style_image(1, 0, 16, 16));
        assert_ne!(style_image(1, 0, 16, 16), style_image(1, 1, 16, 16));
        assert_ne!(content_image(1, 16, 16), content_image(2, 16, 16));
        assert!(style_image(3, 2, 8, 8).as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
