//! Procedural exemplars for tests and desk-scale experiments.

use crate::error::Result;
use crate::image::Image;
use crate::noise::hashed_uniform;

/// Parameters of a striped exemplar with additive per-pixel noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stripes {
    /// Stripe period in pixels.
    pub period: f64,
    /// Stripe direction in radians (0 = vertical stripes).
    pub angle: f64,
    pub dark: [f32; 3],
    pub light: [f32; 3],
    /// Peak amplitude of the uniform noise.
    pub noise: f32,
}

impl Default for Stripes {
    fn default() -> Self {
        Self {
            period: 16.0,
            angle: 0.0,
            dark: [0.15, 0.1, 0.05],
            light: [0.9, 0.75, 0.45],
            noise: 0.1,
        }
    }
}

impl Stripes {
    pub fn render(&self, size: usize, seed: u64) -> Result<Image> {
        let (s, c) = self.angle.sin_cos();
        let mut img = Image::filled(size, size, [0.0; 3])?;
        for y in 0..size {
            for x in 0..size {
                let phase = (x as f64 * c + y as f64 * s) / self.period;
                let t = (0.5 + 0.5 * (std::f64::consts::TAU * phase).sin()) as f32;
                let n = self.noise * hashed_uniform(seed, 0, (y * size + x) as u64) as f32;
                let mut rgb = [0.0; 3];
                for k in 0..3 {
                    rgb[k] =
                        (self.dark[k] + (self.light[k] - self.dark[k]) * t + n).clamp(0.0, 1.0);
                }
                img.set_pixel(x, y, rgb);
            }
        }
        Ok(img)
    }
}

/// The default stripes-plus-noise exemplar.
pub fn stripes_plus_noise(size: usize, seed: u64) -> Result<Image> {
    Stripes::default().render(size, seed)
}

/// A small corpus of visually distinct striped exemplars.
pub fn desk_corpus(count: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    let palettes = [
        ([0.15, 0.1, 0.05], [0.9, 0.75, 0.45]),
        ([0.05, 0.2, 0.1], [0.6, 0.95, 0.5]),
        ([0.1, 0.1, 0.35], [0.7, 0.8, 1.0]),
        ([0.4, 0.05, 0.05], [1.0, 0.6, 0.5]),
    ];
    (0..count)
        .map(|k| {
            let (dark, light) = palettes[k % palettes.len()];
            Stripes {
                period: [8.0, 16.0, 11.0, 22.0][(k / 2) % 4],
                angle: 0.3 + (k as f64) * 0.7,
                dark,
                light,
                noise: 0.05 + 0.05 * (k % 3) as f32,
            }
            .render(size, seed.wrapping_add(k as u64))
        })
        .collect()
}
