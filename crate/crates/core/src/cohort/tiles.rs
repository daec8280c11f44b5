//! Parametric grayscale textures, one family per morphology type. The
//! families are deliberately distinct (blobs / ring / speckle / arc / disc)
//! so morphology is separable by construction, with per-tile jitter and
//! pixel noise providing within-class variation.

use super::{Tile, N_MORPH_TYPES};
use crate::error::{Error, Result};
use crate::Tensor64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const BACKGROUND: f64 = 0.12;

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas { size, px: vec![BACKGROUND; size * size] }
    }

    fn paint(&mut self, f: impl Fn(f64, f64) -> f64) {
        let c = (self.size as f64 - 1.0) / 2.0;
        for y in 0..self.size {
            for x in 0..self.size {
                let dx = x as f64 - c;
                let dy = y as f64 - c;
                self.px[y * self.size + x] += f(dx, dy);
            }
        }
    }
}

fn ring(dx: f64, dy: f64, cx: f64, cy: f64, radius: f64, thickness: f64, amp: f64) -> f64 {
    let r = ((dx - cx).powi(2) + (dy - cy).powi(2)).sqrt();
    let d = (r - radius).abs();
    amp * (-0.5 * (d / thickness).powi(2)).exp()
}

fn blob(dx: f64, dy: f64, cx: f64, cy: f64, sigma: f64, amp: f64) -> f64 {
    let d2 = (dx - cx).powi(2) + (dy - cy).powi(2);
    amp * (-0.5 * d2 / (sigma * sigma)).exp()
}

/// Render one tile of the requested morphology type.
pub fn render_tile<R: Rng>(morph_type: usize, size: usize, noise: f64, rng: &mut R) -> Result<Tile> {
    if morph_type >= N_MORPH_TYPES {
        return Err(Error::contract(format!("morph type {morph_type} out of range 0..{N_MORPH_TYPES}")));
    }
    if size < 8 {
        return Err(Error::contract("tile size must be at least 8"));
    }
    let mut canvas = Canvas::new(size);
    let scale = size as f64 / 32.0;
    match morph_type {
        // mesangial proliferative: scattered small dense blobs
        0 => {
            let n_blobs = rng.gen_range(5..=8);
            let centers: Vec<(f64, f64)> = (0..n_blobs)
                .map(|_| {
                    let r = rng.gen_range(0.0..9.0 * scale);
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    (r * a.cos(), r * a.sin())
                })
                .collect();
            let sigma = 1.7 * scale;
            canvas.paint(|dx, dy| {
                centers.iter().map(|&(cx, cy)| blob(dx, dy, cx, cy, sigma, 0.65)).sum()
            });
        }
        // normal: single clean capillary ring
        1 => {
            let radius = rng.gen_range(9.0..11.5) * scale;
            let cx = rng.gen_range(-1.5..1.5) * scale;
            let cy = rng.gen_range(-1.5..1.5) * scale;
            canvas.paint(|dx, dy| ring(dx, dy, cx, cy, radius, 2.0 * scale, 0.5));
        }
        // endocapillary proliferative: dense high-frequency speckle in a disc
        2 => {
            let freq = rng.gen_range(0.85..1.05) / scale;
            let phase_x = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase_y = rng.gen_range(0.0..std::f64::consts::TAU);
            let rad = 12.0 * scale;
            canvas.paint(|dx, dy| {
                let r = (dx * dx + dy * dy).sqrt();
                if r < rad {
                    0.28 + 0.28 * ((freq * dx + phase_x).sin() * (freq * dy + phase_y).sin())
                } else {
                    0.0
                }
            });
        }
        // crescentic: partial arc of a thick ring
        3 => {
            let radius = rng.gen_range(8.5..11.0) * scale;
            let rot = rng.gen_range(0.0..std::f64::consts::TAU);
            let span = rng.gen_range(2.0..2.9); // radians
            canvas.paint(|dx, dy| {
                let mut angle = dy.atan2(dx) - rot;
                while angle < 0.0 {
                    angle += std::f64::consts::TAU;
                }
                if angle <= span {
                    ring(dx, dy, 0.0, 0.0, radius, 2.6 * scale, 0.7)
                } else {
                    0.0
                }
            });
        }
        // sclerotic: solid filled disc
        _ => {
            let radius = rng.gen_range(9.5..11.5) * scale;
            let edge = 1.2 * scale;
            canvas.paint(|dx, dy| {
                let r = (dx * dx + dy * dy).sqrt();
                0.85 / (1.0 + ((r - radius) / edge).exp())
            });
        }
    }
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("valid noise sigma");
    for p in &mut canvas.px {
        *p = (*p + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(Tile {
        pixels: Tensor64::new(vec![size, size], canvas.px)?,
        morph_type,
    })
}

/// Balanced, shuffled tile set covering all five morphology types.
pub fn generate_tile_set(n: usize, size: usize, noise: f64, seed: u64) -> Result<Vec<Tile>> {
    if n == 0 {
        return Err(Error::contract("generate_tile_set needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tiles: Vec<Tile> = (0..n)
        .map(|i| render_tile(i % N_MORPH_TYPES, size, noise, &mut rng))
        .collect::<Result<_>>()?;
    tiles.shuffle(&mut rng);
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_are_in_range_and_typed() {
        let tiles = generate_tile_set(20, 32, 0.06, 1).unwrap();
        assert_eq!(tiles.len(), 20);
        let mut seen = [0usize; N_MORPH_TYPES];
        for t in &tiles {
            seen[t.morph_type] += 1;
            assert_eq!(t.pixels.shape, vec![32, 32]);
            assert!(t.pixels.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(seen, [4, 4, 4, 4, 4]);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_tile_set(10, 32, 0.06, 5).unwrap();
        let b = generate_tile_set(10, 32, 0.06, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn type_families_differ_in_intensity_statistics() {
        // sclerotic discs are much brighter than normal rings on average
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean = |t: &Tile| t.pixels.data.iter().sum::<f64>() / t.pixels.numel() as f64;
        let sclerotic: f64 = (0..10)
            .map(|_| mean(&render_tile(4, 32, 0.06, &mut rng).unwrap()))
            .sum::<f64>()
            / 10.0;
        let normal: f64 = (0..10)
            .map(|_| mean(&render_tile(1, 32, 0.06, &mut rng).unwrap()))
            .sum::<f64>()
            / 10.0;
        assert!(sclerotic > normal + 0.1, "sclerotic {sclerotic} vs normal {normal}");
    }
}
