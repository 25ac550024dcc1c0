//! Procedural scene-like base images.
//!
//! The property suite and the demo pipeline need clean scenes with edges,
//! color variation and texture. These are generated deterministically so no
//! third-party imagery is required; the PNGs shipped under `assets/` come
//! from this generator.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::ImageTensor;

/// Deterministic colorful test scene: layered value noise plus a few solid
/// shapes, values in `[0, 1]`.
pub fn synthetic_base_image(seed: u64, height: usize, width: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15) ^ 0x5eed);

    // Three noise octaves per channel over shared grids; the fine octave
    // keeps enough high-frequency content that defocus visibly costs detail.
    let cell0 = (height.min(width) / 4).max(2);
    let cell1 = (height.min(width) / 12).max(2);
    let cell2 = (height.min(width) / 32).max(1);
    let grid0 = noise_grid(&mut rng, height, width, cell0);
    let grid1 = noise_grid(&mut rng, height, width, cell1);
    let grid2 = noise_grid(&mut rng, height, width, cell2);
    let tint: [f32; 3] = [
        0.4 + 0.5 * rng.gen::<f32>(),
        0.4 + 0.5 * rng.gen::<f32>(),
        0.4 + 0.5 * rng.gen::<f32>(),
    ];

    let mut img = ImageTensor::from_fn(height, width, 3, |y, x, c| {
        let base = 0.45 * grid0.at(y, x) + 0.25 * grid1.at(y, x) + 0.2 * grid2.at(y, x) + 0.1;
        (base * tint[c]).clamp(0.0, 1.0)
    });

    // Solid discs and axis-aligned boxes give sharp edges to restore.
    let shapes = rng.gen_range(5..=9);
    for _ in 0..shapes {
        let color = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        let cy = rng.gen_range(0..height) as f32;
        let cx = rng.gen_range(0..width) as f32;
        let r = rng.gen_range(height.min(width) / 10..height.min(width) / 3) as f32;
        let boxy = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f32 - cy).abs();
                let dx = (x as f32 - cx).abs();
                let inside = if boxy {
                    dy < r * 0.8 && dx < r
                } else {
                    dy * dy + dx * dx < r * r
                };
                if inside {
                    for c in 0..3 {
                        let v = img.get(y, x, c);
                        img.set(y, x, c, (0.25 * v + 0.75 * color[c]).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    img
}

struct Grid {
    values: Vec<f32>,
    gw: usize,
    cell: f32,
}

impl Grid {
    fn at(&self, y: usize, x: usize) -> f32 {
        let fy = y as f32 / self.cell;
        let fx = x as f32 / self.cell;
        let y0 = fy as usize;
        let x0 = fx as usize;
        let ty = fy - y0 as f32;
        let tx = fx - x0 as f32;
        let gh = self.values.len() / self.gw;
        let y1 = (y0 + 1).min(gh - 1);
        let x1 = (x0 + 1).min(self.gw - 1);
        let v = |yy: usize, xx: usize| self.values[yy * self.gw + xx];
        let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
        let bot = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

fn noise_grid(rng: &mut ChaCha8Rng, height: usize, width: usize, cell: usize) -> Grid {
    let gh = height / cell + 2;
    let gw = width / cell + 2;
    Grid {
        values: (0..gh * gw).map(|_| rng.gen::<f32>()).collect(),
        gw,
        cell: cell as f32,
    }
}
