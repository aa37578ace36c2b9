use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;
use crate::tensor::Tensor;

/// A deterministic synthetic "natural-ish" scene: a smooth colour gradient,
/// a few soft-edged shapes (some striped), and low-amplitude smooth texture.
pub fn procedural_image(h: usize, w: usize, seed: u64, id: &str) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = vec![0.0; 3 * h * w];

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 / w as f64 - 0.5) * gx + (y as f64 / h as f64 - 0.5) * gy + 0.5;
            let u = u.clamp(0.0, 1.0);
            for c in 0..3 {
                px[c * h * w + y * w + x] = c0[c] * (1.0 - u) + c1[c] * u;
            }
        }
    }

    let shapes = rng.random_range(3..=7);
    for _ in 0..shapes {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = rng.random_range(0.08..0.35) * w as f64;
        let ry = rng.random_range(0.08..0.35) * h as f64;
        let ellipse = rng.random_bool(0.5);
        let stripes = rng.random_bool(0.35);
        let period = rng.random_range(3.0..9.0);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let softness = rng.random_range(0.5..2.0);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                // signed distance-ish in pixels, negative inside
                let d = if ellipse {
                    ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry)
                } else {
                    (dx.abs().max(dy.abs()) - 1.0) * rx.min(ry)
                };
                let a = 1.0 / (1.0 + (d / softness).exp());
                if a < 1e-4 {
                    continue;
                }
                let mut m = 1.0;
                if stripes {
                    let s = (x as f64 * phi.cos() + y as f64 * phi.sin()) * std::f64::consts::TAU / period;
                    m = 0.8 + 0.2 * s.sin();
                }
                for c in 0..3 {
                    let o = c * h * w + y * w + x;
                    px[o] = px[o] * (1.0 - a) + colour[c] * m * a;
                }
            }
        }
    }

    // smooth texture from a handful of random low-frequency sinusoids
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.02..0.25),
                rng.random_range(0.02..0.25),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.005..0.02),
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            for c in 0..3 {
                let o = c * h * w + y * w + x;
                px[o] = (px[o] + t).clamp(0.02, 0.98);
            }
        }
    }

    Image::new(Tensor::from_parts(vec![3, h, w], px), id).expect("procedural pixels are in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_dependent() {
        let a = procedural_image(32, 48, 7, "a");
        let b = procedural_image(32, 48, 7, "a");
        let c = procedural_image(32, 48, 8, "a");
        assert_eq!(a, b);
        assert_ne!(a.pixels(), c.pixels());
        assert_eq!(a.pixels().shape(), &[3, 32, 48]);
    }

    #[test]
    fn has_structure() {
        let a = procedural_image(64, 64, 1, "a");
        let m = a.pixels().mean();
        let var = a.pixels().data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / a.pixels().len() as f64;
        assert!(var > 1e-3, "variance {var}");
    }
}
