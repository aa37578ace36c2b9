use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Degradation, DegradationSample, Image};
use crate::autograd::{pad_index, PadMode};
use crate::error::{Error, Result};

fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// `clip(clean + n)` with `n ~ N(0, (sigma/255)^2)` per pixel.
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Result<DegradationSample> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = sigma / 255.0;
    let degraded = if sigma == 0.0 {
        img.pixels().clone()
    } else {
        img.pixels().map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            clip01(v + std * z)
        })
    };
    let params = BTreeMap::from([("sigma".to_string(), sigma)]);
    Ok(DegradationSample::new(img, degraded, Degradation::Noise, params, seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    /// Mean transmission, in (0, 1].
    pub transmission: f64,
    /// Atmospheric light, in [0, 1].
    pub airlight: f64,
    /// Modulate the transmission with smooth spatial noise.
    pub spatially_varying: bool,
}

/// Atmospheric scattering blend `clean * t + airlight * (1 - t)`.
pub fn synth_haze(img: &Image, p: HazeParams, seed: u64) -> Result<DegradationSample> {
    if !(p.transmission > 0.0 && p.transmission <= 1.0) {
        return Err(Error::param(format!(
            "transmission must be in (0, 1], got {}",
            p.transmission
        )));
    }
    if !(0.0..=1.0).contains(&p.airlight) {
        return Err(Error::param(format!("airlight must be in [0, 1], got {}", p.airlight)));
    }
    let (h, w) = (img.height(), img.width());
    let t_map: Vec<f64> = if p.spatially_varying {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = smooth_field(h, w, 4, &mut rng);
        field
            .iter()
            .map(|&f| (p.transmission * (0.75 + 0.5 * f)).clamp(0.05, 1.0))
            .collect()
    } else {
        vec![p.transmission; h * w]
    };
    let mut out = img.pixels().clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for (v, &t) in plane.iter_mut().zip(&t_map) {
            *v = clip01(*v * t + p.airlight * (1.0 - t));
        }
    }
    let params = BTreeMap::from([
        ("transmission".to_string(), p.transmission),
        ("airlight".to_string(), p.airlight),
        (
            "spatially_varying".to_string(),
            f64::from(u8::from(p.spatially_varying)),
        ),
    ]);
    Ok(DegradationSample::new(img, out, Degradation::Haze, params, seed))
}

/// Bilinearly upsampled random lattice values in [0, 1].
fn smooth_field(h: usize, w: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / h.max(2).saturating_sub(1) as f64 * cells as f64;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 / w.max(2).saturating_sub(1) as f64 * cells as f64;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - x0 as f64;
            let v00 = lattice[y0 * n + x0];
            let v01 = lattice[y0 * n + x0 + 1];
            let v10 = lattice[(y0 + 1) * n + x0];
            let v11 = lattice[(y0 + 1) * n + x0 + 1];
            let top = v00 * (1.0 - tx) + v01 * tx;
            let bot = v10 * (1.0 - tx) + v11 * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    pub streak_count: usize,
    /// Peak streak brightness added to the image.
    pub intensity: f64,
    /// Streak direction in degrees from vertical.
    pub angle_deg: f64,
    /// Streak length range in pixels.
    pub min_length: f64,
    pub max_length: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            streak_count: 40,
            intensity: 0.4,
            angle_deg: 10.0,
            min_length: 6.0,
            max_length: 16.0,
        }
    }
}

/// Adds `streak_count` anti-aliased bright line segments along `angle_deg`.
pub fn synth_rain(img: &Image, p: RainParams, seed: u64) -> Result<DegradationSample> {
    if !(p.intensity >= 0.0) || !p.angle_deg.is_finite() {
        return Err(Error::param("rain intensity must be >= 0 and the angle finite"));
    }
    if !(p.min_length > 0.0 && p.max_length >= p.min_length) {
        return Err(Error::param(format!(
            "invalid streak length range [{}, {}]",
            p.min_length, p.max_length
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut layer = vec![0.0; h * w];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = p.angle_deg.to_radians();
    let (dx, dy) = (theta.sin(), theta.cos());
    for _ in 0..p.streak_count {
        let len = rng.random_range(p.min_length..=p.max_length);
        let x0 = rng.random_range(-len..w as f64 + len);
        let y0 = rng.random_range(-len..h as f64);
        let bright = p.intensity * rng.random_range(0.6..=1.0);
        let steps = (len * 2.0).ceil() as usize;
        for s in 0..=steps {
            let t = s as f64 * 0.5;
            // taper the ends like a short exposure of a falling drop
            let taper = 1.0 - (2.0 * t / len - 1.0).abs().powi(2);
            splat(
                &mut layer,
                h,
                w,
                x0 + dx * t,
                y0 + dy * t,
                0.5 * bright * taper.max(0.0),
            );
        }
    }
    let mut out = img.pixels().clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for (v, &r) in plane.iter_mut().zip(&layer) {
            *v = clip01(*v + r.min(p.intensity));
        }
    }
    let params = BTreeMap::from([
        ("streak_count".to_string(), p.streak_count as f64),
        ("intensity".to_string(), p.intensity),
        ("angle_deg".to_string(), p.angle_deg),
    ]);
    Ok(DegradationSample::new(img, out, Degradation::Rain, params, seed))
}

fn splat(layer: &mut [f64], h: usize, w: usize, x: f64, y: f64, v: f64) {
    let (xf, yf) = (x.floor(), y.floor());
    let (tx, ty) = (x - xf, y - yf);
    for (oy, wy) in [(0, 1.0 - ty), (1, ty)] {
        for (ox, wx) in [(0, 1.0 - tx), (1, tx)] {
            let yy = yf as i64 + oy;
            let xx = xf as i64 + ox;
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                layer[yy as usize * w + xx as usize] += v * wy * wx;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurKind {
    Gaussian,
    LinearMotion,
}

/// Unit-sum blur kernel of odd size `k` (row-major `k x k`).
pub fn blur_kernel(k: usize, kind: BlurKind, seed: u64) -> Result<Vec<f64>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::param(format!("kernel size must be odd and >= 1, got {k}")));
    }
    let r = (k / 2) as f64;
    let mut kern = vec![0.0; k * k];
    match kind {
        BlurKind::Gaussian => {
            let sigma = 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8;
            for y in 0..k {
                for x in 0..k {
                    let (fy, fx) = (y as f64 - r, x as f64 - r);
                    kern[y * k + x] = (-(fx * fx + fy * fy) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        BlurKind::LinearMotion => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (theta.cos(), theta.sin());
            let steps = 4 * k;
            for s in 0..=steps {
                let t = -r + 2.0 * r * s as f64 / steps as f64;
                splat(&mut kern, k, k, r + dx * t, r + dy * t, 1.0);
            }
        }
    }
    let sum: f64 = kern.iter().sum();
    for v in &mut kern {
        *v /= sum;
    }
    Ok(kern)
}

/// Reflect-padded same-size filtering of every channel with a unit-sum kernel.
pub fn synth_blur(img: &Image, kernel_size: usize, kind: BlurKind, seed: u64) -> Result<DegradationSample> {
    let kern = blur_kernel(kernel_size, kind, seed)?;
    let (h, w) = (img.height(), img.width());
    let k = kernel_size;
    let r = (k / 2) as isize;
    if k > 1 && (r as usize >= h || r as usize >= w) {
        return Err(Error::param(format!("kernel size {k} too large for a {h}x{w} image")));
    }
    let src = img.pixels();
    let mut out = src.clone();
    if k > 1 {
        for (c, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let sp = &src.data()[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let yy = pad_index(y as isize + ky as isize - r, h, PadMode::Reflect).expect("reflect");
                        for kx in 0..k {
                            let xx = pad_index(x as isize + kx as isize - r, w, PadMode::Reflect).expect("reflect");
                            acc += kern[ky * k + kx] * sp[yy * w + xx];
                        }
                    }
                    plane[y * w + x] = clip01(acc);
                }
            }
        }
    }
    let params = BTreeMap::from([
        ("kernel_size".to_string(), k as f64),
        (
            "motion".to_string(),
            f64::from(u8::from(kind == BlurKind::LinearMotion)),
        ),
    ]);
    Ok(DegradationSample::new(img, out, Degradation::Blur, params, seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowLightParams {
    /// Exponent >= 1.
    pub gamma: f64,
    /// Brightness scale in (0, 1].
    pub scale: f64,
    /// Standard deviation of signal-dependent noise at unit intensity (0 disables it).
    pub shot_noise: f64,
}

/// `scale * clean^gamma`, optionally with shot noise.
pub fn synth_lowlight(img: &Image, p: LowLightParams, seed: u64) -> Result<DegradationSample> {
    if !(p.gamma >= 1.0) {
        return Err(Error::param(format!("gamma must be >= 1, got {}", p.gamma)));
    }
    if !(p.scale > 0.0 && p.scale <= 1.0) {
        return Err(Error::param(format!("scale must be in (0, 1], got {}", p.scale)));
    }
    if !(p.shot_noise >= 0.0) {
        return Err(Error::param("shot noise must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = img.pixels().map(|v| {
        let d = p.scale * v.powf(p.gamma);
        if p.shot_noise > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            clip01(d + p.shot_noise * d.sqrt() * z)
        } else {
            d
        }
    });
    let params = BTreeMap::from([
        ("gamma".to_string(), p.gamma),
        ("scale".to_string(), p.scale),
        ("shot_noise".to_string(), p.shot_noise),
    ]);
    Ok(DegradationSample::new(img, out, Degradation::LowLight, params, seed))
}
