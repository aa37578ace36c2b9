//! Image-quality metrics: PSNR, SSIM and a differentiable MS-SSIM.

use crate::autograd::{Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returned by [`psnr`] for identical inputs.
pub const PSNR_INFINITY: f64 = f64::INFINITY;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Standard five-scale MS-SSIM exponents; the first `scales` are used and
/// renormalized to sum to one.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Scales used at desk resolution.
pub const MS_SSIM_SCALES: usize = 3;

/// Smallest image side accepted by [`ms_ssim`].
pub const MS_SSIM_MIN_SIZE: usize = 32;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "metric operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` for signals in [0, 1]; [`PSNR_INFINITY`] when equal.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { PSNR_INFINITY } else { -10.0 * mse.log10() })
}

/// Normalized 1-D Gaussian taps of odd length `n`.
pub fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let mut g: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Window size at a scale: 11, or the largest odd size that fits.
fn window_for(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Per-sample mean SSIM luminance·contrast-structure and contrast-structure
/// terms at one scale, each `(B, 1)`.
fn ssim_terms<'g>(x: Var<'g>, y: Var<'g>) -> (Var<'g>, Var<'g>) {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let k = window_for(h, w);
    let g1 = gaussian_taps(k, SSIM_SIGMA);
    let n = 5 * c;
    // the Gaussian window is separable: filter rows, then columns
    let rows = Tensor::from_fn(&[n, 1, 1, k], |i| g1[i % k]);
    let cols = Tensor::from_fn(&[n, 1, k, 1], |i| g1[i % k]);
    let stacked = Var::concat(&[x, y, x.square(), y.square(), x.mul(y)], 1);
    let f = stacked.conv2d(x.constant_like(rows), 1, 0, PadMode::Zero, n).conv2d(
        x.constant_like(cols),
        1,
        0,
        PadMode::Zero,
        n,
    );
    let mx = f.narrow(1, 0, c);
    let my = f.narrow(1, c, c);
    let mxx = mx.square();
    let myy = my.square();
    let mxy = mx.mul(my);
    let sxx = f.narrow(1, 2 * c, c).sub(mxx);
    let syy = f.narrow(1, 3 * c, c).sub(myy);
    let sxy = f.narrow(1, 4 * c, c).sub(mxy);
    let cs = sxy
        .mul_scalar(2.0)
        .add_scalar(SSIM_C2)
        .div(sxx.add(syy).add_scalar(SSIM_C2));
    let lum = mxy
        .mul_scalar(2.0)
        .add_scalar(SSIM_C1)
        .div(mxx.add(myy).add_scalar(SSIM_C1));
    let ssim = lum.mul(cs);
    let per = |v: Var<'g>| {
        let m = v.shape()[1..].iter().product::<usize>();
        v.reshape(&[b, m]).sum_axis(1).mul_scalar(1.0 / m as f64)
    };
    (per(ssim), per(cs))
}

fn check_pair(x: &[usize], y: &[usize], min: usize) -> Result<()> {
    if x != y {
        return Err(Error::shape(format!("metric operands differ: {x:?} vs {y:?}")));
    }
    if x.len() != 4 {
        return Err(Error::shape(format!("expected (B, C, H, W), got {x:?}")));
    }
    if x[2] < min || x[3] < min {
        return Err(Error::param(format!(
            "images of size {}x{} are too small; need at least {min}",
            x[2], x[3]
        )));
    }
    Ok(())
}

/// Multi-scale SSIM of `(B, C, H, W)` batches, averaged over the batch.
///
/// Uses [`MS_SSIM_SCALES`] scales with renormalized weights and 2x2 average
/// pooling between scales; per-scale terms are clamped at zero before the
/// fractional powers.
pub fn ms_ssim_var<'g>(x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let scales = MS_SSIM_SCALES;
    check_pair(&x.shape(), &y.shape(), MS_SSIM_MIN_SIZE)?;
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let (mut x, mut y) = (x, y);
    let mut acc: Option<Var<'g>> = None;
    for j in 0..scales {
        let (ssim, cs) = ssim_terms(x, y);
        let wj = MS_SSIM_WEIGHTS[j] / total;
        let term = if j + 1 == scales { ssim } else { cs };
        let f = term.relu().powf(wj);
        acc = Some(match acc {
            Some(a) => a.mul(f),
            None => f,
        });
        if j + 1 < scales {
            x = x.avg_pool2x2();
            y = y.avg_pool2x2();
        }
    }
    Ok(acc.expect("at least one scale").mean())
}

fn batched(t: &Tensor) -> Result<Tensor> {
    match t.ndim() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(&s)
        }
        4 => Ok(t.clone()),
        _ => Err(Error::shape(format!(
            "expected (C, H, W) or (B, C, H, W), got {:?}",
            t.shape()
        ))),
    }
}

/// MS-SSIM of two images or batches (`(C, H, W)` or `(B, C, H, W)`).
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let g = Graph::inference();
    let v = ms_ssim_var(g.constant(batched(a)?), g.constant(batched(b)?))?;
    let out = v.value().data()[0];
    Ok(out)
}

/// Single-scale SSIM (11x11 Gaussian window, valid region), averaged over
/// channels and batch, clamped to [0, 1].
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (a, b) = (batched(a)?, batched(b)?);
    check_pair(a.shape(), b.shape(), 1)?;
    let g = Graph::inference();
    let (s, _) = ssim_terms(g.constant(a), g.constant(b));
    Ok(s.value().mean().clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(&[3, 8, 8], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_INFINITY);
        let b = a.map(|v| v + 10.0 / 255.0);
        let want = 20.0 * 25.5f64.log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        assert!((want - 28.13).abs() < 0.005);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let n = Tensor::uniform(&[3, 8, 8], -amp, amp, &mut rng(1));
            let p = psnr(&a, &a.zip_map(&n, |x, y| x + y)).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn gaussian_taps_are_normalized_and_symmetric() {
        let g = gaussian_taps(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert!((g[i] - g[10 - i]).abs() < 1e-18);
        }
        assert!(g[5] > g[4]);
    }

    #[test]
    fn ms_ssim_identity_constant_and_symmetry() {
        let a = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng(2));
        assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
        let zero = Tensor::zeros(&[1, 3, 32, 32]);
        let one = Tensor::ones(&[1, 3, 32, 32]);
        assert!(ms_ssim(&zero, &one).unwrap() < 0.05);
        let b = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng(3));
        assert!((ms_ssim(&a, &b).unwrap() - ms_ssim(&b, &a).unwrap()).abs() < 1e-7);
        assert!(matches!(
            ms_ssim(&Tensor::zeros(&[1, 3, 16, 16]), &Tensor::zeros(&[1, 3, 16, 16])),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn constant_pair_matches_closed_form() {
        // for constants every variance vanishes: cs = 1, luminance = C1 / (1 + C1)
        let zero = Tensor::zeros(&[1, 1, 32, 32]);
        let one = Tensor::ones(&[1, 1, 32, 32]);
        let total: f64 = MS_SSIM_WEIGHTS[..3].iter().sum();
        let want = (SSIM_C1 / (1.0 + SSIM_C1)).powf(MS_SSIM_WEIGHTS[2] / total);
        assert!((ms_ssim(&zero, &one).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_in_unit_interval() {
        let a = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng(4));
        let b = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng(5));
        let s = ssim(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_gradient_matches_finite_differences() {
        let a = Tensor::uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut rng(6));
        let b = a.zip_map(&Tensor::uniform(&[1, 1, 32, 32], -0.2, 0.2, &mut rng(7)), |x, y| {
            (x + y).clamp(0.0, 1.0)
        });
        let report = check(
            &[a, b],
            |_, v| ms_ssim_var(v[0], v[1]).unwrap(),
            &GradCheckOptions::default(),
        );
        assert!(report.passes(1e-3), "{report:?}");
    }
}
