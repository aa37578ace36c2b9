//! Orthonormal 2-D Haar wavelet and Fourier amplitude/phase transforms.
//!
//! Subbands are stored stacked along the channel axis as
//! `[LL | HL | LH | HH]`, each `C` channels wide, so the high-frequency
//! concatenation is a single contiguous slice. Fourier transforms are
//! unnormalized forward and `1/(H*W)` inverse.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest imaginary residue [`recompose`] tolerates before reporting an
/// inconsistent amplitude/phase pair.
pub const RECOMPOSE_IMAG_TOL: f64 = 1e-4;

/// The four half-resolution Haar subbands of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletSubbands {
    pub ll: Tensor,
    pub hl: Tensor,
    pub lh: Tensor,
    pub hh: Tensor,
}

impl WaveletSubbands {
    pub fn from_stacked(stacked: &Tensor) -> Result<Self> {
        let (_, c4, _, _) = stacked.dims4()?;
        if c4 % 4 != 0 {
            return Err(Error::shape(format!(
                "stacked subbands need a multiple of 4 channels, got {c4}"
            )));
        }
        let c = c4 / 4;
        Ok(Self {
            ll: stacked.narrow(1, 0, c),
            hl: stacked.narrow(1, c, c),
            lh: stacked.narrow(1, 2 * c, c),
            hh: stacked.narrow(1, 3 * c, c),
        })
    }

    pub fn to_stacked(&self) -> Result<Tensor> {
        let s = self.ll.shape();
        for (name, t) in [("hl", &self.hl), ("lh", &self.lh), ("hh", &self.hh)] {
            if t.shape() != s {
                return Err(Error::shape(format!(
                    "subband {name} has shape {:?}, ll has {:?}",
                    t.shape(),
                    s
                )));
            }
        }
        self.ll.dims4()?;
        Ok(Tensor::concat(&[&self.ll, &self.hl, &self.lh, &self.hh], 1))
    }

    pub fn energy(&self) -> f64 {
        self.ll.sq_norm() + self.hl.sq_norm() + self.lh.sq_norm() + self.hh.sq_norm()
    }
}

/// Forward Haar transform into the stacked `(B, 4C, H/2, W/2)` layout.
pub fn dwt2_stacked(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "dwt2 needs even, nonzero spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let q = ho * wo;
    let mut out = vec![0.0; b * 4 * c * q];
    let d = x.data();
    for bi in 0..b {
        for ci in 0..c {
            let src = &d[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let band = |k: usize| ((bi * 4 + k) * c + ci) * q;
            let (ll, hl, lh, hh) = (band(0), band(1), band(2), band(3));
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    let (a, bb, cc, dd) = (src[i], src[i + 1], src[i + w], src[i + w + 1]);
                    let o = y * wo + xx;
                    out[ll + o] = 0.5 * (a + bb + cc + dd);
                    out[hl + o] = 0.5 * (a - bb + cc - dd);
                    out[lh + o] = 0.5 * (a + bb - cc - dd);
                    out[hh + o] = 0.5 * (a - bb - cc + dd);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, 4 * c, ho, wo], out))
}

/// Inverse of [`dwt2_stacked`].
pub fn idwt2_stacked(s: &Tensor) -> Result<Tensor> {
    let (b, c4, ho, wo) = s.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::shape(format!(
            "idwt2 needs a multiple of 4 stacked channels, got {c4}"
        )));
    }
    let c = c4 / 4;
    let (h, w) = (2 * ho, 2 * wo);
    let q = ho * wo;
    let mut out = vec![0.0; b * c * h * w];
    let d = s.data();
    for bi in 0..b {
        for ci in 0..c {
            let dst = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let band = |k: usize| ((bi * 4 + k) * c + ci) * q;
            let (ll, hl, lh, hh) = (band(0), band(1), band(2), band(3));
            for y in 0..ho {
                for xx in 0..wo {
                    let o = y * wo + xx;
                    let (l, p, v, g) = (d[ll + o], d[hl + o], d[lh + o], d[hh + o]);
                    let i = 2 * y * w + 2 * xx;
                    dst[i] = 0.5 * (l + p + v + g);
                    dst[i + 1] = 0.5 * (l - p + v - g);
                    dst[i + w] = 0.5 * (l + p - v - g);
                    dst[i + w + 1] = 0.5 * (l - p - v + g);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, h, w], out))
}

/// Orthonormal 2-D Haar analysis of a `(B, C, H, W)` map with even `H`, `W`.
pub fn dwt2(x: &Tensor) -> Result<WaveletSubbands> {
    WaveletSubbands::from_stacked(&dwt2_stacked(x)?)
}

/// Exact inverse of [`dwt2`].
pub fn idwt2(s: &WaveletSubbands) -> Result<Tensor> {
    idwt2_stacked(&s.to_stacked()?)
}

/// Fourier modulus and argument of a real feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Nonnegative, same shape as the source.
    pub amplitude: Tensor,
    /// In (-pi, pi].
    pub phase: Tensor,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place unnormalized 2-D DFT of an `h x w` row-major plane.
pub(crate) fn fft2_inplace(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let row = if inverse {
            p.plan_fft_inverse(w)
        } else {
            p.plan_fft_forward(w)
        };
        row.process(buf);
        let col = if inverse {
            p.plan_fft_inverse(h)
        } else {
            p.plan_fft_forward(h)
        };
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = buf[y * w + x];
            }
        }
        col.process(&mut t);
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = t[x * h + y];
            }
        }
    });
}

/// True when frequency `(ky, kx)` is its own negation (DC and Nyquist bins).
#[inline]
pub(crate) fn self_conjugate(ky: usize, kx: usize, h: usize, w: usize) -> bool {
    (ky == 0 || 2 * ky == h) && (kx == 0 || 2 * kx == w)
}

/// Forward transform of one real plane, with exact zero imaginary parts at
/// the self-conjugate bins so their phase is exactly 0 or pi.
pub(crate) fn real_plane_spectrum(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, h, w, false);
    for ky in 0..h {
        for kx in 0..w {
            if self_conjugate(ky, kx, h, w) {
                buf[ky * w + kx].im = 0.0;
            }
        }
    }
    buf
}

pub(crate) fn phase_of(z: Complex64) -> f64 {
    let p = z.im.atan2(z.re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Per-channel 2-D DFT, split into amplitude and phase.
pub fn amp_phase(x: &Tensor) -> Result<Spectrum> {
    let (_, _, h, w) = x.dims4()?;
    let hw = h * w;
    let mut amp = Vec::with_capacity(x.len());
    let mut phase = Vec::with_capacity(x.len());
    for plane in x.data().chunks(hw) {
        for z in real_plane_spectrum(plane, h, w) {
            amp.push(z.norm());
            phase.push(phase_of(z));
        }
    }
    Ok(Spectrum {
        amplitude: Tensor::from_parts(x.shape().to_vec(), amp),
        phase: Tensor::from_parts(x.shape().to_vec(), phase),
    })
}

/// Inverse transform of `amplitude * exp(i * phase)` per channel plane,
/// returning real and imaginary parts.
pub(crate) fn inverse_complex(amp: &Tensor, phase: &Tensor) -> Result<(Tensor, Tensor)> {
    if amp.shape() != phase.shape() {
        return Err(Error::shape(format!(
            "amplitude {:?} and phase {:?} differ",
            amp.shape(),
            phase.shape()
        )));
    }
    let (_, _, h, w) = amp.dims4()?;
    let hw = h * w;
    let norm = 1.0 / hw as f64;
    let mut re = Vec::with_capacity(amp.len());
    let mut im = Vec::with_capacity(amp.len());
    for (a, p) in amp.data().chunks(hw).zip(phase.data().chunks(hw)) {
        let mut buf: Vec<Complex64> = a.iter().zip(p).map(|(&m, &t)| Complex64::from_polar(m, t)).collect();
        fft2_inplace(&mut buf, h, w, true);
        re.extend(buf.iter().map(|z| z.re * norm));
        im.extend(buf.iter().map(|z| z.im * norm));
    }
    Ok((
        Tensor::from_parts(amp.shape().to_vec(), re),
        Tensor::from_parts(amp.shape().to_vec(), im),
    ))
}

/// Real feature map whose spectrum is `s`.
///
/// Fails with a numerical error when the inverse transform has an imaginary
/// residue above [`RECOMPOSE_IMAG_TOL`], i.e. when the amplitude/phase pair
/// is not the spectrum of any real signal.
pub fn recompose(s: &Spectrum) -> Result<Tensor> {
    if s.amplitude.data().iter().any(|&a| a < 0.0) {
        return Err(Error::param("amplitude must be nonnegative"));
    }
    let (re, im) = inverse_complex(&s.amplitude, &s.phase)?;
    let residue = im.max_abs();
    if residue >= RECOMPOSE_IMAG_TOL {
        return Err(Error::Numerical(format!(
            "inverse transform has imaginary residue {residue:.3e}"
        )));
    }
    Ok(re)
}

/// Fraction of spectral energy at normalized radius above `cutoff`
/// (radius 1 is the Nyquist corner along one axis).
pub fn high_frequency_energy_fraction(x: &Tensor, cutoff: f64) -> Result<f64> {
    let (_, _, h, w) = x.dims4()?;
    let mut hi = 0.0;
    let mut total = 0.0;
    for plane in x.data().chunks(h * w) {
        let spec = real_plane_spectrum(plane, h, w);
        for ky in 0..h {
            for kx in 0..w {
                let fy = signed_freq(ky, h) / (h as f64 / 2.0);
                let fx = signed_freq(kx, w) / (w as f64 / 2.0);
                let r = (fy * fy + fx * fx).sqrt() / std::f64::consts::SQRT_2;
                let e = spec[ky * w + kx].norm_sqr();
                total += e;
                if r > cutoff {
                    hi += e;
                }
            }
        }
    }
    Ok(if total > 0.0 { hi / total } else { 0.0 })
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if 2 * k <= n {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn haar_block_values() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = dwt2(&x).unwrap();
        assert_eq!(s.ll.data(), &[5.0]);
        assert_eq!(s.hl.data(), &[-1.0]);
        assert_eq!(s.lh.data(), &[-2.0]);
        assert_eq!(s.hh.data(), &[0.0]);
    }

    #[test]
    fn constant_image_has_only_ll() {
        let x = Tensor::full(&[1, 2, 4, 6], 0.3);
        let s = dwt2(&x).unwrap();
        assert!(s.ll.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        for t in [&s.hl, &s.lh, &s.hh] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        let back = idwt2(&s).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(matches!(dwt2(&Tensor::zeros(&[1, 1, 3, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn mismatched_subbands_rejected() {
        let mut s = dwt2(&Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        s.hh = Tensor::zeros(&[1, 1, 1, 2]);
        assert!(matches!(idwt2(&s), Err(Error::Shape(_))));
    }

    #[test]
    fn dc_only_spectrum_of_constant() {
        let x = Tensor::full(&[1, 1, 4, 4], 0.5);
        let s = amp_phase(&x).unwrap();
        assert!((s.amplitude.data()[0] - 8.0).abs() < 1e-12);
        assert_eq!(s.phase.data()[0], 0.0);
        assert!(s.amplitude.data()[1..].iter().all(|&a| a < 1e-12));
    }

    #[test]
    fn zeroing_all_but_dc_gives_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let mut s = amp_phase(&x).unwrap();
        for a in &mut s.amplitude.data_mut()[1..] {
            *a = 0.0;
        }
        let y = recompose(&s).unwrap();
        let m = x.mean();
        assert!(y.data().iter().all(|&v| (v - m).abs() < 1e-12));
    }

    #[test]
    fn inconsistent_pair_is_numerical_error() {
        let mut s = amp_phase(&Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        s.amplitude.data_mut()[1] = 1.0;
        assert!(matches!(recompose(&s), Err(Error::Numerical(_))));
    }

    #[test]
    fn smoothing_lowers_high_frequency_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
        let mut y = x.clone();
        for r in 0..16 {
            for c in 0..16 {
                let mut acc = 0.0;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let yy = (r as isize + dy).rem_euclid(16) as usize;
                        let xx = (c as isize + dx).rem_euclid(16) as usize;
                        acc += x.get(&[0, 0, yy, xx]);
                    }
                }
                y.set(&[0, 0, r, c], acc / 9.0);
            }
        }
        let fx = high_frequency_energy_fraction(&x, 0.5).unwrap();
        let fy = high_frequency_energy_fraction(&y, 0.5).unwrap();
        assert!(fy < fx);
    }
}
