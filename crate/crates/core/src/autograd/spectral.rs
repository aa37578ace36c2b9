use num_complex::Complex64;

use super::Var;
use crate::tensor::Tensor;
use crate::wavelet::{self, fft2_inplace, phase_of, real_plane_spectrum, self_conjugate};

impl<'g> Var<'g> {
    /// Haar analysis into stacked `(B, 4C, H/2, W/2)` subbands `[LL|HL|LH|HH]`.
    ///
    /// Panics on odd spatial dims; validate with [`wavelet::dwt2_stacked`]
    /// semantics at the call site.
    pub fn dwt2(self) -> Var<'g> {
        let out = wavelet::dwt2_stacked(&self.value()).unwrap_or_else(|e| panic!("{e}"));
        // orthonormal: the adjoint is the inverse
        self.graph.op(out, &[self], |g| {
            vec![Some(wavelet::idwt2_stacked(g).expect("idwt2 grad"))]
        })
    }

    /// Inverse of [`Var::dwt2`].
    pub fn idwt2(self) -> Var<'g> {
        let out = wavelet::idwt2_stacked(&self.value()).unwrap_or_else(|e| panic!("{e}"));
        self.graph.op(out, &[self], |g| {
            vec![Some(wavelet::dwt2_stacked(g).expect("dwt2 grad"))]
        })
    }

    /// Per-channel Fourier amplitude and phase, stacked as `(B, 2C, H, W)`
    /// with amplitudes first.
    pub fn amp_phase(self) -> Var<'g> {
        let xv = self.value();
        let (b, c, h, w) = xv.dims4().expect("amp_phase");
        let hw = h * w;
        let mut spectra: Vec<Vec<Complex64>> = Vec::with_capacity(b * c);
        let mut out = vec![0.0; b * 2 * c * hw];
        for (p, plane) in xv.data().chunks(hw).enumerate() {
            let (bi, ci) = (p / c, p % c);
            let spec = real_plane_spectrum(plane, h, w);
            let a0 = (bi * 2 * c + ci) * hw;
            let p0 = (bi * 2 * c + c + ci) * hw;
            for (k, z) in spec.iter().enumerate() {
                out[a0 + k] = z.norm();
                out[p0 + k] = phase_of(*z);
            }
            spectra.push(spec);
        }
        self.graph
            .op(Tensor::from_parts(vec![b, 2 * c, h, w], out), &[self], move |g| {
                let gd = g.data();
                let mut gx = Vec::with_capacity(b * c * hw);
                for (p, spec) in spectra.iter().enumerate() {
                    let (bi, ci) = (p / c, p % c);
                    let a0 = (bi * 2 * c + ci) * hw;
                    let p0 = (bi * 2 * c + c + ci) * hw;
                    let mut buf = vec![Complex64::new(0.0, 0.0); hw];
                    for ky in 0..h {
                        for kx in 0..w {
                            let k = ky * w + kx;
                            let z = spec[k];
                            let a2 = z.norm_sqr();
                            if a2 < 1e-24 {
                                continue;
                            }
                            let a = a2.sqrt();
                            let (ga, gp) = (gd[a0 + k], gd[p0 + k]);
                            let dre = ga * z.re / a - gp * z.im / a2;
                            let dim = if self_conjugate(ky, kx, h, w) {
                                0.0
                            } else {
                                ga * z.im / a + gp * z.re / a2
                            };
                            buf[k] = Complex64::new(dre, dim);
                        }
                    }
                    fft2_inplace(&mut buf, h, w, true);
                    gx.extend(buf.iter().map(|z| z.re));
                }
                vec![Some(Tensor::from_parts(vec![b, c, h, w], gx))]
            })
    }

    /// Real part of the inverse transform of `amplitude * exp(i * phase)`.
    ///
    /// Unlike [`wavelet::recompose`] the imaginary residue is dropped without
    /// a check; learned spectral maps need not preserve exact conjugate
    /// symmetry at the self-conjugate bins.
    pub fn recompose_real(amplitude: Var<'g>, phase: Var<'g>) -> Var<'g> {
        let av = amplitude.value();
        let pv = phase.value();
        let (re, _) = wavelet::inverse_complex(&av, &pv).unwrap_or_else(|e| panic!("{e}"));
        let (_, _, h, w) = av.dims4().expect("recompose_real");
        let hw = h * w;
        amplitude.graph.op(re, &[amplitude, phase], move |g| {
            let norm = 1.0 / hw as f64;
            let mut ga = Vec::with_capacity(g.len());
            let mut gp = Vec::with_capacity(g.len());
            for ((gplane, aplane), pplane) in g.data().chunks(hw).zip(av.data().chunks(hw)).zip(pv.data().chunks(hw)) {
                let mut buf: Vec<Complex64> = gplane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft2_inplace(&mut buf, h, w, false);
                for ((z, &a), &t) in buf.iter().zip(aplane).zip(pplane) {
                    let (dre, dim) = (z.re * norm, z.im * norm);
                    let (s, c) = t.sin_cos();
                    ga.push(dre * c + dim * s);
                    gp.push(a * (dim * c - dre * s));
                }
            }
            vec![
                Some(Tensor::from_parts(av.shape().to_vec(), ga)),
                Some(Tensor::from_parts(av.shape().to_vec(), gp)),
            ]
        })
    }
}
