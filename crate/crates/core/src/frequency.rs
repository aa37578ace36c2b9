//! Degradation-aware frequency modulation.
//!
//! The feature map is split by one Haar level. The LL band is separated by a
//! learned, input-conditioned low-pass filter into a smooth part `ℱ_l` and a
//! residual `ℱ_h = LL − ℱ_l`. LL and `ℱ_l` are fused in the Fourier domain
//! (amplitude with amplitude, phase with phase); the three detail bands are
//! rescaled by a channel gate computed from `ℱ_h`. An inverse Haar step, a
//! zero-initialized projection and a residual add close the block.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, Ctx, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::wavelet::real_plane_spectrum;

/// Output of the frequency self-mining step.
pub struct MinedFrequencies<'g> {
    /// `ℱ_l`, the locally smoothed LL band.
    pub low: Var<'g>,
    /// `ℱ_h = LL − ℱ_l`.
    pub high: Var<'g>,
    /// Per-sample convex filter taps, `(B, C, k²)`.
    pub filter_weights: Var<'g>,
}

/// Splits `f_ll` with given per-channel filter taps `(B, C, k²)`.
pub fn mine_with_weights<'g>(f_ll: Var<'g>, weights: Var<'g>, k: usize) -> Result<MinedFrequencies<'g>> {
    if k % 2 == 0 {
        return Err(Error::param(format!("filter size must be odd, got {k}")));
    }
    let s = f_ll.shape();
    if s.len() != 4 || weights.shape() != [s[0], s[1], k * k] {
        return Err(Error::shape(format!(
            "filter taps {:?} do not match features {s:?} with k={k}",
            weights.shape()
        )));
    }
    if k / 2 >= s[2] || k / 2 >= s[3] {
        return Err(Error::shape(format!(
            "reflect padding {k}x{k} needs spatial dims > {}",
            k / 2
        )));
    }
    let low = f_ll.local_filter(weights, k);
    let high = f_ll.sub(low);
    Ok(MinedFrequencies {
        low,
        high,
        filter_weights: weights,
    })
}

/// Frequency self-mining: `W = softmax_k²(Norm(Conv1x1(GAP(f_ll))))`.
///
/// The normalization is layer-style over the pooled `C·k²` vector, for every
/// batch size, so training and inference compute the same function.
#[derive(Clone, Debug)]
pub struct Fsb {
    pub proj: Linear,
    pub norm: ChannelNorm,
    pub k: usize,
    pub channels: usize,
}

impl Fsb {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::param(format!("filter size must be odd, got {k}")));
        }
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels * k * k, true, rng),
            norm: ChannelNorm::new(store, &format!("{name}.norm"), channels * k * k),
            k,
            channels,
        })
    }

    pub fn filter_weights<'g>(&self, ctx: &Ctx<'g>, f_ll: Var<'g>) -> Var<'g> {
        let b = f_ll.shape()[0];
        let taps = self.k * self.k;
        let logits = self.proj.forward(ctx, f_ll.mean_spatial());
        // a one-tap filter is the identity; normalizing a width-C vector is not needed
        let logits = if taps == 1 {
            logits
        } else {
            self.norm.forward(ctx, logits)
        };
        logits.reshape(&[b, self.channels, taps]).softmax()
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, f_ll: Var<'g>) -> Result<MinedFrequencies<'g>> {
        let w = self.filter_weights(ctx, f_ll);
        mine_with_weights(f_ll, w, self.k)
    }
}

/// Fourier amplitude/phase fusion of two same-shape maps.
///
/// `FuseA` and `FuseΦ` are bias-free 1x1 maps from the stacked `2C` spectra to
/// `C`; both start as `[I, 0]`, i.e. selecting the first operand.
#[derive(Clone, Debug)]
pub struct SpectralFusion {
    pub fuse_amp: Conv2d,
    pub fuse_phase: Conv2d,
    pub channels: usize,
}

/// `(C, 2C)` matrix `[I, 0]`.
pub fn select_first(channels: usize) -> Tensor {
    Tensor::from_fn(&[channels, 2 * channels], |i| {
        let (r, c) = (i / (2 * channels), i % (2 * channels));
        if r == c {
            1.0
        } else {
            0.0
        }
    })
}

impl SpectralFusion {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            fuse_amp: Conv2d::pointwise_with(store, &format!("{name}.amp"), select_first(channels), false)?,
            fuse_phase: Conv2d::pointwise_with(store, &format!("{name}.phase"), select_first(channels), false)?,
            channels,
        })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, f_ll: Var<'g>, f_l: Var<'g>) -> Result<Var<'g>> {
        if f_ll.shape() != f_l.shape() {
            return Err(Error::shape(format!(
                "spectral fusion operands differ: {:?} vs {:?}",
                f_ll.shape(),
                f_l.shape()
            )));
        }
        let c = self.channels;
        let s1 = f_ll.amp_phase();
        let s2 = f_l.amp_phase();
        let amps = Var::concat(&[s1.narrow(1, 0, c), s2.narrow(1, 0, c)], 1);
        let phases = Var::concat(&[s1.narrow(1, c, c), s2.narrow(1, c, c)], 1);
        let amp = self.fuse_amp.forward(ctx, amps).relu();
        let phase = self.fuse_phase.forward(ctx, phases).wrap_angle();
        Ok(Var::recompose_real(amp, phase))
    }
}

/// Channel gate over the stacked detail bands: `sigmoid(W·GAP(ℱ_h) + b)`,
/// width `3C`. `W` and `b` start at zero, so the initial gate is 0.5.
#[derive(Clone, Debug)]
pub struct HighFreqGate {
    pub proj: Linear,
    pub channels: usize,
}

impl HighFreqGate {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            proj: Linear::zeros(store, &format!("{name}.proj"), channels, 3 * channels, true),
            channels,
        }
    }

    /// Gate logits `(B, 3C)`.
    pub fn logits<'g>(&self, ctx: &Ctx<'g>, f_h: Var<'g>) -> Var<'g> {
        self.proj.forward(ctx, f_h.mean_spatial())
    }

    /// `details` is `(B, 3C, h, w)` stacked as `[HL | LH | HH]`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, f_h: Var<'g>, details: Var<'g>) -> Result<Var<'g>> {
        let logits = self.logits(ctx, f_h);
        apply_gate(logits, details, f_h.shape())
    }
}

/// `sigmoid(logits)` broadcast over the spatial dims of `details`.
pub fn apply_gate<'g>(logits: Var<'g>, details: Var<'g>, f_h_shape: Vec<usize>) -> Result<Var<'g>> {
    let ds = details.shape();
    let ls = logits.shape();
    if ds.len() != 4 || ls != [ds[0], ds[1]] || f_h_shape.len() != 4 || f_h_shape[2..] != ds[2..] {
        return Err(Error::shape(format!(
            "gate {ls:?}, detail bands {ds:?} and ℱ_h {f_h_shape:?} are incompatible"
        )));
    }
    Ok(details.mul(logits.sigmoid().reshape(&[ds[0], ds[1], 1, 1])))
}

/// Intermediate maps of one forward pass, detached.
#[derive(Clone, Debug)]
pub struct DafmmTrace {
    pub ll: Tensor,
    pub low: Tensor,
    pub high: Tensor,
    pub filter_weights: Tensor,
    pub gate: Tensor,
}

/// The full module. Prompt conditioning is a predicted channel-wise affine,
/// `x ⊙ (1 + scale(𝒫)) + shift(𝒫)`, applied before the wavelet split.
#[derive(Clone, Debug)]
pub struct Dafmm {
    pub scale: Linear,
    pub shift: Linear,
    pub fsb: Fsb,
    pub fusion: SpectralFusion,
    pub gate: HighFreqGate,
    pub out: Conv2d,
    pub channels: usize,
}

impl Dafmm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        prompt_dim: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            scale: Linear::zeros(store, &format!("{name}.scale"), prompt_dim, channels, true),
            shift: Linear::zeros(store, &format!("{name}.shift"), prompt_dim, channels, true),
            fsb: Fsb::new(store, &format!("{name}.fsb"), channels, k, rng)?,
            fusion: SpectralFusion::new(store, &format!("{name}.fusion"), channels)?,
            gate: HighFreqGate::new(store, &format!("{name}.gate"), channels),
            out: Conv2d::pointwise_zeros(store, &format!("{name}.out"), channels, channels),
            channels,
        })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, feat: Var<'g>, prompt: Var<'g>) -> Result<Var<'g>> {
        self.forward_traced(ctx, feat, prompt).map(|(y, _)| y)
    }

    pub fn forward_traced<'g>(&self, ctx: &Ctx<'g>, feat: Var<'g>, prompt: Var<'g>) -> Result<(Var<'g>, DafmmTrace)> {
        let s = feat.shape();
        let c = self.channels;
        if s.len() != 4 || s[1] != c || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape(format!(
                "frequency module expects (B, {c}, even H, even W), got {s:?}"
            )));
        }
        if prompt.shape() != [s[0], self.scale.in_dim] {
            return Err(Error::shape(format!(
                "prompt must be (B, {}), got {:?}",
                self.scale.in_dim,
                prompt.shape()
            )));
        }
        let b = s[0];
        let sc = self.scale.forward(ctx, prompt).add_scalar(1.0).reshape(&[b, c, 1, 1]);
        let sh = self.shift.forward(ctx, prompt).reshape(&[b, c, 1, 1]);
        let x = feat.mul(sc).add(sh);

        let bands = x.dwt2();
        let ll = bands.narrow(1, 0, c);
        let details = bands.narrow(1, c, 3 * c);
        let mined = self.fsb.forward(ctx, ll)?;
        let low = self.fusion.forward(ctx, ll, mined.low)?;
        let logits = self.gate.logits(ctx, mined.high);
        let high = apply_gate(logits, details, mined.high.shape())?;
        let rec = Var::concat(&[low, high], 1).idwt2();
        let y = feat.add(self.out.forward(ctx, rec));
        let trace = DafmmTrace {
            ll: (*ll.value()).clone(),
            low: (*mined.low.value()).clone(),
            high: (*mined.high.value()).clone(),
            filter_weights: (*mined.filter_weights.value()).clone(),
            gate: (*logits.sigmoid().value()).clone(),
        };
        Ok((y, trace))
    }
}

/// Centered `log(1 + |F|)` of one `(H, W)` plane, scaled to [0, 1], for
/// viewing spectra as images.
pub fn log_amplitude_image(plane: &Tensor) -> Result<Tensor> {
    let (h, w) = plane.dims2()?;
    let spec = real_plane_spectrum(plane.data(), h, w);
    let mut out = vec![0.0; h * w];
    for ky in 0..h {
        for kx in 0..w {
            // shift DC to the centre
            let (sy, sx) = ((ky + h / 2) % h, (kx + w / 2) % w);
            out[sy * w + sx] = spec[ky * w + kx].norm().ln_1p();
        }
    }
    let m = out.iter().cloned().fold(0.0, f64::max);
    if m > 0.0 {
        out.iter_mut().for_each(|v| *v /= m);
    }
    Tensor::new(&[h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{pad_index, Graph, PadMode};
    use crate::gradcheck::{check, probe, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn one_tap_filter_is_identity() {
        let mut store = ParamStore::new();
        let fsb = Fsb::new(&mut store, "f", 3, 1, &mut rng(0)).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let x = g.leaf(Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng(1)));
        let m = fsb.forward(&ctx, x).unwrap();
        assert!(m.filter_weights.value().data().iter().all(|&w| w == 1.0));
        assert!(m.low.value().max_abs_diff(&x.value()) == 0.0);
        assert!(m.high.value().max_abs() == 0.0);
        assert!(Fsb::new(&mut store, "e", 3, 2, &mut rng(0)).is_err());
    }

    #[test]
    fn constants_pass_through_any_convex_filter() {
        let mut store = ParamStore::new();
        let fsb = Fsb::new(&mut store, "f", 2, 3, &mut rng(2)).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let x = g.leaf(Tensor::full(&[1, 2, 6, 6], 0.37));
        let m = fsb.forward(&ctx, x).unwrap();
        assert!(m.low.value().data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        assert!(m.high.value().max_abs() < 1e-12);
    }

    #[test]
    fn uniform_taps_equal_reflect_box_filter() {
        let g = Graph::new();
        let x = Tensor::randn(&[1, 1, 5, 7], 1.0, &mut rng(3));
        let w = g.leaf(Tensor::full(&[1, 1, 9], 1.0 / 9.0));
        let m = mine_with_weights(g.leaf(x.clone()), w, 3).unwrap();
        for y in 0..5 {
            for xx in 0..7 {
                let mut s = 0.0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let sy = pad_index(y as isize + dy, 5, PadMode::Reflect).unwrap();
                        let sx = pad_index(xx as isize + dx, 7, PadMode::Reflect).unwrap();
                        s += x.get(&[0, 0, sy, sx]) / 9.0;
                    }
                }
                assert!((m.low.value().get(&[0, 0, y, xx]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mined_parts_sum_to_input_and_taps_are_convex() {
        let mut store = ParamStore::new();
        let fsb = Fsb::new(&mut store, "f", 4, 3, &mut rng(4)).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let x = g.leaf(Tensor::randn(&[2, 4, 6, 6], 1.0, &mut rng(5)));
        let m = fsb.forward(&ctx, x).unwrap();
        let sum = m.low.add(m.high);
        assert!(sum.value().max_abs_diff(&x.value()) < 1e-12);
        for row in m.filter_weights.value().data().chunks(9) {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(m.low.value().max_abs() <= x.value().max_abs() + 1e-12);
    }

    /// Naive 2-D DFT recompose of a real signal from amplitude and phase.
    fn naive_recompose(amp: &[f64], phase: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for ky in 0..h {
                    for kx in 0..w {
                        let ang = phase[ky * w + kx]
                            + std::f64::consts::TAU * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                        s += amp[ky * w + kx] * ang.cos();
                    }
                }
                out[y * w + x] = s / (h * w) as f64;
            }
        }
        out
    }

    fn naive_spectrum(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut a = vec![0.0; h * w];
        let mut p = vec![0.0; h * w];
        for ky in 0..h {
            for kx in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let ang = -std::f64::consts::TAU * ((ky * y) as f64 / h as f64 + (kx * xx) as f64 / w as f64);
                        re += x[y * w + xx] * ang.cos();
                        im += x[y * w + xx] * ang.sin();
                    }
                }
                a[ky * w + kx] = (re * re + im * im).sqrt();
                p[ky * w + kx] = im.atan2(re);
            }
        }
        (a, p)
    }

    #[test]
    fn identity_fusion_returns_first_operand() {
        let mut store = ParamStore::new();
        let fusion = SpectralFusion::new(&mut store, "s", 2).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let a = g.leaf(Tensor::randn(&[1, 2, 4, 6], 1.0, &mut rng(6)));
        let b = g.leaf(Tensor::randn(&[1, 2, 4, 6], 1.0, &mut rng(7)));
        let out = fusion.forward(&ctx, a, b).unwrap();
        assert!(out.value().max_abs_diff(&a.value()) < 1e-5);
        // identical operands, convex fusion
        let w = Tensor::new(&[2, 4], vec![0.3, 0.0, 0.7, 0.0, 0.0, 0.6, 0.0, 0.4]).unwrap();
        store
            .set(fusion.fuse_amp.weight, w.clone().reshape(&[2, 4, 1, 1]).unwrap())
            .unwrap();
        store
            .set(fusion.fuse_phase.weight, w.reshape(&[2, 4, 1, 1]).unwrap())
            .unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let a = g.leaf((*a.value()).clone());
        let out = fusion.forward(&ctx, a, a).unwrap();
        assert!(out.value().max_abs_diff(&a.value()) < 1e-5);
        assert!(fusion.forward(&ctx, a, g.leaf(Tensor::zeros(&[1, 2, 4, 4]))).is_err());
    }

    #[test]
    fn amplitude_of_second_phase_of_first_matches_oracle() {
        let mut store = ParamStore::new();
        let fusion = SpectralFusion::new(&mut store, "s", 1).unwrap();
        store
            .set(
                fusion.fuse_amp.weight,
                Tensor::new(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap(),
            )
            .unwrap();
        let a = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i * 7) % 5) as f64 / 4.0);
        let b = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i * 3) % 4) as f64 / 3.0);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let out = fusion.forward(&ctx, g.leaf(a.clone()), g.leaf(b.clone())).unwrap();
        let (_, pa) = naive_spectrum(a.data(), 4, 4);
        let (ab, _) = naive_spectrum(b.data(), 4, 4);
        let want = naive_recompose(&ab, &pa, 4, 4);
        for (o, w) in out.value().data().iter().zip(&want) {
            assert!((o - w).abs() < 1e-9, "{o} vs {w}");
        }
    }

    #[test]
    fn gate_examples() {
        let g = Graph::new();
        let d = g.leaf(Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng(8)));
        let fh = vec![1, 1, 2, 2];
        let half = apply_gate(g.leaf(Tensor::zeros(&[1, 3])), d, fh.clone()).unwrap();
        assert!(half.value().max_abs_diff(&d.value().map(|v| 0.5 * v)) < 1e-15);
        let sat = apply_gate(g.leaf(Tensor::full(&[1, 3], 10.0)), d, fh.clone()).unwrap();
        for (o, i) in sat.value().data().iter().zip(d.value().data()) {
            assert!(((o - i) / i).abs() < 1e-4);
        }
        let z = apply_gate(
            g.leaf(Tensor::full(&[1, 3], 3.0)),
            g.leaf(Tensor::zeros(&[1, 3, 2, 2])),
            fh,
        )
        .unwrap();
        assert_eq!(z.value().max_abs(), 0.0);
        assert!(apply_gate(g.leaf(Tensor::zeros(&[1, 3])), d, vec![1, 1, 4, 4]).is_err());
    }

    fn module(c: usize, seed: u64, store: &mut ParamStore) -> Dafmm {
        Dafmm::new(store, "d", c, 6, 3, &mut rng(seed)).unwrap()
    }

    #[test]
    fn identity_at_initialization_and_shape() {
        let mut store = ParamStore::new();
        let m = module(3, 9, &mut store);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let x = g.leaf(Tensor::randn(&[2, 3, 8, 12], 1.0, &mut rng(10)));
        let p = g.leaf(Tensor::randn(&[2, 6], 1.0, &mut rng(11)));
        let y = m.forward(&ctx, x, p).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 8, 12]);
        assert!(y.value().max_abs_diff(&x.value()) < 1e-4);
        assert!(m.forward(&ctx, g.leaf(Tensor::zeros(&[2, 3, 7, 8])), p).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let m = module(2, 12, &mut store);
        // move every zero-initialized map away from zero so all paths carry gradient
        let mut r = rng(13);
        for v in store.values_mut() {
            let noise = Tensor::randn(v.shape(), 0.2, &mut r);
            v.add_assign(&noise);
        }
        let x = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut rng(14));
        let p = Tensor::randn(&[1, 6], 1.0, &mut rng(15));
        let mut inputs = vec![x, p];
        inputs.extend(store.values().iter().cloned());
        let report = check(
            &inputs,
            |g, vars| {
                let ctx = Ctx::from_vars(g, vars[2..].to_vec());
                probe(m.forward(&ctx, vars[0], vars[1]).unwrap())
            },
            &GradCheckOptions::default(),
        );
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn log_amplitude_is_centered_and_scaled() {
        let img = log_amplitude_image(&Tensor::full(&[4, 4], 1.0)).unwrap();
        assert_eq!(img.get(&[2, 2]), 1.0);
        assert_eq!(img.sum(), 1.0);
    }
}
