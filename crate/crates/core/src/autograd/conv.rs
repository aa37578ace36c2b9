use std::rc::Rc;

use super::Var;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (`... 2 1 | 0 1 2 ...`).
    Reflect,
}

/// Maps a possibly out-of-range coordinate to a source index.
#[inline]
pub fn pad_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n as isize - 1);
            let mut j = i.rem_euclid(period);
            if j >= n as isize {
                j = period - j;
            }
            Some(j as usize)
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    mode: PadMode,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    /// Source offset within a channel plane for output `(oy, ox)` and tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        let y = pad_index(iy, self.h, self.mode)?;
        let x = pad_index(ix, self.w, self.mode)?;
        Some(y * self.w + x)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.taps() + ky * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            cols[row + oy * self.wo + ox] = self.src(oy, ox, ky, kx).map_or(0.0, |s| plane[s]);
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.taps() + ky * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(s) = self.src(oy, ox, ky, kx) {
                                plane[s] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    /// 2-D cross-correlation of `(B, Ci, H, W)` with weights `(Co, Ci/groups, kh, kw)`.
    ///
    /// `groups` must be 1 (dense) or equal to `Ci == Co` (depthwise). Bias is
    /// added separately by the caller.
    pub fn conv2d(self, w: Var<'g>, stride: usize, pad: usize, mode: PadMode, groups: usize) -> Var<'g> {
        let xv = self.value();
        let wv = w.value();
        let (b, ci, h, wd) = xv.dims4().expect("conv2d input");
        let (co, cig, kh, kw) = wv.dims4().expect("conv2d weight");
        assert!(stride >= 1);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geo = Geometry {
            c: ci,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
            mode,
        };
        if groups == 1 {
            assert_eq!(cig, ci, "conv2d: weight expects {cig} input channels, got {ci}");
            dense_conv(self, w, xv, wv, b, co, geo)
        } else {
            assert!(
                groups == ci && co == ci && cig == 1,
                "conv2d: only dense or depthwise grouping is supported"
            );
            depthwise_conv(self, w, xv, wv, b, geo)
        }
    }

    /// Per-channel local filtering with sample-dependent convex weights.
    ///
    /// `x` is `(B, C, H, W)`, `weights` is `(B, C, k*k)`; the output at each
    /// pixel is `sum_i weights[b, c, i] * patch_i` over the reflect-padded
    /// `k x k` neighbourhood (stride 1, same size).
    pub fn local_filter(self, weights: Var<'g>, k: usize) -> Var<'g> {
        let xv = self.value();
        let wv = weights.value();
        let (b, c, h, w) = xv.dims4().expect("local_filter input");
        assert_eq!(wv.shape(), &[b, c, k * k], "local_filter weight shape");
        let pad = k / 2;
        let geo = Geometry {
            c: 1,
            h,
            w,
            kh: k,
            kw: k,
            stride: 1,
            pad,
            ho: h,
            wo: w,
            mode: PadMode::Reflect,
        };
        let hw = h * w;
        let taps = k * k;
        let mut out = vec![0.0; b * c * hw];
        let (xd, wd) = (xv.data(), wv.data());
        for p in 0..b * c {
            let plane = &xd[p * hw..(p + 1) * hw];
            let wt = &wd[p * taps..(p + 1) * taps];
            let o = &mut out[p * hw..(p + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let t = wt[ky * k + kx];
                    for oy in 0..h {
                        for ox in 0..w {
                            let s = geo.src(oy, ox, ky, kx).expect("reflect");
                            o[oy * w + ox] += t * plane[s];
                        }
                    }
                }
            }
        }
        self.graph
            .op(Tensor::from_parts(vec![b, c, h, w], out), &[self, weights], move |g| {
                let gd = g.data();
                let (xd, wd) = (xv.data(), wv.data());
                let mut gx = vec![0.0; b * c * hw];
                let mut gw = vec![0.0; b * c * taps];
                for p in 0..b * c {
                    let plane = &xd[p * hw..(p + 1) * hw];
                    let go = &gd[p * hw..(p + 1) * hw];
                    for ky in 0..k {
                        for kx in 0..k {
                            let t = wd[p * taps + ky * k + kx];
                            let mut acc = 0.0;
                            for oy in 0..h {
                                for ox in 0..w {
                                    let s = geo.src(oy, ox, ky, kx).expect("reflect");
                                    acc += go[oy * w + ox] * plane[s];
                                    gx[p * hw + s] += t * go[oy * w + ox];
                                }
                            }
                            gw[p * taps + ky * k + kx] = acc;
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(vec![b, c, h, w], gx)),
                    Some(Tensor::from_parts(vec![b, c, taps], gw)),
                ]
            })
    }
}

fn dense_conv<'g>(
    x: Var<'g>,
    w: Var<'g>,
    xv: Rc<Tensor>,
    wv: Rc<Tensor>,
    b: usize,
    co: usize,
    geo: Geometry,
) -> Var<'g> {
    let k = geo.c * geo.taps();
    let p = geo.ho * geo.wo;
    let in_plane = geo.c * geo.h * geo.w;
    let pointwise = geo.kh == 1 && geo.kw == 1 && geo.stride == 1 && geo.pad == 0;
    let mut out = vec![0.0; b * co * p];
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    for bi in 0..b {
        let xb = &xv.data()[bi * in_plane..(bi + 1) * in_plane];
        let src: &[f64] = if pointwise {
            xb
        } else {
            geo.im2col(xb, &mut cols);
            &cols
        };
        gemm(
            co,
            k,
            p,
            1.0,
            wv.data(),
            false,
            src,
            false,
            0.0,
            &mut out[bi * co * p..(bi + 1) * co * p],
        );
    }
    drop(cols);
    x.graph.op(
        Tensor::from_parts(vec![b, co, geo.ho, geo.wo], out),
        &[x, w],
        move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; b * in_plane];
            let mut gw = vec![0.0; co * k];
            let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
            let mut dcols = vec![0.0; k * p];
            for bi in 0..b {
                let xb = &xv.data()[bi * in_plane..(bi + 1) * in_plane];
                let gb = &gd[bi * co * p..(bi + 1) * co * p];
                let src: &[f64] = if pointwise {
                    xb
                } else {
                    geo.im2col(xb, &mut cols);
                    &cols
                };
                // dW += G_b · colsᵀ
                gemm(co, p, k, 1.0, gb, false, src, true, 1.0, &mut gw);
                let dst = &mut gx[bi * in_plane..(bi + 1) * in_plane];
                if pointwise {
                    gemm(k, co, p, 1.0, wv.data(), true, gb, false, 0.0, dst);
                } else {
                    gemm(k, co, p, 1.0, wv.data(), true, gb, false, 0.0, &mut dcols);
                    geo.col2im(&dcols, dst);
                }
            }
            vec![
                Some(Tensor::from_parts(vec![b, geo.c, geo.h, geo.w], gx)),
                Some(Tensor::from_parts(wv.shape().to_vec(), gw)),
            ]
        },
    )
}

/// Source positions along one axis for a fixed tap: `map[o]` is the input
/// index read by output `o`, and outputs `lo..hi` read `o + off` directly
/// (stride 1 only; empty otherwise).
struct AxisTap {
    map: Vec<Option<usize>>,
    lo: usize,
    hi: usize,
    off: usize,
}

impl AxisTap {
    fn new(n_out: usize, n_in: usize, k: usize, stride: usize, pad: usize, mode: PadMode) -> Self {
        let map: Vec<Option<usize>> = (0..n_out)
            .map(|o| pad_index((o * stride + k) as isize - pad as isize, n_in, mode))
            .collect();
        let (mut lo, mut hi, mut off) = (0, 0, 0);
        if stride == 1 {
            // outputs whose source is in range without padding
            lo = pad.saturating_sub(k).min(n_out);
            hi = (n_in + pad).saturating_sub(k).min(n_out).max(lo);
            off = k;
            if lo < hi {
                debug_assert_eq!(map[lo], Some(lo + k - pad));
            }
        }
        Self { map, lo, hi, off }
    }

    /// Input index of output `lo` in the direct range.
    fn start(&self, pad: usize) -> usize {
        self.lo + self.off - pad
    }
}

fn depthwise_conv<'g>(x: Var<'g>, w: Var<'g>, xv: Rc<Tensor>, wv: Rc<Tensor>, b: usize, geo: Geometry) -> Var<'g> {
    let (c, hw, p, taps) = (geo.c, geo.h * geo.w, geo.ho * geo.wo, geo.taps());
    let ys: Vec<AxisTap> = (0..geo.kh)
        .map(|k| AxisTap::new(geo.ho, geo.h, k, geo.stride, geo.pad, geo.mode))
        .collect();
    let xs: Vec<AxisTap> = (0..geo.kw)
        .map(|k| AxisTap::new(geo.wo, geo.w, k, geo.stride, geo.pad, geo.mode))
        .collect();
    let ys = Rc::new(ys);
    let xs = Rc::new(xs);
    let mut out = vec![0.0; b * c * p];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xv.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            let kern = &wv.data()[ci * taps..(ci + 1) * taps];
            let o = &mut out[(bi * c + ci) * p..(bi * c + ci + 1) * p];
            for (ky, yt) in ys.iter().enumerate() {
                for (kx, xt) in xs.iter().enumerate() {
                    let t = kern[ky * geo.kw + kx];
                    for (oy, sy) in yt.map.iter().enumerate() {
                        let Some(sy) = *sy else { continue };
                        let row = &plane[sy * geo.w..(sy + 1) * geo.w];
                        let orow = &mut o[oy * geo.wo..(oy + 1) * geo.wo];
                        let n = xt.hi - xt.lo;
                        let s0 = if n > 0 { xt.start(geo.pad) } else { 0 };
                        for (ov, iv) in orow[xt.lo..xt.hi].iter_mut().zip(&row[s0..s0 + n]) {
                            *ov += t * iv;
                        }
                        for (ox, sx) in xt.map.iter().enumerate() {
                            if ox >= xt.lo && ox < xt.hi {
                                continue;
                            }
                            if let Some(sx) = *sx {
                                orow[ox] += t * row[sx];
                            }
                        }
                    }
                }
            }
        }
    }
    x.graph
        .op(Tensor::from_parts(vec![b, c, geo.ho, geo.wo], out), &[x, w], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; b * c * hw];
            let mut gw = vec![0.0; c * taps];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let plane = &xv.data()[base..base + hw];
                    let gplane = &mut gx[base..base + hw];
                    let go = &gd[(bi * c + ci) * p..(bi * c + ci + 1) * p];
                    for (ky, yt) in ys.iter().enumerate() {
                        for (kx, xt) in xs.iter().enumerate() {
                            let t = wv.data()[ci * taps + ky * geo.kw + kx];
                            let mut acc = 0.0;
                            for (oy, sy) in yt.map.iter().enumerate() {
                                let Some(sy) = *sy else { continue };
                                let row = &plane[sy * geo.w..(sy + 1) * geo.w];
                                let grow = &mut gplane[sy * geo.w..(sy + 1) * geo.w];
                                let gorow = &go[oy * geo.wo..(oy + 1) * geo.wo];
                                let n = xt.hi - xt.lo;
                                let s0 = if n > 0 { xt.start(geo.pad) } else { 0 };
                                let gos = &gorow[xt.lo..xt.hi];
                                for ((gv, iv), gi) in gos.iter().zip(&row[s0..s0 + n]).zip(&mut grow[s0..s0 + n]) {
                                    acc += gv * iv;
                                    *gi += t * gv;
                                }
                                for (ox, sx) in xt.map.iter().enumerate() {
                                    if ox >= xt.lo && ox < xt.hi {
                                        continue;
                                    }
                                    if let Some(sx) = *sx {
                                        let gv = gorow[ox];
                                        acc += gv * row[sx];
                                        grow[sx] += t * gv;
                                    }
                                }
                            }
                            gw[ci * taps + ky * geo.kw + kx] += acc;
                        }
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(vec![b, c, geo.h, geo.w], gx)),
                Some(Tensor::from_parts(wv.shape().to_vec(), gw)),
            ]
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(pad_index(-1, 4, PadMode::Reflect), Some(1));
        assert_eq!(pad_index(-2, 4, PadMode::Reflect), Some(2));
        assert_eq!(pad_index(4, 4, PadMode::Reflect), Some(2));
        assert_eq!(pad_index(5, 4, PadMode::Reflect), Some(1));
        assert_eq!(pad_index(-1, 4, PadMode::Zero), None);
    }

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, mode: PadMode) -> Tensor {
        let (b, ci, h, wd) = x.dims4().unwrap();
        let (co, _, kh, kw) = w.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b, co, ho, wo]);
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if let (Some(y), Some(xx)) = (pad_index(iy, h, mode), pad_index(ix, wd, mode)) {
                                        acc += w.get(&[o, c, ky, kx]) * x.get(&[bi, c, y, xx]);
                                    }
                                }
                            }
                        }
                        out.set(&[bi, o, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dense_conv_matches_naive_loops() {
        let x = Tensor::from_fn(&[2, 3, 6, 5], |i| ((i * 7 % 11) as f64) * 0.1 - 0.5);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 5 % 13) as f64) * 0.05 - 0.3);
        for &(stride, pad, mode) in &[
            (1, 1, PadMode::Zero),
            (2, 1, PadMode::Zero),
            (1, 1, PadMode::Reflect),
            (1, 0, PadMode::Zero),
        ] {
            let g = Graph::inference();
            let y = g
                .constant(x.clone())
                .conv2d(g.constant(w.clone()), stride, pad, mode, 1)
                .value();
            let r = naive_conv(&x, &w, stride, pad, mode);
            assert!(y.max_abs_diff(&r) < 1e-12, "stride {stride} pad {pad} {mode:?}");
        }
    }

    #[test]
    fn depthwise_matches_dense_with_diagonal_weights() {
        let x = Tensor::from_fn(&[1, 2, 5, 5], |i| (i as f64 * 0.3).sin());
        let dw = Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 * 0.9).cos());
        let mut dense = Tensor::zeros(&[2, 2, 3, 3]);
        for c in 0..2 {
            for t in 0..9 {
                dense.set(&[c, c, t / 3, t % 3], dw.get(&[c, 0, t / 3, t % 3]));
            }
        }
        let g = Graph::inference();
        let a = g
            .constant(x.clone())
            .conv2d(g.constant(dw), 1, 1, PadMode::Zero, 2)
            .value();
        let b = g.constant(x).conv2d(g.constant(dense), 1, 1, PadMode::Zero, 1).value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn depthwise_matches_naive_on_edge_geometries() {
        use crate::gradcheck::{check, GradCheckOptions};
        for (kh, kw, stride, pad, mode) in [
            (3, 3, 2, 1, PadMode::Zero),
            (1, 5, 1, 2, PadMode::Reflect),
            (5, 1, 1, 0, PadMode::Zero),
            (3, 3, 1, 1, PadMode::Reflect),
            (7, 7, 1, 3, PadMode::Zero),
        ] {
            let x = Tensor::from_fn(&[2, 2, 6, 7], |i| (i as f64 * 0.37).sin());
            let dw = Tensor::from_fn(&[2, 1, kh, kw], |i| (i as f64 * 0.7).cos());
            let mut dense = Tensor::zeros(&[2, 2, kh, kw]);
            for c in 0..2 {
                for t in 0..kh * kw {
                    dense.set(&[c, c, t / kw, t % kw], dw.get(&[c, 0, t / kw, t % kw]));
                }
            }
            let g = Graph::inference();
            let a = g
                .constant(x.clone())
                .conv2d(g.constant(dw.clone()), stride, pad, mode, 2)
                .value();
            let r = naive_conv(&x, &dense, stride, pad, mode);
            assert!(a.max_abs_diff(&r) < 1e-12, "{kh}x{kw} s{stride} p{pad} {mode:?}");
            let small = x.narrow(0, 0, 1);
            let report = check(
                &[small, dw],
                |_, v| v[0].conv2d(v[1], stride, pad, mode, 2).square().sum(),
                &GradCheckOptions::default(),
            );
            assert!(report.passes(1e-3), "{kh}x{kw} s{stride}: {report:?}");
        }
    }
}
