use super::Var;
use crate::tensor::{gemm, Tensor};

impl<'g> Var<'g> {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        self.graph.op(Tensor::scalar(xv.sum()), &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums over `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        self.graph.op(Tensor::from_parts(out_shape, out), &[self], move |g| {
            let gd = g.data();
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    gx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Global average pool: `(B, C, H, W) -> (B, C)`.
    pub fn mean_spatial(self) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 4, "mean_spatial needs a rank-4 input");
        let (b, c) = (shape[0], shape[1]);
        let hw = shape[2] * shape[3];
        let out: Vec<f64> = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.graph.op(Tensor::from_parts(vec![b, c], out), &[self], move |g| {
            let mut gx = Vec::with_capacity(b * c * hw);
            for &gi in g.data() {
                gx.extend(std::iter::repeat_n(gi / hw as f64, hw));
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g> {
        let xv = self.value();
        let n = *xv.shape().last().expect("softmax of a scalar");
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut s = 0.0;
            for &v in row {
                let e = (v - m).exp();
                s += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= s;
            }
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), out);
        let yv = y.clone();
        self.graph.op(y, &[self], move |g| {
            let mut gx = Vec::with_capacity(g.len());
            for (gr, yr) in g.data().chunks(n).zip(yv.data().chunks(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                gx.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
            }
            vec![Some(Tensor::from_parts(yv.shape().to_vec(), gx))]
        })
    }

    /// Zero-mean, unit-variance normalization across axis 1, independently for
    /// every other index. Works for `(B, C)` and `(B, C, H, W)` inputs.
    pub fn normalize_axis1(self, eps: f64) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let b = shape[0];
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let d = xv.data();
        let mut y = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; b * inner];
        for bi in 0..b {
            let base = bi * c * inner;
            for p in 0..inner {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += d[base + ci * inner + p];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let t = d[base + ci * inner + p] - mean;
                    var += t * t;
                }
                var /= c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[bi * inner + p] = is;
                for ci in 0..c {
                    let o = base + ci * inner + p;
                    y[o] = (d[o] - mean) * is;
                }
            }
        }
        let y = Tensor::from_parts(shape.clone(), y);
        let yv = y.clone();
        self.graph.op(y, &[self], move |g| {
            let gd = g.data();
            let yd = yv.data();
            let mut gx = vec![0.0; gd.len()];
            for bi in 0..b {
                let base = bi * c * inner;
                for p in 0..inner {
                    let mut mg = 0.0;
                    let mut mgy = 0.0;
                    for ci in 0..c {
                        let o = base + ci * inner + p;
                        mg += gd[o];
                        mgy += gd[o] * yd[o];
                    }
                    mg /= c as f64;
                    mgy /= c as f64;
                    let is = inv_std[bi * inner + p];
                    for ci in 0..c {
                        let o = base + ci * inner + p;
                        gx[o] = is * (gd[o] - mg - yd[o] * mgy);
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Divides every slice along the last axis by its ℓ2 norm (floored at `eps`).
    pub fn l2_normalize(self, eps: f64) -> Var<'g> {
        let xv = self.value();
        let n = *xv.shape().last().expect("l2_normalize of a scalar");
        let mut y = Vec::with_capacity(xv.len());
        let mut norms = Vec::with_capacity(xv.len() / n.max(1));
        for row in xv.data().chunks(n) {
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms.push(nr);
            y.extend(row.iter().map(|v| v / nr));
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), y);
        let yv = y.clone();
        self.graph.op(y, &[self], move |g| {
            let mut gx = Vec::with_capacity(g.len());
            for ((gr, yr), &nr) in g.data().chunks(n).zip(yv.data().chunks(n)).zip(&norms) {
                if nr <= eps {
                    gx.extend(gr.iter().map(|gi| gi / nr));
                    continue;
                }
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                gx.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * dot) / nr));
            }
            vec![Some(Tensor::from_parts(yv.shape().to_vec(), gx))]
        })
    }

    /// Matrix product of rank-2 `(m, k) x (k, n)` or batched rank-3
    /// `(t, m, k) x (t, k, n)` operands.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.matmul_t(other, false)
    }

    /// `self x otherᵀ` with `other` of shape `(n, k)` or `(t, n, k)`.
    pub fn matmul_nt(self, other: Var<'g>) -> Var<'g> {
        self.matmul_t(other, true)
    }

    fn matmul_t(self, other: Var<'g>, tb: bool) -> Var<'g> {
        let av = self.value();
        let bv = other.value();
        let (t, m, k, n, out_shape) = match (av.shape(), bv.shape()) {
            (&[m, k], &[r, s]) => {
                let (kb, n) = if tb { (s, r) } else { (r, s) };
                assert_eq!(k, kb, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
                (1, m, k, n, vec![m, n])
            }
            (&[t, m, k], &[tb2, r, s]) => {
                assert_eq!(t, tb2, "batched matmul batch mismatch");
                let (kb, n) = if tb { (s, r) } else { (r, s) };
                assert_eq!(k, kb, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
                (t, m, k, n, vec![t, m, n])
            }
            (a, b) => panic!("unsupported matmul shapes {a:?} x {b:?}"),
        };
        let mut out = vec![0.0; t * m * n];
        for i in 0..t {
            gemm(
                m,
                k,
                n,
                1.0,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                tb,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.graph
            .op(Tensor::from_parts(out_shape, out), &[self, other], move |g| {
                let gd = g.data();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for i in 0..t {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    // dA = G · op(B)ᵀ
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        gi,
                        false,
                        bi,
                        !tb,
                        0.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                    if tb {
                        // B is (n, k): dB = Gᵀ · A
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            gi,
                            true,
                            ai,
                            false,
                            0.0,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    } else {
                        // dB = Aᵀ · G
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            ai,
                            true,
                            gi,
                            false,
                            0.0,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
                vec![
                    Some(Tensor::from_parts(av.shape().to_vec(), ga)),
                    Some(Tensor::from_parts(bv.shape().to_vec(), gb)),
                ]
            })
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin() * 5.0));
        let y = x.softmax().value();
        for row in y.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let g = Graph::new();
        let a = Tensor::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::from_fn(&[4, 3], |i| (i as f64).cos());
        let bt = b.permute(&[1, 0]);
        let y1 = g.constant(a.clone()).matmul_nt(g.constant(b)).value();
        let y2 = g.constant(a).matmul(g.constant(bt)).value();
        assert!(y1.max_abs_diff(&y2) < 1e-12);
    }

    #[test]
    fn normalize_axis1_has_zero_mean_unit_var() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 5, 3, 3], |i| (i as f64 * 0.7).sin()));
        let y = x.normalize_axis1(1e-12).value();
        for b in 0..2 {
            for p in 0..9 {
                let vals: Vec<f64> = (0..5).map(|c| y.data()[b * 45 + c * 9 + p]).collect();
                let m = vals.iter().sum::<f64>() / 5.0;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 5.0;
                assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-6);
            }
        }
    }
}
