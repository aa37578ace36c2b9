use super::Var;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let xv = self.value();
        let old = xv.shape().to_vec();
        let out = (*xv).clone().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.graph.op(out, &[self], move |g| {
            vec![Some(g.clone().reshape(&old).expect("reshape grad"))]
        })
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let out = self.value().permute(perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.graph.op(out, &[self], move |g| vec![Some(g.permute(&inv))])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let out = xv.narrow(axis, start, len);
        self.graph.op(out, &[self], move |g| {
            let n = shape[axis];
            let mut parts = Vec::new();
            let mut lo = shape.clone();
            lo[axis] = start;
            let mut hi = shape.clone();
            hi[axis] = n - start - len;
            let zlo = Tensor::zeros(&lo);
            let zhi = Tensor::zeros(&hi);
            if start > 0 {
                parts.push(&zlo);
            }
            parts.push(g);
            if n - start - len > 0 {
                parts.push(&zhi);
            }
            vec![Some(Tensor::concat(&parts, axis))]
        })
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        parts[0].graph.op(out, parts, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&n| {
                    let piece = g.narrow(axis, start, n);
                    start += n;
                    Some(piece)
                })
                .collect()
        })
    }

    /// Nearest-neighbour ×2 upsampling of a rank-4 tensor.
    pub fn upsample2x(self) -> Var<'g> {
        let xv = self.value();
        let (b, c, h, w) = xv.dims4().expect("upsample2x");
        let mut out = vec![0.0; b * c * 4 * h * w];
        let d = xv.data();
        for p in 0..b * c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + x] = d[p * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        self.graph
            .op(Tensor::from_parts(vec![b, c, 2 * h, 2 * w], out), &[self], move |g| {
                let gd = g.data();
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            gx[p * h * w + (y / 2) * w + x / 2] += gd[p * 4 * h * w + y * 2 * w + x];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![b, c, h, w], gx))]
            })
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2x2(self) -> Var<'g> {
        let xv = self.value();
        let (b, c, h, w) = xv.dims4().expect("avg_pool2x2");
        let (ho, wo) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            for y in 0..ho {
                for x in 0..wo {
                    let i = p * h * w + 2 * y * w + 2 * x;
                    out[p * ho * wo + y * wo + x] = 0.25 * (d[i] + d[i + 1] + d[i + w] + d[i + w + 1]);
                }
            }
        }
        self.graph
            .op(Tensor::from_parts(vec![b, c, ho, wo], out), &[self], move |g| {
                let gd = g.data();
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for y in 0..ho {
                        for x in 0..wo {
                            let v = 0.25 * gd[p * ho * wo + y * wo + x];
                            let i = p * h * w + 2 * y * w + 2 * x;
                            gx[i] += v;
                            gx[i + 1] += v;
                            gx[i + w] += v;
                            gx[i + w + 1] += v;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![b, c, h, w], gx))]
            })
    }
}
