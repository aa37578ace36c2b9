use std::rc::Rc;

use super::Var;
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    /// Per-row column gather: `(B, N) -> (B, K)` with `out[b][j] = x[b][idx[b][j]]`.
    pub fn gather_cols(self, idx: &[Vec<usize>]) -> Var<'g> {
        let xv = self.value();
        let (b, n) = xv.dims2().expect("gather_cols");
        assert_eq!(idx.len(), b, "gather_cols: one index list per row");
        let k = idx.first().map_or(0, |r| r.len());
        let idx: Rc<Vec<Vec<usize>>> = Rc::new(idx.to_vec());
        let mut out = Vec::with_capacity(b * k);
        for (bi, row) in idx.iter().enumerate() {
            assert_eq!(row.len(), k, "gather_cols: ragged index lists");
            out.extend(row.iter().map(|&j| xv.data()[bi * n + j]));
        }
        self.graph.op(Tensor::from_parts(vec![b, k], out), &[self], move |g| {
            let mut gx = vec![0.0; b * n];
            for (bi, row) in idx.iter().enumerate() {
                for (j, &c) in row.iter().enumerate() {
                    gx[bi * n + c] += g.data()[bi * k + j];
                }
            }
            vec![Some(Tensor::from_parts(vec![b, n], gx))]
        })
    }

    /// Inverse of [`Var::gather_cols`]: places `(B, K)` values into a zeroed `(B, N)`.
    pub fn scatter_cols(self, idx: &[Vec<usize>], n: usize) -> Var<'g> {
        let xv = self.value();
        let (b, k) = xv.dims2().expect("scatter_cols");
        assert_eq!(idx.len(), b, "scatter_cols: one index list per row");
        let idx: Rc<Vec<Vec<usize>>> = Rc::new(idx.to_vec());
        let mut out = vec![0.0; b * n];
        for (bi, row) in idx.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                out[bi * n + c] = xv.data()[bi * k + j];
            }
        }
        self.graph.op(Tensor::from_parts(vec![b, n], out), &[self], move |g| {
            let mut gx = vec![0.0; b * k];
            for (bi, row) in idx.iter().enumerate() {
                for (j, &c) in row.iter().enumerate() {
                    gx[bi * k + j] = g.data()[bi * n + c];
                }
            }
            vec![Some(Tensor::from_parts(vec![b, k], gx))]
        })
    }

    /// Rows `rows` of axis 0.
    pub fn select_rows(self, rows: &[usize]) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let inner: usize = shape[1..].iter().product();
        let rows: Rc<Vec<usize>> = Rc::new(rows.to_vec());
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows.iter() {
            out.extend_from_slice(&xv.data()[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        self.graph.op(Tensor::from_parts(out_shape, out), &[self], move |g| {
            let mut gx = vec![0.0; shape.iter().product()];
            for (j, &r) in rows.iter().enumerate() {
                for (a, &v) in gx[r * inner..(r + 1) * inner]
                    .iter_mut()
                    .zip(&g.data()[j * inner..(j + 1) * inner])
                {
                    *a += v;
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Places the rows of `self` at positions `rows` of a zeroed axis-0 extent `total`.
    pub fn scatter_rows(self, rows: &[usize], total: usize) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        assert_eq!(shape[0], rows.len(), "scatter_rows: row count mismatch");
        let inner: usize = shape[1..].iter().product();
        let rows: Rc<Vec<usize>> = Rc::new(rows.to_vec());
        let mut out = vec![0.0; total * inner];
        for (j, &r) in rows.iter().enumerate() {
            for (a, &v) in out[r * inner..(r + 1) * inner]
                .iter_mut()
                .zip(&xv.data()[j * inner..(j + 1) * inner])
            {
                *a += v;
            }
        }
        let mut out_shape = shape.clone();
        out_shape[0] = total;
        self.graph.op(Tensor::from_parts(out_shape, out), &[self], move |g| {
            let mut gx = Vec::with_capacity(rows.len() * inner);
            for &r in rows.iter() {
                gx.extend_from_slice(&g.data()[r * inner..(r + 1) * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn gather_then_scatter_restores_selected_entries() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 + 1.0));
        let idx = vec![vec![2, 0], vec![1, 2]];
        let y = x.gather_cols(&idx).scatter_cols(&idx, 3);
        assert_eq!(y.value().data(), &[1.0, 0.0, 3.0, 0.0, 5.0, 6.0]);
        let grads = g.backward(y.sum());
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn select_and_scatter_rows() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[3, 2], |i| i as f64));
        let y = x.select_rows(&[2, 0]).scatter_rows(&[1, 2], 4);
        assert_eq!(y.value().data(), &[0.0, 0.0, 4.0, 5.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
