use std::rc::Rc;

use super::Var;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// (d/da, d/db)
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (1.0, 1.0),
            BinOp::Sub => (1.0, -1.0),
            BinOp::Mul => (b, a),
            BinOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

fn binary<'g>(a: Var<'g>, b: Var<'g>, op: BinOp) -> Var<'g> {
    let av = a.value();
    let bv = b.value();
    if av.shape() == bv.shape() {
        let out = av.zip_map(&bv, |x, y| op.apply(x, y));
        return a.graph.op(out, &[a, b], move |g| {
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Vec::with_capacity(g.len());
            for ((&gi, &x), &y) in g.data().iter().zip(av.data()).zip(bv.data()) {
                let (da, db) = op.partials(x, y);
                ga.push(gi * da);
                gb.push(gi * db);
            }
            let shape = g.shape().to_vec();
            vec![
                Some(Tensor::from_parts(shape.clone(), ga)),
                Some(Tensor::from_parts(shape, gb)),
            ]
        });
    }
    let out_shape = broadcast_shape(av.shape(), bv.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", av.shape(), bv.shape()));
    let sa = broadcast_strides(av.shape(), &out_shape);
    let sb = broadcast_strides(bv.shape(), &out_shape);
    let mut out = vec![0.0; out_shape.iter().product()];
    {
        let (ad, bd) = (av.data(), bv.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            out[o] = op.apply(ad[ia], bd[ib]);
        });
    }
    let out = Tensor::from_parts(out_shape.clone(), out);
    a.graph.op(out, &[a, b], move |g| {
        let mut ga = vec![0.0; av.len()];
        let mut gb = vec![0.0; bv.len()];
        let (ad, bd, gd) = (av.data(), bv.data(), g.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
            let (da, db) = op.partials(ad[ia], bd[ib]);
            ga[ia] += gd[o] * da;
            gb[ib] += gd[o] * db;
        });
        vec![
            Some(Tensor::from_parts(av.shape().to_vec(), ga)),
            Some(Tensor::from_parts(bv.shape().to_vec(), gb)),
        ]
    })
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        binary(self, other, BinOp::Div)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|x| x + s);
        self.graph.op(out, &[self], |g| vec![Some(g.clone())])
    }

    pub fn mul_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|x| x * s);
        self.graph.op(out, &[self], move |g| vec![Some(g.scale(s))])
    }

    pub fn neg(self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let xv = self.value();
        let out = xv.map(f);
        let yv = Rc::new(out.clone());
        self.graph.op(out, &[self], move |g| {
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(yv.data())
                .map(|((&gi, &x), &y)| gi * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
        })
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// `x^p`; the derivative at `x == 0` is taken as 0 for `p < 1`.
    pub fn powf(self, p: f64) -> Var<'g> {
        self.unary(
            move |x| x.powf(p),
            move |x, _| {
                if x == 0.0 && p < 1.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            },
        )
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(self) -> Var<'g> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'g> {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = K * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = K * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    /// Wraps angles into (-pi, pi]. The derivative is 1 away from the cut.
    pub fn wrap_angle(self) -> Var<'g> {
        self.unary(wrap_angle, |_, _| 1.0)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn wrap_angle(x: f64) -> f64 {
    use std::f64::consts::PI;
    if x > -PI && x <= PI {
        return x;
    }
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn broadcast_add_backward_sums_over_broadcast_axes() {
        let g = Graph::new();
        let a = g.leaf(Tensor::ones(&[2, 3, 2, 2]));
        let b = g.leaf(Tensor::zeros(&[1, 3, 1, 1]));
        let y = a.mul(b.add_scalar(2.0)).sum();
        let grads = g.backward(y);
        assert_eq!(grads.wrt(b).unwrap().data(), &[8.0, 8.0, 8.0]);
        assert!(grads.wrt(a).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-5.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
