//! Named parameter storage and the basic layers every block is built from.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, PadMode, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Forward-pass context: binds parameters to graph variables and carries the
/// noise source for stochastic layers.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    store: Option<&'g ParamStore>,
    vars: RefCell<Vec<Option<Var<'g>>>>,
    noise: Option<RefCell<&'g mut ChaCha8Rng>>,
}

impl<'g> Ctx<'g> {
    /// Parameters become graph leaves on first use.
    pub fn new(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self {
            graph,
            store: Some(store),
            vars: RefCell::new(vec![None; store.len()]),
            noise: None,
        }
    }

    /// Parameters are the given variables, indexed by `ParamId`.
    pub fn from_vars(graph: &'g Graph, vars: Vec<Var<'g>>) -> Self {
        Self {
            graph,
            store: None,
            vars: RefCell::new(vars.into_iter().map(Some).collect()),
            noise: None,
        }
    }

    /// Enables stochastic sampling, drawing from `rng`.
    pub fn with_noise(mut self, rng: &'g mut ChaCha8Rng) -> Self {
        self.noise = Some(RefCell::new(rng));
        self
    }

    pub fn stochastic(&self) -> bool {
        self.noise.is_some()
    }

    /// Standard normal tensor from the context noise source, or `None` in
    /// deterministic mode.
    pub fn normal(&self, shape: &[usize]) -> Option<Tensor> {
        let cell = self.noise.as_ref()?;
        let mut rng = cell.borrow_mut();
        Some(Tensor::randn(shape, 1.0, &mut **rng))
    }

    pub fn p(&self, id: ParamId) -> Var<'g> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[id.0] {
            return v;
        }
        let store = self.store.expect("parameter not bound in this context");
        let v = self.graph.leaf(store.get(id).clone());
        vars[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    /// Gradient per parameter, `None` for parameters that were not used.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(&[out_dim, in_dim], in_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// A layer whose weight (and bias) start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim]));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `(B, in) -> (B, out)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.matmul_nt(ctx.p(self.weight));
        match self.bias {
            Some(b) => y.add(ctx.p(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let cig = cin / groups;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(&[cout, cig, k, k], cig * k * k, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
            groups,
            out_channels: cout,
        }
    }

    /// 1×1 convolution initialized to zero.
    pub fn pointwise_zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, 1, 1]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride: 1,
            pad: 0,
            groups: 1,
            out_channels: cout,
        }
    }

    /// 1×1 convolution with a given `(cout, cin)` weight matrix.
    pub fn pointwise_with(store: &mut ParamStore, name: &str, weight: Tensor, bias: bool) -> Result<Self> {
        let (cout, cin) = weight.dims2()?;
        let weight = store.add(format!("{name}.weight"), weight.reshape(&[cout, cin, 1, 1])?);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Ok(Self {
            weight,
            bias,
            stride: 1,
            pad: 0,
            groups: 1,
            out_channels: cout,
        })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.conv2d(ctx.p(self.weight), self.stride, self.pad, PadMode::Zero, self.groups);
        match self.bias {
            Some(b) => y.add(ctx.p(b).reshape(&[1, self.out_channels, 1, 1])),
            None => y,
        }
    }
}

/// Layer normalization over axis 1 with a learned per-channel affine.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            channels,
        }
    }

    /// Works on `(B, C)` and `(B, C, H, W)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let rank = x.shape().len();
        let mut shape = vec![1, self.channels];
        shape.resize(rank, 1);
        x.normalize_axis1(1e-5)
            .mul(ctx.p(self.gamma).reshape(&shape))
            .add(ctx.p(self.beta).reshape(&shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_lookup_by_name() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "fc", 3, 2, true, &mut rng);
        assert_eq!(store.find("fc.weight"), Some(l.weight));
        assert_eq!(store.find("fc.bias"), l.bias);
        assert_eq!(store.num_scalars(), 8);
        assert!(store.set(l.weight, Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn linear_forward_and_grads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "fc", 3, 2, true, &mut rng);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::ones(&[4, 3]));
        let y = l.forward(&ctx, x).sum();
        let mut grads = g.backward(y);
        let pg = ctx.param_grads(&mut grads);
        assert_eq!(pg[l.bias.unwrap().index()].as_ref().unwrap().data(), &[4.0, 4.0]);
        assert!(pg[l.weight.index()].as_ref().unwrap().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn deterministic_context_has_no_noise() {
        let store = ParamStore::new();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        assert!(!ctx.stochastic());
        assert!(ctx.normal(&[2]).is_none());
    }
}
