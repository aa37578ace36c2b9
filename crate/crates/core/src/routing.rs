//! Two-stage probabilistic expert routing.
//!
//! Stage one scores a pooled feature against a bank of unit prototypes and
//! keeps the `k1` most likely clusters. Each kept cluster contributes a
//! Gaussian prompt sample; the mixed prompt is read by a cross-attention
//! query to form a gating context `g`. Stage two scores the experts of each
//! kept cluster from `g` and keeps the `k2` best. Only selected experts run.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Initial log standard deviation of every prompt component.
pub const LOG_SIGMA_INIT: f64 = -std::f64::consts::LN_10; // ln(0.1)

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeInit {
    #[default]
    Orthogonal,
    Random,
}

/// `n` unit rows of dimension `d`.
///
/// `Orthogonal` takes the Q factor of a Gaussian `d x n` matrix, so rows are
/// orthonormal; `Random` normalizes independent Gaussian rows.
pub fn init_prototypes<R: Rng + ?Sized>(n: usize, d: usize, mode: PrototypeInit, rng: &mut R) -> Result<Tensor> {
    if n == 0 || d == 0 {
        return Err(Error::param("prototype bank needs n >= 1 and d >= 1"));
    }
    match mode {
        PrototypeInit::Orthogonal => {
            if n > d {
                return Err(Error::param(format!("orthogonal init needs n <= d, got n={n}, d={d}")));
            }
            let g = DMatrix::<f64>::from_fn(d, n, |_, _| rng.sample(StandardNormal));
            let qr = g.qr();
            let (q, r) = (qr.q(), qr.r());
            // fix column signs so the factorization is unique
            Ok(Tensor::from_fn(&[n, d], |i| {
                let (row, col) = (i / d, i % d);
                let s = if r[(row, row)] < 0.0 { -1.0 } else { 1.0 };
                s * q[(col, row)]
            }))
        }
        PrototypeInit::Random => {
            let mut t = Tensor::randn(&[n, d], 1.0, rng);
            normalize_rows(&mut t);
            Ok(t)
        }
    }
}

fn normalize_rows(t: &mut Tensor) {
    let d = *t.shape().last().expect("rank >= 1");
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// `‖P Pᵀ − I‖²_F`.
pub fn orthogonality_penalty<'g>(p: Var<'g>) -> Var<'g> {
    let n = p.shape()[0];
    let eye = Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
    p.matmul_nt(p).sub(p.constant_like(eye)).square().sum()
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps lower indices first among equals
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    idx
}

/// Softmax over the top-`k` entries of each row of `(B, N)` scores.
/// Returns the selected indices and the renormalized `(B, k)` weights.
pub fn restricted_softmax<'g>(scores: Var<'g>, k: usize) -> Result<(Vec<Vec<usize>>, Var<'g>)> {
    let sv = scores.value();
    let (_, n) = sv.dims2()?;
    if k == 0 || k > n {
        return Err(Error::param(format!("top-k size {k} outside 1..={n}")));
    }
    let idx: Vec<Vec<usize>> = sv.data().chunks(n).map(|r| top_k(r, k)).collect();
    let w = scores.gather_cols(&idx).softmax();
    Ok((idx, w))
}

/// Stage-one result for a batch.
pub struct ClusterPosterior<'g> {
    /// Softmax over all prototypes, `(B, N)`.
    pub full: Var<'g>,
    pub selected: Vec<Vec<usize>>,
    /// Restricted softmax over the selected prototypes, `(B, K1)`.
    pub weights: Var<'g>,
    /// `weights` placed back into `(B, N)` with zeros elsewhere.
    pub dense: Var<'g>,
}

/// Cluster posterior from cosine similarities `(B, N)`.
pub fn cluster_posterior_from_sims<'g>(sims: Var<'g>, k1: usize) -> Result<ClusterPosterior<'g>> {
    let n = sims.shape()[1];
    let full = sims.softmax();
    let (selected, weights) = restricted_softmax(sims, k1)?;
    let dense = weights.scatter_cols(&selected, n);
    Ok(ClusterPosterior {
        full,
        selected,
        weights,
        dense,
    })
}

/// `Σ_c α_c (μ_c + σ_c ⊙ ε_c)` for dense weights `alpha` `(B, N)`, `mu` and
/// `log_sigma` `(N, D)`. `ε` is drawn from the context noise source; without
/// one it is zero.
pub fn sample_prompt<'g>(ctx: &Ctx<'g>, alpha: Var<'g>, mu: Var<'g>, log_sigma: Var<'g>) -> Var<'g> {
    let (b, n) = (alpha.shape()[0], alpha.shape()[1]);
    let d = mu.shape()[1];
    match ctx.normal(&[b, n, d]) {
        None => alpha.matmul(mu),
        Some(eps) => {
            let z = mu
                .reshape(&[1, n, d])
                .add(log_sigma.exp().reshape(&[1, n, d]).mul(ctx.constant(eps)));
            alpha.reshape(&[b, 1, n]).matmul(z).reshape(&[b, d])
        }
    }
}

/// Single-query multi-head cross-attention without an output projection, so
/// a one-token key set returns exactly the value projection of that token.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::param(format!("dim {dim} not divisible into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), query_dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    /// `query (B, Dq)`, `tokens (B, T, D)` -> (`(B, D)`, weights `(B, heads, T)`).
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, query: Var<'g>, tokens: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let ts = tokens.shape();
        let &[b, t, d] = ts.as_slice() else {
            return Err(Error::shape(format!("prompt tokens must be (B, T, D), got {ts:?}")));
        };
        if d != self.dim || query.shape() != [b, self.q.in_dim] {
            return Err(Error::shape(format!(
                "cross-attention expects query (B, {}) and tokens of width {}, got {:?} and {d}",
                self.q.in_dim,
                self.dim,
                query.shape()
            )));
        }
        let (h, dh) = (self.heads, d / self.heads);
        let split = |x: Var<'g>, len: usize| {
            x.reshape(&[b, len, h, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b * h, len, dh])
        };
        let flat = tokens.reshape(&[b * t, d]);
        let q = split(self.q.forward(ctx, query), 1);
        let k = split(self.k.forward(ctx, flat), t);
        let v = split(self.v.forward(ctx, flat), t);
        let w = q.matmul_nt(k).mul_scalar(1.0 / (dh as f64).sqrt()).softmax();
        let out = w.matmul(v).reshape(&[b, d]);
        Ok((out, w.reshape(&[b, h, t])))
    }
}

/// Shape-preserving expert.
#[derive(Clone, Debug)]
pub enum Expert {
    /// 1x1 expansion to a gated pair, 3x3 depth-wise mixing, GELU gate, 1x1 projection.
    GatedFfn {
        expand: Conv2d,
        depthwise: Conv2d,
        project: Conv2d,
        hidden: usize,
    },
    /// Parameter-free `x -> s·x`; a reference expert with a closed-form output.
    Scale(f64),
}

impl Expert {
    pub fn gated_ffn<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let h2 = 2 * hidden;
        Expert::GatedFfn {
            expand: Conv2d::new(store, &format!("{name}.expand"), channels, h2, 1, 1, 1, true, rng),
            depthwise: Conv2d::new(store, &format!("{name}.dw"), h2, h2, 3, 1, h2, true, rng),
            project: Conv2d::new(store, &format!("{name}.project"), hidden, channels, 1, 1, 1, true, rng),
            hidden,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        match self {
            Expert::GatedFfn {
                expand,
                depthwise,
                project,
                hidden,
            } => {
                let u = depthwise.forward(ctx, expand.forward(ctx, x));
                let gate = u.narrow(1, 0, *hidden).gelu();
                let val = u.narrow(1, *hidden, *hidden);
                project.forward(ctx, gate.mul(val))
            }
            Expert::Scale(s) => x.mul_scalar(*s),
        }
    }
}

/// `Σ_i gates[:, i] · ℰ_i(x)`, evaluating expert `i` only on the samples
/// where `active[b][i]` holds.
pub fn mixture_forward<'g>(
    ctx: &Ctx<'g>,
    x: Var<'g>,
    experts: &[Expert],
    gates: Var<'g>,
    active: &[Vec<bool>],
) -> Var<'g> {
    let b = x.shape()[0];
    let mut acc: Option<Var<'g>> = None;
    for (i, e) in experts.iter().enumerate() {
        let rows: Vec<usize> = (0..b).filter(|&s| active[s][i]).collect();
        if rows.is_empty() {
            continue;
        }
        let full = rows.len() == b;
        let xs = if full { x } else { x.select_rows(&rows) };
        let g = gates.narrow(1, i, 1);
        let g = if full { g } else { g.select_rows(&rows) };
        let y = e.forward(ctx, xs).mul(g.reshape(&[rows.len(), 1, 1, 1]));
        let y = if full { y } else { y.scatter_rows(&rows, b) };
        acc = Some(match acc {
            Some(a) => a.add(y),
            None => y,
        });
    }
    acc.unwrap_or_else(|| x.mul_scalar(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub clusters: usize,
    pub k1: usize,
    pub experts_per_cluster: usize,
    pub k2: usize,
    /// Prototype / prompt dimension.
    pub dim: usize,
    pub heads: usize,
    pub init: PrototypeInit,
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.k1 == 0 || self.k1 > self.clusters {
            return Err(Error::param(format!(
                "k1={} must lie in 1..={} clusters",
                self.k1, self.clusters
            )));
        }
        if self.experts_per_cluster == 0 || self.k2 == 0 || self.k2 > self.experts_per_cluster {
            return Err(Error::param(format!(
                "k2={} must lie in 1..={} experts per cluster",
                self.k2, self.experts_per_cluster
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::param(format!(
                "prompt dim {} must be divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Prototype bank parameters of one stage.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub prototypes: ParamId,
    pub mu: ParamId,
    pub log_sigma: ParamId,
    pub n: usize,
    pub d: usize,
    pub stage: usize,
}

impl PrototypeBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        d: usize,
        mode: PrototypeInit,
        stage: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let p = init_prototypes(n, d, mode, rng)?;
        Ok(Self {
            mu: store.add(format!("{name}.mu"), p.clone()),
            prototypes: store.add(format!("{name}.prototypes"), p),
            log_sigma: store.add(format!("{name}.log_sigma"), Tensor::full(&[n, d], LOG_SIGMA_INIT)),
            n,
            d,
            stage,
        })
    }

    /// Rescales every prototype row to unit norm.
    pub fn normalize(&self, store: &mut ParamStore) {
        normalize_rows(store.get_mut(self.prototypes));
    }

    /// Replaces the prototypes by the nearest matrix with orthonormal rows
    /// (`U Vᵀ` from the SVD). Falls back to row normalization when `n > d`.
    pub fn project_orthogonal(&self, store: &mut ParamStore) {
        if self.n > self.d {
            self.normalize(store);
            return;
        }
        let p = store.get(self.prototypes);
        let m = DMatrix::from_row_slice(self.n, self.d, p.data());
        let svd = m.svd(true, true);
        let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
            self.normalize(store);
            return;
        };
        let q = u * vt;
        let t = store.get_mut(self.prototypes);
        for r in 0..self.n {
            for c in 0..self.d {
                t.data_mut()[r * self.d + c] = q[(r, c)];
            }
        }
    }

    pub fn penalty<'g>(&self, ctx: &Ctx<'g>) -> Var<'g> {
        orthogonality_penalty(ctx.p(self.prototypes))
    }
}

/// Detached record of one routing pass, for diagnostics and traces.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub stage: usize,
    /// `(B, N)`.
    pub full_posterior: Tensor,
    pub selected: Vec<Vec<usize>>,
    /// `(B, K1)`, aligned with `selected`.
    pub cluster_weights: Tensor,
    /// `(B, D)`.
    pub prompt: Tensor,
    /// `(B, D)`.
    pub context: Tensor,
    /// Per sample, per selected cluster: chosen expert indices within the cluster.
    pub expert_selected: Vec<Vec<Vec<usize>>>,
    /// Per sample, per selected cluster: renormalized expert weights.
    pub expert_weights: Vec<Vec<Vec<f64>>>,
}

pub struct MoeOutput<'g> {
    pub y: Var<'g>,
    /// Mixed prompt `(B, D)`.
    pub prompt: Var<'g>,
    /// Pooled, projected and ℓ2-normalized routing feature `(B, D)`.
    pub embedding: Var<'g>,
    pub decision: RoutingDecision,
}

/// The two-stage routed mixture of experts for one encoder stage.
#[derive(Clone, Debug)]
pub struct PcgrmMoe {
    pub config: RoutingConfig,
    pub bank: PrototypeBank,
    pub proj: Linear,
    pub attn: CrossAttention,
    /// One affine `W_c g + b_c` per cluster.
    pub expert_gates: Vec<Linear>,
    /// `clusters * experts_per_cluster` experts, grouped by cluster.
    pub experts: Vec<Expert>,
}

impl PcgrmMoe {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        config: RoutingConfig,
        stage: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let bank = PrototypeBank::new(
            store,
            &format!("{name}.bank"),
            config.clusters,
            d,
            config.init,
            stage,
            rng,
        )?;
        let proj = Linear::new(store, &format!("{name}.proj"), channels, d, true, rng);
        let attn = CrossAttention::new(store, &format!("{name}.attn"), d, d, config.heads, rng)?;
        let expert_gates = (0..config.clusters)
            .map(|c| {
                Linear::new(
                    store,
                    &format!("{name}.gate{c}"),
                    d,
                    config.experts_per_cluster,
                    true,
                    rng,
                )
            })
            .collect();
        let hidden = (channels / 2).max(1);
        let experts = (0..config.clusters * config.experts_per_cluster)
            .map(|i| Expert::gated_ffn(store, &format!("{name}.expert{i}"), channels, hidden, rng))
            .collect();
        Ok(Self {
            config,
            bank,
            proj,
            attn,
            expert_gates,
            experts,
        })
    }

    /// Routing feature: GAP, linear projection to `D`.
    pub fn route_feature<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        self.proj.forward(ctx, x.mean_spatial())
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<MoeOutput<'g>> {
        let cfg = &self.config;
        let b = x.shape()[0];
        let m = cfg.experts_per_cluster;

        let z = self.route_feature(ctx, x);
        let zn = z.l2_normalize(1e-12);
        let protos = ctx.p(self.bank.prototypes).l2_normalize(1e-12);
        let sims = zn.matmul_nt(protos);
        let post = cluster_posterior_from_sims(sims, cfg.k1)?;

        let prompt = sample_prompt(ctx, post.dense, ctx.p(self.bank.mu), ctx.p(self.bank.log_sigma));
        let (g, _) = self.attn.forward(ctx, z, prompt.reshape(&[b, 1, cfg.dim]))?;

        let mut gate_cols = Vec::with_capacity(cfg.clusters);
        let mut active = vec![vec![false; cfg.clusters * m]; b];
        let mut exp_sel = vec![Vec::with_capacity(cfg.k1); b];
        let mut exp_w = vec![Vec::with_capacity(cfg.k1); b];
        let alpha = post.dense;
        let mut per_cluster = Vec::with_capacity(cfg.clusters);
        for (c, gate) in self.expert_gates.iter().enumerate() {
            let logits = gate.forward(ctx, g);
            let (idx, w) = restricted_softmax(logits, cfg.k2)?;
            let dense = w.scatter_cols(&idx, m);
            gate_cols.push(alpha.narrow(1, c, 1).mul(dense));
            per_cluster.push((idx, w.value()));
        }
        for s in 0..b {
            for &c in &post.selected[s] {
                let (idx, w) = &per_cluster[c];
                for &e in &idx[s] {
                    active[s][c * m + e] = true;
                }
                exp_sel[s].push(idx[s].clone());
                exp_w[s].push(w.data()[s * cfg.k2..(s + 1) * cfg.k2].to_vec());
            }
        }
        let gates = Var::concat(&gate_cols, 1);
        let y = mixture_forward(ctx, x, &self.experts, gates, &active);

        let decision = RoutingDecision {
            stage: self.bank.stage,
            full_posterior: (*post.full.value()).clone(),
            selected: post.selected,
            cluster_weights: (*post.weights.value()).clone(),
            prompt: (*prompt.value()).clone(),
            context: (*g.value()).clone(),
            expert_selected: exp_sel,
            expert_weights: exp_w,
        };
        Ok(MoeOutput {
            y,
            prompt,
            embedding: zn,
            decision,
        })
    }
}

/// Single-gate mixture: `p = softmax(W·GAP(x) + b)`, `y = Σ_e p_e ℰ_e(x)`.
#[derive(Clone, Debug)]
pub struct FlatMoe {
    pub gate: Linear,
    pub experts: Vec<Expert>,
}

impl FlatMoe {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        n_experts: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = (channels / 2).max(1);
        Self {
            gate: Linear::new(store, &format!("{name}.gate"), channels, n_experts, true, rng),
            experts: (0..n_experts)
                .map(|i| Expert::gated_ffn(store, &format!("{name}.expert{i}"), channels, hidden, rng))
                .collect(),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let b = x.shape()[0];
        let p = self.gate.forward(ctx, x.mean_spatial()).softmax();
        let active = vec![vec![true; self.experts.len()]; b];
        mixture_forward(ctx, x, &self.experts, p, &active)
    }
}

/// One line of a routing trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub stage: usize,
    pub sample_id: String,
    pub label: String,
    pub full_posterior: Vec<f64>,
    pub selected: Vec<usize>,
    pub cluster_weights: Vec<f64>,
    pub expert_selected: Vec<Vec<usize>>,
    pub expert_weights: Vec<Vec<f64>>,
}

impl RoutingDecision {
    pub fn traces(&self, sample_ids: &[String], labels: &[String]) -> Vec<RoutingTrace> {
        let n = self.full_posterior.shape()[1];
        let k1 = self.cluster_weights.shape()[1];
        (0..self.selected.len())
            .map(|s| RoutingTrace {
                stage: self.stage,
                sample_id: sample_ids.get(s).cloned().unwrap_or_default(),
                label: labels.get(s).cloned().unwrap_or_default(),
                full_posterior: self.full_posterior.data()[s * n..(s + 1) * n].to_vec(),
                selected: self.selected[s].clone(),
                cluster_weights: self.cluster_weights.data()[s * k1..(s + 1) * k1].to_vec(),
                expert_selected: self.expert_selected[s].clone(),
                expert_weights: self.expert_weights[s].clone(),
            })
            .collect()
    }
}

/// Writes traces as line-delimited JSON.
pub fn write_traces<W: Write>(mut out: W, traces: &[RoutingTrace]) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses line-delimited JSON traces.
pub fn read_traces(text: &str) -> Result<Vec<RoutingTrace>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
