//! The four-stage restoration network.
//!
//! ```text
//! stem 3x3 ─► [WTB, routed MoE] ─► down ─► … ×4 ─► prompts p1..p4
//!                                                   │ cross-attention on p4
//! head 3x3 ◄─ [up, skip, WTB, PGB, frequency] ◄─ … ×3 ◄─ p̂1..p̂3
//! ```
//!
//! The head is zero-initialized and the output is `input + head(...)`, so an
//! untrained model is the identity map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::degrade::check_model_size;
use crate::error::{Error, Result};
use crate::frequency::{Dafmm, DafmmTrace};
use crate::nn::{ChannelNorm, Conv2d, Ctx, Linear, ParamId, ParamStore};
use crate::routing::{CrossAttention, PcgrmMoe, PrototypeBank, PrototypeInit, RoutingConfig, RoutingDecision};
use crate::tensor::Tensor;

pub const STAGES: usize = 4;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Stage-1 channel width; stage `l` has `embed_dim · 2^(l-1)`.
    pub embed_dim: usize,
    pub stage_depths: [usize; STAGES],
    pub cluster_counts: [usize; STAGES],
    pub k1_counts: [usize; STAGES],
    pub experts_per_cluster: usize,
    pub k2: usize,
    pub heads: usize,
    pub fsb_k: usize,
    /// Number of learned components in each prompt refinement block.
    #[serde(default = "default_prompt_components")]
    pub prompt_components: usize,
    #[serde(default)]
    pub init_mode: PrototypeInit,
    /// Use the routed mixture of experts (otherwise prompts come from a
    /// pooled linear projection and no experts run).
    #[serde(default = "default_true")]
    pub use_pcgrm: bool,
    /// Use the frequency modulation block in the decoder.
    #[serde(default = "default_true")]
    pub use_dafmm: bool,
}

fn default_prompt_components() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            stage_depths: [1; STAGES],
            cluster_counts: [3; STAGES],
            k1_counts: [2; STAGES],
            experts_per_cluster: 2,
            k2: 2,
            heads: 2,
            fsb_k: 3,
            prompt_components: 4,
            init_mode: PrototypeInit::Orthogonal,
            use_pcgrm: true,
            use_dafmm: true,
        }
    }
}

impl ModelConfig {
    pub fn width(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::param(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.fsb_k % 2 == 0 {
            return Err(Error::param(format!("fsb_k must be odd, got {}", self.fsb_k)));
        }
        if self.prompt_components == 0 {
            return Err(Error::param("prompt_components must be >= 1"));
        }
        for l in 0..STAGES {
            let (n, k1) = (self.cluster_counts[l], self.k1_counts[l]);
            if k1 == 0 || k1 > n {
                return Err(Error::param(format!(
                    "stage {}: need clusters >= k1 >= 1, got clusters={n}, k1={k1}",
                    l + 1
                )));
            }
            if self.init_mode == PrototypeInit::Orthogonal && n > self.width(l) {
                return Err(Error::param(format!(
                    "stage {}: {n} orthogonal prototypes exceed width {}",
                    l + 1,
                    self.width(l)
                )));
            }
        }
        if self.k2 == 0 || self.k2 > self.experts_per_cluster {
            return Err(Error::param(format!(
                "k2={} must lie in 1..={}",
                self.k2, self.experts_per_cluster
            )));
        }
        Ok(())
    }

    pub fn routing(&self, stage: usize) -> RoutingConfig {
        RoutingConfig {
            clusters: self.cluster_counts[stage],
            k1: self.k1_counts[stage],
            experts_per_cluster: self.experts_per_cluster,
            k2: self.k2,
            dim: self.width(stage),
            heads: self.heads,
            init: self.init_mode,
        }
    }
}

/// Channel ("transposed") multi-head attention: heads attend across channels,
/// so cost is linear in the number of tokens.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub qkv: Conv2d,
    pub qkv_dw: Conv2d,
    pub temperature: ParamId,
    pub project: Conv2d,
    pub heads: usize,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            qkv: Conv2d::new(store, &format!("{name}.qkv"), c, 3 * c, 1, 1, 1, false, rng),
            qkv_dw: Conv2d::new(store, &format!("{name}.qkv_dw"), 3 * c, 3 * c, 3, 1, 3 * c, false, rng),
            temperature: store.add(format!("{name}.temperature"), Tensor::ones(&[heads])),
            project: Conv2d::pointwise_zeros(store, &format!("{name}.project"), c, c),
            heads,
            channels: c,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (nh, ch, n) = (self.heads, c / self.heads, h * w);
        let qkv = self.qkv_dw.forward(ctx, self.qkv.forward(ctx, x));
        let split = |i: usize| qkv.narrow(1, i * c, c).reshape(&[b * nh, ch, n]);
        let q = split(0).l2_normalize(1e-12);
        let k = split(1).l2_normalize(1e-12);
        let v = split(2);
        let t = ctx.p(self.temperature).reshape(&[1, nh, 1, 1]);
        let attn = q
            .matmul_nt(k)
            .reshape(&[b, nh, ch, ch])
            .mul(t)
            .reshape(&[b * nh, ch, ch])
            .softmax();
        let out = attn.matmul(v).reshape(&[b, c, h, w]);
        self.project.forward(ctx, out)
    }
}

/// Gated feed-forward: 1x1 expansion, 3x3 depth-wise, GELU gate, 1x1 (zero-init).
#[derive(Clone, Debug)]
pub struct GatedFeedForward {
    pub expand: Conv2d,
    pub dw: Conv2d,
    pub project: Conv2d,
    pub hidden: usize,
}

impl GatedFeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            expand: Conv2d::new(store, &format!("{name}.expand"), c, 2 * hidden, 1, 1, 1, true, rng),
            dw: Conv2d::new(
                store,
                &format!("{name}.dw"),
                2 * hidden,
                2 * hidden,
                3,
                1,
                2 * hidden,
                true,
                rng,
            ),
            project: Conv2d::pointwise_zeros(store, &format!("{name}.project"), hidden, c),
            hidden,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let u = self.dw.forward(ctx, self.expand.forward(ctx, x));
        let a = u.narrow(1, 0, self.hidden).gelu();
        let g = u.narrow(1, self.hidden, self.hidden);
        self.project.forward(ctx, a.mul(g))
    }
}

/// Simplified wavelet transformer block: attention on the LL band of a Haar
/// split, reinjected through the inverse transform with the detail bands
/// untouched, followed by a gated feed-forward; both branches are residual.
#[derive(Clone, Debug)]
pub struct WtbBlock {
    pub norm1: ChannelNorm,
    pub attn: ChannelAttention,
    pub norm2: ChannelNorm,
    pub ffn: GatedFeedForward,
    pub channels: usize,
}

impl WtbBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            norm1: ChannelNorm::new(store, &format!("{name}.norm1"), c),
            attn: ChannelAttention::new(store, &format!("{name}.attn"), c, heads, rng),
            norm2: ChannelNorm::new(store, &format!("{name}.norm2"), c),
            ffn: GatedFeedForward::new(store, &format!("{name}.ffn"), c, 2 * c, rng),
            channels: c,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let c = self.channels;
        if s.len() != 4 || s[1] != c || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape(format!(
                "wavelet block expects (B, {c}, even H, even W), got {s:?}"
            )));
        }
        let n = self.norm1.forward(ctx, x);
        let bands = n.dwt2();
        let ll = bands.narrow(1, 0, c);
        let delta = self.attn.forward(ctx, ll);
        // idwt([ll + Δ, details]) − n == idwt([Δ, 0, 0, 0]) by linearity
        let zeros = x.constant_like(Tensor::zeros(&[s[0], 3 * c, s[2] / 2, s[3] / 2]));
        let x = x.add(Var::concat(&[delta, zeros], 1).idwt2());
        Ok(x.add(self.ffn.forward(ctx, self.norm2.forward(ctx, x))))
    }
}

/// Cross-attention of each stage prompt onto `p4`, then a width adapter.
#[derive(Clone, Debug)]
pub struct PromptHierarchy {
    pub attn: Vec<CrossAttention>,
    pub adapt: Vec<Linear>,
}

impl PromptHierarchy {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d4 = cfg.width(STAGES - 1);
        let mut attn = Vec::new();
        let mut adapt = Vec::new();
        for i in 0..STAGES - 1 {
            attn.push(CrossAttention::new(
                store,
                &format!("{name}.attn{}", i + 1),
                cfg.width(i),
                d4,
                cfg.heads,
                rng,
            )?);
            adapt.push(Linear::new(
                store,
                &format!("{name}.adapt{}", i + 1),
                d4,
                cfg.width(i),
                true,
                rng,
            ));
        }
        Ok(Self { attn, adapt })
    }

    /// `prompts` are `p1..p4`; returns `p̂1..p̂3` and the attention weights.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, prompts: &[Option<Var<'g>>]) -> Result<(Vec<Var<'g>>, Vec<Var<'g>>)> {
        if prompts.len() != STAGES || prompts.iter().any(Option::is_none) {
            return Err(Error::State("all four stage prompts are required".into()));
        }
        let p4 = prompts[STAGES - 1].expect("checked");
        let s4 = p4.shape();
        let kv = p4.reshape(&[s4[0], 1, s4[1]]);
        let mut out = Vec::new();
        let mut weights = Vec::new();
        for i in 0..STAGES - 1 {
            let (a, w) = self.attn[i].forward(ctx, prompts[i].expect("checked"), kv)?;
            out.push(self.adapt[i].forward(ctx, a));
            weights.push(w);
        }
        Ok((out, weights))
    }
}

/// Prompt refinement: `p̂ + Σ_j softmax(W·GAP(feat))_j · component_j`.
/// Components start at zero, so the block starts as the identity on `p̂`.
#[derive(Clone, Debug)]
pub struct PromptRefine {
    pub logits: Linear,
    pub components: ParamId,
    pub n: usize,
    pub width: usize,
}

impl PromptRefine {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feat_c: usize,
        width: usize,
        n: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            logits: Linear::new(store, &format!("{name}.logits"), feat_c, n, true, rng),
            components: store.add(format!("{name}.components"), Tensor::zeros(&[n, width])),
            n,
            width,
        }
    }

    /// Returns the refined prompt and the mixture weights `(B, n)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, prompt: Var<'g>, feat: Var<'g>) -> (Var<'g>, Var<'g>) {
        let w = self.logits.forward(ctx, feat.mean_spatial()).softmax();
        (prompt.add(w.matmul(ctx.p(self.components))), w)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    blocks: Vec<WtbBlock>,
    moe: Option<PcgrmMoe>,
    prompt_fallback: Option<Linear>,
    down: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    reduce: Conv2d,
    block: WtbBlock,
    refine: Option<PromptRefine>,
    dafmm: Option<Dafmm>,
}

/// Everything a forward pass produces besides the output.
pub struct ForwardOutput<'g> {
    /// `input + residual`, not clipped.
    pub output: Var<'g>,
    /// One per stage when routing is enabled.
    pub decisions: Vec<RoutingDecision>,
    /// Pooled post-MoE features per stage, `(B, C_l)`.
    pub embeddings: Vec<Var<'g>>,
    /// Features entering each stage's router, `(B, C_l, H_l, W_l)`.
    pub stage_features: Vec<Var<'g>>,
    /// Per decoder level, from the highest-resolution level up.
    pub dafmm_traces: Vec<DafmmTrace>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    stem: Conv2d,
    encoder: Vec<EncoderStage>,
    hierarchy: Option<PromptHierarchy>,
    decoder: Vec<DecoderLevel>,
    head: Conv2d,
}

impl Model {
    /// Builds and initializes a model; the same `(config, seed)` always
    /// yields the same parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let stem = Conv2d::new(&mut store, "stem", 3, cfg.width(0), 3, 1, 1, true, &mut rng);
        let mut encoder = Vec::new();
        for l in 0..STAGES {
            let c = cfg.width(l);
            let blocks = (0..cfg.stage_depths[l])
                .map(|i| WtbBlock::new(&mut store, &format!("enc{}.wtb{i}", l + 1), c, cfg.heads, &mut rng))
                .collect();
            let (moe, prompt_fallback) = if cfg.use_pcgrm {
                let m = PcgrmMoe::new(
                    &mut store,
                    &format!("enc{}.moe", l + 1),
                    c,
                    cfg.routing(l),
                    l + 1,
                    &mut rng,
                )?;
                (Some(m), None)
            } else {
                let p = Linear::new(&mut store, &format!("enc{}.prompt", l + 1), c, c, true, &mut rng);
                (None, Some(p))
            };
            let down = (l + 1 < STAGES).then(|| {
                Conv2d::new(
                    &mut store,
                    &format!("enc{}.down", l + 1),
                    c,
                    2 * c,
                    3,
                    2,
                    1,
                    true,
                    &mut rng,
                )
            });
            encoder.push(EncoderStage {
                blocks,
                moe,
                prompt_fallback,
                down,
            });
        }
        let hierarchy = if cfg.use_dafmm {
            Some(PromptHierarchy::new(&mut store, "prompts", cfg, &mut rng)?)
        } else {
            None
        };
        let mut decoder = Vec::new();
        for i in 0..STAGES - 1 {
            let c = cfg.width(i);
            let name = format!("dec{}", i + 1);
            decoder.push(DecoderLevel {
                reduce: Conv2d::new(&mut store, &format!("{name}.reduce"), 2 * c, c, 1, 1, 1, true, &mut rng),
                block: WtbBlock::new(&mut store, &format!("{name}.wtb"), c, cfg.heads, &mut rng),
                refine: cfg.use_dafmm.then(|| {
                    PromptRefine::new(
                        &mut store,
                        &format!("{name}.pgb"),
                        c,
                        c,
                        cfg.prompt_components,
                        &mut rng,
                    )
                }),
                dafmm: if cfg.use_dafmm {
                    Some(Dafmm::new(
                        &mut store,
                        &format!("{name}.dafmm"),
                        c,
                        c,
                        cfg.fsb_k,
                        &mut rng,
                    )?)
                } else {
                    None
                },
            });
        }
        let head = {
            let c = cfg.width(0);
            let weight = store.add("head.weight", Tensor::zeros(&[3, c, 3, 3]));
            let bias = Some(store.add("head.bias", Tensor::zeros(&[3])));
            Conv2d {
                weight,
                bias,
                stride: 1,
                pad: 1,
                groups: 1,
                out_channels: 3,
            }
        };
        Ok(Self {
            config,
            store,
            stem,
            encoder,
            hierarchy,
            decoder,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn banks(&self) -> Vec<&PrototypeBank> {
        self.encoder
            .iter()
            .filter_map(|s| s.moe.as_ref().map(|m| &m.bank))
            .collect()
    }

    pub fn moe(&self, stage: usize) -> Option<&PcgrmMoe> {
        self.encoder.get(stage).and_then(|s| s.moe.as_ref())
    }

    /// Rescales all prototype rows to unit norm.
    pub fn normalize_prototypes(&mut self) {
        let banks: Vec<PrototypeBank> = self.banks().into_iter().cloned().collect();
        for b in banks {
            b.normalize(&mut self.store);
        }
    }

    /// Projects every prototype bank onto the nearest orthonormal rows.
    pub fn project_prototypes(&mut self) {
        let banks: Vec<PrototypeBank> = self.banks().into_iter().cloned().collect();
        for b in banks {
            b.project_orthogonal(&mut self.store);
        }
    }

    /// Sum of the orthogonality penalties of all banks.
    pub fn orthogonality_penalty<'g>(&self, ctx: &Ctx<'g>) -> Option<Var<'g>> {
        self.banks().into_iter().map(|b| b.penalty(ctx)).reduce(|a, b| a.add(b))
    }

    /// Full forward pass on a `(B, 3, H, W)` batch.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Result<ForwardOutput<'g>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("expected (B, 3, H, W), got {s:?}")));
        }
        check_model_size(s[2], s[3])?;
        let mut h = self.stem.forward(ctx, x);
        let mut skips = Vec::new();
        let mut prompts = Vec::new();
        let mut decisions = Vec::new();
        let mut embeddings = Vec::new();
        let mut stage_features = Vec::new();
        for stage in &self.encoder {
            for b in &stage.blocks {
                h = b.forward(ctx, h)?;
            }
            stage_features.push(h);
            let prompt = match (&stage.moe, &stage.prompt_fallback) {
                (Some(moe), _) => {
                    let out = moe.forward(ctx, h)?;
                    h = h.add(out.y);
                    decisions.push(out.decision);
                    out.prompt
                }
                (None, Some(p)) => p.forward(ctx, h.mean_spatial()),
                (None, None) => unreachable!("every stage has a prompt source"),
            };
            prompts.push(Some(prompt));
            embeddings.push(h.mean_spatial());
            skips.push(h);
            if let Some(d) = &stage.down {
                h = d.forward(ctx, h);
            }
        }
        let refined = match &self.hierarchy {
            Some(hier) => Some(hier.forward(ctx, &prompts)?.0),
            None => None,
        };
        let mut traces = Vec::new();
        for i in (0..STAGES - 1).rev() {
            let lvl = &self.decoder[i];
            h = lvl.reduce.forward(ctx, h).upsample2x().add(skips[i]);
            h = lvl.block.forward(ctx, h)?;
            if let (Some(refine), Some(dafmm), Some(ps)) = (&lvl.refine, &lvl.dafmm, &refined) {
                let (p, _) = refine.forward(ctx, ps[i], h);
                let (y, t) = dafmm.forward_traced(ctx, h, p)?;
                h = y;
                traces.push(t);
            }
        }
        traces.reverse();
        let output = x.add(self.head.forward(ctx, h));
        Ok(ForwardOutput {
            output,
            decisions,
            embeddings,
            stage_features,
            dafmm_traces: traces,
        })
    }

    /// Deterministic inference on a `(B, 3, H, W)` or `(3, H, W)` tensor,
    /// clipped to [0, 1].
    pub fn restore(&self, input: &Tensor) -> Result<Tensor> {
        let single = input.ndim() == 3;
        let x = if single {
            let mut s = vec![1];
            s.extend_from_slice(input.shape());
            input.clone().reshape(&s)?
        } else {
            input.clone()
        };
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &self.store);
        let out = self.forward(&ctx, g.constant(x))?;
        let y = out.output.value().map(|v| v.clamp(0.0, 1.0));
        if !y.all_finite() {
            return Err(Error::Numerical("restoration produced non-finite values".into()));
        }
        if single {
            y.reshape(input.shape())
        } else {
            Ok(y)
        }
    }

    /// Restores with stochastic prompt sampling driven by `rng`.
    pub fn restore_stochastic(&self, input: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &self.store).with_noise(rng);
        let out = self.forward(&ctx, g.constant(input.clone()))?;
        Ok(out.output.value().map(|v| v.clamp(0.0, 1.0)))
    }
}
