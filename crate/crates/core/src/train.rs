//! Loss, optimizer, training loop, evaluation and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::degrade::{collate, DatasetSpec, Degradation, DegradationSample, SyntheticDataset};
use crate::error::{Error, Result};
use crate::metrics::{ms_ssim_var, psnr, ssim};
use crate::model::{Model, ModelConfig, STAGES};
use crate::nn::Ctx;
use crate::routing::PrototypeInit;
use crate::tensor::Tensor;

/// `mean|pred − target| + λ·(1 − MS-SSIM) + λ_orth·penalty`.
pub fn restoration_loss<'g>(
    pred: Var<'g>,
    target: Var<'g>,
    lambda: f64,
    orth: Option<(f64, Var<'g>)>,
) -> Result<Var<'g>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let mut loss = pred.sub(target).abs().mean();
    if lambda != 0.0 {
        let s = ms_ssim_var(pred, target)?;
        loss = loss.add(s.neg().add_scalar(1.0).mul_scalar(lambda));
    }
    if let Some((w, p)) = orth {
        if w != 0.0 {
            loss = loss.add(p.mul_scalar(w));
        }
    }
    Ok(loss)
}

/// Component toggles and overrides applied on top of the base model config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable_pcgrm: bool,
    pub disable_dafmm: bool,
    pub init_mode: Option<PrototypeInit>,
    pub cluster_counts_override: Option<[usize; STAGES]>,
    /// Replace prototype renormalization by projection onto orthonormal rows
    /// after every step.
    pub hard_orthogonal: bool,
}

impl Ablation {
    /// Applies a `flag=value` delta; unknown flags or bad values are
    /// parameter errors. A bare flag name means `true`.
    pub fn apply_delta(&mut self, delta: &str) -> Result<()> {
        let (key, value) = match delta.split_once('=') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (delta.trim(), None),
        };
        let boolean = |v: Option<&str>| -> Result<bool> {
            match v {
                None | Some("true") => Ok(true),
                Some("false") => Ok(false),
                Some(o) => Err(Error::param(format!("{key}: expected true or false, got {o:?}"))),
            }
        };
        match key {
            "disable_pcgrm" => self.disable_pcgrm = boolean(value)?,
            "disable_dafmm" => self.disable_dafmm = boolean(value)?,
            "hard_orthogonal" => self.hard_orthogonal = boolean(value)?,
            "init_mode" => {
                self.init_mode = Some(match value {
                    Some("orthogonal") => PrototypeInit::Orthogonal,
                    Some("random") => PrototypeInit::Random,
                    o => {
                        return Err(Error::param(format!(
                            "init_mode: expected orthogonal or random, got {o:?}"
                        )))
                    }
                })
            }
            "cluster_counts_override" => {
                let v = value.ok_or_else(|| Error::param("cluster_counts_override needs a value"))?;
                let counts: Vec<usize> = v
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::param(format!("cluster_counts_override: {e}")))?;
                let counts: [usize; STAGES] = counts
                    .try_into()
                    .map_err(|_| Error::param(format!("cluster_counts_override needs {STAGES} values")))?;
                self.cluster_counts_override = Some(counts);
            }
            other => return Err(Error::param(format!("unknown ablation flag {other:?}"))),
        }
        Ok(())
    }

    /// The model configuration with these toggles applied. Overridden
    /// cluster counts keep `k1` where it still fits, otherwise clamp it.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.use_pcgrm &= !self.disable_pcgrm;
        c.use_dafmm &= !self.disable_dafmm;
        if let Some(m) = self.init_mode {
            c.init_mode = m;
        }
        if let Some(n) = self.cluster_counts_override {
            c.cluster_counts = n;
            for l in 0..STAGES {
                c.k1_counts[l] = c.k1_counts[l].min(n[l]);
            }
        }
        c
    }
}

/// Synthetic train/eval data for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub tasks: Vec<Degradation>,
    /// Distinct clean training sources per task.
    pub train_sources: usize,
    /// Held-out evaluation images per task.
    pub eval_sources: usize,
    pub patch: usize,
    /// Side of the procedural training sources; crops of `patch` are taken.
    pub source_size: usize,
    /// Side of the evaluation images, which are used whole.
    pub eval_size: usize,
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: vec![Degradation::Noise, Degradation::Rain, Degradation::Haze],
            train_sources: 64,
            eval_sources: 8,
            patch: 64,
            source_size: 96,
            eval_size: 64,
            noise_sigma: 25.0,
        }
    }
}

impl DataConfig {
    fn spec(&self, sources: usize, patch: usize, size: usize, seed: u64) -> DatasetSpec {
        let mut spec = DatasetSpec {
            task_mix: self.tasks.iter().map(|&t| (t, sources)).collect(),
            expansion: BTreeMap::new(),
            patch,
            source_size: size,
            flip: patch < size,
            seed,
            settings: Default::default(),
        };
        spec.settings.noise_sigmas = vec![self.noise_sigma];
        spec
    }

    /// The training stream for `seed`.
    pub fn train_set(&self, seed: u64) -> Result<SyntheticDataset> {
        if self.tasks.is_empty() || self.train_sources == 0 {
            return Err(Error::param("training data needs at least one task and source"));
        }
        SyntheticDataset::new(self.spec(self.train_sources, self.patch, self.source_size, seed))
    }

    /// Held-out full images; their sources never appear in training.
    pub fn eval_set(&self, seed: u64) -> Result<Vec<DegradationSample>> {
        let mut spec = self.spec(self.eval_sources, self.eval_size, self.eval_size, seed ^ EVAL_SEED_SALT);
        spec.flip = false;
        SyntheticDataset::new(spec)?.materialize()
    }
}

const EVAL_SEED_SALT: u64 = 0x5eed_e7a1_0000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Optimizer steps in the run.
    pub steps: usize,
    pub batch: usize,
    /// The learning rate is halved from this step on.
    pub lr_halve_step: Option<usize>,
    /// Weight of the MS-SSIM term.
    pub loss_lambda: f64,
    /// Weight of the prototype orthogonality penalty.
    pub lambda_orth: f64,
    pub seed: u64,
    /// Evaluate every this many steps (and at the end); 0 disables.
    pub eval_every: usize,
    /// Samples per restoration call during evaluation.
    pub eval_batch: usize,
    pub ablation: Ablation,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            steps: 2000,
            batch: 8,
            lr_halve_step: Some(1000),
            loss_lambda: 0.4,
            lambda_orth: 0.01,
            seed: 0,
            eval_every: 500,
            eval_batch: 4,
            ablation: Ablation::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::param(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        let (b1, b2) = self.betas;
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return Err(Error::param(format!("betas must lie in (0, 1), got ({b1}, {b2})")));
        }
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::param("batch sizes must be >= 1"));
        }
        if !(self.eps > 0.0) || !(self.loss_lambda >= 0.0) || !(self.lambda_orth >= 0.0) {
            return Err(Error::param("eps must be > 0 and loss weights >= 0"));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        self.ablation.model_config(&self.model)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_halve_step {
            Some(h) if step >= h => 0.5 * self.lr,
            _ => self.lr,
        }
    }
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One update. Parameters without a gradient keep their moments and value.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], lr: f64, betas: (f64, f64), eps: f64) {
        self.t += 1;
        let (b1, b2) = betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params[i].data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

/// Quality of one task at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Degradation label, or `"average"` for the mean over tasks.
    pub task: String,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the degraded inputs against the clean targets.
    pub input_psnr: f64,
    pub samples: usize,
}

/// Restores every sample and reports mean PSNR/SSIM per task plus an
/// `"average"` row (the unweighted mean over tasks).
pub fn evaluate(model: &Model, samples: &[DegradationSample], step: usize, batch: usize) -> Result<Vec<MetricsRecord>> {
    if samples.is_empty() {
        return Err(Error::param("empty evaluation set"));
    }
    let mut per: BTreeMap<Degradation, (f64, f64, f64, usize)> = BTreeMap::new();
    for chunk in samples.chunks(batch.max(1)) {
        let (deg, _) = collate(chunk)?;
        let out = model.restore(&deg)?;
        for (i, s) in chunk.iter().enumerate() {
            let y = out.narrow(0, i, 1).reshape(s.clean.shape())?;
            let e = per.entry(s.label).or_default();
            e.0 += psnr(&y, &s.clean)?;
            e.1 += ssim(&y, &s.clean)?;
            e.2 += psnr(&s.degraded, &s.clean)?;
            e.3 += 1;
        }
    }
    let mut rows: Vec<MetricsRecord> = per
        .into_iter()
        .map(|(t, (p, s, ip, n))| MetricsRecord {
            step,
            task: t.to_string(),
            psnr: p / n as f64,
            ssim: s / n as f64,
            input_psnr: ip / n as f64,
            samples: n,
        })
        .collect();
    let k = rows.len() as f64;
    let avg = MetricsRecord {
        step,
        task: "average".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / k,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / k,
        input_psnr: rows.iter().map(|r| r.input_psnr).sum::<f64>() / k,
        samples: rows.iter().map(|r| r.samples).sum(),
    };
    rows.push(avg);
    Ok(rows)
}

/// Appends records to a CSV file, writing the header if the file is new.
pub fn append_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "step,task,psnr,ssim,input_psnr,samples")?;
    }
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.step, r.task, r.psnr, r.ssim, r.input_psnr, r.samples
        )?;
    }
    Ok(())
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub params: Vec<(String, Tensor)>,
    pub adam: Adam,
    /// `(seed, stream, word position)` of the prompt-noise generator.
    pub noise_rng: ([u8; 32], u64, u128),
    pub losses: Vec<f64>,
}

const MAGIC: &[u8; 8] = b"CLUSTRCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: usize,
    adam_t: u64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    /// Decimal string; JSON numbers cannot hold a u128 exactly.
    rng_word_pos: String,
    params: Vec<(String, Vec<usize>)>,
    losses: Vec<f64>,
}

impl Checkpoint {
    /// Binary layout: magic, u32 version, u64 header length, JSON header,
    /// then little-endian f64 parameters, Adam first moments and second
    /// moments, each in header order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            adam_t: self.adam.t,
            rng_seed: self.noise_rng.0,
            rng_stream: self.noise_rng.1,
            rng_word_pos: self.noise_rng.2.to_string(),
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
            losses: self.losses.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        let tensors = self
            .params
            .iter()
            .map(|(_, t)| t)
            .chain(&self.adam.m)
            .chain(&self.adam.v);
        for t in tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(&json)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let total: usize = h.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if rest.len() != 3 * total * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} payload bytes, found {}",
                3 * total * 8,
                rest.len()
            )));
        }
        let mut vals = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut read = |shape: &[usize]| -> Result<Tensor> {
            let n = shape.iter().product();
            Tensor::new(shape, vals.by_ref().take(n).collect())
        };
        let mut params = Vec::new();
        for (n, s) in &h.params {
            params.push((n.clone(), read(s)?));
        }
        let m = h.params.iter().map(|(_, s)| read(s)).collect::<Result<_>>()?;
        let v = h.params.iter().map(|(_, s)| read(s)).collect::<Result<_>>()?;
        let word_pos = h.rng_word_pos.parse().map_err(|_| bad("bad generator position"))?;
        Ok(Self {
            config: h.config,
            step: h.step,
            params,
            adam: Adam { m, v, t: h.adam_t },
            noise_rng: (h.rng_seed, h.rng_stream, word_pos),
            losses: h.losses,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        // write-then-rename keeps the previous file intact on failure
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        self.write_to(&mut f)?;
        f.flush()?;
        drop(f);
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(fs::File::open(path)?))
    }

    /// Rebuilds the model and checks that every parameter name and shape
    /// matches its configuration.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model_config(), 0)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, (name, t)) in ids.into_iter().zip(&self.params) {
            if model.store.name(id) != name {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} found where {:?} was expected",
                    model.store.name(id)
                )));
            }
            model
                .store
                .set(id, t.clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(model)
    }
}

/// Single-writer training loop over a deterministic data stream.
///
/// Step `t` consumes the samples at positions `t·B .. (t+1)·B` of the
/// concatenated shuffled epochs, so resuming needs only the step counter,
/// the parameters, the optimizer moments and the noise generator state.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    noise: ChaCha8Rng,
    data: SyntheticDataset,
    order: Option<(u64, Vec<usize>)>,
    pub step: usize,
    /// Loss of every completed step.
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: SyntheticDataset) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::param("empty training set"));
        }
        let mut model = Model::new(config.model_config(), config.seed)?;
        model.normalize_prototypes();
        let adam = Adam::new(model.store.values());
        let noise = ChaCha8Rng::seed_from_u64(crate::degrade::mix_seed(config.seed, 0x6015e, 0));
        Ok(Self {
            config,
            model,
            adam,
            noise,
            data,
            order: None,
            step: 0,
            losses: Vec::new(),
        })
    }

    /// Continues from a checkpoint with the given data stream.
    pub fn resume(ck: &Checkpoint, data: SyntheticDataset) -> Result<Self> {
        let model = ck.model()?;
        let mut noise = ChaCha8Rng::from_seed(ck.noise_rng.0);
        noise.set_stream(ck.noise_rng.1);
        noise.set_word_pos(ck.noise_rng.2);
        Ok(Self {
            config: ck.config.clone(),
            model,
            adam: ck.adam.clone(),
            noise,
            data,
            order: None,
            step: ck.step,
            losses: ck.losses.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .model
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params,
            adam: self.adam.clone(),
            noise_rng: (
                self.noise.get_seed(),
                self.noise.get_stream(),
                self.noise.get_word_pos(),
            ),
            losses: self.losses.clone(),
        }
    }

    fn batch(&mut self) -> Result<Vec<DegradationSample>> {
        let n = self.data.epoch_len();
        let b = self.config.batch;
        let mut out = Vec::with_capacity(b);
        for j in 0..b {
            let pos = self.step * b + j;
            let epoch = (pos / n) as u64;
            if self.order.as_ref().map(|o| o.0) != Some(epoch) {
                self.order = Some((epoch, self.data.order(epoch)));
            }
            let idx = self.order.as_ref().expect("order cached").1[pos % n];
            out.push(self.data.sample(epoch, idx)?);
        }
        Ok(out)
    }

    /// One optimizer step; returns the loss before the update.
    ///
    /// A non-finite loss or gradient is a numerical error and leaves the
    /// model, optimizer and step counter untouched.
    pub fn train_step(&mut self) -> Result<f64> {
        let samples = self.batch()?;
        let (x, y) = collate(&samples)?;
        let (loss, grads) = {
            let g = Graph::new();
            let mut noise = self.noise.clone();
            let ctx = Ctx::new(&g, &self.model.store).with_noise(&mut noise);
            let out = self.model.forward(&ctx, g.constant(x))?;
            let pen = self
                .model
                .orthogonality_penalty(&ctx)
                .map(|p| (self.config.lambda_orth, p));
            let loss = restoration_loss(out.output, g.constant(y), self.config.loss_lambda, pen)?;
            let value = loss.value().data()[0];
            let mut gr = g.backward(loss);
            let grads = ctx.param_grads(&mut gr);
            drop(ctx);
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {value} at step {}; parameters kept at the last good state",
                    self.step
                )));
            }
            if grads.iter().flatten().any(|t| !t.all_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at step {}; parameters kept at the last good state",
                    self.step
                )));
            }
            self.noise = noise;
            (value, grads)
        };
        let lr = self.config.lr_at(self.step);
        let c = &self.config;
        self.adam
            .step(self.model.store.values_mut(), &grads, lr, c.betas, c.eps);
        if c.ablation.hard_orthogonal {
            self.model.project_prototypes();
        } else {
            self.model.normalize_prototypes();
        }
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Trains up to `config.steps`, evaluating on `eval` every `eval_every`
    /// steps and at the end. `on_event` sees every loss and metrics batch.
    pub fn run(
        &mut self,
        eval: Option<&[DegradationSample]>,
        mut on_event: impl FnMut(&Trainer, TrainEvent<'_>) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let mut last = Vec::new();
        while self.step < self.config.steps {
            let loss = self.train_step()?;
            on_event(self, TrainEvent::Step { step: self.step, loss })?;
            let every = self.config.eval_every;
            let due = (every > 0 && self.step % every == 0) || self.step == self.config.steps;
            if let (Some(ev), true) = (eval, due) {
                last = evaluate(&self.model, ev, self.step, self.config.eval_batch)?;
                on_event(self, TrainEvent::Eval(&last))?;
            }
        }
        Ok(last)
    }
}

pub enum TrainEvent<'a> {
    /// `step` counts completed steps.
    Step {
        step: usize,
        loss: f64,
    },
    Eval(&'a [MetricsRecord]),
}

/// JSON summary written at the end of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub num_params: usize,
    pub initial_loss_mean: f64,
    pub final_loss_mean: f64,
    pub metrics: Vec<MetricsRecord>,
}

impl RunSummary {
    /// Loss means over the first and last `window` steps.
    pub fn new(trainer: &Trainer, metrics: Vec<MetricsRecord>, window: usize) -> Self {
        let l = &trainer.losses;
        let w = window.min(l.len()).max(1);
        let mean = |s: &[f64]| {
            if s.is_empty() {
                f64::NAN
            } else {
                s.iter().sum::<f64>() / s.len() as f64
            }
        };
        Self {
            steps: trainer.step,
            num_params: trainer.model.num_params(),
            initial_loss_mean: mean(&l[..w.min(l.len())]),
            final_loss_mean: mean(&l[l.len().saturating_sub(w)..]),
            metrics,
        }
    }
}

/// A named set of ablation deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub deltas: Vec<String>,
}

impl Variant {
    pub fn new(name: &str, deltas: &[&str]) -> Self {
        Self {
            name: name.into(),
            deltas: deltas.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Component toggles: (a) wavelet blocks only, (b) + routed experts,
/// (c) + frequency modulation.
pub fn component_matrix() -> Vec<Variant> {
    vec![
        Variant::new("a", &["disable_pcgrm", "disable_dafmm"]),
        Variant::new("b", &["disable_dafmm"]),
        Variant::new("c", &[]),
    ]
}

/// Per-stage cluster counts.
pub fn cluster_matrix() -> Vec<Variant> {
    vec![
        Variant::new("3-3-3-3", &["cluster_counts_override=3,3,3,3"]),
        Variant::new("2-3-4-6", &["cluster_counts_override=2,3,4,6"]),
        Variant::new("6-4-3-2", &["cluster_counts_override=6,4,3,2"]),
    ]
}

/// Orthogonal versus random prototype initialization.
pub fn init_matrix() -> Vec<Variant> {
    vec![
        Variant::new("orthogonal", &["init_mode=orthogonal"]),
        Variant::new("random", &["init_mode=random"]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub deltas: Vec<String>,
    pub num_params: usize,
    /// Per-task rows followed by the average.
    pub metrics: Vec<MetricsRecord>,
}

impl AblationRow {
    pub fn average(&self) -> Option<&MetricsRecord> {
        self.metrics.iter().find(|r| r.task == "average")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Markdown table with one `PSNR/SSIM` column per task and the average.
    pub fn to_markdown(&self) -> String {
        let Some(first) = self.rows.first() else {
            return String::new();
        };
        let tasks: Vec<&str> = first.metrics.iter().map(|r| r.task.as_str()).collect();
        let mut s = format!("| variant | params | {} |\n", tasks.join(" | "));
        s += &format!("|---|---:|{}\n", "---|".repeat(tasks.len()));
        for row in &self.rows {
            let cells: Vec<String> = row
                .metrics
                .iter()
                .map(|r| format!("{:.2}/{:.4}", r.psnr, r.ssim))
                .collect();
            s += &format!("| {} | {} | {} |\n", row.name, row.num_params, cells.join(" | "));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,task,psnr,ssim,input_psnr\n");
        for row in &self.rows {
            for r in &row.metrics {
                s += &format!("{},{},{},{},{}\n", row.name, r.task, r.psnr, r.ssim, r.input_psnr);
            }
        }
        s
    }
}

/// Validates every delta of every variant without training.
pub fn check_variants(base: &TrainConfig, variants: &[Variant]) -> Result<Vec<TrainConfig>> {
    variants
        .iter()
        .map(|v| {
            let mut c = base.clone();
            for d in &v.deltas {
                c.ablation.apply_delta(d)?;
            }
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// Trains each variant from the shared seed and evaluates it on the shared
/// held-out set. All deltas are validated before any training starts.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    mut on_event: impl FnMut(&str, &Trainer, TrainEvent<'_>) -> Result<()>,
) -> Result<AblationTable> {
    let configs = check_variants(base, variants)?;
    let train = base.data.train_set(base.seed)?;
    let eval = base.data.eval_set(base.seed)?;
    let mut table = AblationTable::default();
    for (v, c) in variants.iter().zip(configs) {
        let mut t = Trainer::new(c, train.clone())?;
        t.run(None, |t, e| on_event(&v.name, t, e))?;
        let metrics = evaluate(&t.model, &eval, t.step, t.config.eval_batch)?;
        table.rows.push(AblationRow {
            name: v.name.clone(),
            deltas: v.deltas.clone(),
            num_params: t.model.num_params(),
            metrics,
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, GradCheckOptions};

    fn tiny() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch: 2,
            eval_every: 0,
            model: ModelConfig {
                embed_dim: 8,
                ..ModelConfig::default()
            },
            data: DataConfig {
                train_sources: 2,
                eval_sources: 1,
                patch: 32,
                source_size: 48,
                eval_size: 32,
                ..DataConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn trainer(c: &TrainConfig) -> Trainer {
        Trainer::new(c.clone(), c.data.train_set(c.seed).unwrap()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let g = Graph::new();
        let a = g.leaf(Tensor::full(&[1, 3, 32, 32], 0.3));
        let b = g.constant(Tensor::full(&[1, 3, 32, 32], 0.4));
        let l = restoration_loss(a, b, 0.0, None).unwrap();
        assert!((l.value().data()[0] - 0.1).abs() < 1e-12);
        let l = restoration_loss(b, b, 0.4, None).unwrap();
        assert_eq!(l.value().data()[0], 0.0);
        assert!(restoration_loss(a, g.constant(Tensor::zeros(&[1, 3, 16, 16])), 0.0, None).is_err());
    }

    #[test]
    fn loss_is_stationary_at_the_target() {
        let t = Tensor::uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let g = Graph::new();
        let p = g.leaf(t.clone());
        let l = restoration_loss(p, g.constant(t), 0.4, None).unwrap();
        let gr = g.backward(l);
        let grad = gr.wrt(p).unwrap();
        assert!(grad.data().iter().all(|v| v.abs() < 1e-9), "{}", grad.max_abs());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::uniform(&[1, 1, 32, 32], 0.1, 0.9, &mut r);
        let b = Tensor::uniform(&[1, 1, 32, 32], 0.1, 0.9, &mut r);
        let report = check(
            &[a, b],
            |_, v| restoration_loss(v[0], v[1], 0.4, None).unwrap(),
            &GradCheckOptions::default(),
        );
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn adam_matches_hand_computation() {
        let mut p = vec![Tensor::full(&[1], 1.0)];
        let mut a = Adam::new(&p);
        a.step(&mut p, &[Some(Tensor::full(&[1], 2.0))], 0.1, (0.9, 0.999), 1e-8);
        // first bias-corrected step moves by lr·g/|g| (up to eps)
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
        a.step(&mut p, &[None], 0.1, (0.9, 0.999), 1e-8);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn config_validation_and_toml_roundtrip() {
        let c = TrainConfig::default();
        assert!(c.validate().is_ok());
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let bad = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Param(_))));
        let bad = TrainConfig {
            betas: (0.9, 1.0),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::from_toml("lr = 0.1\nbogus = 1").is_err());
        let part = TrainConfig::from_toml("steps = 10\n[ablation]\ndisable_dafmm = true").unwrap();
        assert_eq!(part.steps, 10);
        assert!(!part.model_config().use_dafmm);
        assert_eq!(c.lr_at(999), 2e-4);
        assert_eq!(c.lr_at(1000), 1e-4);
    }

    #[test]
    fn ablation_deltas() {
        let mut a = Ablation::default();
        a.apply_delta("disable_pcgrm").unwrap();
        a.apply_delta("cluster_counts_override=2,3,4,6").unwrap();
        a.apply_delta("init_mode=random").unwrap();
        assert!(a.disable_pcgrm);
        let m = a.model_config(&ModelConfig::default());
        assert_eq!(m.cluster_counts, [2, 3, 4, 6]);
        assert_eq!(m.init_mode, PrototypeInit::Random);
        assert!(matches!(a.apply_delta("use_magic=true"), Err(Error::Param(_))));
        assert!(matches!(a.apply_delta("disable_dafmm=maybe"), Err(Error::Param(_))));
        assert!(matches!(
            a.apply_delta("cluster_counts_override=1,2"),
            Err(Error::Param(_))
        ));
        let bad = [Variant::new("x", &["nonsense"])];
        assert!(matches!(
            check_variants(&TrainConfig::default(), &bad),
            Err(Error::Param(_))
        ));
        assert_eq!(
            check_variants(&TrainConfig::default(), &component_matrix())
                .unwrap()
                .len(),
            3
        );
        assert_eq!(
            check_variants(&TrainConfig::default(), &cluster_matrix())
                .unwrap()
                .len(),
            3
        );
    }

    #[test]
    fn zero_lr_step_only_renormalizes() {
        let c = TrainConfig { lr: 0.0, ..tiny() };
        let mut t = trainer(&c);
        let before = t.model.store.values().to_vec();
        t.train_step().unwrap();
        for (a, b) in before.iter().zip(t.model.store.values()) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let c = tiny();
        let mut a = trainer(&c);
        for _ in 0..3 {
            a.train_step().unwrap();
        }
        let mut b = trainer(&c);
        b.train_step().unwrap();
        let mut bytes = Vec::new();
        b.checkpoint().write_to(&mut bytes).unwrap();
        let ck = Checkpoint::read_from(bytes.as_slice()).unwrap();
        let mut b = Trainer::resume(&ck, c.data.train_set(c.seed).unwrap()).unwrap();
        for _ in 0..2 {
            b.train_step().unwrap();
        }
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model.store.values(), b.model.store.values());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let c = tiny();
        let mut t = trainer(&c);
        t.train_step().unwrap();
        let ck = t.checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ck");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.adam, ck.adam);
        assert_eq!(back.noise_rng, ck.noise_rng);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.model().unwrap().store.values(), t.model.store.values());
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(bytes.as_slice()),
            Err(Error::Checkpoint(_))
        ));
        bytes[0] = b'C';
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(
            Checkpoint::read_from(bytes.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn divergence_keeps_the_last_good_state() {
        let c = tiny();
        let mut t = trainer(&c);
        let id = t.model.store.find("head.bias").unwrap();
        t.model.store.get_mut(id).data_mut()[0] = f64::NAN;
        let before = t.checkpoint();
        assert!(matches!(t.train_step(), Err(Error::Numerical(_))));
        assert_eq!(t.step, 0);
        assert_eq!(t.adam, before.adam);
        assert_eq!(t.checkpoint().noise_rng, before.noise_rng);
    }

    #[test]
    fn evaluation_reports_tasks_and_average() {
        let c = tiny();
        let t = trainer(&c);
        let ev = c.data.eval_set(c.seed).unwrap();
        let rows = evaluate(&t.model, &ev, 0, 2).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.last().unwrap().task, "average");
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.ssim));
            // the untrained model is the identity
            assert!((r.psnr - r.input_psnr).abs() < 0.5, "{r:?}");
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        append_metrics_csv(&p, &rows).unwrap();
        append_metrics_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * rows.len());
        assert!(matches!(evaluate(&t.model, &[], 0, 2), Err(Error::Param(_))));
    }

    #[test]
    fn eval_sources_are_disjoint_from_training() {
        let c = tiny();
        let tr = c.data.train_set(c.seed).unwrap().materialize().unwrap();
        let ev = c.data.eval_set(c.seed).unwrap();
        for e in &ev {
            for s in &tr {
                assert_ne!(e.clean.narrow(1, 0, 32).narrow(2, 0, 32), s.clean);
            }
        }
    }
}
