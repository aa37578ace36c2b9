//! Routing statistics, prototype affinity maps, prototype distances,
//! embedding exports and spectrum dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::degrade::{collate, write_gray_png, DegradationSample};
use crate::error::{Error, Result};
use crate::frequency::log_amplitude_image;
use crate::model::{Model, STAGES};
use crate::nn::Ctx;
use crate::routing::RoutingTrace;
use crate::tensor::Tensor;
use crate::wavelet::high_frequency_energy_fraction;

/// Shannon entropy (nats) of a probability vector; zero entries contribute 0.
pub fn entropy(p: &[f64]) -> f64 {
    // `0.0 -` rather than negation, so a one-hot vector gives +0, not -0
    0.0 - p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn argmax(v: &[f64]) -> usize {
    // first index wins ties, matching the routing top-k
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Summary of one stage's routing over a set of traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: usize,
    pub samples: usize,
    pub clusters: usize,
    pub entropy_mean: f64,
    pub entropy_min: f64,
    pub entropy_max: f64,
    /// Samples per argmax cluster.
    pub argmax_counts: Vec<usize>,
    /// Entropy of the normalized argmax histogram.
    pub argmax_entropy: f64,
    /// Fraction of samples whose label is the majority label of their
    /// argmax cluster.
    pub purity: f64,
    /// Majority label of each non-empty argmax cluster.
    pub majority: BTreeMap<usize, String>,
    /// Activations indexed `[cluster][expert]` over all selected clusters.
    pub expert_counts: Vec<Vec<usize>>,
}

/// Per-stage entropy, purity and utilization; an empty input is a
/// parameter error.
pub fn routing_stats(traces: &[RoutingTrace]) -> Result<Vec<StageStats>> {
    if traces.is_empty() {
        return Err(Error::param("no routing traces"));
    }
    let mut by_stage: BTreeMap<usize, Vec<&RoutingTrace>> = BTreeMap::new();
    for t in traces {
        by_stage.entry(t.stage).or_default().push(t);
    }
    let mut out = Vec::new();
    for (stage, ts) in by_stage {
        let n = ts.iter().map(|t| t.full_posterior.len()).max().unwrap_or(0);
        if n == 0 || ts.iter().any(|t| t.full_posterior.len() != n) {
            return Err(Error::param(format!("stage {stage}: inconsistent posterior widths")));
        }
        let ents: Vec<f64> = ts.iter().map(|t| entropy(&t.full_posterior)).collect();
        let mut counts = vec![0usize; n];
        let mut labels: Vec<BTreeMap<&str, usize>> = vec![BTreeMap::new(); n];
        let m = ts
            .iter()
            .flat_map(|t| t.expert_selected.iter().flatten())
            .max()
            .map_or(0, |e| e + 1);
        let mut experts = vec![vec![0usize; m]; n];
        for t in &ts {
            let a = argmax(&t.full_posterior);
            counts[a] += 1;
            *labels[a].entry(t.label.as_str()).or_default() += 1;
            for (c, es) in t.selected.iter().zip(&t.expert_selected) {
                for &e in es {
                    experts[*c][e] += 1;
                }
            }
        }
        let mut majority = BTreeMap::new();
        let mut agree = 0;
        for (c, l) in labels.iter().enumerate() {
            // ties go to the alphabetically first label
            if let Some((name, &k)) = l.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
                majority.insert(c, name.to_string());
                agree += k;
            }
        }
        let total = ts.len() as f64;
        let hist: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
        out.push(StageStats {
            stage,
            samples: ts.len(),
            clusters: n,
            entropy_mean: ents.iter().sum::<f64>() / total,
            entropy_min: ents.iter().cloned().fold(f64::INFINITY, f64::min),
            entropy_max: ents.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            argmax_counts: counts,
            argmax_entropy: entropy(&hist),
            purity: agree as f64 / total,
            majority,
            expert_counts: experts,
        });
    }
    Ok(out)
}

/// One CSV row per stage.
pub fn stats_csv(stats: &[StageStats]) -> String {
    let mut s = String::from("stage,samples,clusters,entropy_mean,entropy_min,entropy_max,argmax_entropy,purity,argmax_counts,expert_counts\n");
    for t in stats {
        let counts: Vec<String> = t.argmax_counts.iter().map(|c| c.to_string()).collect();
        let experts: Vec<String> = t
            .expert_counts
            .iter()
            .map(|row| row.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("/"))
            .collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            t.stage,
            t.samples,
            t.clusters,
            t.entropy_mean,
            t.entropy_min,
            t.entropy_max,
            t.argmax_entropy,
            t.purity,
            counts.join(" "),
            experts.join(" ")
        );
    }
    s
}

fn check_stage(model: &Model, stage: usize) -> Result<()> {
    if stage == 0 || stage > STAGES {
        return Err(Error::param(format!("stage must lie in 1..={STAGES}, got {stage}")));
    }
    if model.moe(stage - 1).is_none() {
        return Err(Error::param("this model has no routed experts"));
    }
    Ok(())
}

/// Routing traces of every stage for a set of samples.
pub fn collect_traces(model: &Model, samples: &[DegradationSample], batch: usize) -> Result<Vec<RoutingTrace>> {
    let mut out = Vec::new();
    for chunk in samples.chunks(batch.max(1)) {
        let (x, _) = collate(chunk)?;
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &model.store);
        let fwd = model.forward(&ctx, g.constant(x))?;
        let ids: Vec<String> = chunk.iter().map(|s| s.sample_id.clone()).collect();
        let labels: Vec<String> = chunk.iter().map(|s| s.label.to_string()).collect();
        for d in &fwd.decisions {
            out.extend(d.traces(&ids, &labels));
        }
    }
    out.sort_by_key(|t| t.stage);
    Ok(out)
}

/// Per-pixel cosine similarity `(N, h, w)` between the routed stage features
/// of one `(3, H, W)` image and each prototype, in [−1, 1].
///
/// Each pixel's feature goes through the router projection that the pooled
/// feature uses, so the map averages (before normalization) to the pooled
/// routing input.
pub fn affinity_map(model: &Model, image: &Tensor, stage: usize) -> Result<Tensor> {
    check_stage(model, stage)?;
    let moe = model.moe(stage - 1).expect("checked");
    let x = image.clone().reshape(&[1, 3, image.shape()[1], image.shape()[2]])?;
    let g = Graph::inference();
    let ctx = Ctx::new(&g, &model.store);
    let fwd = model.forward(&ctx, g.constant(x))?;
    let feat = fwd.stage_features[stage - 1];
    let s = feat.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    // (h·w, C) rows through the projection, then cosine with the prototypes
    let pix = feat.reshape(&[c, h * w]).permute(&[1, 0]);
    let z = moe.proj.forward(&ctx, pix).l2_normalize(1e-12);
    let p = ctx.p(moe.bank.prototypes).l2_normalize(1e-12);
    let sims = z.matmul_nt(p).value();
    let n = moe.bank.n;
    sims.permute(&[1, 0]).reshape(&[n, h, w])
}

/// Min-max scales each `(h, w)` map of an `(N, h, w)` stack to [0, 1];
/// constant maps become 0.5.
pub fn normalize_maps(maps: &Tensor) -> Result<Tensor> {
    let [n, h, w] = maps.shape() else {
        return Err(Error::shape(format!("expected (N, h, w), got {:?}", maps.shape())));
    };
    let hw = h * w;
    let mut out = maps.data().to_vec();
    for k in 0..*n {
        let m = &mut out[k * hw..(k + 1) * hw];
        let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in m.iter_mut() {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
        }
    }
    Tensor::new(maps.shape(), out)
}

/// Writes `affinity_p{k}.png` heatmaps and `affinity.csv` (raw cosines).
pub fn write_affinity(dir: impl AsRef<Path>, maps: &Tensor) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let norm = normalize_maps(maps)?;
    let (n, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let mut csv = String::from("prototype,y,x,cosine\n");
    for k in 0..n {
        write_gray_png(
            dir.join(format!("affinity_p{k}.png")),
            &norm.narrow(0, k, 1).reshape(&[h, w])?,
        )?;
        for y in 0..h {
            for x in 0..w {
                let _ = writeln!(csv, "{k},{y},{x},{}", maps.get(&[k, y, x]));
            }
        }
    }
    fs::write(dir.join("affinity.csv"), csv)?;
    Ok(())
}

/// Pairwise mean squared difference between prototype rows of an `(N, D)`
/// matrix.
pub fn prototype_mse_matrix(protos: &Tensor) -> Result<Tensor> {
    let (n, d) = protos.dims2()?;
    let p = protos.data();
    Ok(Tensor::from_fn(&[n, n], |i| {
        let (a, b) = (i / n, i % n);
        (0..d).map(|k| (p[a * d + k] - p[b * d + k]).powi(2)).sum::<f64>() / d as f64
    }))
}

/// Largest absolute cosine between distinct rows of an `(N, D)` matrix.
pub fn max_offdiag_cosine(protos: &Tensor) -> Result<f64> {
    let (n, d) = protos.dims2()?;
    let p = protos.data();
    let norm = |a: usize| p[a * d..(a + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut m: f64 = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            let dot: f64 = (0..d).map(|k| p[a * d + k] * p[b * d + k]).sum();
            m = m.max((dot / (norm(a) * norm(b))).abs());
        }
    }
    Ok(m)
}

/// Writes `mse_stage{l}.png` (scaled by the stage maximum, upsampled so each
/// entry is a block) and `mse_stage{l}.csv` for every prototype bank.
pub fn write_mse_matrices(dir: impl AsRef<Path>, model: &Model) -> Result<Vec<Tensor>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for bank in model.banks() {
        let m = prototype_mse_matrix(model.store.get(bank.prototypes))?;
        let n = bank.n;
        let mut csv = String::new();
        for a in 0..n {
            let row: Vec<String> = (0..n).map(|b| m.get(&[a, b]).to_string()).collect();
            let _ = writeln!(csv, "{}", row.join(","));
        }
        fs::write(dir.join(format!("mse_stage{}.csv", bank.stage)), csv)?;
        let hi = m.max_abs();
        const CELL: usize = 16;
        let img = Tensor::from_fn(&[n * CELL, n * CELL], |i| {
            let (y, x) = (i / (n * CELL), i % (n * CELL));
            let v = m.get(&[y / CELL, x / CELL]);
            if hi > 0.0 {
                v / hi
            } else {
                0.0
            }
        });
        write_gray_png(dir.join(format!("mse_stage{}.png", bank.stage)), &img)?;
        out.push(m);
    }
    Ok(out)
}

/// Pooled post-routing features of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub sample_id: String,
    pub label: String,
    pub features: Vec<f64>,
}

/// Pooled stage features (width = stage channels) for every sample.
pub fn export_embeddings(
    model: &Model,
    samples: &[DegradationSample],
    stage: usize,
    batch: usize,
) -> Result<Vec<EmbeddingRow>> {
    if stage == 0 || stage > STAGES {
        return Err(Error::param(format!("stage must lie in 1..={STAGES}, got {stage}")));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let (x, _) = collate(chunk)?;
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &model.store);
        let fwd = model.forward(&ctx, g.constant(x))?;
        let e = fwd.embeddings[stage - 1].value();
        let c = e.shape()[1];
        for (i, s) in chunk.iter().enumerate() {
            rows.push(EmbeddingRow {
                sample_id: s.sample_id.clone(),
                label: s.label.to_string(),
                features: e.data()[i * c..(i + 1) * c].to_vec(),
            });
        }
    }
    Ok(rows)
}

pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let width = rows.first().map_or(0, |r| r.features.len());
    let mut s = String::from("sample_id,label");
    for k in 0..width {
        let _ = write!(s, ",f{k}");
    }
    s.push('\n');
    for r in rows {
        let f: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{},{},{}", r.sample_id, r.label, f.join(","));
    }
    s
}

/// Projection onto the two leading principal components. Component signs
/// are fixed so the largest-magnitude loading is positive.
pub fn pca_2d(rows: &[EmbeddingRow]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.features.len());
    if n < 2 || d < 2 {
        return Err(Error::param("PCA needs at least two rows of width two"));
    }
    let mean: Vec<f64> = (0..d)
        .map(|k| rows.iter().map(|r| r.features[k]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, d, |i, k| rows[i].features[k] - mean[k]);
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let comps: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&j| {
            let v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            let big = v
                .iter()
                .cloned()
                .fold(0.0, |m: f64, a| if a.abs() > m.abs() { a } else { m });
            let sign = if big < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|a| a * sign).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let proj = |c: &Vec<f64>| (0..d).map(|k| x[(i, k)] * c[k]).sum::<f64>();
            [proj(&comps[0]), proj(&comps[1])]
        })
        .collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean pairwise distance between label centroids divided by the mean
/// distance of samples to their own label centroid. Needs two labels.
pub fn separability_ratio(rows: &[EmbeddingRow]) -> Result<f64> {
    let mut groups: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.label.as_str()).or_default().push(&r.features);
    }
    if groups.len() < 2 {
        return Err(Error::param("separability needs at least two labels"));
    }
    let centroid = |g: &Vec<&[f64]>| -> Vec<f64> {
        let d = g[0].len();
        (0..d)
            .map(|k| g.iter().map(|f| f[k]).sum::<f64>() / g.len() as f64)
            .collect()
    };
    let cents: Vec<Vec<f64>> = groups.values().map(centroid).collect();
    let mut between = 0.0;
    let mut pairs = 0;
    for a in 0..cents.len() {
        for b in a + 1..cents.len() {
            between += dist(&cents[a], &cents[b]);
            pairs += 1;
        }
    }
    between /= pairs as f64;
    let mut within = 0.0;
    for (g, c) in groups.values().zip(&cents) {
        within += g.iter().map(|f| dist(f, c)).sum::<f64>();
    }
    within /= rows.len() as f64;
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(between / within)
}

/// High-frequency energy fractions of one decoder level's frequency split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    /// Decoder level, 1 = full resolution.
    pub level: usize,
    pub ll_high_fraction: f64,
    pub low_high_fraction: f64,
    pub residual_high_fraction: f64,
}

/// Spectral radius above which energy counts as high frequency.
pub const SPECTRUM_CUTOFF: f64 = 0.5;

/// Runs one `(B, 3, H, W)` batch and measures, per decoder level, the
/// fraction of spectral energy in the outer half of radii for the LL band,
/// its smoothed part and the residual.
pub fn spectrum_rows(model: &Model, x: &Tensor) -> Result<Vec<SpectrumRow>> {
    let g = Graph::inference();
    let ctx = Ctx::new(&g, &model.store);
    let fwd = model.forward(&ctx, g.constant(x.clone()))?;
    if fwd.dafmm_traces.is_empty() {
        return Err(Error::param("this model has no frequency modulation"));
    }
    fwd.dafmm_traces
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(SpectrumRow {
                level: i + 1,
                ll_high_fraction: high_frequency_energy_fraction(&t.ll, SPECTRUM_CUTOFF)?,
                low_high_fraction: high_frequency_energy_fraction(&t.low, SPECTRUM_CUTOFF)?,
                residual_high_fraction: high_frequency_energy_fraction(&t.high, SPECTRUM_CUTOFF)?,
            })
        })
        .collect()
}

fn channel_mean(t: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = t.dims4()?;
    let d = t.data();
    Tensor::new(
        &[h, w],
        (0..h * w)
            .map(|i| (0..c).map(|k| d[k * h * w + i]).sum::<f64>() / c as f64)
            .collect(),
    )
}

/// Writes log-amplitude spectra of the first sample's channel-mean LL,
/// smoothed and residual bands per level (`spectrum_l{level}_{band}.png`)
/// plus `spectrum.csv` with the energy fractions.
pub fn write_spectra(dir: impl AsRef<Path>, model: &Model, x: &Tensor) -> Result<Vec<SpectrumRow>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let rows = spectrum_rows(model, x)?;
    let g = Graph::inference();
    let ctx = Ctx::new(&g, &model.store);
    let first = x.narrow(0, 0, 1);
    let fwd = model.forward(&ctx, g.constant(first))?;
    for (i, t) in fwd.dafmm_traces.iter().enumerate() {
        for (band, m) in [("ll", &t.ll), ("low", &t.low), ("high", &t.high)] {
            let img = log_amplitude_image(&channel_mean(m)?)?;
            write_gray_png(dir.join(format!("spectrum_l{}_{band}.png", i + 1)), &img)?;
        }
    }
    let mut csv = String::from("level,ll_high_fraction,low_high_fraction,residual_high_fraction\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            r.level, r.ll_high_fraction, r.low_high_fraction, r.residual_high_fraction
        );
    }
    fs::write(dir.join("spectrum.csv"), csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{procedural_image, Degradation, DegradationSettings};
    use crate::model::ModelConfig;
    use crate::routing::{init_prototypes, PrototypeInit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trace(stage: usize, label: &str, post: &[f64]) -> RoutingTrace {
        let a = argmax(post);
        RoutingTrace {
            stage,
            sample_id: String::new(),
            label: label.into(),
            full_posterior: post.to_vec(),
            selected: vec![a],
            cluster_weights: vec![1.0],
            expert_selected: vec![vec![0]],
            expert_weights: vec![vec![1.0]],
        }
    }

    fn small_model() -> Model {
        Model::new(
            ModelConfig {
                embed_dim: 8,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn stats_on_constructed_traces() {
        assert!(matches!(routing_stats(&[]), Err(Error::Param(_))));
        // everyone in cluster 0: purity is the majority fraction, histogram entropy 0
        let ts = vec![
            trace(1, "noise", &[0.8, 0.1, 0.1]),
            trace(1, "noise", &[0.7, 0.2, 0.1]),
            trace(1, "rain", &[0.6, 0.3, 0.1]),
        ];
        let s = &routing_stats(&ts).unwrap()[0];
        assert!((s.purity - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.argmax_entropy, 0.0);
        assert_eq!(s.expert_counts, vec![vec![3], vec![0], vec![0]]);
        // uniform posteriors: entropy log N
        let u = vec![trace(2, "x", &[0.25; 4]), trace(2, "y", &[0.25; 4])];
        let s = &routing_stats(&u).unwrap()[0];
        assert!((s.entropy_mean - 4f64.ln()).abs() < 1e-12);
        // a perfect split
        let p = vec![
            trace(1, "noise", &[0.9, 0.05, 0.05]),
            trace(1, "rain", &[0.05, 0.9, 0.05]),
            trace(1, "haze", &[0.05, 0.05, 0.9]),
            trace(1, "rain", &[0.1, 0.8, 0.1]),
        ];
        let s = &routing_stats(&p).unwrap()[0];
        assert_eq!(s.purity, 1.0);
        assert_eq!(s.majority[&1], "rain");
        assert!(stats_csv(std::slice::from_ref(s)).lines().count() == 2);
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-12);
        let one_hot = entropy(&[0.0, 1.0, 0.0]);
        assert_eq!(one_hot, 0.0);
        assert!(one_hot.is_sign_positive());
    }

    #[test]
    fn mse_matrix_closed_forms() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let p = init_prototypes(3, 8, PrototypeInit::Orthogonal, &mut r).unwrap();
        let m = prototype_mse_matrix(&p).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 0.0 } else { 2.0 / 8.0 };
                assert!((m.get(&[a, b]) - want).abs() < 1e-12);
                assert_eq!(m.get(&[a, b]), m.get(&[b, a]));
            }
        }
        let same = Tensor::from_fn(&[2, 4], |i| (i % 4) as f64);
        assert_eq!(prototype_mse_matrix(&same).unwrap().max_abs(), 0.0);
        assert!(max_offdiag_cosine(&p).unwrap() < 1e-12);
    }

    #[test]
    fn affinity_shape_range_and_stage_check() {
        let m = small_model();
        let img = procedural_image(32, 32, 1, "a").into_pixels();
        for stage in 1..=STAGES {
            let a = affinity_map(&m, &img, stage).unwrap();
            let side = 32 >> (stage - 1);
            assert_eq!(a.shape(), &[3, side, side]);
            assert!(a.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        }
        assert!(matches!(affinity_map(&m, &img, 0), Err(Error::Param(_))));
        assert!(matches!(affinity_map(&m, &img, 5), Err(Error::Param(_))));
        let n = normalize_maps(&affinity_map(&m, &img, 1).unwrap()).unwrap();
        assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let dir = tempfile::tempdir().unwrap();
        write_affinity(dir.path(), &affinity_map(&m, &img, 2).unwrap()).unwrap();
        assert!(dir.path().join("affinity_p2.png").exists());
        let csv = fs::read_to_string(dir.path().join("affinity.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 * 16 * 16);
    }

    #[test]
    fn affinity_mean_matches_the_pooled_routing_input() {
        // the projection is affine, so projecting pixels then averaging
        // equals projecting the pooled feature
        let m = small_model();
        let img = procedural_image(32, 32, 2, "a").into_pixels();
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &m.store);
        let fwd = m
            .forward(&ctx, g.constant(img.clone().reshape(&[1, 3, 32, 32]).unwrap()))
            .unwrap();
        let moe = m.moe(0).unwrap();
        let pooled = moe.route_feature(&ctx, fwd.stage_features[0]).value();
        let feat = fwd.stage_features[0].value();
        let pix = g.constant((*feat).clone().reshape(&[8, 1024]).unwrap().permute(&[1, 0]));
        let z = moe.proj.forward(&ctx, pix).value();
        for k in 0..8 {
            let mean: f64 = (0..1024).map(|i| z.get(&[i, k])).sum::<f64>() / 1024.0;
            assert!((mean - pooled.get(&[0, k])).abs() < 1e-10);
        }
    }

    #[test]
    fn embeddings_pca_and_separability() {
        let m = small_model();
        let st = DegradationSettings::default();
        let samples: Vec<_> = (0..4)
            .flat_map(|i| {
                let img = procedural_image(32, 32, i, "s");
                let st = st.clone();
                [Degradation::Noise, Degradation::Haze]
                    .into_iter()
                    .map(move |d| st.apply(&img, d, i).unwrap())
            })
            .collect();
        let rows = export_embeddings(&m, &samples, 1, 3).unwrap();
        assert_eq!(rows.len(), samples.len());
        assert!(rows.iter().all(|r| r.features.len() == 8));
        let csv = embeddings_csv(&rows);
        assert_eq!(csv.lines().count(), 1 + rows.len());
        let pc = pca_2d(&rows).unwrap();
        assert_eq!(pc.len(), rows.len());
        // projections are centred
        assert!(pc.iter().map(|p| p[0]).sum::<f64>().abs() < 1e-9);
        assert!(separability_ratio(&rows).unwrap().is_finite());
        assert!(export_embeddings(&m, &samples, 0, 3).is_err());
    }

    #[test]
    fn separability_on_constructed_clusters() {
        let row = |l: &str, f: [f64; 2]| EmbeddingRow {
            sample_id: String::new(),
            label: l.into(),
            features: f.to_vec(),
        };
        let rows = vec![
            row("a", [0.0, 1.0]),
            row("a", [0.0, -1.0]),
            row("b", [10.0, 1.0]),
            row("b", [10.0, -1.0]),
        ];
        // centroids 10 apart, every sample 1 from its centroid
        assert!((separability_ratio(&rows).unwrap() - 10.0).abs() < 1e-12);
        assert!(separability_ratio(&rows[..2]).is_err());
    }

    #[test]
    fn pca_recovers_the_dominant_axis() {
        let rows: Vec<EmbeddingRow> = (0..20)
            .map(|i| {
                let t = i as f64 - 9.5;
                EmbeddingRow {
                    sample_id: i.to_string(),
                    label: String::new(),
                    features: vec![3.0 * t, 0.1 * (i % 3) as f64, 1.0],
                }
            })
            .collect();
        let pc = pca_2d(&rows).unwrap();
        for (i, p) in pc.iter().enumerate() {
            assert!((p[0] - 3.0 * (i as f64 - 9.5)).abs() < 0.2);
        }
    }

    #[test]
    fn spectra_written_with_csv() {
        let m = small_model();
        let x = procedural_image(32, 32, 5, "s")
            .into_pixels()
            .reshape(&[1, 3, 32, 32])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rows = write_spectra(dir.path(), &m, &x).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            for f in [r.ll_high_fraction, r.low_high_fraction, r.residual_high_fraction] {
                assert!((0.0..=1.0).contains(&f));
            }
        }
        assert!(dir.path().join("spectrum_l1_low.png").exists());
        assert!(dir.path().join("spectrum.csv").exists());
        let mut mse_dir = dir.path().to_path_buf();
        mse_dir.push("mse");
        let ms = write_mse_matrices(&mse_dir, &m).unwrap();
        assert_eq!(ms.len(), STAGES);
    }
}
