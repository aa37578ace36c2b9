//! `clustr`: synthesize data, train, evaluate, run ablations and inspect
//! trained models.
//!
//! Exit codes: 0 on success, 1 on parameter (or I/O, shape, config) errors,
//! 2 on numerical errors such as training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use clustr_core::degrade::collate;
use clustr_core::degrade::{
    load_paired_folder, read_png, write_paired_folder, DatasetSpec, Degradation, DegradationSample, SyntheticDataset,
};
use clustr_core::diagnostics::{
    affinity_map, collect_traces, embeddings_csv, export_embeddings, pca_2d, routing_stats, separability_ratio,
    stats_csv, write_affinity, write_mse_matrices, write_spectra,
};
use clustr_core::model::{Model, ModelConfig};
use clustr_core::routing::{read_traces, write_traces, PrototypeInit};
use clustr_core::train::{
    append_metrics_csv, cluster_matrix, component_matrix, evaluate, init_matrix, run_ablation, Checkpoint, RunSummary,
    TrainConfig, TrainEvent, Trainer, Variant,
};
use clustr_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "clustr",
    version,
    about = "Cluster-routed all-in-one image restoration at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset (`<task>/{degraded,clean}/*.png`).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated degradation labels.
        #[arg(long, default_value = "noise,rain,haze", value_delimiter = ',')]
        tasks: Vec<String>,
        /// Clean sources per task.
        #[arg(long, default_value_t = 8)]
        sources: usize,
        /// Image side; a multiple of 16.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a TOML config; flags override file values.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the checkpoint, metrics and summary.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        eval_every: Option<usize>,
        /// Ablation deltas such as `disable_dafmm` or `init_mode=random`.
        #[arg(long = "ablate")]
        deltas: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write a checkpoint every this many steps (and at the end).
        #[arg(long, default_value_t = 100)]
        checkpoint_every: usize,
    },
    /// Evaluate a checkpoint on a paired folder or the synthetic held-out set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write restored images here.
        #[arg(long)]
        save_images: Option<PathBuf>,
        /// JSON output file (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed of the synthetic held-out set (defaults to the training seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and compare ablation variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Matrix::Components)]
        matrix: Matrix,
        /// Extra variant `name:delta,delta`; replaces the preset when given.
        #[arg(long = "variant")]
        variants: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Analysis tools.
    Diagnose {
        #[command(subcommand)]
        tool: Diagnose,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Matrix {
    Components,
    Clusters,
    Init,
}

#[derive(Subcommand)]
enum Diagnose {
    /// Routing entropy, purity and expert utilization.
    Stats {
        /// Read traces from a JSONL file instead of running a model.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-pixel prototype affinity heatmaps of one image.
    Affinity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 1)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise prototype MSE per stage, from a checkpoint or a fresh init.
    Mse {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Without a checkpoint: initialization to inspect.
        #[arg(long, value_enum, default_value_t = InitArg::Orthogonal)]
        init: InitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pooled stage embeddings, their PCA projection and separability.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Spectra of the frequency split at each decoder level.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Orthogonal,
    Random,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            tasks,
            sources,
            size,
            seed,
        } => synth(&out, &tasks, sources, size, seed),
        Command::Train {
            config,
            out,
            resume,
            steps,
            batch,
            lr,
            eval_every,
            deltas,
            seed,
            checkpoint_every,
        } => {
            let mut c = load_config(config.as_deref())?;
            if let Some(v) = steps {
                c.steps = v;
            }
            if let Some(v) = batch {
                c.batch = v;
            }
            if let Some(v) = lr {
                c.lr = v;
            }
            if let Some(v) = eval_every {
                c.eval_every = v;
            }
            if let Some(v) = seed {
                c.seed = v;
            }
            for d in &deltas {
                c.ablation.apply_delta(d)?;
            }
            c.validate()?;
            train(c, &out, resume.as_deref(), checkpoint_every)
        }
        Command::Eval {
            checkpoint,
            data,
            save_images,
            out,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.model()?;
            let samples = eval_samples(&ck.config, data.as_deref(), seed)?;
            let rows = evaluate(&model, &samples, ck.step, ck.config.eval_batch)?;
            if let Some(dir) = save_images {
                let restored: Vec<DegradationSample> = samples
                    .iter()
                    .map(|s| {
                        Ok(DegradationSample {
                            degraded: model.restore(&s.degraded)?,
                            ..s.clone()
                        })
                    })
                    .collect::<Result<_>>()?;
                write_paired_folder(dir, &restored)?;
            }
            emit_json(out.as_deref(), serde_json::to_value(&rows)?)
        }
        Command::Ablate {
            config,
            matrix,
            variants,
            steps,
            out,
            seed,
        } => {
            let mut c = load_config(config.as_deref())?;
            if let Some(v) = steps {
                c.steps = v;
            }
            if let Some(v) = seed {
                c.seed = v;
            }
            let vs = if variants.is_empty() {
                match matrix {
                    Matrix::Components => component_matrix(),
                    Matrix::Clusters => cluster_matrix(),
                    Matrix::Init => init_matrix(),
                }
            } else {
                variants.iter().map(|v| parse_variant(v)).collect::<Result<_>>()?
            };
            fs::create_dir_all(&out)?;
            let table = run_ablation(&c, &vs, |name, _, e| {
                if let TrainEvent::Step { step, loss } = e {
                    if step % 50 == 0 {
                        eprintln!("[{name}] step {step} loss {loss:.5}");
                    }
                }
                Ok(())
            })?;
            fs::write(out.join("ablation.md"), table.to_markdown())?;
            fs::write(out.join("ablation.csv"), table.to_csv())?;
            fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
            print!("{}", table.to_markdown());
            Ok(())
        }
        Command::Diagnose { tool } => diagnose(tool),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_toml(&fs::read_to_string(p)?),
        None => Ok(TrainConfig::default()),
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    let (name, deltas) = s.split_once(':').unwrap_or((s, ""));
    if name.is_empty() {
        return Err(Error::Param(format!("variant {s:?} needs a name")));
    }
    let deltas: Vec<&str> = deltas.split(',').filter(|d| !d.is_empty()).collect();
    Ok(Variant::new(name, &deltas))
}

fn synth(out: &Path, tasks: &[String], sources: usize, size: usize, seed: u64) -> Result<()> {
    let mut mix = std::collections::BTreeMap::new();
    for t in tasks {
        mix.insert(t.parse::<Degradation>()?, sources);
    }
    let spec = DatasetSpec {
        task_mix: mix,
        expansion: Default::default(),
        patch: size,
        source_size: size,
        flip: false,
        seed,
        settings: Default::default(),
    };
    let samples = SyntheticDataset::new(spec)?.materialize()?;
    write_paired_folder(out, &samples)?;
    println!("wrote {} pairs to {}", samples.len(), out.display());
    Ok(())
}

fn train(c: TrainConfig, out: &Path, resume: Option<&Path>, checkpoint_every: usize) -> Result<()> {
    fs::create_dir_all(out)?;
    let data = c.data.train_set(c.seed)?;
    let mut t = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut t = Trainer::resume(&ck, data)?;
            // only the budget and cadence may change on resume
            t.config.steps = c.steps;
            t.config.eval_every = c.eval_every;
            t
        }
        None => Trainer::new(c.clone(), data)?,
    };
    fs::write(out.join("config.toml"), t.config.to_toml())?;
    let eval = t.config.data.eval_set(t.config.seed)?;
    let ck_path = out.join("model.ck");
    let metrics_path = out.join("metrics.csv");
    let loss_path = out.join("loss.csv");
    if !loss_path.exists() {
        fs::write(&loss_path, "step,loss\n")?;
    }
    let result = t.run(Some(&eval), |t, e| {
        match e {
            TrainEvent::Step { step, loss } => {
                use std::io::Write;
                let mut f = fs::OpenOptions::new().append(true).open(&loss_path)?;
                writeln!(f, "{step},{loss}")?;
                if step % 10 == 0 {
                    eprintln!("step {step} loss {loss:.5}");
                }
                if checkpoint_every > 0 && step % checkpoint_every == 0 {
                    t.checkpoint().save(&ck_path)?;
                }
            }
            TrainEvent::Eval(rows) => {
                append_metrics_csv(&metrics_path, rows)?;
                for r in rows {
                    eprintln!(
                        "  eval {}: {:.2} dB / {:.4} (input {:.2} dB)",
                        r.task, r.psnr, r.ssim, r.input_psnr
                    );
                }
            }
        }
        Ok(())
    });
    match result {
        Ok(metrics) => {
            t.checkpoint().save(&ck_path)?;
            let summary = RunSummary::new(&t, metrics, 100);
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Err(e) => {
            // the trainer still holds the last good state
            t.checkpoint().save(out.join("last_good.ck"))?;
            Err(e)
        }
    }
}

fn eval_samples(c: &TrainConfig, data: Option<&Path>, seed: Option<u64>) -> Result<Vec<DegradationSample>> {
    match data {
        Some(d) => {
            let s = load_paired_folder(d)?;
            if s.is_empty() {
                return Err(Error::Param(format!("no image pairs under {}", d.display())));
            }
            Ok(s)
        }
        None => c.data.eval_set(seed.unwrap_or(c.seed)),
    }
}

fn emit_json(out: Option<&Path>, v: serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&v)?;
    match out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path)?;
    let m = ck.model()?;
    Ok((ck, m))
}

fn diagnose(tool: Diagnose) -> Result<()> {
    match tool {
        Diagnose::Stats {
            traces,
            checkpoint,
            data,
            out,
            seed,
        } => {
            fs::create_dir_all(&out)?;
            let ts = match (traces, checkpoint) {
                (Some(p), _) => read_traces(&fs::read_to_string(p)?)?,
                (None, Some(ck)) => {
                    let (ck, model) = load_model(&ck)?;
                    let samples = eval_samples(&ck.config, data.as_deref(), seed)?;
                    let ts = collect_traces(&model, &samples, ck.config.eval_batch)?;
                    write_traces(fs::File::create(out.join("traces.jsonl"))?, &ts)?;
                    ts
                }
                (None, None) => return Err(Error::Param("give --traces or --checkpoint".into())),
            };
            let stats = routing_stats(&ts)?;
            fs::write(out.join("stats.csv"), stats_csv(&stats))?;
            fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
            print!("{}", stats_csv(&stats));
            Ok(())
        }
        Diagnose::Affinity {
            checkpoint,
            image,
            stage,
            out,
        } => {
            let (_, model) = load_model(&checkpoint)?;
            let img = read_png(&image)?;
            let maps = affinity_map(&model, img.pixels(), stage)?;
            write_affinity(&out, &maps)?;
            println!("wrote {} affinity maps to {}", maps.shape()[0], out.display());
            Ok(())
        }
        Diagnose::Mse {
            checkpoint,
            init,
            out,
            seed,
        } => {
            let model = match checkpoint {
                Some(p) => load_model(&p)?.1,
                None => {
                    let init_mode = match init {
                        InitArg::Orthogonal => PrototypeInit::Orthogonal,
                        InitArg::Random => PrototypeInit::Random,
                    };
                    let mut m = Model::new(
                        ModelConfig {
                            init_mode,
                            ..ModelConfig::default()
                        },
                        seed,
                    )?;
                    m.normalize_prototypes();
                    m
                }
            };
            let ms = write_mse_matrices(&out, &model)?;
            for (l, m) in ms.iter().enumerate() {
                println!("stage {}: max pairwise MSE {:.6}", l + 1, m.max_abs());
            }
            Ok(())
        }
        Diagnose::Embed {
            checkpoint,
            data,
            stage,
            out,
            seed,
        } => {
            fs::create_dir_all(&out)?;
            let (ck, model) = load_model(&checkpoint)?;
            let samples = eval_samples(&ck.config, data.as_deref(), seed)?;
            let rows = export_embeddings(&model, &samples, stage, ck.config.eval_batch)?;
            fs::write(out.join("embeddings.csv"), embeddings_csv(&rows))?;
            let pc = pca_2d(&rows)?;
            let mut csv = String::from("sample_id,label,pc1,pc2\n");
            for (r, p) in rows.iter().zip(&pc) {
                csv += &format!("{},{},{},{}\n", r.sample_id, r.label, p[0], p[1]);
            }
            fs::write(out.join("pca.csv"), csv)?;
            let ratio = separability_ratio(&rows)?;
            fs::write(out.join("separability.txt"), format!("{ratio}\n"))?;
            println!("stage {stage}: {} samples, separability ratio {ratio:.4}", rows.len());
            Ok(())
        }
        Diagnose::Spectrum {
            checkpoint,
            image,
            data,
            out,
            seed,
        } => {
            let (ck, model) = load_model(&checkpoint)?;
            let x = match image {
                Some(p) => {
                    let img = read_png(&p)?;
                    let s = img.pixels().shape().to_vec();
                    img.into_pixels().reshape(&[1, s[0], s[1], s[2]])?
                }
                None => {
                    let samples = eval_samples(&ck.config, data.as_deref(), seed)?;
                    let n = samples.len().min(ck.config.eval_batch.max(1));
                    collate(&samples[..n])?.0
                }
            };
            let rows = write_spectra(&out, &model, &x)?;
            for r in rows {
                println!(
                    "level {}: high-frequency energy LL {:.4}, smoothed {:.4}, residual {:.4}",
                    r.level, r.ll_high_fraction, r.low_high_fraction, r.residual_high_fraction
                );
            }
            Ok(())
        }
    }
}
