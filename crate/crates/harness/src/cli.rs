//! Command-line interface. Every subcommand writes its files under the output
//! directory and reports a one-line summary on standard output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use condcomp::checks::sampler_suite;
use condcomp::cost::{dynamic_cost, static_cost, tradeoff_sweep, write_curve_csv, FlopReport, Knob};
use condcomp::transformer::InferOptions;
use condcomp::Model;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{stream_rng, Split};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsRecord;
use crate::train::{evaluate, initial_model, train, Data, EVAL_STREAM};

#[derive(Debug, Parser)]
#[command(name = "condcomp", version, about = "Train and evaluate conditional-computation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, save a checkpoint and evaluate on the test split.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `checkpoint.json` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy and mean MACs on the test split across values of one knob.
    /// Trains first unless a checkpoint is given.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        knob: Knob,
        /// `start:end:count` (evenly spaced, inclusive) or a comma list.
        #[arg(long)]
        values: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare hard Gumbel sampling frequencies with the softmax.
    SampleTest {
        #[arg(long, default_value_t = 8)]
        dims: usize,
        #[arg(long, default_value_t = 200_000)]
        draws: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        vectors: usize,
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
        /// Also write `sample_test.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Static (dense) and dynamic MAC reports over the test split.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Parses `start:end:count` or `a,b,c`.
pub fn parse_values(s: &str) -> Result<Vec<f64>> {
    let bad = || HarnessError::Invalid(format!("--values: cannot parse `{s}`"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
    let values = if let [a, b, n] = s.split(':').collect::<Vec<_>>()[..] {
        let (a, b) = (num(a)?, num(b)?);
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        match n {
            0 => return Err(bad()),
            1 => vec![a],
            _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
        }
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(values)
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.output.dir.as_path();
    std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(HarnessError::io(path))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Failed(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(HarnessError::io(path))
}

fn load_model(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(p) => {
            let model = Checkpoint::load(p)?.into_model()?;
            if model.spec != cfg.model {
                return Err(HarnessError::Invalid(format!(
                    "{}: model layout differs from the config",
                    p.display()
                )));
            }
            Ok(model)
        }
        None => initial_model(cfg),
    }
}

/// Trains with metrics streamed to `metrics.jsonl`, saves the checkpoint and
/// the resolved config, and appends a test record.
pub fn run_train(cfg: &ExperimentConfig) -> Result<(Model, Data, MetricsRecord)> {
    let dir = out_dir(cfg)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(HarnessError::io(dir.join("config.toml")))?;
    let data = Data::generate(cfg)?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = create(&metrics_path)?;
    let outcome = train(cfg, &data, Some(&mut metrics))?;
    Checkpoint::of(&outcome.model, cfg.seed).save(&dir.join("checkpoint.json"))?;
    let (test, latent) = data.split(Split::Test);
    let ev = evaluate(&outcome.model, test, latent, cfg.policy(), cfg.seed)?;
    ev.write_logs(dir)?;
    let record = MetricsRecord {
        epoch: cfg.epochs,
        split: "test".into(),
        ..ev.record
    };
    record.write_jsonl(&mut metrics).map_err(HarnessError::io(&metrics_path))?;
    metrics.flush().map_err(HarnessError::io(&metrics_path))?;
    Ok((outcome.model, data, record))
}

pub fn run_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<MetricsRecord> {
    let dir = out_dir(cfg)?;
    let default = dir.join("checkpoint.json");
    let model = load_model(cfg, Some(checkpoint.unwrap_or(&default)))?;
    let (test, latent) = Data::generate(cfg)?.test;
    let ev = evaluate(&model, &test, &latent, cfg.policy(), cfg.seed)?;
    ev.write_logs(dir)?;
    let record = MetricsRecord {
        epoch: 0,
        split: "test".into(),
        ..ev.record
    };
    let path = dir.join("eval.jsonl");
    let mut w = create(&path)?;
    record.write_jsonl(&mut w).and_then(|_| w.flush()).map_err(HarnessError::io(&path))?;
    Ok(record)
}

pub fn run_sweep(
    cfg: &ExperimentConfig,
    knob: Knob,
    values: &[f64],
    checkpoint: Option<&Path>,
) -> Result<Vec<condcomp::cost::CurveRow>> {
    let (model, test) = match checkpoint {
        Some(p) => (load_model(cfg, Some(p))?, Data::generate(cfg)?.test.0),
        None => {
            let (model, data, _) = run_train(cfg)?;
            (model, data.test.0)
        }
    };
    let rows = tradeoff_sweep(&model, &test.pairs(), knob, values, cfg.policy(), cfg.seed)?;
    let path = out_dir(cfg)?.join("curve.csv");
    let mut w = create(&path)?;
    write_curve_csv(&rows, &mut w).and_then(|_| w.flush()).map_err(HarnessError::io(&path))?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct FlopsSummary {
    pub n_tokens: usize,
    pub n_samples: usize,
    /// Dense cost of one sample.
    pub dense: FlopReport,
    /// Dynamic cost summed over the test split.
    pub dynamic_total: FlopReport,
    pub mean_dynamic_macs: f64,
}

pub fn run_flops(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<FlopsSummary> {
    let dir = out_dir(cfg)?;
    let model = load_model(cfg, checkpoint)?;
    let n_tokens = cfg.dataset.task.tokens();
    let dense = static_cost(&cfg.model, n_tokens)?;
    let test = Data::generate(cfg)?.test.0;
    let mut layers = std::collections::BTreeMap::new();
    let mut rng = stream_rng(cfg.seed, EVAL_STREAM);
    let opts = InferOptions {
        policy: cfg.policy(),
        keep: None,
    };
    let mut macs = 0u64;
    for x in &test.inputs {
        let inf = model.infer(x, &opts, &mut rng)?;
        macs += inf.macs;
        for (k, c) in dynamic_cost(&cfg.model, &inf.trace)?.layers {
            *layers.entry(k).or_default() += c;
        }
    }
    let dynamic_total = FlopReport::from_layers(layers);
    let summary = FlopsSummary {
        n_tokens,
        n_samples: test.len(),
        mean_dynamic_macs: macs as f64 / test.len() as f64,
        dense,
        dynamic_total,
    };
    write_json(&dir.join("flops.json"), &summary)?;
    Ok(summary)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn summary(r: &MetricsRecord) -> String {
    format!(
        "accuracy {:.4} mean_macs {} load_cv {} nmi {} mean_exit {} recall {}",
        r.accuracy,
        fmt_opt(r.mean_macs),
        fmt_opt(r.load_cv),
        fmt_opt(r.nmi),
        fmt_opt(r.mean_exit),
        fmt_opt(r.recall)
    )
}

/// Runs one parsed command, printing to `out`.
pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    let print = |out: &mut dyn Write, s: String| {
        writeln!(out, "{s}").map_err(|e| HarnessError::Failed(format!("writing output: {e}")))
    };
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let (_, _, r) = run_train(&cfg)?;
            print(out, format!("test {}", summary(&r)))
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let r = run_eval(&cfg, checkpoint.as_deref())?;
            print(out, format!("test {}", summary(&r)))
        }
        Command::Sweep {
            common,
            knob,
            values,
            checkpoint,
        } => {
            let values = parse_values(&values)?;
            let cfg = load_config(&common)?;
            let rows = run_sweep(&cfg, knob, &values, checkpoint.as_deref())?;
            for r in rows {
                print(
                    out,
                    format!("{} {} mean_macs {:.1} accuracy {:.4}", r.knob, r.value, r.mean_macs, r.accuracy),
                )?;
            }
            Ok(())
        }
        Command::SampleTest {
            dims,
            draws,
            seed,
            vectors,
            tolerance,
            out: dir,
        } => {
            if dims < 2 || draws == 0 || vectors == 0 {
                return Err(HarnessError::Invalid(
                    "sample-test needs --dims >= 2, --draws >= 1 and --vectors >= 1".into(),
                ));
            }
            let cases = sampler_suite(dims, draws, vectors, seed)?;
            let worst = cases.iter().map(|c| c.max_deviation).fold(0.0, f64::max);
            for (i, c) in cases.iter().enumerate() {
                print(out, format!("vector {i} dims {} max_deviation {:.5}", c.logits.len(), c.max_deviation))?;
            }
            let pass = worst <= tolerance;
            print(
                out,
                format!("max_deviation {worst:.5} tolerance {tolerance} {}", if pass { "PASS" } else { "FAIL" }),
            )?;
            if let Some(dir) = dir {
                std::fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
                let report = serde_json::json!({
                    "dims": dims, "draws": draws, "seed": seed, "tolerance": tolerance,
                    "max_deviation": worst, "pass": pass,
                    "cases": cases.iter().map(|c| serde_json::json!({
                        "logits": c.logits, "expected": c.expected,
                        "observed": c.observed, "max_deviation": c.max_deviation,
                    })).collect::<Vec<_>>(),
                });
                write_json(&dir.join("sample_test.json"), &report)?;
            }
            if pass {
                Ok(())
            } else {
                Err(HarnessError::Failed(format!("max deviation {worst} exceeds {tolerance}")))
            }
        }
        Command::Flops { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let s = run_flops(&cfg, checkpoint.as_deref())?;
            print(out, format!("{:<24} {:>12} {:>14}", "layer", "dense_macs", "mean_dyn_macs"))?;
            for (k, c) in &s.dense.layers {
                let dynamic = s.dynamic_total.layers.get(k).map_or(0, |d| d.macs);
                print(
                    out,
                    format!("{k:<24} {:>12} {:>14.1}", c.macs, dynamic as f64 / s.n_samples as f64),
                )?;
            }
            print(
                out,
                format!(
                    "{:<24} {:>12} {:>14.1}",
                    "total", s.dense.total.macs, s.mean_dynamic_macs
                ),
            )
        }
    }
}
