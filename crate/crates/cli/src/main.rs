//! `mrla`: oracle suites, complexity benchmarks, toy training and dumps.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure (including a failing
//! suite), 2 usage error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mrla_core::blocks::{arch_cost, ArchSpec, AttnMode, BlockOptions, BlockShape};
use mrla_core::model::{build_model, config::KEYS, train::config_dataset, MiniModel, TrainConfig};
use mrla_core::verify::{
    attn_score_csv, attn_score_matrix, complexity_probe, complexity_suite, cosine_csv,
    equivalence_suite, gradient_suite, growth_ratios, query_cosine_stats, EquivalenceOptions,
    ProbeMode, SuiteReport, Timing,
};

/// Environment variable overriding the default output directory of `train`.
const OUT_DIR_ENV: &str = "MRLA_OUT_DIR";

#[derive(Parser)]
#[command(name = "mrla", version, about = "Recurrent layer attention: oracles, benchmarks, toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    All,
    Equivalence,
    Gradients,
    Complexity,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchMode {
    Base,
    Light,
    Kernel,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum What {
    Attn,
    Cosine,
    Params,
}

#[derive(Subcommand)]
enum Command {
    /// Run oracle suites and print a JSON report.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        /// Seeds per case family (equivalence and gradient suites).
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        /// Perturb one carry vector entry in the light-vs-base families.
        #[arg(long)]
        lambda_fault: Option<f64>,
    },
    /// Count and time the attention portion of stages of growing depth.
    Bench {
        #[arg(long, value_enum)]
        mode: BenchMode,
        /// Comma-separated ascending stage depths.
        #[arg(long)]
        depths: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Counts only.
        #[arg(long)]
        no_time: bool,
    },
    /// Train a toy model; extra `--key=value` arguments override the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to $MRLA_OUT_DIR, then the current directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write attention scores, query cosine statistics or parameter counts.
    Dump {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long)]
        out: PathBuf,
        /// Stage for `attn`.
        #[arg(long, default_value_t = 0)]
        stage: usize,
        /// Dataset sample fed to the model for `attn`.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Histogram bins for `cosine`.
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mrla_core::Error> for Failure {
    fn from(e: mrla_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Verify {
            suite,
            seeds,
            lambda_fault,
        } => verify(suite, seeds, lambda_fault),
        Command::Bench {
            mode,
            depths,
            out,
            trials,
            reps,
            no_time,
        } => bench(mode, &depths, out.as_deref(), (!no_time).then_some(Timing { trials, reps })),
        Command::Train {
            config,
            out_dir,
            overrides,
        } => train(&config, out_dir, &overrides),
        Command::Dump {
            checkpoint,
            what,
            out,
            stage,
            sample,
            bins,
        } => dump(checkpoint.as_deref(), what, &out, stage, sample, bins),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn verify(suite: Suite, seeds: u64, lambda_fault: Option<f64>) -> CmdResult {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let mut reports: Vec<SuiteReport> = Vec::new();
    if matches!(suite, Suite::All | Suite::Equivalence) {
        reports.push(equivalence_suite(&EquivalenceOptions {
            seeds,
            lambda_fault,
            ..Default::default()
        }));
    }
    if matches!(suite, Suite::All | Suite::Gradients) {
        reports.push(gradient_suite(seeds));
    }
    if matches!(suite, Suite::All | Suite::Complexity) {
        reports.push(complexity_suite());
    }
    let pass = reports.iter().all(|r| r.pass);
    let out = json!({ "pass": pass, "suites": reports });
    println!("{}", serde_json::to_string_pretty(&out).context("serializing report")?);
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn parse_depths(text: &str) -> Result<Vec<usize>, Failure> {
    let depths = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| Failure::Usage(format!("depth {s:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if depths.is_empty() {
        return Err(Failure::Usage("--depths needs at least one depth".into()));
    }
    if depths.contains(&0) || depths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::Usage(format!(
            "--depths must be positive and strictly ascending, got {depths:?}"
        )));
    }
    Ok(depths)
}

/// Value maps of the benchmark: 16 x 16 x 16, heads of 4 channels.
const BENCH_SHAPE: BlockShape = BlockShape {
    channels: 16,
    height: 16,
    width: 16,
    d_k: 4,
};

fn bench(mode: BenchMode, depths: &str, out: Option<&Path>, timing: Option<Timing>) -> CmdResult {
    let depths = parse_depths(depths)?;
    let probe = match mode {
        BenchMode::Base => ProbeMode::Base,
        BenchMode::Light => ProbeMode::Light,
        BenchMode::Kernel => ProbeMode::Kernel,
    };
    let rows = complexity_probe(probe, &depths, &BENCH_SHAPE, timing)?;
    let ratios = growth_ratios(&rows);
    let mut csv = String::from("t,score_evals,state_values,wall_time_s,score_ratio,time_ratio\n");
    for (i, r) in rows.iter().enumerate() {
        let wall = r.wall_time.map(|w| format!("{w:e}")).unwrap_or_default();
        let (score, time) = match i.checked_sub(1).map(|j| ratios[j]) {
            Some((_, _, s, t)) => (format!("{s}"), t.map(|t| format!("{t}")).unwrap_or_default()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(csv, "{},{},{},{wall},{score},{time}", r.t, r.score_evals, r.state_values);
    }
    if let Some(path) = out {
        fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    for (a, b, s, t) in ratios {
        match t {
            Some(t) => println!("T {a} -> {b}: score_evals x{s:.4}, wall time x{t:.3}"),
            None => println!("T {a} -> {b}: score_evals x{s:.4}"),
        }
    }
    if out.is_none() {
        print!("{csv}");
    }
    Ok(ExitCode::SUCCESS)
}

fn apply_overrides(mut cfg: TrainConfig, overrides: &[String]) -> Result<TrainConfig, Failure> {
    for o in overrides {
        let body = o
            .strip_prefix("--")
            .ok_or_else(|| Failure::Usage(format!("unexpected argument {o:?}; overrides are --key=value")))?;
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("override {o:?} is not --key=value")))?;
        if !KEYS.contains(&k) {
            return Err(Failure::Usage(format!(
                "unknown config key {k:?}; known keys: {}",
                KEYS.join(", ")
            )));
        }
        cfg.set(k, v).map_err(|m| Failure::Usage(format!("{o}: {m}")))?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train(config: &Path, out_dir: Option<PathBuf>, overrides: &[String]) -> CmdResult {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = TrainConfig::parse(&text).with_context(|| format!("in {}", config.display()))?;
    let cfg = apply_overrides(cfg, overrides)?;
    let dir = out_dir
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let data = config_dataset(&cfg)?;
    let mut model = build_model(&cfg)?;
    let run = mrla_core::model::train(&mut model, &data, &cfg)?;
    let ckpt = dir.join("checkpoint.mrlt");
    let loss = dir.join("loss.csv");
    model.save(&ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    fs::write(&loss, run.loss_csv()).with_context(|| format!("writing {}", loss.display()))?;
    let summary = json!({
        "checkpoint": ckpt.display().to_string(),
        "loss_csv": loss.display().to_string(),
        "params": model.num_params(),
        "mrla_params": model.mrla_param_count(),
        "epoch_mean_loss": run.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>(),
        "eval_accuracy": run.eval_accuracy,
        "final_accuracy": run.final_accuracy(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).context("serializing summary")?);
    Ok(ExitCode::SUCCESS)
}

fn load(checkpoint: Option<&Path>) -> Result<MiniModel, Failure> {
    let path = checkpoint.ok_or_else(|| Failure::Usage("--checkpoint is required for this dump".into()))?;
    MiniModel::load(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::Runtime)
}

fn dump(checkpoint: Option<&Path>, what: What, out: &Path, stage: usize, sample: usize, bins: usize) -> CmdResult {
    let body = match what {
        What::Attn => {
            let model = load(checkpoint)?;
            let data = config_dataset(&model.config)?;
            let (x, _) = data
                .samples
                .get(sample)
                .ok_or_else(|| anyhow!("sample {sample} out of range ({} samples)", data.len()))?;
            attn_score_csv(&attn_score_matrix(&model, stage, x)?)
        }
        What::Cosine => {
            let model = load(checkpoint)?;
            let data = config_dataset(&model.config)?;
            cosine_csv(&query_cosine_stats(&model, &data, bins)?)
        }
        What::Params => {
            let arch = ArchSpec::resnet50();
            let opts = BlockOptions::default();
            let light = arch_cost(&arch, AttnMode::Light, opts)?;
            let base = arch_cost(&arch, AttnMode::Base, opts)?;
            let model = match checkpoint {
                Some(_) => {
                    let m = load(checkpoint)?;
                    json!({
                        "params": m.num_params(),
                        "mrla_params": m.mrla_param_count(),
                        "tensors": m.named_params().iter()
                            .map(|(n, t)| json!({ "name": n, "shape": t.shape() }))
                            .collect::<Vec<_>>(),
                    })
                }
                None => serde_json::Value::Null,
            };
            let report = json!({
                "mac_convention": "1 multiply-accumulate counted as 1 FLOP",
                "resnet50_light_params": light.params,
                "resnet50": {
                    "arch": arch,
                    "light": light,
                    "base": base,
                },
                "model": model,
            });
            serde_json::to_string_pretty(&report).context("serializing report")? + "\n"
        }
    };
    fs::write(out, body).with_context(|| format!("writing {}", out.display()))?;
    Ok(ExitCode::SUCCESS)
}
