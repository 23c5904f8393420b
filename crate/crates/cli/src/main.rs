//! `seqop`: equivalence and gradient checks, receptive fields, operator
//! benchmarks and associative-recall sweeps.
//!
//! Exit codes: 0 success, 1 a check failed (or a runtime error), 2 usage
//! error. Every run that gets past argument parsing writes `run.json` into
//! `--out-dir`.

mod config;
mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::time::{Duration, Instant, SystemTime};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Serialize, Serializer};
use serde_json::{json, Value};

use seqop_core::bench::{emit_csv, run_bench, speedups, summary_table, BenchConfig, BenchOp, Pass};
use seqop_core::checks::{ema_equivalence, gradcheck_suite, Suite};
use seqop_core::model::{ModelConfig, Variant};
use seqop_core::optim::Decay;
use seqop_core::recall::{
    generate_dataset, train_recall, Budget, RecallSpec, SweepSpec, TrainSettings,
};
use seqop_core::tcn::{receptive_field, TcnConfig};
use seqop_core::{DType, Scalar};

#[derive(Parser, Debug, Serialize)]
#[command(name = "seqop", version, about = "Sequence-operator laboratory")]
struct Cli {
    /// Plain-text `key = value` file; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for run.json and other artifacts.
    #[arg(long, global = true, default_value = "seqop-out")]
    out_dir: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Cmd {
    /// Recurrent vs FFT vs stored-kernel EMA on random parameter draws.
    CheckEma(CheckEmaArgs),
    /// Receptive field of a dilated TCN stack.
    Rf(RfArgs),
    /// Operator timings over sequence lengths, written as CSV.
    Bench(BenchArgs),
    /// Associative-recall sweep over learning rate and dropout.
    TrainRecall(TrainArgs),
    /// Central-difference gradient checks in float64.
    Gradcheck(GradcheckArgs),
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::CheckEma(_) => "check-ema",
            Cmd::Rf(_) => "rf",
            Cmd::Bench(_) => "bench",
            Cmd::TrainRecall(_) => "train-recall",
            Cmd::Gradcheck(_) => "gradcheck",
        }
    }
}

/// EMA features and expansion, written `HxN` or `H,N`.
#[derive(Debug, Clone, Copy)]
struct Dims {
    h: usize,
    n: usize,
}

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (h, n) = s
            .split_once(['x', ','])
            .ok_or_else(|| format!("expected HxN, got {s:?}"))?;
        let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Dims {
            h: num(h)?,
            n: num(n)?,
        })
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.n)
    }
}

impl Serialize for Dims {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Args, Debug, Serialize)]
struct CheckEmaArgs {
    #[arg(long, default_value_t = 4096)]
    len: usize,
    /// Features and expansion per feature; channels are twice the features.
    #[arg(long, default_value = "2x8")]
    dims: Dims,
    #[arg(long, default_value = "f64")]
    dtype: DType,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Pass iff the largest deviation is strictly below this.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Args, Debug, Serialize)]
struct RfArgs {
    /// Kernel size.
    #[arg(long, default_value_t = 17)]
    k: usize,
    /// Dilation factor.
    #[arg(long, default_value_t = 8)]
    f: usize,
    /// Depth.
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Convolutions per block.
    #[arg(long, default_value_t = 1)]
    b: usize,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    /// Comma-separated; all four when omitted.
    #[arg(long, value_delimiter = ',')]
    ops: Vec<BenchOp>,
    /// Comma-separated forward/backward; both when omitted.
    #[arg(long, value_delimiter = ',')]
    passes: Vec<Pass>,
    /// Comma-separated sequence lengths; 8192 to 131072 when omitted.
    #[arg(long, value_delimiter = ',')]
    lens: Vec<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value = "f32")]
    dtype: DType,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// CSV path; defaults to bench.csv in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 10)]
    vocab: usize,
    /// tcnca_simple or tcn_mlp.
    #[arg(long, default_value = "tcnca_simple")]
    variant: Variant,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 10_000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_eval: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Comma-separated learning rates; the 1e-5..1e-1 decade grid when omitted.
    #[arg(long, value_delimiter = ',')]
    lrs: Vec<f64>,
    /// Comma-separated dropout rates; 0 and 0.1 when omitted.
    #[arg(long, value_delimiter = ',')]
    dropouts: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    warmup_frac: f64,
    /// constant or cosine.
    #[arg(long, default_value = "cosine")]
    decay: Decay,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Stop a grid point once it reaches this eval accuracy.
    #[arg(long, default_value_t = 1.0)]
    target_acc: f64,
    /// Wall-clock budget for the whole sweep, in minutes.
    #[arg(long, default_value_t = 30.0)]
    budget_min: f64,
    /// Epochs every grid point gets before the field is cut.
    #[arg(long, default_value_t = 2)]
    screen_epochs: usize,
    /// Grid points that keep training after screening.
    #[arg(long, default_value_t = 2)]
    finalists: usize,
    /// Worker threads for grid points; SEQOP_THREADS or all cores when omitted.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "f32")]
    dtype: DType,
    /// Per-epoch progress on stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    /// ema, tcn, attn, model or all.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Adds a term with a deliberately wrong backward to every case.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<seqop_core::Error> for Failure {
    fn from(e: seqop_core::Error) -> Self {
        use seqop_core::Error as E;
        match e {
            E::InvalidArgument(_) | E::Shape { .. } | E::TokenOutOfRange { .. } => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// What a command hands back for the manifest and the exit code.
struct Outcome {
    passed: bool,
    resolved: Value,
    result: Value,
}

fn check_ema(a: &CheckEmaArgs, seed: u64) -> Result<Outcome, Failure> {
    let r = match a.dtype {
        DType::F32 => ema_equivalence::<f32>(a.len, a.dims.h, a.dims.n, a.trials, seed)?,
        DType::F64 => ema_equivalence::<f64>(a.len, a.dims.h, a.dims.n, a.trials, seed)?,
    };
    let passed = r.max_deviation < a.tol;
    println!(
        "L={} dims={} dtype={} trials={}",
        a.len, a.dims, a.dtype, a.trials
    );
    println!(
        "max deviation {:.3e} (trial {}, {}); tolerance {:e}: {}",
        r.max_deviation,
        r.worst_trial,
        r.worst_pair,
        a.tol,
        if passed { "PASS" } else { "FAIL" }
    );
    Ok(Outcome {
        passed,
        resolved: Value::Null,
        result: json!(r),
    })
}

fn rf(a: &RfArgs) -> Result<Outcome, Failure> {
    let cfg = TcnConfig::new(a.k, a.f, a.d, a.b)?;
    let rf = receptive_field(&cfg);
    println!("{rf}");
    Ok(Outcome {
        passed: true,
        resolved: json!(cfg),
        result: json!({ "receptive_field": rf }),
    })
}

fn or_default<V: Clone>(given: &[V], default: Vec<V>) -> Vec<V> {
    if given.is_empty() {
        default
    } else {
        given.to_vec()
    }
}

fn bench(a: &BenchArgs, seed: u64, out_dir: &std::path::Path) -> Result<Outcome, Failure> {
    let d = BenchConfig::default();
    let cfg = BenchConfig {
        ops: or_default(&a.ops, d.ops),
        passes: or_default(&a.passes, d.passes),
        seq_lens: or_default(&a.lens, d.seq_lens),
        channels: a.channels.unwrap_or(d.channels),
        batch: a.batch.unwrap_or(d.batch),
        dtype: a.dtype,
        warmup: a.warmup.unwrap_or(d.warmup),
        reps: a.reps.unwrap_or(d.reps),
        seed,
    };
    let records = run_bench(&cfg)?;
    let path = a.out.clone().unwrap_or_else(|| out_dir.join("bench.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    emit_csv(&records, &path)?;
    print!("{}", summary_table(&records));

    let mut result = json!({ "csv": path, "rows": records.len() });
    let ratios = |slow, fast, pass| speedups(&records, slow, fast, pass);
    let show = |v: &[(usize, f64)]| {
        v.iter()
            .map(|(l, x)| format!("{l}:{x:.2}x"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let pregen = ratios(BenchOp::EmaFft, BenchOp::EmaFftPregen, Pass::Forward);
    if !pregen.is_empty() {
        println!(
            "ema_fft_pregen speedup over ema_fft (forward): {}",
            show(&pregen)
        );
        println!("  reference range on GPU: 1.20-1.51x");
        result["pregen_speedup"] = json!(pregen);
    }
    let conv = ratios(BenchOp::EmaFft, BenchOp::DilatedConv, Pass::Forward);
    if !conv.is_empty() {
        println!(
            "ema_fft time over dilated_conv time (forward): {}",
            show(&conv)
        );
        result["fft_over_conv"] = json!(conv);
    }
    println!("wrote {}", path.display());
    Ok(Outcome {
        passed: true,
        resolved: json!(cfg),
        result,
    })
}

fn train(a: &TrainArgs, seed: u64, out_dir: &std::path::Path) -> Result<Outcome, Failure> {
    let base = ModelConfig::recall(a.seq_len, a.vocab);
    let mut cfg = ModelConfig {
        variant: a.variant,
        embed_dim: a.embed_dim.unwrap_or(base.embed_dim),
        layers: a.layers.unwrap_or(base.layers),
        heads: a.heads.unwrap_or(base.heads),
        ..base
    };
    if let Some(c) = a.chunk {
        cfg.chunk.chunk = c;
    }
    cfg.validate()?;
    let d = SweepSpec::default();
    let grid = SweepSpec {
        learning_rates: or_default(&a.lrs, d.learning_rates),
        dropouts: or_default(&a.dropouts, d.dropouts),
    };
    let settings = TrainSettings {
        epochs: a.epochs,
        batch_size: a.batch_size,
        warmup_frac: a.warmup_frac,
        decay: a.decay,
        clip_norm: (a.clip > 0.0).then_some(a.clip),
        target_acc: a.target_acc,
        seed,
        threads: a.threads,
        verbose: a.verbose,
    };
    if !(a.budget_min >= 0.0 && a.budget_min.is_finite()) {
        return Err(Failure::Usage(format!(
            "budget-min must be a non-negative number, got {}",
            a.budget_min
        )));
    }
    let budget = Budget {
        wall: Duration::from_secs_f64(a.budget_min * 60.0),
        screen_epochs: a.screen_epochs,
        finalists: a.finalists,
    };
    let data = generate_dataset(
        RecallSpec::new(a.seq_len, a.vocab),
        a.n_train,
        a.n_eval,
        seed,
    )?;
    let ckpt = out_dir.join("best.ckpt");
    std::fs::create_dir_all(out_dir)?;
    let report = match a.dtype {
        DType::F32 => sweep_and_save::<f32>(&cfg, &data, &grid, &settings, &budget, &ckpt)?,
        DType::F64 => sweep_and_save::<f64>(&cfg, &data, &grid, &settings, &budget, &ckpt)?,
    };
    let csv = out_dir.join("recall_sweep.csv");
    report.write_csv(&csv)?;
    print!("{}", report.to_table());
    let best = report.best().expect("grid is non-empty");
    println!(
        "best eval accuracy {:.4} (lr {:e}, dropout {}); chance {:.4}",
        best.best_eval_acc,
        best.lr,
        best.dropout,
        2.0 / a.vocab as f64
    );
    println!("wrote {} and {}", csv.display(), ckpt.display());
    Ok(Outcome {
        passed: true,
        resolved: json!({ "model": cfg, "grid": grid, "settings": settings, "budget": budget }),
        result: json!({
            "best_eval_acc": best.best_eval_acc,
            "rows": report.rows,
            "csv": csv,
            "checkpoint": ckpt,
        }),
    })
}

fn sweep_and_save<T: Scalar>(
    cfg: &ModelConfig,
    data: &seqop_core::recall::RecallData,
    grid: &SweepSpec,
    settings: &TrainSettings,
    budget: &Budget,
    ckpt: &std::path::Path,
) -> Result<seqop_core::recall::SweepReport, Failure> {
    let (report, model) = train_recall::<T>(cfg, data, grid, settings, budget)?;
    model.save(ckpt)?;
    Ok(report)
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> Result<Outcome, Failure> {
    let suites: Vec<Suite> = match a.module.as_str() {
        "all" => Suite::ALL.to_vec(),
        m => vec![m.parse::<Suite>()?],
    };
    let mut passed = true;
    let mut cases = Vec::new();
    for s in suites {
        for c in gradcheck_suite(s, seed, a.inject_fault)? {
            let ok = c.report.passes(a.tol);
            passed &= ok;
            println!(
                "{:<34} max rel err {:.3e}  {}",
                format!("{}/{}", s.name(), c.case),
                c.report.max_rel_error,
                if ok { "PASS" } else { "FAIL" }
            );
            cases.push(json!({
                "module": s.name(),
                "case": c.case,
                "max_rel_error": c.report.max_rel_error,
                "coords": c.report.coords_checked,
                "passed": ok,
            }));
        }
    }
    Ok(Outcome {
        passed,
        resolved: Value::Null,
        result: json!({ "tol": a.tol, "cases": cases }),
    })
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

/// Parses argv, folding in `--config` when given.
fn parse_cli(argv: Vec<OsString>) -> Result<Cli, ExitCode> {
    let cmd = Cli::command();
    let matches = cmd
        .clone()
        .try_get_matches_from(&argv)
        .unwrap_or_else(|e| e.exit());
    let Some(path) = matches.get_one::<PathBuf>("config").cloned() else {
        return Cli::from_arg_matches(&matches).map_err(|e| e.exit());
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| usage_error(&format!("cannot read config {}: {e}", path.display())))?;
    let entries =
        config::parse(&text).map_err(|e| usage_error(&format!("{}: {e}", path.display())))?;
    let argv = config::merge(&cmd, &argv, &matches, &entries)
        .map_err(|e| usage_error(&format!("{}: {e}", path.display())))?;
    let matches = cmd.try_get_matches_from(&argv).unwrap_or_else(|e| e.exit());
    Cli::from_arg_matches(&matches).map_err(|e| e.exit())
}

fn main() -> ExitCode {
    let cli = match parse_cli(std::env::args_os().collect()) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let started = SystemTime::now();
    let clock = Instant::now();
    let outcome = match &cli.command {
        Cmd::CheckEma(a) => check_ema(a, cli.seed),
        Cmd::Rf(a) => rf(a),
        Cmd::Bench(a) => bench(a, cli.seed, &cli.out_dir),
        Cmd::TrainRecall(a) => train(a, cli.seed, &cli.out_dir),
        Cmd::Gradcheck(a) => gradcheck(a, cli.seed),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(Failure::Usage(msg)) => return usage_error(&msg),
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let run = manifest::Run {
        command: cli.command.name(),
        args: json!(cli),
        resolved: outcome.resolved,
        result: outcome.result,
        config_file: cli.config.as_deref(),
        started,
        elapsed: clock.elapsed(),
    };
    if let Err(e) = manifest::write(&cli.out_dir, &run) {
        eprintln!(
            "error: cannot write run.json to {}: {e}",
            cli.out_dir.display()
        );
        return ExitCode::from(1);
    }
    if outcome.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
