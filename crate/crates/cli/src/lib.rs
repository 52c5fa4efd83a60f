//! The `imoc` command line: `train`, `eval`, `sweep-beta`, `verify-theory`
//! and `gradcheck`.
//!
//! Every CSV starts with a `# imoc-<kind> v<N>` schema line. Outputs go to
//! the directory given by `--out` and nowhere else.

pub mod gradcheck;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use imoc_core::checkpoint::checkpoint_load;
use imoc_core::config::{Precision, RunConfig};
use imoc_core::data::OneClassTask;
use imoc_core::evaluate::{
    auroc, records, score_dataset, write_scores_csv, ScoreOptions, ScoreStream,
};
use imoc_core::infotheory::{verify, VerifyConfig};
use imoc_core::models::Encoder;
use imoc_core::trainer::{train_run, TrainHistory, TrainOptions};
use imoc_core::CoreError;
use imoc_diffmath::Real;

pub const HISTORY_SCHEMA: &str = "# imoc-history v1";
pub const SWEEP_SCHEMA: &str = "# imoc-sweep v1";
pub const EVAL_SCHEMA: &str = "# imoc-eval v1";
pub const GRADCHECK_SCHEMA: &str = "# imoc-gradcheck v1";
pub const CHECKPOINT_FILE: &str = "checkpoint.imoc";

/// Tolerance of the finite-difference suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "imoc", version, about = "One-class anomaly detection by mutual information with an entropy penalty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder; writes history.csv, checkpoint.imoc and config.toml.
    Train(RunArgs),
    /// Score the test split with a trained encoder; writes scores.csv and eval.csv.
    Eval(EvalArgs),
    /// Train once per beta; writes sweep.csv plus one subdirectory per beta.
    SweepBeta(RunArgs),
    /// Check the discrete information identities.
    VerifyTheory(VerifyArgs),
    /// Finite-difference check of every primitive and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// 32 or 64; overrides the config.
    #[arg(long)]
    pub precision: Option<u32>,
    /// Record wall-clock seconds in history.csv (breaks byte-identical reruns).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Defaults to `<out>/checkpoint.imoc`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Repeated evaluations with fresh random streams.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 100)]
    pub bound_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Also write gradcheck.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failure reported as one line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error[{}]: {}", self.kind, self.message.replace('\n', " "))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::Config { .. } => "config",
            CoreError::Io { .. } => "io",
            CoreError::Format { .. } => "format",
            CoreError::NonFinite { .. } => "nonfinite",
            _ => "invalid",
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

fn fail(kind: &'static str, message: impl Into<String>) -> CliError {
    CliError {
        kind,
        message: message.into(),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Output lines go to `stdout`; errors to stderr.
pub fn run_cli<I, S>(argv: I, stdout: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            eprintln!("{}", fail("usage", e.to_string().lines().next().unwrap_or("bad arguments")));
            return 2;
        }
    };
    let threads = match worker_threads() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    let result = with_threads(threads, || run(cli.command));
    match result {
        Ok(text) => {
            let _ = stdout.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("{e}");
            if e.kind == "config" || e.kind == "usage" {
                2
            } else {
                1
            }
        }
    }
}

/// `IMOC_THREADS`, default 1.
fn worker_threads() -> Result<usize, CliError> {
    match std::env::var("IMOC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| fail("usage", format!("IMOC_THREADS must be a positive integer, got `{v}`"))),
    }
}

#[cfg(feature = "parallel")]
fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

fn run(cmd: Command) -> Result<String, CliError> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::SweepBeta(a) => cmd_sweep(&a),
        Command::VerifyTheory(a) => cmd_verify(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

/// Reads the config file (defaults when absent) and applies flag overrides.
pub fn load_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CoreError::Io {
                path: path.clone(),
                source: e,
            })?;
            RunConfig::parse(&text)?
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(bits) = args.precision {
        cfg.precision = Precision::from_bits(bits as i64)
            .ok_or_else(|| fail("usage", format!("--precision must be 32 or 64, got {bits}")))?;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CoreError::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| {
        CoreError::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

/// The history CSV: schema line, header, one row per evaluation.
pub fn history_csv(h: &TrainHistory) -> String {
    let mut s = format!(
        "{HISTORY_SCHEMA}\nepoch,loss_total,loss_nce,loss_entropy,auroc,mean_norm_normal,mean_norm_anom,wall_time_s\n"
    );
    for r in &h.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.loss.total,
            r.loss.nce,
            r.loss.entropy,
            r.auroc,
            r.mean_norm_normal,
            r.mean_norm_anom,
            r.wall_time_s
        );
    }
    s
}

struct TrainOutput {
    history: TrainHistory,
}

fn train_into(cfg: &RunConfig, task: &OneClassTask, dir: &Path, timing: bool) -> Result<TrainOutput, CliError> {
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), &cfg.to_text())?;
    let opts = TrainOptions {
        checkpoint: Some(dir.join(CHECKPOINT_FILE)),
        record_wall_time: timing,
    };
    let history = match cfg.precision {
        Precision::F32 => train_run::<f32>(cfg, task, &opts)?.1,
        Precision::F64 => train_run::<f64>(cfg, task, &opts)?.1,
    };
    write_file(&dir.join("history.csv"), &history_csv(&history))?;
    Ok(TrainOutput { history })
}

fn cmd_train(a: &RunArgs) -> Result<String, CliError> {
    let cfg = load_config(a)?;
    let task = cfg.load_task()?;
    let out = train_into(&cfg, &task, &a.out, a.timing)?;
    let last = out.history.last().expect("training records at least epoch 0");
    write_file(
        &a.out.join("manifest.txt"),
        "config.toml\nhistory.csv\ncheckpoint.imoc\n",
    )?;
    Ok(format!(
        "epoch {} auroc {} mean_norm_normal {} mean_norm_anom {}\n",
        last.epoch, last.auroc, last.mean_norm_normal, last.mean_norm_anom
    ))
}

fn eval_with<T: Real>(a: &EvalArgs, cfg: &RunConfig, task: &OneClassTask, path: &Path) -> Result<String, CliError> {
    let (enc, _saved): (Encoder<T>, RunConfig) = checkpoint_load(path)?;
    let mut table = format!("{EVAL_SCHEMA}\nrepeat,score,auroc\n");
    let mut aurocs = Vec::new();
    for repeat in 0..a.repeats.max(1) {
        let opts = ScoreOptions {
            kind: cfg.score,
            sim: cfg.similarity(enc.global_dim()),
            policy: cfg.augment,
            mc_h: cfg.mc_h,
            stream: ScoreStream {
                seed: cfg.seed,
                repeat,
            },
        };
        let scores = score_dataset(&enc, &task.test, &opts)?;
        let recs = records(&scores, &task.test_normal);
        let value = auroc(&recs)?;
        if repeat == 0 {
            write_scores_csv(&a.run.out.join("scores.csv"), &recs)?;
        }
        let _ = writeln!(table, "{repeat},{},{value}", cfg.score.name());
        aurocs.push(value);
    }
    write_file(&a.run.out.join("eval.csv"), &table)?;
    let mean = aurocs.iter().sum::<f64>() / aurocs.len() as f64;
    let var = aurocs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / aurocs.len() as f64;
    Ok(format!(
        "score {} auroc {} std {} repeats {}\n",
        cfg.score.name(),
        mean,
        var.sqrt(),
        aurocs.len()
    ))
}

fn cmd_eval(a: &EvalArgs) -> Result<String, CliError> {
    let cfg = load_config(&a.run)?;
    let task = cfg.load_task()?;
    create_dir(&a.run.out)?;
    let path = a.checkpoint.clone().unwrap_or_else(|| a.run.out.join(CHECKPOINT_FILE));
    match cfg.precision {
        Precision::F32 => eval_with::<f32>(a, &cfg, &task, &path),
        Precision::F64 => eval_with::<f64>(a, &cfg, &task, &path),
    }
}

fn cmd_sweep(a: &RunArgs) -> Result<String, CliError> {
    let cfg = load_config(a)?;
    let task = cfg.load_task()?;
    create_dir(&a.out)?;
    let runs = imoc_diffmath::par::map_slice(&cfg.betas, |&beta| {
        let mut c = cfg.clone();
        c.beta = beta;
        train_into(&c, &task, &a.out.join(format!("beta_{beta}")), a.timing).map(|o| (beta, o))
    });
    let mut csv = format!("{SWEEP_SCHEMA}\nbeta,final_auroc,mean_norm_normal,mean_norm_anom\n");
    let mut text = String::new();
    for run in runs {
        let (beta, out) = run?;
        let last = out.history.last().expect("training records at least epoch 0");
        let _ = writeln!(
            csv,
            "{beta},{},{},{}",
            last.auroc, last.mean_norm_normal, last.mean_norm_anom
        );
        let _ = writeln!(text, "beta {beta} auroc {}", last.auroc);
    }
    write_file(&a.out.join("sweep.csv"), &csv)?;
    Ok(text)
}

fn cmd_verify(a: &VerifyArgs) -> Result<String, CliError> {
    let r = verify(VerifyConfig {
        pairs: a.pairs,
        bound_pairs: a.bound_pairs,
        seed: a.seed,
        ..VerifyConfig::default()
    })?;
    let worst = r.max_decomposition_residual.max(r.max_chain_rule_residual);
    let ok = r.decomposition_ok() && r.chain_rule_ok() && r.bound_ok(a.bound_pairs);
    let mut s = String::new();
    let _ = writeln!(s, "pairs {}", r.pairs);
    let _ = writeln!(s, "max_decomposition_residual {:e}", r.max_decomposition_residual);
    let _ = writeln!(s, "max_chain_rule_residual {:e}", r.max_chain_rule_residual);
    let _ = writeln!(
        s,
        "bound_pairs {} of {} attempts, min_gap {:e}",
        r.bound_pairs_found, r.bound_attempts, r.min_bound_gap
    );
    if ok {
        let _ = writeln!(s, "PASS, max residual < 1e-10 (worst {worst:e})");
        Ok(s)
    } else {
        Err(fail("check", format!("FAIL, {}", s.replace('\n', "; "))))
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<String, CliError> {
    let rows = gradcheck::run_suite(a.seed).map_err(CoreError::from)?;
    let mut csv = format!("{GRADCHECK_SCHEMA}\nname,coordinates,max_rel_error,status\n");
    let mut text = String::new();
    let mut failed = Vec::new();
    for r in &rows {
        let ok = r.report.max_rel_error < GRADCHECK_TOLERANCE;
        let status = if ok { "PASS" } else { "FAIL" };
        if !ok {
            failed.push(r.name.clone());
        }
        let _ = writeln!(csv, "{},{},{:e},{status}", r.name, r.report.coordinates, r.report.max_rel_error);
        let _ = writeln!(text, "{:<24} {:>6} {:>12.3e} {status}", r.name, r.report.coordinates, r.report.max_rel_error);
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("gradcheck.csv"), &csv)?;
    }
    if failed.is_empty() {
        Ok(text)
    } else {
        Err(fail("check", format!("gradient check failed for {}", failed.join(", "))))
    }
}
