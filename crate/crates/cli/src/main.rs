//! `rlvr-lab`: train, evaluate, tabulate weight curves, compute ratio-bin
//! statistics and run the verification suites.
//!
//! Outputs go under `$RLVR_LAB_OUT` (default `./runs`) unless `--out-dir`
//! is given. Exit codes: 0 ok, 1 usage or input error, 2 numeric fault,
//! 3 verification failure.

mod manifest;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rlvr_lab::config::TrainConfig;
use rlvr_lab::gradan::{self, Class, CurveMethod, CURVE_CSV_HEADER};
use rlvr_lab::objectives::{ClipRange, Method};
use rlvr_lab::rollout::{read_jsonl, write_jsonl, RolloutRecord, Task};
use rlvr_lab::seed::SeedStream;
use rlvr_lab::trainer::{
    self, eval_prompts, evaluate, load_checkpoint, policy_from_text, save_checkpoint, EvalSpec, Trainer,
    METRICS_CSV_HEADER,
};
use rlvr_lab::verify::{self, VerifyOptions};
use rlvr_lab::Error;

use manifest::Manifest;

pub const OUT_ENV: &str = "RLVR_LAB_OUT";

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "rlvr-lab",
    version,
    about = "Group-based RLVR objectives over tabular policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from a config file.
    Train(TrainArgs),
    /// Measure pass@1 of a saved policy or checkpoint.
    Eval(EvalArgs),
    /// Tabulate gradient-weight curves as CSV.
    Curves(CurvesArgs),
    /// Importance-ratio bin statistics of a rollout log.
    Bins(BinsArgs),
    /// Run the property suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory [default: $RLVR_LAB_OUT/<name>]
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (`key = value` lines). Omit to use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a trainer checkpoint (its config, plus --set).
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Run name used for the default output directory.
    #[arg(long)]
    name: Option<String>,
    /// Also write every rollout to rollouts.jsonl.
    #[arg(long)]
    log_rollouts: bool,
    /// Write checkpoint.txt every N steps (it is always written at the end).
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<u64>,
    /// Print progress on evaluation steps.
    #[arg(long, short)]
    verbose: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Trainer checkpoint or bare policy file.
    #[arg(long)]
    policy: PathBuf,
    /// Task, required for bare policy files (e.g. `parity:6`).
    #[arg(long)]
    task: Option<Task>,
    #[arg(long, default_value_t = 200)]
    prompts: usize,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CurveKind {
    Grpo,
    Real,
    /// The four reference curves: GRPO ε=0.2, A=±1 and REAL τ=0.5, C=4.
    Figure,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClassArg {
    Positive,
    Negative,
    Both,
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(long, value_enum)]
    method: CurveKind,
    /// Advantage magnitude for GRPO curves.
    #[arg(long, default_value_t = 1.0)]
    advantage: f64,
    #[arg(long, default_value_t = 0.2)]
    eps_low: f64,
    #[arg(long, default_value_t = 0.2)]
    eps_high: f64,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    tau: f64,
    /// Class constant C for REAL curves.
    #[arg(long = "c", default_value_t = 4.0)]
    class_constant: f64,
    #[arg(long, value_enum, default_value_t = ClassArg::Both)]
    class: ClassArg,
    #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
    s_min: f64,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    s_max: f64,
    #[arg(long, default_value_t = 241)]
    points: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BinsArgs {
    /// Rollout log (JSONL).
    #[arg(long)]
    log: PathBuf,
    /// Trainer checkpoint or bare policy file to score the log against.
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    eps_low: f64,
    #[arg(long, default_value_t = 0.2)]
    eps_high: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run a single suite.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(verify::SUITES))]
    suite: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reduced instance counts for a fast check.
    #[arg(long)]
    quick: bool,
    /// Mutation fixture: flip the sign of the REAL gradient in the
    /// finite-difference property, which must then fail.
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
    #[command(flatten)]
    common: Common,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NumericFault(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, args),
        Command::Eval(a) => cmd_eval(a, args),
        Command::Curves(a) => cmd_curves(a, args),
        Command::Bins(a) => cmd_bins(a, args),
        Command::Verify(a) => cmd_verify(a, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn out_dir(common: &Common, name: &str) -> PathBuf {
    common.out_dir.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(name)
    })
}

/// Record the final status derived from `result` and pass it through.
fn finalize(manifest: &mut Manifest, result: Result<(), Failure>) -> Result<(), Failure> {
    let status = match &result {
        Ok(()) => "ok",
        Err(f) if f.code == EXIT_NUMERIC => "numeric_fault",
        Err(f) if f.code == EXIT_VERIFY => "verification_failed",
        Err(_) => "failed",
    };
    manifest.finish(status)?;
    result
}

fn cmd_train(a: TrainArgs, args: Vec<String>) -> Result<(), Failure> {
    let (config, state) = match &a.resume {
        Some(path) => {
            let (stored, state) = load_checkpoint(path)?;
            let config = TrainConfig::from_text_with_overrides(&stored.to_text(), &a.overrides)?;
            (config, Some(state))
        }
        None => {
            let text = match &a.config {
                Some(path) => {
                    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?
                }
                None => String::new(),
            };
            (TrainConfig::from_text_with_overrides(&text, &a.overrides)?, None)
        }
    };
    let name = a.name.clone().unwrap_or_else(|| {
        a.config
            .as_ref()
            .or(a.resume.as_ref())
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{}-{}", config.task.name(), config.loss.method))
    });
    let dir = out_dir(&a.common, &name);
    let mut manifest = Manifest::begin(&dir, "train", args)?;
    manifest.seed = Some(config.seed);
    manifest.config = Some(config.to_text());
    let paths = TrainPaths {
        metrics: manifest.output("metrics", "metrics.csv"),
        timing: manifest.output("timing", "timing.csv"),
        checkpoint: manifest.output("checkpoint", "checkpoint.txt"),
        policy: manifest.output("policy", "policy.txt"),
        rollouts: a.log_rollouts.then(|| manifest.output("rollouts", "rollouts.jsonl")),
    };
    manifest.write()?;
    let result = run_training(&a, config, state, &paths);
    finalize(&mut manifest, result)
}

struct TrainPaths {
    metrics: PathBuf,
    timing: PathBuf,
    checkpoint: PathBuf,
    policy: PathBuf,
    rollouts: Option<PathBuf>,
}

fn run_training(
    a: &TrainArgs,
    config: TrainConfig,
    state: Option<trainer::TrainState>,
    paths: &TrainPaths,
) -> Result<(), Failure> {
    let mut trainer = match state {
        Some(s) => Trainer::resume(config.clone(), s)?,
        None => Trainer::new(config.clone())?,
    };
    let mut metrics = BufWriter::new(File::create(&paths.metrics)?);
    writeln!(metrics, "{METRICS_CSV_HEADER}")?;
    let mut timing = BufWriter::new(File::create(&paths.timing)?);
    writeln!(timing, "step,seconds")?;
    let mut rollouts = match &paths.rollouts {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };

    let mut result = Ok(());
    while !trainer.is_done() {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                result = Err(e);
                break;
            }
        };
        let m = &report.metrics;
        writeln!(metrics, "{}", m.csv_line())?;
        writeln!(timing, "{},{:?}", m.step, m.wall_clock)?;
        if let Some(out) = rollouts.as_mut() {
            let records: Vec<RolloutRecord> = report
                .groups
                .iter()
                .flat_map(|g| &g.rollouts)
                .map(|r| RolloutRecord::from_rollout(m.step, r))
                .collect();
            write_jsonl(&mut *out, &records)?;
        }
        if let (Some(p), true) = (m.pass_at_1, a.verbose) {
            eprintln!(
                "step {} pass@1 {p:.4} reward {:.4} entropy {:.4} loss {:.5}",
                m.step, m.reward, m.entropy, m.loss
            );
        }
        if matches!(a.checkpoint_every, Some(n) if n > 0 && m.step % n == 0) {
            metrics.flush()?;
            save_checkpoint(&paths.checkpoint, &config, trainer.state())?;
        }
    }
    metrics.flush()?;
    timing.flush()?;
    if let Some(mut out) = rollouts {
        out.flush()?;
    }
    // On a fault the trainer still holds the last good state.
    save_checkpoint(&paths.checkpoint, &config, trainer.state())?;
    fs::write(&paths.policy, trainer.state().policy.to_text())?;
    result?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, args: Vec<String>) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.policy).map_err(|e| usage(format!("cannot read {}: {e}", a.policy.display())))?;
    let policy = policy_from_text(&text)?;
    let task = match (a.task, trainer::parse_checkpoint(&text)) {
        (Some(t), _) => t,
        (None, Ok((cfg, _))) => cfg.task,
        (None, Err(_)) => return Err(usage("--task is required for bare policy files")),
    };
    let dir = out_dir(&a.common, "eval");
    let mut manifest = Manifest::begin(&dir, "eval", args)?;
    manifest.seed = Some(a.seed);
    let out_path = manifest.output("eval", "eval.json");
    manifest.write()?;
    let result = (|| -> Result<(), Failure> {
        if rlvr_lab::policy::Policy::vocab(&policy) != task.vocab() {
            return Err(usage(format!("policy vocabulary does not match task {task}")));
        }
        let seeds = SeedStream::new(a.seed);
        let prompts = eval_prompts(task, a.prompts, &seeds);
        let spec = EvalSpec {
            samples: a.samples,
            temperature: a.temperature,
            max_len: a.max_len,
        };
        let pass = evaluate(&policy, &prompts, spec, &seeds, 0)?;
        let record = serde_json::json!({
            "task": task.to_string(),
            "prompts": a.prompts,
            "samples": a.samples,
            "temperature": a.temperature,
            "pass_at_1": pass,
        });
        fs::write(&out_path, serde_json::to_string_pretty(&record).expect("json") + "\n")?;
        println!("pass@1 {pass}");
        Ok(())
    })();
    finalize(&mut manifest, result)
}

fn curve_methods(a: &CurvesArgs) -> Result<Vec<CurveMethod>, Failure> {
    let classes = match a.class {
        ClassArg::Positive => vec![Class::Positive],
        ClassArg::Negative => vec![Class::Negative],
        ClassArg::Both => vec![Class::Positive, Class::Negative],
    };
    let clip = ClipRange {
        low: a.eps_low,
        high: a.eps_high,
    };
    Ok(match a.method {
        CurveKind::Grpo => {
            if a.advantage.is_nan() || a.advantage <= 0.0 {
                return Err(usage("--advantage is a magnitude and must be positive"));
            }
            classes
                .into_iter()
                .map(|c| CurveMethod::Grpo {
                    advantage: c.unit_advantage() * a.advantage,
                    clip,
                })
                .collect()
        }
        CurveKind::Real => classes
            .into_iter()
            .map(|class| CurveMethod::Real {
                class,
                c: a.class_constant,
                tau: a.tau,
            })
            .collect(),
        CurveKind::Figure => unreachable!("handled by the caller"),
    })
}

fn cmd_curves(a: CurvesArgs, args: Vec<String>) -> Result<(), Failure> {
    let dir = out_dir(&a.common, "curves");
    let mut manifest = Manifest::begin(&dir, "curves", args)?;
    let out_path = manifest.output("curves", "curves.csv");
    manifest.write()?;
    let result = (|| -> Result<(), Failure> {
        let curves = if a.method == CurveKind::Figure {
            verify::figure_curves(a.points)?
        } else {
            curve_methods(&a)?
                .into_iter()
                .map(|m| gradan::weight_curve(m, a.s_min, a.s_max, a.points))
                .collect::<Result<Vec<_>, _>>()?
        };
        let mut text = format!("{CURVE_CSV_HEADER}\n");
        for c in &curves {
            text.push_str(&c.csv_rows());
        }
        fs::write(&out_path, text)?;
        println!("{}", out_path.display());
        Ok(())
    })();
    finalize(&mut manifest, result)
}

fn cmd_bins(a: BinsArgs, args: Vec<String>) -> Result<(), Failure> {
    let dir = out_dir(&a.common, "bins");
    let mut manifest = Manifest::begin(&dir, "bins", args)?;
    let out_path = manifest.output("bins", "bins.csv");
    manifest.write()?;
    let result = (|| -> Result<(), Failure> {
        let text =
            fs::read_to_string(&a.policy).map_err(|e| usage(format!("cannot read {}: {e}", a.policy.display())))?;
        let policy = policy_from_text(&text).map_err(|e| usage(format!("{}: {e}", a.policy.display())))?;
        let log = File::open(&a.log).map_err(|e| usage(format!("cannot read {}: {e}", a.log.display())))?;
        let records = read_jsonl(BufReader::new(log)).map_err(|e| usage(format!("{}: {e}", a.log.display())))?;
        let clip = ClipRange {
            low: a.eps_low,
            high: a.eps_high,
        };
        if !(clip.low > 0.0 && clip.high > 0.0) {
            return Err(usage("clip bounds must be positive"));
        }
        let report = gradan::ratio_bin_stats(&records, &policy, clip)?;
        fs::write(&out_path, report.to_csv())?;
        print!("{}", report.to_csv());
        Ok(())
    })();
    finalize(&mut manifest, result)
}

fn cmd_verify(a: VerifyArgs, args: Vec<String>) -> Result<(), Failure> {
    let dir = out_dir(&a.common, "verify");
    let mut manifest = Manifest::begin(&dir, "verify", args)?;
    manifest.seed = Some(a.seed);
    let out_path = manifest.output("report", "verify.txt");
    manifest.write()?;
    let result = (|| -> Result<(), Failure> {
        let mut opts = VerifyOptions {
            seed: a.seed,
            ..VerifyOptions::default()
        };
        if a.quick {
            opts.fd_instances = 20;
            opts.bound_configs = 5_000;
            opts.monotonic_triples = 1_000;
            opts.growth_pairs = 1_000;
            opts.identity_sets = 100;
            opts.degenerate_groups = 20;
        }
        let mut results = verify::run(a.suite.as_deref(), &opts)?;
        if a.inject_sign_flip {
            results.push(verify::fd_property(Method::Real, &verify::sign_flipped_real, &opts)?);
        }
        let mut report = String::new();
        for r in &results {
            println!("{r}");
            report.push_str(&format!("{r}\n"));
        }
        let failed = results.iter().filter(|r| !r.passed).count();
        report.push_str(&format!("{} passed, {failed} failed\n", results.len() - failed));
        println!("{} passed, {failed} failed", results.len() - failed);
        fs::write(&out_path, report)?;
        if failed > 0 {
            return Err(Failure {
                code: EXIT_VERIFY,
                message: format!("{failed} properties failed"),
            });
        }
        Ok(())
    })();
    finalize(&mut manifest, result)
}
