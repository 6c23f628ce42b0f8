//! Command-line front end.
//!
//! Exit status: 0 when every check or cell passes, 1 on usage or configuration
//! errors, 2 on numerical failure (failed checks, NaN, divergence).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::accounting::{dense_equivalent, flop_extra, param_count, CountArgs, CountMethod, Phase};
use crate::checkpoint::{load_model, save_model};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_method, gradcheck_random, GradcheckConfig};
use crate::harness::config::{AdaptMode, ExperimentConfig, SuiteConfig};
use crate::harness::data::{gen_multitask, GenConfig};
use crate::harness::metrics::write_jsonl;
use crate::harness::suite::{default_workers, format_summary, read_summary, run_root, run_suite};
use crate::harness::train::{adapt, pretrain};
use crate::method::Method;
use crate::oracles::{run_degeneracy_suite, run_oracle_suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tensorpoly", version, about = "Entangled-tensor adapters with latent-expert routing")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form per-layer parameter count.
    Params(ParamsArgs),
    /// Extra multiplies of one TLoRA materialization over LoRA.
    Flops(FlopsArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Brute-force oracle and degeneracy suites.
    Oracle(OracleArgs),
    /// Multi-task pretraining on the planted generator.
    Pretrain(PretrainArgs),
    /// Few-shot adaptation of a pretrained checkpoint to test tasks.
    Adapt(AdaptArgs),
    /// Method x mode x seed grid with summary table.
    RunSuite(SuiteArgs),
    /// Print the summary table of a finished suite.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// lora, tlora, poly, tp1, tp2, tpx, full-ft or tlora-vector.
    #[arg(long)]
    pub method: CountMethod,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    /// Tensor order.
    #[arg(long = "N")]
    pub order: Option<usize>,
    /// Entanglement rank.
    #[arg(long = "R")]
    pub rank: Option<usize>,
    /// Pretraining task count.
    #[arg(long = "T")]
    pub tasks: Option<usize>,
    /// Poly module count.
    #[arg(long = "S")]
    pub modules: Option<usize>,
    #[arg(long, default_value = "finetune")]
    pub phase: Phase,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub d: u64,
    #[arg(long)]
    pub r: u64,
    #[arg(long = "R")]
    pub rank: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// A method name or `all`.
    #[arg(long, default_value = "all")]
    pub variant: String,
    /// TOML file with any `GradcheckConfig` fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long = "N")]
    pub order: Option<usize>,
    #[arg(long = "R")]
    pub rank: Option<usize>,
    #[arg(long = "S")]
    pub modules: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Additionally check this many random small configurations per variant.
    #[arg(long, default_value_t = 0)]
    pub random: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment TOML; built-in defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: a fresh directory under the run root).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mode: Option<AdaptMode>,
    /// Test-task index; every test task when omitted.
    #[arg(long)]
    pub task: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; `TENSORPOLY_WORKERS` or the core count otherwise.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Divergence(_) | Error::ContractViolation(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_env("RUST_LOG").try_init();
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Params(a) => cmd_params(&a, out),
        Command::Flops(a) => {
            writeln!(out, "{}", flop_extra(a.d, a.r, a.rank))?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Oracle(a) => cmd_oracle(&a, out),
        Command::Pretrain(a) => cmd_pretrain(&a, out),
        Command::Adapt(a) => cmd_adapt(&a, out),
        Command::RunSuite(a) => cmd_run_suite(&a, out),
        Command::Report(a) => {
            let rows = read_summary(&a.run.join("summary.csv"))?;
            write!(out, "{}", format_summary(&rows))?;
            Ok(EXIT_OK)
        }
    }
}

fn cmd_params(a: &ParamsArgs, out: &mut dyn Write) -> Result<i32> {
    let args = CountArgs {
        d: a.d,
        r: a.r,
        order: a.order,
        rank: a.rank,
        tasks: a.tasks,
        modules: a.modules,
    };
    let count = param_count(a.method, a.phase, &args)?;
    let dense = dense_equivalent(a.method, &args);
    let ratio = dense.map(|d| d as f64 / count as f64);
    if a.json {
        let v = serde_json::json!({
            "method": a.method.to_string(),
            "phase": a.phase.to_string(),
            "params": count,
            "dense": dense,
            "compression": ratio,
        });
        writeln!(out, "{v}")?;
    } else {
        match (dense, ratio) {
            (Some(d), Some(x)) => writeln!(out, "{}\t{}\t{count}\tdense {d}\t{x:.2}x", a.method, a.phase)?,
            _ => writeln!(out, "{}\t{}\t{count}", a.method, a.phase)?,
        }
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str::<GradcheckConfig>(&fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => GradcheckConfig::default(),
    };
    if let Some(d) = a.d {
        cfg.d_in = d;
        cfg.d_out = d;
    }
    cfg.r = a.r.unwrap_or(cfg.r);
    cfg.order = a.order.unwrap_or(cfg.order);
    cfg.rank = a.rank.unwrap_or(cfg.rank);
    cfg.modules = a.modules.unwrap_or(cfg.modules);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let methods: Vec<Method> = if a.variant.eq_ignore_ascii_case("all") {
        Method::ALL.iter().copied().filter(|&m| !(m == Method::Tpx && cfg.order < 2)).collect()
    } else {
        vec![a.variant.parse()?]
    };
    let mut reports = methods.iter().map(|&m| gradcheck_method(m, &cfg, None)).collect::<Result<Vec<_>>>()?;
    if a.random > 0 {
        reports.extend(gradcheck_random(a.random, cfg.seed)?.into_iter().filter(|r| methods.contains(&r.method)));
    }
    for r in &reports {
        if let Some(note) = &r.note {
            log::info!("{}: {note}", r.method);
        }
        if a.json {
            writeln!(out, "{}", serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?)?;
            continue;
        }
        let worst = r.worst.as_ref().map_or_else(String::new, |w| {
            format!("worst {}{:?} analytic {:.6e} numeric {:.6e}", w.param, w.index, w.analytic, w.numeric)
        });
        writeln!(
            out,
            "{:<5} {} max_rel_err {:.3e} over {} coords  {}{}",
            r.method.name(),
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_err,
            r.checked,
            worst,
            r.note.as_ref().map_or_else(String::new, |n| format!("  [{n}]"))
        )?;
    }
    Ok(if reports.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_NUMERICAL })
}

fn cmd_oracle(a: &OracleArgs, out: &mut dyn Write) -> Result<i32> {
    let mut reports = run_oracle_suite(a.instances, a.seed);
    reports.extend(run_degeneracy_suite(a.instances, a.seed));
    for r in &reports {
        if a.json {
            writeln!(out, "{}", serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?)?;
        } else {
            writeln!(
                out,
                "{:<28} {} instances {} exact_int {} max_rel_err {:.3e}",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.instances,
                r.exact,
                r.max_rel_err
            )?;
        }
    }
    Ok(if reports.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_NUMERICAL })
}

/// Defaults, then the config file, then command-line flags.
fn effective_config(a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn fresh_dir(explicit: Option<&PathBuf>, default_name: String) -> Result<PathBuf> {
    let dir = explicit.cloned().unwrap_or_else(|| run_root().join(default_name));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create_new(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    f.write_all(bytes)?;
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = effective_config(&a.exp)?;
    cfg.validate()?;
    let dir = fresh_dir(a.exp.out.as_ref(), format!("pretrain-{}-seed{}", cfg.method, cfg.seed))?;
    write_new(&dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    let data = gen_multitask(&GenConfig::from(&cfg))?;
    let outcome = pretrain(&cfg, &data)?;
    let ckpt = dir.join("checkpoint.bin");
    if ckpt.exists() {
        return Err(Error::Config(format!("{} already exists", ckpt.display())));
    }
    save_model(&outcome.model, &ckpt)?;
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        return Err(Error::Config(format!("{} already exists", metrics.display())));
    }
    write_jsonl(&metrics, &outcome.records)?;
    let tasks = data.train.len().max(1);
    let last = outcome.records.iter().rev().take(tasks).map(|r| r.loss).sum::<f64>() / tasks as f64;
    writeln!(out, "method {} trainable {} final_loss {last:.6} checkpoint {}", cfg.method, outcome.trainable, ckpt.display())?;
    Ok(EXIT_OK)
}

fn cmd_adapt(a: &AdaptArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = effective_config(&a.exp)?;
    let model = load_model(&a.checkpoint)?;
    if a.exp.method.is_none() {
        cfg.method = model.method;
    }
    if let Some(m) = a.mode {
        cfg.adapt_mode = m;
    }
    cfg.validate()?;
    let data = gen_multitask(&GenConfig::from(&cfg))?;
    if model.layers.len() != data.bases.len() || model.layers.iter().zip(&data.bases).any(|(l, b)| l.w0() != b) {
        return Err(Error::Config("checkpoint base weights do not match the configured generator".into()));
    }
    let tasks: Vec<_> = match a.task {
        Some(i) => vec![data.test.get(i).ok_or_else(|| Error::invalid(format!("test task {i} out of range")))?],
        None => data.test.iter().collect(),
    };
    let dir = fresh_dir(a.exp.out.as_ref(), format!("adapt-{}-{}-seed{}", cfg.method, cfg.adapt_mode, cfg.seed))?;
    write_new(&dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    let mut records = Vec::new();
    for task in tasks {
        let o = adapt(&model, &cfg, task)?;
        let path = dir.join(format!("adapted-task{}.bin", task.task_id));
        if path.exists() {
            return Err(Error::Config(format!("{} already exists", path.display())));
        }
        save_model(&o.model, &path)?;
        writeln!(out, "task {} mode {} trainable {} test_loss {:.6}", task.task_id, cfg.adapt_mode, o.trainable, o.test_loss)?;
        records.extend(o.records);
    }
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        return Err(Error::Config(format!("{} already exists", metrics.display())));
    }
    write_jsonl(&metrics, &records)?;
    Ok(EXIT_OK)
}

fn cmd_run_suite(a: &SuiteArgs, out: &mut dyn Write) -> Result<i32> {
    let mut suite = SuiteConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        suite.seeds = vec![s];
    }
    let dir = a.out.clone().unwrap_or_else(|| run_root().join("suite"));
    let outcome = run_suite(&suite, &dir, a.workers.unwrap_or_else(default_workers))?;
    write!(out, "{}", format_summary(&outcome.rows))?;
    writeln!(out, "run directory {}", dir.display())?;
    Ok(if outcome.all_ok() { EXIT_OK } else { EXIT_NUMERICAL })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("tensorpoly").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn params_examples() {
        let (c, s) = run_str(&["params", "--method", "tlora-vector", "--d", "512", "--N", "3", "--R", "2"]);
        assert_eq!(c, 0);
        assert_eq!(s.split('\t').nth(2).unwrap(), "48");
        let (_, s) = run_str(&["params", "--method", "lora", "--d", "512", "--r", "4"]);
        assert_eq!(s.trim_end().split('\t').nth(2).unwrap(), "4096");
        let (_, s) = run_str(&["params", "--method", "tp2", "--d", "512", "--r", "4", "--N", "2", "--R", "8", "--T", "10", "--phase", "pretrain"]);
        assert_eq!(s.split('\t').nth(2).unwrap(), "3104");
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_str(&["params", "--method", "lora", "--d", "512"]).0, EXIT_USAGE);
        assert_eq!(run_str(&["params", "--method", "nonsense", "--d", "4"]).0, EXIT_USAGE);
        assert_eq!(run_str(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_str(&[]).0, EXIT_USAGE);
    }

    #[test]
    fn gradcheck_tp2_order_one() {
        let (c, s) = run_str(&["gradcheck", "--variant", "tp2", "--N", "1"]);
        assert_eq!(c, 0, "{s}");
        assert!(s.contains("PASS") && s.contains("coincides"));
    }

    #[test]
    fn flops_value() {
        assert_eq!(run_str(&["flops", "--d", "2048", "--r", "4", "--R", "2"]).1.trim(), "16384");
    }
}
