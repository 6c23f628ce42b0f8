//! Grid runner: method x mode x seed cells on a bounded worker pool.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::layer_budget;
use crate::error::{Error, Result};
use crate::harness::config::{AdaptMode, ExperimentConfig, SuiteConfig};
use crate::harness::data::{gen_multitask, GenConfig};
use crate::harness::metrics::{write_jsonl, MetricsRecord};
use crate::harness::train::{adapt, pretrain};
use crate::method::Method;

/// Overrides the default run-directory root.
pub const ENV_RUN_ROOT: &str = "TENSORPOLY_RUN_ROOT";
/// Overrides the worker-pool size.
pub const ENV_WORKERS: &str = "TENSORPOLY_WORKERS";

pub fn run_root() -> PathBuf {
    std::env::var_os(ENV_RUN_ROOT).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn default_workers() -> usize {
    std::env::var(ENV_WORKERS)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Outcome of one (method, mode, seed) experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub pretrain_trainable: usize,
    pub adapt_trainable: usize,
    pub final_pretrain_loss: f64,
    /// Held-out loss per test task after adaptation.
    pub test_losses: Vec<f64>,
    pub records: Vec<MetricsRecord>,
}

impl CellOutput {
    pub fn mean_test_loss(&self) -> f64 {
        self.test_losses.iter().sum::<f64>() / self.test_losses.len().max(1) as f64
    }
}

/// Generate, pretrain, adapt every test task, evaluate. Pure in `cfg`.
pub fn run_cell(cfg: &ExperimentConfig) -> Result<CellOutput> {
    cfg.validate()?;
    let data = gen_multitask(&GenConfig::from(cfg))?;
    let pre = pretrain(cfg, &data)?;
    let tasks = data.train.len();
    let final_pretrain_loss = pre.records.iter().rev().take(tasks).map(|r| r.loss).sum::<f64>() / tasks as f64;
    let mut records = pre.records;
    let mut test_losses = Vec::with_capacity(data.test.len());
    let mut adapt_trainable = 0;
    for task in &data.test {
        let out = adapt(&pre.model, cfg, task)?;
        adapt_trainable = out.trainable;
        test_losses.push(out.test_loss);
        records.extend(out.records);
    }
    Ok(CellOutput {
        pretrain_trainable: pre.trainable,
        adapt_trainable,
        final_pretrain_loss,
        test_losses,
        records,
    })
}

pub fn metrics_file_name(cfg: &ExperimentConfig) -> String {
    format!("{}-{}-seed{}.jsonl", cfg.method, cfg.adapt_mode, cfg.seed)
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub mode: AdaptMode,
    /// Trainable scalars of one square `d_in x d_in` adapter layer in this mode.
    pub adapt_params_per_layer: u64,
    /// Trainable scalars across all layers during adaptation.
    pub adapt_params_total: usize,
    pub median_test_loss: Option<f64>,
    pub seeds: String,
    pub failed: usize,
    pub status: String,
}

/// Per-layer adaptation budget for the square layer `d_in x d_in`, matching
/// the parameter counter's finetune column in full mode.
pub fn adapt_params_per_layer(cfg: &ExperimentConfig) -> Result<u64> {
    let dims = crate::tensor::TensorDims::square(cfg.d_in, cfg.r, cfg.order, cfg.rank)?;
    let b = layer_budget(cfg.method, &dims, cfg.num_modules())?;
    Ok(match cfg.adapt_mode {
        AdaptMode::Full => b.modules + b.routing_row,
        AdaptMode::ZOnly => b.routing_row,
        AdaptMode::MuOnly => b.modules,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

#[derive(Debug)]
pub struct SuiteOutcome {
    pub run_dir: PathBuf,
    pub cells: Vec<(ExperimentConfig, Result<CellOutput>)>,
    pub rows: Vec<SummaryRow>,
}

impl SuiteOutcome {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|(_, r)| r.is_ok())
    }

    pub fn row(&self, method: Method, mode: AdaptMode) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.mode == mode)
    }
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create_new(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    f.write_all(bytes)?;
    Ok(())
}

/// Runs every cell, writes `config.toml`, `metrics/*.jsonl` and `summary.csv`
/// under `run_dir` (which must not already contain them). Cell failures are
/// recorded in the summary rather than aborting the suite.
pub fn run_suite(suite: &SuiteConfig, run_dir: &Path, workers: usize) -> Result<SuiteOutcome> {
    let cells = suite.cells()?;
    let metrics_dir = run_dir.join("metrics");
    fs::create_dir_all(&metrics_dir)?;
    write_new(&run_dir.join("config.toml"), suite.to_toml_string()?.as_bytes())?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<CellOutput>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cfg| {
                log::info!("cell {}", metrics_file_name(cfg));
                let out = run_cell(cfg);
                if let Err(e) = &out {
                    log::error!("cell {} failed: {e}", metrics_file_name(cfg));
                }
                out
            })
            .collect()
    });

    for (cfg, res) in cells.iter().zip(&results) {
        if let Ok(out) = res {
            let path = metrics_dir.join(metrics_file_name(cfg));
            if path.exists() {
                return Err(Error::Config(format!("{} already exists; use a fresh run directory", path.display())));
            }
            write_jsonl(&path, &out.records)?;
        }
    }

    let cells: Vec<_> = cells.into_iter().zip(results).collect();
    let mut rows = Vec::new();
    for &method in &suite.methods {
        for &mode in &suite.modes {
            let group: Vec<_> = cells.iter().filter(|(c, _)| c.method == method && c.adapt_mode == mode).collect();
            let Some((first, _)) = group.first() else { continue };
            let losses: Vec<f64> = group.iter().filter_map(|(_, r)| r.as_ref().ok().map(CellOutput::mean_test_loss)).collect();
            let errors: Vec<String> = group
                .iter()
                .filter_map(|(c, r)| r.as_ref().err().map(|e| format!("seed {}: {e}", c.seed)))
                .collect();
            rows.push(SummaryRow {
                method,
                mode,
                adapt_params_per_layer: adapt_params_per_layer(first)?,
                adapt_params_total: group.iter().find_map(|(_, r)| r.as_ref().ok().map(|o| o.adapt_trainable)).unwrap_or(0),
                median_test_loss: median(&losses),
                seeds: group.iter().map(|(c, _)| c.seed.to_string()).collect::<Vec<_>>().join(";"),
                failed: errors.len(),
                status: if errors.is_empty() { "ok".into() } else { format!("failed ({})", errors.join("; ")) },
            });
        }
    }
    write_summary(&run_dir.join("summary.csv"), &rows)?;
    Ok(SuiteOutcome {
        run_dir: run_dir.to_path_buf(),
        cells,
        rows,
    })
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_new(path, &bytes)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
}

/// Human-readable rendering of a summary table.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!("{:<6} {:<8} {:>12} {:>12} {:>16} {:<8} {}\n", "method", "mode", "params/layer", "params/all", "median_test_mse", "seeds", "status");
    for r in rows {
        let loss = r.median_test_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        s.push_str(&format!(
            "{:<6} {:<8} {:>12} {:>12} {:>16} {:<8} {}\n",
            r.method.name(),
            r.mode.name(),
            r.adapt_params_per_layer,
            r.adapt_params_total,
            loss,
            r.seeds,
            r.status
        ));
    }
    s
}
