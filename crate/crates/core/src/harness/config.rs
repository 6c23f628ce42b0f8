//! TOML experiment and suite configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::method::Method;
use crate::tensor::TensorDims;

/// Which parameter groups are trained during few-shot adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Modules and a fresh routing row.
    Full,
    /// Routing only; modules frozen.
    ZOnly,
    /// Modules only; routing discarded in favour of uniform weights.
    MuOnly,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 3] = [AdaptMode::Full, AdaptMode::ZOnly, AdaptMode::MuOnly];

    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::Full => "full",
            AdaptMode::ZOnly => "z-only",
            AdaptMode::MuOnly => "mu-only",
        }
    }

    pub fn trains_modules(self) -> bool {
        self != AdaptMode::ZOnly
    }

    pub fn trains_routing(self) -> bool {
        self != AdaptMode::MuOnly
    }

    /// Unrouted methods only support full adaptation.
    pub fn supported_by(self, method: Method) -> bool {
        self == AdaptMode::Full || method.routing().is_some()
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "full" => Ok(AdaptMode::Full),
            "z-only" | "zonly" | "z" => Ok(AdaptMode::ZOnly),
            "mu-only" | "muonly" | "mu" => Ok(AdaptMode::MuOnly),
            other => Err(Error::invalid(format!("unknown adaptation mode `{other}`"))),
        }
    }
}

/// One pretrain + adapt experiment. Every field has a default so partial
/// TOML files work; [`ExperimentConfig::validate`] checks the combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub adapt_mode: AdaptMode,
    pub seed: u64,
    pub d_in: usize,
    pub d_out: usize,
    pub r: usize,
    /// Tensor order `N`.
    pub order: usize,
    /// Entanglement rank `R`.
    pub rank: usize,
    /// Poly inventory size `S`; defaults to `rank`.
    pub modules: Option<usize>,
    pub layers: usize,
    /// Planted expert count `G`.
    pub experts: usize,
    pub active_experts: usize,
    pub planted_rank: usize,
    pub expert_scale: f64,
    pub noise_std: f64,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub samples_per_task: usize,
    pub eval_samples: usize,
    pub shots: usize,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub lr_modules: f64,
    pub lr_routing: f64,
    pub temperature: f64,
    pub hard_eval: bool,
    pub scale: f64,
    pub init_std: f64,
    /// Record wall-clock time in metrics (breaks byte-identical reruns).
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Tp1,
            adapt_mode: AdaptMode::Full,
            seed: 0,
            d_in: 32,
            d_out: 32,
            r: 2,
            order: 2,
            rank: 4,
            modules: None,
            layers: 2,
            experts: 4,
            active_experts: 2,
            planted_rank: 1,
            expert_scale: 1.0,
            noise_std: 0.1,
            train_tasks: 8,
            test_tasks: 4,
            samples_per_task: 100,
            eval_samples: 200,
            shots: 50,
            pretrain_epochs: 200,
            adapt_epochs: 50,
            lr_modules: 1e-2,
            lr_routing: 1e-1,
            temperature: 1.0,
            hard_eval: false,
            scale: 1.0,
            init_std: 0.1,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_modules(&self) -> usize {
        self.modules.unwrap_or(self.rank)
    }

    pub fn dims(&self) -> Result<TensorDims> {
        TensorDims::new(self.d_in, self.d_out, self.r, self.order, self.rank)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_in", self.d_in),
            ("d_out", self.d_out),
            ("r", self.r),
            ("order", self.order),
            ("rank", self.rank),
            ("layers", self.layers),
            ("experts", self.experts),
            ("active_experts", self.active_experts),
            ("planted_rank", self.planted_rank),
            ("train_tasks", self.train_tasks),
            ("test_tasks", self.test_tasks),
            ("samples_per_task", self.samples_per_task),
            ("eval_samples", self.eval_samples),
            ("shots", self.shots),
            ("modules", self.num_modules()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.active_experts > self.experts {
            return Err(Error::Config("active_experts exceeds experts".into()));
        }
        if self.shots > self.samples_per_task {
            return Err(Error::Config(format!(
                "shots ({}) exceed available samples per task ({})",
                self.shots, self.samples_per_task
            )));
        }
        if self.method == Method::Tpx && self.order < 2 {
            return Err(Error::Config("tpx needs order >= 2".into()));
        }
        if !self.adapt_mode.supported_by(self.method) {
            return Err(Error::Config(format!("{} adaptation is undefined for unrouted {}", self.adapt_mode, self.method)));
        }
        for (name, v) in [
            ("lr_modules", self.lr_modules),
            ("lr_routing", self.lr_routing),
            ("temperature", self.temperature),
            ("init_std", self.init_std),
            ("scale", self.scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        if !(self.noise_std >= 0.0 && self.expert_scale >= 0.0) {
            return Err(Error::Config("noise_std and expert_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// A grid of experiments sharing one base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub methods: Vec<Method>,
    #[serde(default = "default_modes")]
    pub modes: Vec<AdaptMode>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: ExperimentConfig,
}

fn default_modes() -> Vec<AdaptMode> {
    vec![AdaptMode::Full]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl SuiteConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.methods.is_empty() || cfg.modes.is_empty() || cfg.seeds.is_empty() {
            return Err(Error::Config("methods, modes and seeds must be non-empty".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Valid cells in grid order (method, mode, seed); unsupported
    /// method/mode pairs are dropped.
    pub fn cells(&self) -> Result<Vec<ExperimentConfig>> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &mode in &self.modes {
                if !mode.supported_by(method) {
                    log::info!("skipping {method}/{mode}: unrouted methods adapt in full mode only");
                    continue;
                }
                for &seed in &self.seeds {
                    let cfg = ExperimentConfig {
                        method,
                        adapt_mode: mode,
                        seed,
                        ..self.base.clone()
                    };
                    cfg.validate()?;
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_and_unknown_key() {
        let cfg = ExperimentConfig::from_toml_str("method = \"poly\"\nmodules = 3\nadapt_mode = \"z-only\"").unwrap();
        assert_eq!(cfg.method, Method::Poly);
        assert_eq!(cfg.num_modules(), 3);
        assert_eq!(cfg.adapt_mode, AdaptMode::ZOnly);
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn shots_beyond_samples_rejected() {
        assert!(ExperimentConfig::from_toml_str("shots = 500").is_err());
        assert!(ExperimentConfig::from_toml_str("method = \"lora\"\nadapt_mode = \"mu-only\"").is_err());
        assert!(ExperimentConfig::from_toml_str("method = \"tpx\"\norder = 1").is_err());
    }

    #[test]
    fn suite_cells_skip_unsupported_pairs() {
        let s = SuiteConfig::from_toml_str("methods = [\"tlora\", \"tp1\"]\nmodes = [\"full\", \"z-only\"]\nseeds = [0, 1]\n[base]\nd_in = 8\nd_out = 8")
            .unwrap();
        let cells = s.cells().unwrap();
        assert_eq!(cells.len(), 2 + 2 * 2);
        assert!(cells.iter().all(|c| c.d_in == 8));
        let back = SuiteConfig::from_toml_str(&s.to_toml_string().unwrap()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("z_only".parse::<AdaptMode>().unwrap(), AdaptMode::ZOnly);
        assert_eq!("mu-only".parse::<AdaptMode>().unwrap(), AdaptMode::MuOnly);
        assert!("half".parse::<AdaptMode>().is_err());
    }
}
