//! Closed-form per-layer parameter counts and the extra-FLOP estimate of TLoRA.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::method::Method;
use crate::tensor::{min_base, TensorDims};

/// Methods the counter knows, a superset of the trainable [`Method`]s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CountMethod {
    FullFt,
    /// One tensorized vector set: `N r q R` for a single side.
    TloraVector,
    Adapter(Method),
}

impl FromStr for CountMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fullft" | "full" => Ok(CountMethod::FullFt),
            "tloravector" | "vector" => Ok(CountMethod::TloraVector),
            other => other.parse().map(CountMethod::Adapter),
        }
    }
}

impl fmt::Display for CountMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CountMethod::FullFt => f.write_str("full-ft"),
            CountMethod::TloraVector => f.write_str("tlora-vector"),
            CountMethod::Adapter(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    #[default]
    Finetune,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pretrain" | "pre-train" => Ok(Phase::Pretrain),
            "finetune" | "fine-tune" | "adapt" => Ok(Phase::Finetune),
            _ => Err(Error::invalid(format!("unknown phase '{s}'"))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

/// Arguments of a count query; irrelevant fields are ignored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CountArgs {
    pub d: Option<usize>,
    pub r: Option<usize>,
    pub order: Option<usize>,
    pub rank: Option<usize>,
    pub tasks: Option<usize>,
    pub modules: Option<usize>,
}

fn need(v: Option<usize>, name: &str, method: CountMethod) -> Result<u64> {
    match v {
        Some(x) if x > 0 => Ok(x as u64),
        Some(_) => Err(Error::invalid(format!("--{name} must be positive for {method}"))),
        None => Err(Error::invalid(format!("--{name} is required for {method}"))),
    }
}

/// Per-layer parameter count for a square `d x d` layer.
///
/// TensorPoly-X has no closed form upstream; its count is the number of
/// tensor-train core entries plus `(N-1) R` logits per routing row.
pub fn param_count(method: CountMethod, phase: Phase, args: &CountArgs) -> Result<u64> {
    let d = need(args.d, "d", method)?;
    let factored = |with_r: bool| -> Result<u64> {
        let n = need(args.order, "N", method)?;
        let big_r = need(args.rank, "R", method)?;
        let r = if with_r { need(args.r, "r", method)? } else { args.r.unwrap_or(1) as u64 };
        let q = min_base(d as usize, n as usize) as u64;
        Ok(n * r * q * big_r)
    };
    let routing_rows = |per_row: u64| -> Result<u64> {
        Ok(match phase {
            Phase::Pretrain => need(args.tasks, "T", method)? * per_row,
            Phase::Finetune => per_row,
        })
    };
    Ok(match method {
        CountMethod::FullFt => d * d,
        CountMethod::TloraVector => factored(false)?,
        CountMethod::Adapter(Method::Lora) => 2 * d * need(args.r, "r", method)?,
        CountMethod::Adapter(Method::Tlora) => 2 * factored(true)?,
        CountMethod::Adapter(Method::Poly) => {
            let s = need(args.modules, "S", method)?;
            2 * d * need(args.r, "r", method)? * s + routing_rows(s)?
        }
        CountMethod::Adapter(Method::Tp1) => {
            let big_r = need(args.rank, "R", method)?;
            2 * factored(true)? + routing_rows(big_r)?
        }
        CountMethod::Adapter(Method::Tp2) => {
            let big_r = need(args.rank, "R", method)?;
            let n = need(args.order, "N", method)?;
            2 * factored(true)? + routing_rows(big_r * n)?
        }
        CountMethod::Adapter(Method::Tpx) => {
            let n = need(args.order, "N", method)?;
            let big_r = need(args.rank, "R", method)?;
            if n < 2 {
                return Err(Error::invalid("tpx needs N >= 2"));
            }
            let q = min_base(d as usize, n as usize) as u64;
            tt_core_count(n, q, q, big_r) + routing_rows((n - 1) * big_r)?
        }
    })
}

/// Entries of an order-`n` train with boundary bonds 1 and internal bonds `rank`.
pub fn tt_core_count(n: u64, q_rows: u64, q_cols: u64, rank: u64) -> u64 {
    let per_mode = q_rows * q_cols;
    if n == 1 {
        return per_mode;
    }
    per_mode * (2 * rank + (n - 2) * rank * rank)
}

/// Dense count that a factored method stands in for, with the matching
/// compression ratio. `None` for methods that are already dense.
pub fn dense_equivalent(method: CountMethod, args: &CountArgs) -> Option<u64> {
    let d = args.d? as u64;
    match method {
        CountMethod::TloraVector => Some(d * args.r.unwrap_or(1) as u64),
        CountMethod::Adapter(Method::Tlora | Method::Tp1 | Method::Tp2) => Some(2 * d * args.r? as u64),
        CountMethod::Adapter(Method::Tpx) => Some(d * d),
        _ => None,
    }
}

/// Trainable entries of one possibly rectangular layer: the adapter arrays,
/// and one routing row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub modules: u64,
    pub routing_row: u64,
}

pub fn layer_budget(method: Method, dims: &TensorDims, modules: usize) -> Result<LayerBudget> {
    let (d_in, d_out, r) = (dims.d_in as u64, dims.d_out as u64, dims.r as u64);
    let (n, big_r, s) = (dims.order as u64, dims.rank as u64, modules as u64);
    let factored = n * r * big_r * (dims.q_in + dims.q_out) as u64;
    Ok(match method {
        Method::Lora => LayerBudget { modules: r * (d_in + d_out), routing_row: 0 },
        Method::Tlora => LayerBudget { modules: factored, routing_row: 0 },
        Method::Poly => LayerBudget { modules: s * r * (d_in + d_out), routing_row: s },
        Method::Tp1 => LayerBudget { modules: factored, routing_row: big_r },
        Method::Tp2 => LayerBudget { modules: factored, routing_row: n * big_r },
        Method::Tpx => {
            if n < 2 {
                return Err(Error::invalid("tpx needs N >= 2"));
            }
            LayerBudget {
                modules: tt_core_count(n, dims.q_out as u64, dims.q_in as u64, big_r),
                routing_row: (n - 1) * big_r,
            }
        }
    })
}

/// Extra multiplies of one TLoRA materialization over plain LoRA: `d r R`.
pub fn flop_extra(d: u64, r: u64, rank: u64) -> u64 {
    d * r * rank
}
