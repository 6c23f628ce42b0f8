//! Adapter method tags and the parameter-access trait shared by adapters and routing.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The six adapter parameterizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lora,
    Tlora,
    Poly,
    Tp1,
    Tp2,
    Tpx,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Lora,
        Method::Tlora,
        Method::Poly,
        Method::Tp1,
        Method::Tp2,
        Method::Tpx,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Tlora => "tlora",
            Method::Poly => "poly",
            Method::Tp1 => "tp1",
            Method::Tp2 => "tp2",
            Method::Tpx => "tpx",
        }
    }

    /// Stable one-byte tag used by the checkpoint container.
    pub fn tag(self) -> u8 {
        match self {
            Method::Lora => 1,
            Method::Tlora => 2,
            Method::Poly => 3,
            Method::Tp1 => 4,
            Method::Tp2 => 5,
            Method::Tpx => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.tag() == tag)
    }

    /// Routing granularity, `None` for the single-adapter methods.
    pub fn routing(self) -> Option<RoutingVariant> {
        match self {
            Method::Lora | Method::Tlora => None,
            Method::Poly => Some(RoutingVariant::Poly),
            Method::Tp1 => Some(RoutingVariant::Tp1),
            Method::Tp2 => Some(RoutingVariant::Tp2),
            Method::Tpx => Some(RoutingVariant::Tpx),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "lora" => Ok(Method::Lora),
            "tlora" => Ok(Method::Tlora),
            "poly" => Ok(Method::Poly),
            "tp1" | "tensorpolyi" | "tensorpoly1" => Ok(Method::Tp1),
            "tp2" | "tensorpolyii" | "tensorpoly2" => Ok(Method::Tp2),
            "tpx" | "tensorpolyx" => Ok(Method::Tpx),
            _ => Err(Error::invalid(format!("unknown method '{s}'"))),
        }
    }
}

/// Routing granularity of a latent-expert method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingVariant {
    Poly,
    Tp1,
    Tp2,
    Tpx,
}

impl RoutingVariant {
    pub fn tag(self) -> u8 {
        match self {
            RoutingVariant::Poly => 3,
            RoutingVariant::Tp1 => 4,
            RoutingVariant::Tp2 => 5,
            RoutingVariant::Tpx => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        [
            RoutingVariant::Poly,
            RoutingVariant::Tp1,
            RoutingVariant::Tp2,
            RoutingVariant::Tpx,
        ]
        .into_iter()
        .find(|v| v.tag() == tag)
    }

    /// Shape of one task's routing row: `(S)`, `(R)`, `(N, R)` or `(N-1, R)`.
    ///
    /// `experts` is `S` for Poly and `R` otherwise.
    pub fn row_shape(self, order: usize, experts: usize) -> Vec<usize> {
        match self {
            RoutingVariant::Poly | RoutingVariant::Tp1 => vec![experts],
            RoutingVariant::Tp2 => vec![order, experts],
            RoutingVariant::Tpx => vec![order.saturating_sub(1), experts],
        }
    }
}

/// Flat access to every trainable array of an object, in a fixed order.
///
/// Gradients, optimizer state and checkpoints all index parameters by this order.
pub trait Parameterized {
    fn param_views(&self) -> Vec<ArrayViewD<'_, f64>>;
    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>>;

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.param_views().iter().map(|v| v.shape().to_vec()).collect()
    }

    fn num_params(&self) -> usize {
        self.param_views().iter().map(|v| v.len()).sum()
    }
}
