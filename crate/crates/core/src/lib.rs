//! Entangled-tensor LoRA adapters (TLoRA), latent-expert routing (Poly and
//! TensorPoly-I/II/X), hand-derived gradients, and a synthetic multi-task
//! pretrain / few-shot-adapt harness.

pub mod accounting;
pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod gradients;
pub mod harness;
pub mod method;
pub mod oracles;
pub mod routing;
pub mod tensor;

pub use error::{Error, Result};
pub use method::{Method, Parameterized, RoutingVariant};
