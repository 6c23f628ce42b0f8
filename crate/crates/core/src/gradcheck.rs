//! Finite-difference verification of the analytic gradients.
//!
//! Every variant is checked on a small random model: adapter arrays and routing
//! logits are perturbed one coordinate at a time with the Gumbel noise frozen,
//! and the central difference is compared with the backward pass using
//! `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::gradients::{finite_diff_params, Mixing};
use crate::harness::model::{Model, RoutingPolicy};
use crate::method::Method;
use crate::tensor::TensorDims;

pub const GRADCHECK_TOL: f64 = 1e-5;
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Denominator floor so near-zero coordinates are judged on absolute error.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub r: usize,
    pub order: usize,
    pub rank: usize,
    pub modules: usize,
    pub tasks: usize,
    pub layers: usize,
    pub batch: usize,
    pub temperature: f64,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            d_out: 8,
            r: 2,
            order: 2,
            rank: 2,
            modules: 3,
            tasks: 2,
            layers: 1,
            batch: 4,
            temperature: 1.0,
            step: GRADCHECK_STEP,
            tol: GRADCHECK_TOL,
            seed: 0,
        }
    }
}

/// Deliberate corruption of one analytic coordinate (negative control).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    /// Index into the flattened parameter list (adapter arrays, then routing).
    pub param: usize,
    /// Flat row-major index inside that array.
    pub index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordError {
    pub param: String,
    pub index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantReport {
    pub method: Method,
    pub config: GradcheckConfig,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordError>,
    pub passed: bool,
    pub note: Option<String>,
}

fn param_names(model: &Model) -> Vec<String> {
    let mut names = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        match &layer.adapter {
            Adapter::None => {}
            Adapter::TensorTrain(inv) => names.extend((0..inv.cores.order()).map(|i| format!("layer{l}.core{i}"))),
            _ => names.extend([format!("layer{l}.A"), format!("layer{l}.B")]),
        }
    }
    for (l, r) in model.routing.iter().enumerate() {
        if r.is_some() {
            names.push(format!("layer{l}.routing"));
        }
    }
    names
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (slot, &n) in idx.iter_mut().zip(shape).rev() {
        *slot = flat % n;
        flat /= n;
    }
    idx
}

/// Relative error with the gradient floor used by every check in this module.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Random model, batch and frozen noise for `method` under `cfg`.
fn setup(method: Method, cfg: &GradcheckConfig) -> Result<(Model, Array2<f64>, Array2<f64>, usize, Vec<Option<ArrayD<f64>>>)> {
    if cfg.layers == 0 || cfg.tasks == 0 || cfg.batch == 0 {
        return Err(Error::invalid("gradcheck needs layers, tasks and batch >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = TensorDims::new(cfg.d_in, cfg.d_out, cfg.r, cfg.order, cfg.rank)?;
    let mut widths = vec![cfg.d_in];
    widths.extend(std::iter::repeat_n(cfg.d_out, cfg.layers));
    let bases: Vec<Array2<f64>> = widths
        .windows(2)
        .map(|w| Array2::from_shape_simple_fn((w[1], w[0]), || rng.random_range(-0.5..0.5)))
        .collect();
    let mut model = Model::init(method, dims, cfg.modules, &bases, cfg.tasks, 1.0, 0.5, cfg.temperature, &mut rng)?;
    for mut z in model.routing_views_mut() {
        z.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    }
    let x = Array2::from_shape_simple_fn((cfg.batch, cfg.d_in), || rng.random_range(-1.0..1.0));
    let y = Array2::from_shape_simple_fn((cfg.batch, cfg.d_out), || rng.random_range(-1.0..1.0));
    let task = rng.random_range(0..cfg.tasks);
    let noise = model
        .draw_mixing(task, RoutingPolicy::Train, &mut rng)?
        .into_iter()
        .map(|m| match m {
            Mixing::Sampled(s) => s.noise,
            _ => None,
        })
        .collect();
    Ok((model, x, y, task, noise))
}

/// Checks every adapter and routing-logit coordinate of one variant.
pub fn gradcheck_method(method: Method, cfg: &GradcheckConfig, fault: Option<Fault>) -> Result<VariantReport> {
    let (model, x, y, task, noise) = setup(method, cfg)?;
    let bundle = model.grads_with(x.view(), y.view(), task, model.mixing_from_noise(task, &noise)?)?;
    let mut analytic: Vec<ArrayD<f64>> = bundle.adapter.into_iter().flatten().collect();
    analytic.extend(bundle.routing.into_iter().flatten());
    if let Some(f) = fault {
        let slot = analytic
            .get_mut(f.param)
            .and_then(|a| a.as_slice_mut())
            .and_then(|s| s.get_mut(f.index))
            .ok_or_else(|| Error::invalid("fault coordinate out of range"))?;
        *slot += f.delta;
    }

    let mut fd_failure = None;
    let numeric = finite_diff_params(
        &model,
        |m| {
            let loss = m
                .mixing_from_noise(task, &noise)
                .and_then(|mix| m.loss_with(x.view(), y.view(), mix));
            loss.unwrap_or_else(|e| {
                fd_failure.get_or_insert(e);
                f64::NAN
            })
        },
        cfg.step,
    );
    if let Some(e) = fd_failure {
        return Err(e);
    }
    if numeric.len() != analytic.len() {
        return Err(Error::ContractViolation(format!(
            "{} analytic gradient arrays for {} parameter arrays",
            analytic.len(),
            numeric.len()
        )));
    }

    let names = param_names(&model);
    let mut worst: Option<CoordError> = None;
    let mut checked = 0;
    for (p, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if a.shape() != n.shape() {
            return Err(Error::shape("analytic gradient", n.shape(), a.shape()));
        }
        for (i, (&av, &nv)) in a.iter().zip(n.iter()).enumerate() {
            checked += 1;
            let e = rel_err(av, nv);
            if !e.is_finite() || worst.as_ref().is_none_or(|w| e > w.rel_err) {
                worst = Some(CoordError {
                    param: names.get(p).cloned().unwrap_or_else(|| format!("param{p}")),
                    index: unravel(i, a.shape()),
                    analytic: av,
                    numeric: nv,
                    rel_err: e,
                });
            }
        }
    }
    let max_rel_err = worst.as_ref().map_or(0.0, |w| w.rel_err);
    let note = (method == Method::Tp2 && cfg.order == 1).then(|| "order 1: TensorPoly-II coincides with TensorPoly-I".to_string());
    Ok(VariantReport {
        method,
        config: *cfg,
        checked,
        max_rel_err,
        passed: max_rel_err.is_finite() && max_rel_err <= cfg.tol,
        worst,
        note,
    })
}

/// All six variants at one configuration (TensorPoly-X is skipped at order 1).
pub fn gradcheck_all(cfg: &GradcheckConfig) -> Result<Vec<VariantReport>> {
    Method::ALL
        .iter()
        .filter(|&&m| !(m == Method::Tpx && cfg.order < 2))
        .map(|&m| gradcheck_method(m, cfg, None))
        .collect()
}

/// `per_variant` random small configurations for each variant:
/// `d <= 16`, `r <= 3`, `N <= 3`, `R <= 3`.
pub fn gradcheck_random(per_variant: usize, seed: u64) -> Result<Vec<VariantReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for method in Method::ALL {
        for _ in 0..per_variant {
            let min_order = if method == Method::Tpx { 2 } else { 1 };
            let cfg = GradcheckConfig {
                d_in: rng.random_range(2..=16),
                d_out: rng.random_range(2..=16),
                r: rng.random_range(1..=3),
                order: rng.random_range(min_order..=3),
                rank: rng.random_range(1..=3),
                modules: rng.random_range(1..=3),
                tasks: rng.random_range(1..=3),
                layers: rng.random_range(1..=2),
                batch: rng.random_range(1..=4),
                seed: rng.random(),
                ..GradcheckConfig::default()
            };
            out.push(gradcheck_method(method, &cfg, None)?);
        }
    }
    Ok(out)
}
