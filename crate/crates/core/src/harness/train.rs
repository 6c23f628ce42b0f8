//! Multi-task pretraining, few-shot adaptation and evaluation.

use std::time::Instant;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::accounting::layer_budget;
use crate::error::{Error, Result};
use crate::gradients::{Adam, AdamConfig, GradBundle};
use crate::harness::config::{AdaptMode, ExperimentConfig};
use crate::harness::data::{MultiTaskData, Samples, TaskSpec};
use crate::harness::metrics::{MetricsRecord, Phase};
use crate::harness::model::{Model, RoutingPolicy};
use crate::tensor::TensorDims;

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e12;

const PRETRAIN_STREAM: u64 = 1;
const ADAPT_STREAM: u64 = 2;

/// Trainable parameter groups for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainMask {
    pub modules: bool,
    pub routing: bool,
}

impl TrainMask {
    pub fn trainable_count(&self, model: &Model) -> usize {
        let m = if self.modules { model.module_param_count() } else { 0 };
        let r = if self.routing { model.routing_param_count() } else { 0 };
        m + r
    }
}

/// Closed-form trainable count for `layers` stacked layers and `tasks`
/// routing rows (0 when routing is not trained).
pub fn expected_trainable(cfg: &ExperimentConfig, mask: TrainMask, tasks: usize) -> Result<usize> {
    let mut total = 0u64;
    for l in 0..cfg.layers {
        let d_in = if l == 0 { cfg.d_in } else { cfg.d_out };
        let dims = TensorDims::new(d_in, cfg.d_out, cfg.r, cfg.order, cfg.rank)?;
        let b = layer_budget(cfg.method, &dims, cfg.num_modules())?;
        if mask.modules {
            total += b.modules;
        }
        if mask.routing {
            total += b.routing_row * tasks as u64;
        }
    }
    Ok(total as usize)
}

fn assert_budget(model: &Model, cfg: &ExperimentConfig, mask: TrainMask, tasks: usize) -> Result<usize> {
    let actual = mask.trainable_count(model);
    let expected = expected_trainable(cfg, mask, tasks)?;
    if actual != expected {
        return Err(Error::ContractViolation(format!(
            "{} {:?}: {actual} trainable parameters, closed form gives {expected}",
            cfg.method, mask
        )));
    }
    Ok(actual)
}

/// Separate Adam states for modules and routing logits.
struct Optimizers {
    mask: TrainMask,
    modules: Option<Adam>,
    routing: Option<Adam>,
}

impl Optimizers {
    fn new(model: &Model, cfg: &ExperimentConfig, mask: TrainMask) -> Result<Self> {
        let routed = model.routing.iter().any(Option::is_some);
        Ok(Self {
            mask,
            modules: if mask.modules { Some(Adam::new(AdamConfig::with_lr(cfg.lr_modules), &model.module_shapes())?) } else { None },
            routing: if mask.routing && routed {
                Some(Adam::new(AdamConfig::with_lr(cfg.lr_routing), &model.routing_shapes())?)
            } else {
                None
            },
        })
    }

    fn step(&mut self, model: &mut Model, grads: GradBundle) -> Result<()> {
        if let Some(adam) = &mut self.modules {
            let g: Vec<ArrayD<f64>> = grads.adapter.into_iter().flatten().collect();
            adam.step(model.module_views_mut(), &g)?;
        }
        if let Some(adam) = &mut self.routing {
            let g: Vec<ArrayD<f64>> = grads.routing.into_iter().flatten().collect();
            adam.step(model.routing_views_mut(), &g)?;
        }
        debug_assert!(self.mask.modules || self.modules.is_none());
        Ok(())
    }
}

fn check_loss(loss: f64, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{what} loss")));
    }
    if loss > DIVERGENCE_LOSS {
        return Err(Error::Divergence(format!("{what} loss {loss:e}")));
    }
    Ok(())
}

fn elapsed(cfg: &ExperimentConfig, start: Instant) -> Option<u64> {
    cfg.timing.then(|| start.elapsed().as_millis() as u64)
}

pub struct TrainOutcome {
    pub model: Model,
    pub trainable: usize,
    pub records: Vec<MetricsRecord>,
}

fn init_with_stream(cfg: &ExperimentConfig, data: &MultiTaskData) -> Result<(Model, ChaCha8Rng)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PRETRAIN_STREAM);
    let model = Model::init(
        cfg.method,
        cfg.dims()?,
        cfg.num_modules(),
        &data.bases,
        data.train.len(),
        cfg.scale,
        cfg.init_std,
        cfg.temperature,
        &mut rng,
    )?;
    Ok((model, rng))
}

/// The model pretraining starts from.
pub fn initial_model(cfg: &ExperimentConfig, data: &MultiTaskData) -> Result<Model> {
    Ok(init_with_stream(cfg, data)?.0)
}

/// Jointly trains the module inventory and one routing row per training task.
/// Each epoch takes one full-batch step per task, tasks in index order.
pub fn pretrain(cfg: &ExperimentConfig, data: &MultiTaskData) -> Result<TrainOutcome> {
    let (mut model, mut rng) = init_with_stream(cfg, data)?;
    let tasks = data.train.len();
    let checksum = model.base_checksum();
    let mask = TrainMask { modules: true, routing: true };
    let trainable = assert_budget(&model, cfg, mask, tasks)?;
    let mut opt = Optimizers::new(&model, cfg, mask)?;
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.pretrain_epochs * tasks);
    for epoch in 0..cfg.pretrain_epochs {
        for task in &data.train {
            let s = &task.support;
            let grads = model.loss_and_grads(s.x.view(), s.y.view(), task.task_id, RoutingPolicy::Train, &mut rng)?;
            check_loss(grads.loss_value, "pretrain")?;
            records.push(MetricsRecord {
                phase: Phase::Pretrain,
                method: cfg.method,
                mode: None,
                seed: cfg.seed,
                task_id: task.task_id,
                step: epoch,
                loss: grads.loss_value,
                wall_clock_ms: elapsed(cfg, start),
            });
            opt.step(&mut model, grads)?;
        }
    }
    if model.base_checksum() != checksum {
        return Err(Error::ContractViolation("base weights changed during pretraining".into()));
    }
    Ok(TrainOutcome { model, trainable, records })
}

/// Evaluation policy: deterministic routing, or uniform once routing is discarded.
pub fn eval_policy(model: &Model, hard: bool) -> RoutingPolicy {
    if model.method.routing().is_some() && model.routing.iter().all(Option::is_none) {
        RoutingPolicy::Uniform
    } else {
        RoutingPolicy::Eval { hard }
    }
}

/// Mean squared error on `samples` under evaluation routing of row `task`.
pub fn evaluate(model: &Model, task: usize, samples: &Samples, hard: bool) -> Result<f64> {
    // evaluation policies never draw noise; the generator is a placeholder
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pred = model.predict(samples.x.view(), task, eval_policy(model, hard), &mut rng)?;
    Ok(crate::harness::model::mse(pred.view(), samples.y.view()))
}

pub struct AdaptOutcome {
    pub model: Model,
    pub trainable: usize,
    pub test_loss: f64,
    pub records: Vec<MetricsRecord>,
}

/// Few-shot adaptation of a pretrained model to one unseen task.
///
/// `Full` and `ZOnly` start from a fresh near-uniform routing row; `MuOnly`
/// discards routing and mixes experts uniformly.
pub fn adapt(pretrained: &Model, cfg: &ExperimentConfig, task: &TaskSpec) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let mode = cfg.adapt_mode;
    if !mode.supported_by(pretrained.method) {
        return Err(Error::invalid(format!("{mode} adaptation is undefined for {}", pretrained.method)));
    }
    if pretrained.method != cfg.method {
        return Err(Error::invalid(format!("checkpoint holds {}, config asks for {}", pretrained.method, cfg.method)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(ADAPT_STREAM + task.task_id as u64);
    let mut model = pretrained.clone();
    match mode {
        AdaptMode::MuOnly => model.discard_routing(),
        _ => model.reset_routing(1, &mut rng)?,
    }
    let mask = TrainMask {
        modules: mode.trains_modules(),
        routing: mode.trains_routing() && model.method.routing().is_some(),
    };
    let trainable = assert_budget(&model, cfg, mask, 1)?;
    let shots = task.support.head(cfg.shots)?;
    let policy = if mode == AdaptMode::MuOnly { RoutingPolicy::Uniform } else { RoutingPolicy::Train };
    let mut opt = Optimizers::new(&model, cfg, mask)?;
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.adapt_epochs + 1);
    for epoch in 0..cfg.adapt_epochs {
        let grads = model.loss_and_grads(shots.x.view(), shots.y.view(), 0, policy, &mut rng)?;
        check_loss(grads.loss_value, "adapt")?;
        records.push(MetricsRecord {
            phase: Phase::Adapt,
            method: cfg.method,
            mode: Some(mode),
            seed: cfg.seed,
            task_id: task.task_id,
            step: epoch,
            loss: grads.loss_value,
            wall_clock_ms: elapsed(cfg, start),
        });
        opt.step(&mut model, grads)?;
    }
    let test_loss = evaluate(&model, 0, &task.query, cfg.hard_eval)?;
    check_loss(test_loss, "evaluation")?;
    records.push(MetricsRecord {
        phase: Phase::Eval,
        method: cfg.method,
        mode: Some(mode),
        seed: cfg.seed,
        task_id: task.task_id,
        step: cfg.adapt_epochs,
        loss: test_loss,
        wall_clock_ms: elapsed(cfg, start),
    });
    Ok(AdaptOutcome {
        model,
        trainable,
        test_loss,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{gen_multitask, GenConfig};
    use crate::method::{Method, Parameterized};

    fn tiny(method: Method, mode: AdaptMode) -> ExperimentConfig {
        ExperimentConfig {
            method,
            adapt_mode: mode,
            d_in: 8,
            d_out: 8,
            r: 2,
            rank: 2,
            layers: 2,
            train_tasks: 3,
            test_tasks: 1,
            samples_per_task: 20,
            eval_samples: 20,
            shots: 10,
            pretrain_epochs: 5,
            adapt_epochs: 5,
            ..ExperimentConfig::default()
        }
    }

    fn flat(model: &Model, routing: bool) -> Vec<f64> {
        if routing {
            model.routing.iter().flatten().flat_map(|r| r.z.iter().copied()).collect()
        } else {
            model.layers.iter().flat_map(|l| l.adapter.param_views()).flat_map(|v| v.iter().copied().collect::<Vec<_>>()).collect()
        }
    }

    #[test]
    fn budgets_hold_for_every_method_and_mode() {
        for method in Method::ALL {
            for mode in AdaptMode::ALL {
                if !mode.supported_by(method) {
                    continue;
                }
                let cfg = tiny(method, mode);
                let data = gen_multitask(&GenConfig::from(&cfg)).unwrap();
                let pre = pretrain(&cfg, &data).unwrap();
                let out = adapt(&pre.model, &cfg, &data.test[0]).unwrap();
                assert!(out.test_loss.is_finite());
                assert_eq!(out.trainable, expected_trainable(&cfg, TrainMask { modules: mode.trains_modules(), routing: mode.trains_routing() && method.routing().is_some() }, 1).unwrap());
            }
        }
    }

    #[test]
    fn z_only_leaves_modules_bit_identical() {
        let cfg = tiny(Method::Tp1, AdaptMode::ZOnly);
        let data = gen_multitask(&GenConfig::from(&cfg)).unwrap();
        let pre = pretrain(&cfg, &data).unwrap();
        let out = adapt(&pre.model, &cfg, &data.test[0]).unwrap();
        let (a, b) = (flat(&pre.model, false), flat(&out.model, false));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(out.trainable, 2 * 2);
    }

    #[test]
    fn mu_only_trains_modules_without_routing() {
        let cfg = tiny(Method::Tp2, AdaptMode::MuOnly);
        let data = gen_multitask(&GenConfig::from(&cfg)).unwrap();
        let pre = pretrain(&cfg, &data).unwrap();
        let out = adapt(&pre.model, &cfg, &data.test[0]).unwrap();
        assert!(out.model.routing.iter().all(Option::is_none));
        assert_eq!(out.trainable, out.model.module_param_count());
        assert_ne!(flat(&pre.model, false), flat(&out.model, false));
    }

    #[test]
    fn unrouted_methods_reject_partial_modes() {
        let cfg = tiny(Method::Lora, AdaptMode::Full);
        let data = gen_multitask(&GenConfig::from(&cfg)).unwrap();
        let pre = pretrain(&cfg, &data).unwrap();
        let bad = ExperimentConfig { adapt_mode: AdaptMode::ZOnly, ..cfg };
        assert!(adapt(&pre.model, &bad, &data.test[0]).is_err());
    }

    #[test]
    fn pretraining_is_deterministic_and_reduces_loss() {
        let cfg = ExperimentConfig { pretrain_epochs: 40, ..tiny(Method::Tp1, AdaptMode::Full) };
        let data = gen_multitask(&GenConfig::from(&cfg)).unwrap();
        let a = pretrain(&cfg, &data).unwrap();
        let b = pretrain(&cfg, &data).unwrap();
        assert_eq!(a.records, b.records);
        let first: f64 = a.records[..3].iter().map(|r| r.loss).sum();
        let last: f64 = a.records[a.records.len() - 3..].iter().map(|r| r.loss).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn zero_adapter_loss_matches_generator() {
        let cfg = ExperimentConfig { layers: 1, noise_std: 0.0, ..tiny(Method::Lora, AdaptMode::Full) };
        let data = gen_multitask(&GenConfig::from(&cfg)).unwrap();
        let mut model = pretrain(&ExperimentConfig { pretrain_epochs: 0, ..cfg.clone() }, &data).unwrap().model;
        for mut v in model.module_views_mut() {
            v.fill(0.0);
        }
        let task = &data.train[0];
        let got = evaluate(&model, 0, &task.query, false).unwrap();
        // residual is the planted increment alone
        let mut dw = ndarray::Array2::<f64>::zeros((8, 8));
        for (g, e) in data.experts[0].iter().enumerate() {
            dw.scaled_add(task.mixing[g], e);
        }
        let resid = task.query.x.dot(&dw.t());
        let expect = resid.iter().map(|v| v * v).sum::<f64>() / task.query.len() as f64;
        assert!((got - expect).abs() <= 1e-12 * expect.max(1.0));
    }
}
