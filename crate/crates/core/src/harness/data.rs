//! Planted-structure multi-task regression data.
//!
//! Each layer has a frozen base `W0` and `G` low-rank expert increments. A task
//! draws a sparse non-negative mixing vector `m` (summing to one) and its
//! targets are `y = prod_l (W0_l + sum_g m_g dW_{l,g}) x + noise`, applied
//! first layer first. Test tasks draw fresh mixing vectors.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Inputs and targets, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Result<Samples> {
        if n > self.len() {
            return Err(Error::invalid(format!("requested {n} samples, {} available", self.len())));
        }
        Ok(Samples {
            x: self.x.slice(ndarray::s![..n, ..]).to_owned(),
            y: self.y.slice(ndarray::s![..n, ..]).to_owned(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub split: Split,
    pub mixing: Array1<f64>,
    /// Samples used for pretraining or few-shot adaptation.
    pub support: Samples,
    /// Held-out samples for evaluation.
    pub query: Samples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub layers: usize,
    pub experts: usize,
    pub active_experts: usize,
    pub planted_rank: usize,
    pub expert_scale: f64,
    pub noise_std: f64,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub samples_per_task: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl From<&ExperimentConfig> for GenConfig {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            d_in: c.d_in,
            d_out: c.d_out,
            layers: c.layers,
            experts: c.experts,
            active_experts: c.active_experts,
            planted_rank: c.planted_rank,
            expert_scale: c.expert_scale,
            noise_std: c.noise_std,
            train_tasks: c.train_tasks,
            test_tasks: c.test_tasks,
            samples_per_task: c.samples_per_task,
            eval_samples: c.eval_samples,
            seed: c.seed,
        }
    }
}

/// Generated bases, planted experts and task splits.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskData {
    /// `W0` per layer (`d_out x d_in` for layer 0, `d_out x d_out` after).
    pub bases: Vec<Array2<f64>>,
    /// `experts[l][g]` is the increment of expert `g` at layer `l`.
    pub experts: Vec<Vec<Array2<f64>>>,
    pub train: Vec<TaskSpec>,
    pub test: Vec<TaskSpec>,
    pub noise_std: f64,
}

impl MultiTaskData {
    /// `W0_l + sum_g m_g dW_{l,g}` for every layer.
    pub fn task_weights(&self, mixing: &Array1<f64>) -> Vec<Array2<f64>> {
        self.bases
            .iter()
            .zip(&self.experts)
            .map(|(w0, ex)| {
                let mut w = w0.clone();
                for (g, dw) in ex.iter().enumerate() {
                    if mixing[g] != 0.0 {
                        w.scaled_add(mixing[g], dw);
                    }
                }
                w
            })
            .collect()
    }

    /// Noise-free targets for rows of `x`.
    pub fn clean_targets(&self, mixing: &Array1<f64>, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for w in self.task_weights(mixing) {
            h = h.dot(&w.t());
        }
        h
    }

    /// Samples for an arbitrary mixing vector (fresh inputs and noise).
    pub fn sample_task<R: Rng + ?Sized>(&self, mixing: &Array1<f64>, n: usize, rng: &mut R) -> Result<Samples> {
        let d_in = self.bases[0].ncols();
        let x = Array2::from_shape_simple_fn((n, d_in), || StandardNormal.sample(rng));
        let mut y = self.clean_targets(mixing, &x);
        if self.noise_std > 0.0 {
            let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
            y.mapv_inplace(|v| v + noise.sample(rng));
        }
        Ok(Samples { x, y })
    }
}

fn draw_mixing<R: Rng + ?Sized>(experts: usize, active: usize, rng: &mut R) -> Array1<f64> {
    let mut m = Array1::zeros(experts);
    let picks = sample(rng, experts, active);
    let weights: Vec<f64> = (0..active).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for (g, w) in picks.iter().zip(weights) {
        m[g] = w / total;
    }
    m
}

/// Deterministic generator for a seed.
pub fn gen_multitask(cfg: &GenConfig) -> Result<MultiTaskData> {
    if cfg.experts == 0 || cfg.active_experts == 0 || cfg.active_experts > cfg.experts {
        return Err(Error::invalid("need 1 <= active_experts <= experts"));
    }
    if cfg.layers == 0 || cfg.d_in == 0 || cfg.d_out == 0 || cfg.planted_rank == 0 {
        return Err(Error::invalid("layers, dimensions and planted rank must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bases = Vec::with_capacity(cfg.layers);
    let mut experts = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let d_in = if l == 0 { cfg.d_in } else { cfg.d_out };
        let w0_std = 1.0 / (d_in as f64).sqrt();
        bases.push(Array2::from_shape_simple_fn((cfg.d_out, d_in), || w0_std * rng.sample::<f64, _>(StandardNormal)));
        // dW x has per-coordinate standard deviation expert_scale for x ~ N(0, I)
        let norm = cfg.expert_scale / ((d_in * cfg.planted_rank) as f64).sqrt();
        let layer_experts = (0..cfg.experts)
            .map(|_| {
                let u = Array2::from_shape_simple_fn((cfg.d_out, cfg.planted_rank), || rng.sample::<f64, _>(StandardNormal));
                let v = Array2::from_shape_simple_fn((d_in, cfg.planted_rank), || rng.sample::<f64, _>(StandardNormal));
                u.dot(&v.t()) * norm
            })
            .collect();
        experts.push(layer_experts);
    }
    let mut data = MultiTaskData {
        bases,
        experts,
        train: Vec::new(),
        test: Vec::new(),
        noise_std: cfg.noise_std,
    };
    for (split, count) in [(Split::Train, cfg.train_tasks), (Split::Test, cfg.test_tasks)] {
        for task_id in 0..count {
            let mixing = draw_mixing(cfg.experts, cfg.active_experts, &mut rng);
            let support = data.sample_task(&mixing, cfg.samples_per_task, &mut rng)?;
            let query = data.sample_task(&mixing, cfg.eval_samples, &mut rng)?;
            let spec = TaskSpec {
                task_id,
                split,
                mixing,
                support,
                query,
            };
            match split {
                Split::Train => data.train.push(spec),
                Split::Test => data.test.push(spec),
            }
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GenConfig {
        GenConfig {
            d_in: 6,
            d_out: 5,
            layers: 2,
            experts: 4,
            active_experts: 2,
            planted_rank: 1,
            expert_scale: 1.0,
            noise_std: 0.1,
            train_tasks: 3,
            test_tasks: 2,
            samples_per_task: 10,
            eval_samples: 7,
            seed,
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(gen_multitask(&small(3)).unwrap(), gen_multitask(&small(3)).unwrap());
        assert_ne!(gen_multitask(&small(3)).unwrap(), gen_multitask(&small(4)).unwrap());
    }

    #[test]
    fn shapes_and_mixing_support() {
        let d = gen_multitask(&small(0)).unwrap();
        assert_eq!(d.bases[0].dim(), (5, 6));
        assert_eq!(d.bases[1].dim(), (5, 5));
        assert_eq!(d.experts[1][3].dim(), (5, 5));
        for t in d.train.iter().chain(&d.test) {
            assert_eq!(t.mixing.iter().filter(|&&v| v > 0.0).count(), 2);
            assert!((t.mixing.sum() - 1.0).abs() < 1e-12);
            assert!(t.mixing.iter().all(|&v| v >= 0.0));
            assert_eq!(t.support.x.dim(), (10, 6));
            assert_eq!(t.query.y.dim(), (7, 5));
        }
        assert!(d.test.iter().all(|t| d.train.iter().all(|s| s.mixing != t.mixing)));
    }

    #[test]
    fn planted_experts_have_requested_rank() {
        let mut cfg = small(1);
        cfg.planted_rank = 2;
        cfg.d_in = 8;
        cfg.d_out = 8;
        let d = gen_multitask(&cfg).unwrap();
        // rank <= 2: every 3x3 minor vanishes
        let m = &d.experts[0][0];
        let minor = |r: [usize; 3], c: [usize; 3]| {
            let e = |i: usize, j: usize| m[[r[i], c[j]]];
            e(0, 0) * (e(1, 1) * e(2, 2) - e(1, 2) * e(2, 1)) - e(0, 1) * (e(1, 0) * e(2, 2) - e(1, 2) * e(2, 0))
                + e(0, 2) * (e(1, 0) * e(2, 1) - e(1, 1) * e(2, 0))
        };
        assert!(minor([0, 1, 2], [0, 1, 2]).abs() < 1e-10);
        assert!(minor([3, 5, 7], [1, 4, 6]).abs() < 1e-10);
    }

    #[test]
    fn noiseless_targets_match_weights() {
        let mut cfg = small(2);
        cfg.noise_std = 0.0;
        cfg.layers = 1;
        let d = gen_multitask(&cfg).unwrap();
        let t = &d.train[0];
        let w = &d.task_weights(&t.mixing)[0];
        let expect = t.support.x.dot(&w.t());
        assert!((&expect - &t.support.y).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn head_respects_bounds() {
        let d = gen_multitask(&small(0)).unwrap();
        assert_eq!(d.train[0].support.head(4).unwrap().len(), 4);
        assert!(d.train[0].support.head(11).is_err());
    }
}
