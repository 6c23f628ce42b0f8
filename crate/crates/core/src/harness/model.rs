//! Stacked adapter layers with per-layer routing, batched loss and gradients.

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::adapters::{Adapter, AdapterLayer, LoraAdapter, TLoraFactors};
use crate::error::{Error, Result};
use crate::gradients::{backward_layer, forward_layer, GradBundle, LayerTape, Mixing};
use crate::method::{Method, Parameterized, RoutingVariant};
use crate::routing::{init_routing, uniform_mixing, PolyInventory, RoutingLogits, RoutingSample, TensorPolyInventory, TensorTrainInventory};
use crate::tensor::{TensorDims, TensorTrainCores};

/// How routing weights are produced for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingPolicy {
    /// Gumbel-sigmoid sample with fresh logistic noise.
    Train,
    /// Deterministic `sigmoid(z / temperature)`, optionally hard-thresholded.
    Eval { hard: bool },
    /// Routing discarded: uniform weights over experts.
    Uniform,
}

/// Base weights, one adapter per layer, and per-layer routing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub method: Method,
    pub dims: TensorDims,
    /// Poly module count `S`.
    pub modules: usize,
    pub layers: Vec<AdapterLayer>,
    /// `None` for unrouted methods or when routing has been discarded.
    pub routing: Vec<Option<RoutingLogits>>,
    pub temperature: f64,
}

/// Draws one adapter of the given method; `init_std` is the target standard
/// deviation of the materialized `A`/`B` entries (of `ΔW` for TensorPoly-X).
pub fn init_adapter<R: Rng + ?Sized>(method: Method, dims: TensorDims, modules: usize, scale: f64, init_std: f64, rng: &mut R) -> Result<Adapter> {
    let normal = |std: f64| -> Result<Normal<f64>> { Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string())) };
    let factor_std = (init_std / (dims.rank as f64).sqrt()).powf(1.0 / dims.order as f64);
    let fill4 = |shape: (usize, usize, usize, usize), dist: Normal<f64>, rng: &mut R| Array4::from_shape_simple_fn(shape, || dist.sample(rng));
    Ok(match method {
        Method::Lora => {
            let n = normal(init_std)?;
            let a = Array2::from_shape_simple_fn((dims.d_out, dims.r), || n.sample(rng));
            let b = Array2::from_shape_simple_fn((dims.d_in, dims.r), || n.sample(rng));
            Adapter::Lora(LoraAdapter::new(a, b, scale)?)
        }
        Method::Poly => {
            let n = normal(init_std)?;
            let a = Array3::from_shape_simple_fn((modules, dims.d_out, dims.r), || n.sample(rng));
            let b = Array3::from_shape_simple_fn((modules, dims.d_in, dims.r), || n.sample(rng));
            Adapter::Poly(PolyInventory::new(a, b, scale)?)
        }
        Method::Tlora | Method::Tp1 | Method::Tp2 => {
            let n = normal(factor_std)?;
            let a = fill4((dims.order, dims.r, dims.q_out, dims.rank), n, rng);
            let b = fill4((dims.order, dims.r, dims.q_in, dims.rank), n, rng);
            let f = TLoraFactors::new(a, b, dims, scale)?;
            match method {
                Method::Tlora => Adapter::Tlora(f),
                Method::Tp1 => Adapter::TensorPoly(TensorPolyInventory::new(f, RoutingVariant::Tp1)?),
                _ => Adapter::TensorPoly(TensorPolyInventory::new(f, RoutingVariant::Tp2)?),
            }
        }
        Method::Tpx => {
            if dims.order < 2 {
                return Err(Error::invalid("tpx needs N >= 2"));
            }
            let delta_std = init_std * init_std * (dims.r as f64).sqrt();
            let paths = (dims.rank as f64).powi(dims.order as i32 - 1);
            let n = normal((delta_std / paths.sqrt()).powf(1.0 / dims.order as f64))?;
            let cores = (0..dims.order)
                .map(|i| {
                    let left = if i == 0 { 1 } else { dims.rank };
                    let right = if i + 1 == dims.order { 1 } else { dims.rank };
                    fill4((left, dims.q_out, right, dims.q_in), n, rng)
                })
                .collect();
            Adapter::TensorTrain(TensorTrainInventory::new(TensorTrainCores::new(cores)?, dims.d_in, dims.d_out, scale)?)
        }
    })
}

/// Expert count along the routing row: `S` for Poly, `R` otherwise.
pub fn expert_count(method: Method, dims: &TensorDims, modules: usize) -> usize {
    if method == Method::Poly {
        modules
    } else {
        dims.rank
    }
}

impl Model {
    /// Fresh model: adapters on top of the given frozen bases, `tasks` routing rows per layer.
    pub fn init<R: Rng + ?Sized>(
        method: Method,
        dims: TensorDims,
        modules: usize,
        bases: &[Array2<f64>],
        tasks: usize,
        scale: f64,
        init_std: f64,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if bases.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(bases.len());
        for (l, w0) in bases.iter().enumerate() {
            let (d_out, d_in) = w0.dim();
            let layer_dims = TensorDims::new(d_in, d_out, dims.r, dims.order, dims.rank)?;
            let adapter = init_adapter(method, layer_dims, modules, scale, init_std, rng)?;
            layers.push(AdapterLayer::new(w0.clone(), adapter, l)?);
        }
        let mut model = Self {
            method,
            dims,
            modules,
            layers,
            routing: vec![None; bases.len()],
            temperature,
        };
        model.reset_routing(tasks, rng)?;
        Ok(model)
    }

    /// Replaces every layer's routing with `tasks` fresh near-uniform rows.
    pub fn reset_routing<R: Rng + ?Sized>(&mut self, tasks: usize, rng: &mut R) -> Result<()> {
        let experts = expert_count(self.method, &self.dims, self.modules);
        for slot in self.routing.iter_mut() {
            *slot = match self.method.routing() {
                Some(v) => Some(init_routing(v, tasks, self.dims.order, experts, rng)?),
                None => None,
            };
        }
        Ok(())
    }

    pub fn discard_routing(&mut self) {
        self.routing.iter_mut().for_each(|r| *r = None);
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    pub fn module_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.adapter.num_params()).sum()
    }

    /// Size of one routing row summed over layers.
    pub fn routing_row_count(&self) -> usize {
        self.routing
            .iter()
            .flatten()
            .map(|r| r.row_shape().iter().product::<usize>())
            .sum()
    }

    pub fn routing_param_count(&self) -> usize {
        self.routing.iter().flatten().map(|r| r.z.len()).sum()
    }

    /// SHA-256 over the little-endian bytes of every frozen base weight.
    pub fn base_checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.w0().iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn layer_mixing<R: Rng + ?Sized>(&self, layer: usize, task: usize, policy: RoutingPolicy, rng: &mut R) -> Result<Mixing> {
        let adapter = &self.layers[layer].adapter;
        let Some(shape) = adapter.mixing_shape() else {
            return Ok(Mixing::None);
        };
        if policy == RoutingPolicy::Uniform {
            let variant = self.method.routing().expect("routed method");
            let experts = *shape.last().expect("non-empty mixing shape");
            return Ok(Mixing::Fixed(uniform_mixing(variant, self.dims.order, experts)));
        }
        let logits = self.routing[layer]
            .as_ref()
            .ok_or_else(|| Error::invalid("routing was discarded; use the uniform policy"))?;
        let row = logits.row(task)?;
        let sample = match policy {
            RoutingPolicy::Train => RoutingSample::draw(row, self.temperature, rng)?,
            RoutingPolicy::Eval { hard } => RoutingSample::from_row(row, None, self.temperature, hard)?,
            RoutingPolicy::Uniform => unreachable!(),
        };
        Ok(Mixing::Sampled(sample))
    }

    /// Mixing weights for every layer, drawn in layer order.
    pub fn draw_mixing<R: Rng + ?Sized>(&self, task: usize, policy: RoutingPolicy, rng: &mut R) -> Result<Vec<Mixing>> {
        (0..self.layers.len()).map(|l| self.layer_mixing(l, task, policy, rng)).collect()
    }

    /// Train-mode mixing rebuilt from previously drawn noise, so the sample is a
    /// deterministic function of the current logits.
    pub fn mixing_from_noise(&self, task: usize, noise: &[Option<ArrayD<f64>>]) -> Result<Vec<Mixing>> {
        if noise.len() != self.layers.len() {
            return Err(Error::shape("noise per layer", &[self.layers.len()], &[noise.len()]));
        }
        (0..self.layers.len())
            .map(|l| match (&self.routing[l], &noise[l]) {
                (Some(r), Some(n)) => Ok(Mixing::Sampled(RoutingSample::from_row(r.row(task)?, Some(n.clone()), self.temperature, false)?)),
                (None, None) => Ok(Mixing::None),
                _ => Err(Error::invalid(format!("noise and routing disagree at layer {l}"))),
            })
            .collect()
    }

    /// Forward with explicit per-layer mixing; returns output and tapes.
    pub fn forward_with(&self, x: ArrayView2<'_, f64>, mixing: Vec<Mixing>) -> Result<(Array2<f64>, Vec<LayerTape>)> {
        let mut h = x.to_owned();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for (layer, mix) in self.layers.iter().zip(mixing) {
            let (out, tape) = forward_layer(layer, h.view(), mix)?;
            tapes.push(tape);
            h = out;
        }
        Ok((h, tapes))
    }

    pub fn predict<R: Rng + ?Sized>(&self, x: ArrayView2<'_, f64>, task: usize, policy: RoutingPolicy, rng: &mut R) -> Result<Array2<f64>> {
        let mixing = self.draw_mixing(task, policy, rng)?;
        Ok(self.forward_with(x, mixing)?.0)
    }

    /// Mean over samples of the squared error summed over outputs.
    pub fn loss_with(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, mixing: Vec<Mixing>) -> Result<f64> {
        let (pred, _) = self.forward_with(x, mixing)?;
        Ok(mse(pred.view(), y))
    }

    /// Loss and gradients for one task batch under fixed per-layer mixing.
    pub fn grads_with(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, task: usize, mixing: Vec<Mixing>) -> Result<GradBundle> {
        let (pred, tapes) = self.forward_with(x, mixing)?;
        if pred.dim() != y.dim() {
            return Err(Error::shape("targets", pred.shape(), y.shape()));
        }
        let n = x.nrows() as f64;
        let loss_value = mse(pred.view(), y);
        let mut upstream = (&pred - &y) * (2.0 / n);
        let mut adapter = vec![Vec::new(); self.layers.len()];
        let mut routing = vec![None; self.layers.len()];
        for (l, (layer, tape)) in self.layers.iter().zip(&tapes).enumerate().rev() {
            let g = backward_layer(layer, tape, upstream.view())?;
            adapter[l] = g.adapter;
            if let (Some(row_grad), Some(logits)) = (g.routing_row, &self.routing[l]) {
                let mut full = ArrayD::zeros(logits.z.raw_dim());
                full.index_axis_mut(Axis(0), task).assign(&row_grad);
                routing[l] = Some(full);
            }
            upstream = g.input;
        }
        let bundle = GradBundle {
            adapter,
            routing,
            loss_value,
        };
        bundle.ensure_finite()?;
        Ok(bundle)
    }

    /// Samples routing under `policy`, then returns loss and gradients.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
        task: usize,
        policy: RoutingPolicy,
        rng: &mut R,
    ) -> Result<GradBundle> {
        let mixing = self.draw_mixing(task, policy, rng)?;
        self.grads_with(x, y, task, mixing)
    }

    pub fn module_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        self.layers.iter_mut().flat_map(|l| l.adapter.param_views_mut()).collect()
    }

    pub fn routing_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        self.routing.iter_mut().flatten().map(|r| r.z.view_mut()).collect()
    }

    pub fn module_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(|l| l.adapter.param_shapes()).collect()
    }

    pub fn routing_shapes(&self) -> Vec<Vec<usize>> {
        self.routing.iter().flatten().map(|r| r.z.shape().to_vec()).collect()
    }
}

/// Adapter arrays first (layer order), then routing logits (layer order).
impl Parameterized for Model {
    fn param_views(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut v: Vec<_> = self.layers.iter().flat_map(|l| l.adapter.param_views()).collect();
        v.extend(self.routing.iter().flatten().map(|r| r.z.view()));
        v
    }

    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut v: Vec<_> = self.layers.iter_mut().flat_map(|l| l.adapter.param_views_mut()).collect();
        v.extend(self.routing.iter_mut().flatten().map(|r| r.z.view_mut()));
        v
    }
}

pub fn mse(pred: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
    let n = pred.nrows().max(1) as f64;
    pred.iter().zip(y.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::finite_diff_params;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bases(rng: &mut ChaCha8Rng, dims: &[usize]) -> Vec<Array2<f64>> {
        dims.windows(2)
            .map(|w| Array::from_shape_simple_fn((w[1], w[0]), || rng.random_range(-0.5..0.5)))
            .collect()
    }

    /// Two stacked layers, every method: analytic vs central differences on the
    /// whole parameter vector, noise frozen.
    #[test]
    fn stacked_model_gradients_match_finite_differences() {
        for method in Method::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let dims = TensorDims::new(6, 5, 2, 2, 2).unwrap();
            let b = bases(&mut rng, &[6, 5, 5]);
            let mut model = Model::init(method, dims, 3, &b, 2, 1.0, 0.5, 0.8, &mut rng).unwrap();
            for z in model.routing_views_mut() {
                let mut z = z;
                z.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            }
            let x = Array::from_shape_simple_fn((4, 6), || rng.random_range(-1.0..1.0));
            let y = Array::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0));
            let mixing = model.draw_mixing(1, RoutingPolicy::Train, &mut rng).unwrap();
            let noise: Vec<Option<ArrayD<f64>>> = mixing
                .iter()
                .map(|m| match m {
                    Mixing::Sampled(s) => s.noise.clone(),
                    _ => None,
                })
                .collect();
            let remix = |m: &Model| -> Vec<Mixing> {
                (0..m.layers.len())
                    .map(|l| match (&m.routing[l], &noise[l]) {
                        (Some(r), Some(n)) => Mixing::Sampled(RoutingSample::from_row(r.row(1).unwrap(), Some(n.clone()), m.temperature, false).unwrap()),
                        _ => Mixing::None,
                    })
                    .collect()
            };
            let bundle = model.grads_with(x.view(), y.view(), 1, remix(&model)).unwrap();
            let mut analytic: Vec<ArrayD<f64>> = bundle.adapter.into_iter().flatten().collect();
            analytic.extend(bundle.routing.into_iter().flatten());
            let numeric = finite_diff_params(&model, |m| m.loss_with(x.view(), y.view(), remix(m)).unwrap(), 1e-5);
            assert_eq!(analytic.len(), numeric.len(), "{method}");
            for (a, n) in analytic.iter().zip(&numeric) {
                for (av, nv) in a.iter().zip(n.iter()) {
                    let err = (av - nv).abs() / av.abs().max(nv.abs()).max(1e-3);
                    assert!(err < 1e-5, "{method}: analytic {av} numeric {nv}");
                }
            }
        }
    }

    #[test]
    fn uniform_policy_and_discarded_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = TensorDims::square(4, 1, 2, 3).unwrap();
        let b = bases(&mut rng, &[4, 4]);
        let mut model = Model::init(Method::Tp2, dims, 3, &b, 1, 1.0, 0.1, 1.0, &mut rng).unwrap();
        assert_eq!(model.routing_row_count(), 6);
        model.discard_routing();
        let x = Array2::ones((2, 4));
        assert!(model.predict(x.view(), 0, RoutingPolicy::Eval { hard: false }, &mut rng).is_err());
        let mix = model.draw_mixing(0, RoutingPolicy::Uniform, &mut rng).unwrap();
        match &mix[0] {
            Mixing::Fixed(a) => assert!(a.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checksum_tracks_base_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = TensorDims::square(4, 1, 2, 2).unwrap();
        let b = bases(&mut rng, &[4, 4]);
        let mut model = Model::init(Method::Lora, dims, 1, &b, 1, 1.0, 0.1, 1.0, &mut rng).unwrap();
        let before = model.base_checksum();
        for mut v in model.module_views_mut() {
            v.mapv_inplace(|x| x + 1.0);
        }
        assert_eq!(before, model.base_checksum());
        assert_eq!(before.len(), 64);
    }
}
