//! Hand-derived reverse-mode gradients for every adapter parameterization and
//! for the routing logits, plus the finite-difference oracle and optimizers.
//!
//! A forward pass through [`forward_layer`] returns a [`LayerTape`] holding the
//! merged increment and the routing sample; [`backward_layer`] consumes it.

mod finite_diff;
mod optim;

pub use finite_diff::{finite_diff, finite_diff_params};
pub use optim::{sgd_step, Adam, AdamConfig};

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView4, ArrayViewD, Axis};

use crate::adapters::{to_1d, to_2d, Adapter, AdapterLayer, MergedDelta};
use crate::error::{Error, Result};
use crate::method::{Method, RoutingVariant};
use crate::routing::{merge_orders, RoutingSample};
use crate::tensor::weighted_cores;

/// Where a layer's mixing weights come from for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Mixing {
    /// Unrouted adapter.
    None,
    /// Constant weights, e.g. uniform when routing is discarded; no logit gradient.
    Fixed(ArrayD<f64>),
    /// Weights sampled from the task's routing row.
    Sampled(RoutingSample),
}

impl Mixing {
    pub fn alpha(&self) -> Option<ArrayViewD<'_, f64>> {
        match self {
            Mixing::None => None,
            Mixing::Fixed(a) => Some(a.view()),
            Mixing::Sampled(s) => Some(s.alpha.view()),
        }
    }
}

/// Intermediates cached by one batched forward pass.
#[derive(Debug, Clone)]
pub struct LayerTape {
    layer_id: usize,
    method: Option<Method>,
    x: Array2<f64>,
    merged: MergedDelta,
    mixing: Mixing,
}

impl LayerTape {
    pub fn merged(&self) -> &MergedDelta {
        &self.merged
    }

    pub fn mixing(&self) -> &Mixing {
        &self.mixing
    }
}

/// Gradients of one layer for one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    /// Mirrors `Parameterized::param_views` of the adapter.
    pub adapter: Vec<ArrayD<f64>>,
    /// Gradient w.r.t. the mixing weights `alpha` (routed adapters only).
    pub mixing: Option<ArrayD<f64>>,
    /// Gradient w.r.t. the task's routing-logit row (sampled mixing only).
    pub routing_row: Option<ArrayD<f64>>,
    /// Gradient w.r.t. the layer input, for chaining.
    pub input: Array2<f64>,
}

/// Per-layer parameter gradients of a whole model plus the loss they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub adapter: Vec<Vec<ArrayD<f64>>>,
    /// Full routing-logit shaped gradient per layer (`None` when unrouted).
    pub routing: Vec<Option<ArrayD<f64>>>,
    pub loss_value: f64,
}

impl GradBundle {
    /// Hard error on any NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        for (l, grads) in self.adapter.iter().enumerate() {
            for (p, g) in grads.iter().enumerate() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of layer {l} parameter {p}")));
                }
            }
        }
        for (l, g) in self.routing.iter().enumerate() {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("routing gradient of layer {l}")));
            }
        }
        if !self.loss_value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(())
    }
}

/// Batched forward that records what [`backward_layer`] needs.
pub fn forward_layer(layer: &AdapterLayer, x: ArrayView2<'_, f64>, mixing: Mixing) -> Result<(Array2<f64>, LayerTape)> {
    let merged = layer.adapter.merge(mixing.alpha())?;
    let h = layer.forward_batch(&merged, x)?;
    Ok((
        h,
        LayerTape {
            layer_id: layer.layer_id,
            method: layer.adapter.method(),
            x: x.to_owned(),
            merged,
            mixing,
        },
    ))
}

/// Reverse pass of one layer given `upstream = dL/dh` (rows are samples).
pub fn backward_layer(layer: &AdapterLayer, tape: &LayerTape, upstream: ArrayView2<'_, f64>) -> Result<LayerGrads> {
    if tape.layer_id != layer.layer_id || tape.method != layer.adapter.method() {
        return Err(Error::ContractViolation(format!(
            "tape recorded for layer {} ({:?}) used on layer {} ({:?})",
            tape.layer_id,
            tape.method,
            layer.layer_id,
            layer.adapter.method()
        )));
    }
    let n = tape.x.nrows();
    if upstream.dim() != (n, layer.d_out()) {
        return Err(Error::shape("upstream gradient", &[n, layer.d_out()], upstream.shape()));
    }
    if tape.x.ncols() != layer.d_in() {
        return Err(Error::ContractViolation("tape input width differs from layer".into()));
    }

    let mut input = upstream.dot(layer.w0());
    let mut grads_alpha = None;
    let adapter = match &tape.merged {
        MergedDelta::Zero => vec![],
        MergedDelta::LowRank { a, b, scale } => {
            let u = tape.x.dot(b);
            let ga = upstream.t().dot(&u) * *scale;
            let gu = upstream.dot(a) * *scale;
            let gb = tape.x.t().dot(&gu);
            input += &gu.dot(&b.t());
            let (params, g_alpha) = low_rank_param_grads(&layer.adapter, tape.mixing.alpha(), ga, gb)?;
            grads_alpha = g_alpha;
            params
        }
        MergedDelta::Dense { delta, scale } => {
            let gd = upstream.t().dot(&tape.x) * *scale;
            input.scaled_add(*scale, &upstream.dot(delta));
            let Adapter::TensorTrain(inv) = &layer.adapter else {
                return Err(Error::ContractViolation("dense increment without a tensor-train adapter".into()));
            };
            let alpha = to_2d(tape.mixing.alpha().ok_or_else(|| Error::ContractViolation("missing mixing".into()))?)?;
            let (g_cores, g_alpha) = tt_param_grads(inv.cores.cores(), &inv.cores, alpha, gd.view())?;
            grads_alpha = Some(g_alpha.into_dyn());
            g_cores.into_iter().map(|c| c.into_dyn()).collect()
        }
    };

    let routing_row = match (&tape.mixing, &grads_alpha) {
        (Mixing::Sampled(sample), Some(g)) => Some(sample.backward(g.view())?),
        _ => None,
    };
    Ok(LayerGrads {
        adapter,
        mixing: grads_alpha,
        routing_row,
        input,
    })
}

type ParamGrads = (Vec<ArrayD<f64>>, Option<ArrayD<f64>>);

fn low_rank_param_grads(adapter: &Adapter, alpha: Option<ArrayViewD<'_, f64>>, ga: Array2<f64>, gb: Array2<f64>) -> Result<ParamGrads> {
    let missing = || Error::ContractViolation("routed adapter without mixing weights on tape".into());
    Ok(match adapter {
        Adapter::None | Adapter::TensorTrain(_) => {
            return Err(Error::ContractViolation("low-rank increment from a non-low-rank adapter".into()))
        }
        Adapter::Lora(_) => (vec![ga.into_dyn(), gb.into_dyn()], None),
        Adapter::Tlora(f) => {
            let (gfa, _) = entangled_vjp(f.a_factors.view(), ga.view(), None);
            let (gfb, _) = entangled_vjp(f.b_factors.view(), gb.view(), None);
            (vec![gfa.into_dyn(), gfb.into_dyn()], None)
        }
        Adapter::Poly(p) => {
            let alpha = to_1d(alpha.ok_or_else(missing)?)?;
            let s_count = p.num_modules();
            let mut g_a = Array3::zeros(p.a.raw_dim());
            let mut g_b = Array3::zeros(p.b.raw_dim());
            let mut g_alpha = Array1::zeros(s_count);
            for i in 0..s_count {
                g_a.index_axis_mut(Axis(0), i).assign(&(&ga * alpha[i]));
                g_b.index_axis_mut(Axis(0), i).assign(&(&gb * alpha[i]));
                g_alpha[i] = (&ga * &p.a.index_axis(Axis(0), i)).sum() + (&gb * &p.b.index_axis(Axis(0), i)).sum();
            }
            (vec![g_a.into_dyn(), g_b.into_dyn()], Some(g_alpha.into_dyn()))
        }
        Adapter::TensorPoly(t) => match t.variant() {
            RoutingVariant::Tp1 => {
                let alpha = to_1d(alpha.ok_or_else(missing)?)?;
                let (gfa, inner_a) = entangled_vjp(t.factors.a_factors.view(), ga.view(), Some(alpha));
                let (gfb, inner_b) = entangled_vjp(t.factors.b_factors.view(), gb.view(), Some(alpha));
                (vec![gfa.into_dyn(), gfb.into_dyn()], Some((inner_a + inner_b).into_dyn()))
            }
            _ => {
                let alpha = to_2d(alpha.ok_or_else(missing)?)?;
                let (gfa, ga_alpha) = order_merged_vjp(t.factors.a_factors.view(), alpha, ga.view());
                let (gfb, gb_alpha) = order_merged_vjp(t.factors.b_factors.view(), alpha, gb.view());
                (vec![gfa.into_dyn(), gfb.into_dyn()], Some((ga_alpha + gb_alpha).into_dyn()))
            }
        },
    })
}

/// Vector-Jacobian product of the per-column entangled materialization.
///
/// `grad` is `d x r`. Returns the factor gradient (weighted by `rank_weights`)
/// and, per rank `k`, the unweighted inner product `<grad, M_k>`.
pub fn entangled_vjp(factors: ArrayView4<'_, f64>, grad: ArrayView2<'_, f64>, rank_weights: Option<ArrayView1<'_, f64>>) -> (Array4<f64>, Array1<f64>) {
    let (order, r, q, rank) = factors.dim();
    let d = grad.nrows();
    let mut g_factors = Array4::zeros(factors.raw_dim());
    let mut inner = Array1::zeros(rank);
    let mut digits = vec![0usize; order];
    let mut prefix = vec![0.0; order + 1];
    let mut suffix = vec![0.0; order + 1];
    for c in 0..r {
        for k in 0..rank {
            let w = rank_weights.as_ref().map_or(1.0, |w| w[k]);
            for pos in 0..d {
                let g = grad[[pos, c]];
                if g == 0.0 {
                    continue;
                }
                let mut rest = pos;
                for slot in digits.iter_mut().rev() {
                    *slot = rest % q;
                    rest /= q;
                }
                prefix[0] = 1.0;
                for i in 0..order {
                    prefix[i + 1] = prefix[i] * factors[[i, c, digits[i], k]];
                }
                suffix[order] = 1.0;
                for i in (0..order).rev() {
                    suffix[i] = suffix[i + 1] * factors[[i, c, digits[i], k]];
                }
                inner[k] += g * prefix[order];
                for i in 0..order {
                    g_factors[[i, c, digits[i], k]] += w * g * prefix[i] * suffix[i + 1];
                }
            }
        }
    }
    (g_factors, inner)
}

/// TensorPoly-II backward: through the order-wise tensor product, then the rank merge.
fn order_merged_vjp(factors: ArrayView4<'_, f64>, alpha: ArrayView2<'_, f64>, grad: ArrayView2<'_, f64>) -> (Array4<f64>, Array2<f64>) {
    let merged = merge_orders(factors, alpha);
    let (g_merged, _) = entangled_vjp(merged.view().insert_axis(Axis(3)), grad, None);
    let g_merged = g_merged.index_axis_move(Axis(3), 0);
    let (order, _, _, rank) = factors.dim();
    let mut g_factors = Array4::zeros(factors.raw_dim());
    let mut g_alpha = Array2::zeros((order, rank));
    for i in 0..order {
        let gm = g_merged.index_axis(Axis(0), i);
        for k in 0..rank {
            let fk = factors.slice(s![i, .., .., k]);
            g_factors.slice_mut(s![i, .., .., k]).assign(&(&gm * alpha[[i, k]]));
            g_alpha[[i, k]] = (&gm * &fk).sum();
        }
    }
    (g_factors, g_alpha)
}

/// Gradient of a full contraction w.r.t. each core, for an upstream gradient
/// covering the leading `grad.nrows() x grad.ncols()` block of the output.
pub fn tt_vjp(cores: &[Array4<f64>], grad: ArrayView2<'_, f64>) -> Vec<Array4<f64>> {
    let n = cores.len();
    let row_modes: Vec<usize> = cores.iter().map(|c| c.dim().1).collect();
    let col_modes: Vec<usize> = cores.iter().map(|c| c.dim().3).collect();
    let mut out: Vec<Array4<f64>> = cores.iter().map(|c| Array4::zeros(c.raw_dim())).collect();
    let mut a = vec![0usize; n];
    let mut b = vec![0usize; n];
    let mut left: Vec<Vec<f64>> = cores.iter().map(|c| vec![0.0; c.dim().0]).collect();
    let mut right: Vec<Vec<f64>> = cores.iter().map(|c| vec![0.0; c.dim().2]).collect();
    for (row, grad_row) in grad.outer_iter().enumerate() {
        decode(row, &row_modes, &mut a);
        for (col, &g) in grad_row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            decode(col, &col_modes, &mut b);
            // left[i]: contraction of cores 0..i, indexed by core i's left bond
            left[0][0] = 1.0;
            for i in 1..n {
                let core = &cores[i - 1];
                let (l_dim, _, r_dim, _) = core.dim();
                for r2 in 0..r_dim {
                    let mut acc = 0.0;
                    for l in 0..l_dim {
                        acc += left[i - 1][l] * core[[l, a[i - 1], r2, b[i - 1]]];
                    }
                    left[i][r2] = acc;
                }
            }
            // right[i]: contraction of cores i+1.., indexed by core i's right bond
            right[n - 1][0] = 1.0;
            for i in (0..n - 1).rev() {
                let core = &cores[i + 1];
                let (l_dim, _, r_dim, _) = core.dim();
                for l in 0..l_dim {
                    let mut acc = 0.0;
                    for r2 in 0..r_dim {
                        acc += core[[l, a[i + 1], r2, b[i + 1]]] * right[i + 1][r2];
                    }
                    right[i][l] = acc;
                }
            }
            for i in 0..n {
                let (l_dim, _, r_dim, _) = cores[i].dim();
                for l in 0..l_dim {
                    let gl = g * left[i][l];
                    if gl == 0.0 {
                        continue;
                    }
                    for r2 in 0..r_dim {
                        out[i][[l, a[i], r2, b[i]]] += gl * right[i][r2];
                    }
                }
            }
        }
    }
    out
}

fn decode(mut flat: usize, radices: &[usize], digits: &mut [usize]) {
    for (slot, &r) in digits.iter_mut().zip(radices).rev() {
        *slot = flat % r;
        flat /= r;
    }
}

/// TensorPoly-X backward through the bond weights.
fn tt_param_grads(
    cores: &[Array4<f64>],
    tt: &crate::tensor::TensorTrainCores,
    alpha: ArrayView2<'_, f64>,
    grad_delta: ArrayView2<'_, f64>,
) -> Result<(Vec<Array4<f64>>, Array2<f64>)> {
    let weighted = weighted_cores(tt, alpha)?;
    let g_weighted = tt_vjp(&weighted, grad_delta);
    let mut g_alpha = Array2::zeros(alpha.raw_dim());
    let mut g_cores = g_weighted;
    for (i, (g_core, core)) in g_cores.iter_mut().zip(cores).enumerate() {
        if i >= alpha.nrows() {
            break;
        }
        for k in 0..alpha.ncols() {
            let gk = g_core.index_axis(Axis(2), k);
            g_alpha[[i, k]] = (&gk * &core.index_axis(Axis(2), k)).sum();
            g_core.index_axis_mut(Axis(2), k).mapv_inplace(|v| v * alpha[[i, k]]);
        }
    }
    Ok((g_cores, g_alpha))
}
