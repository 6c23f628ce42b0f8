//! LoRA and entangled-tensor LoRA (TLoRA) adapters on top of a frozen base weight.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};

use crate::error::{Error, Result};
use crate::method::{Method, Parameterized};
use crate::routing::{self, PolyInventory, TensorPolyInventory, TensorTrainInventory};
use crate::tensor::{add_simple_tensor, TensorDims};

pub(crate) fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    if scale < 1.0 {
        log::warn!("adapter scale {scale} is below 1");
    }
    Ok(())
}

pub(crate) fn check_finite<'a>(what: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Plain low-rank adapter `s * A * B^T` with `A: d_out x r`, `B: d_in x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(a: Array2<f64>, b: Array2<f64>, scale: f64) -> Result<Self> {
        if a.ncols() != b.ncols() {
            return Err(Error::shape("LoRA rank", &[a.ncols()], &[b.ncols()]));
        }
        check_finite("LoRA A", a.iter())?;
        check_finite("LoRA B", b.iter())?;
        check_scale(scale)?;
        Ok(Self { a, b, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.b.nrows()
    }
}

/// Which LoRA matrix a factor array reparameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `A`, length `d_out` columns.
    A,
    /// `B`, length `d_in` columns.
    B,
}

/// Fourth-order factor arrays `(N, r, q, R)` for both LoRA matrices.
///
/// Column `c` of the materialized matrix is the entangled vector
/// `sum_k ⊗_i factors[i, c, :, k]`, truncated to `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TLoraFactors {
    pub a_factors: Array4<f64>,
    pub b_factors: Array4<f64>,
    pub dims: TensorDims,
    pub scale: f64,
}

impl TLoraFactors {
    pub fn new(a_factors: Array4<f64>, b_factors: Array4<f64>, dims: TensorDims, scale: f64) -> Result<Self> {
        let want_a = [dims.order, dims.r, dims.q_out, dims.rank];
        let want_b = [dims.order, dims.r, dims.q_in, dims.rank];
        if a_factors.shape() != want_a {
            return Err(Error::shape("TLoRA A factors", &want_a, a_factors.shape()));
        }
        if b_factors.shape() != want_b {
            return Err(Error::shape("TLoRA B factors", &want_b, b_factors.shape()));
        }
        check_finite("TLoRA A factors", a_factors.iter())?;
        check_finite("TLoRA B factors", b_factors.iter())?;
        check_scale(scale)?;
        Ok(Self {
            a_factors,
            b_factors,
            dims,
            scale,
        })
    }

    pub fn zeros(dims: TensorDims, scale: f64) -> Self {
        Self {
            a_factors: Array4::zeros((dims.order, dims.r, dims.q_out, dims.rank)),
            b_factors: Array4::zeros((dims.order, dims.r, dims.q_in, dims.rank)),
            dims,
            scale,
        }
    }

    pub fn side(&self, side: Side) -> (ArrayView4<'_, f64>, usize) {
        match side {
            Side::A => (self.a_factors.view(), self.dims.d_out),
            Side::B => (self.b_factors.view(), self.dims.d_in),
        }
    }
}

/// Materializes one side of a TLoRA adapter into a dense `d x r` matrix.
pub fn tlora_materialize(f: &TLoraFactors, side: Side) -> Array2<f64> {
    let (factors, d) = f.side(side);
    materialize_factors(factors, d, None)
}

/// `(N, r, q, R)` factors to a `d x r` matrix, with optional per-rank weights.
pub(crate) fn materialize_factors(factors: ArrayView4<'_, f64>, d: usize, rank_weights: Option<ArrayView1<'_, f64>>) -> Array2<f64> {
    let (order, r, _, rank) = factors.dim();
    let mut out = Array2::zeros((d, r));
    let mut col = vec![0.0; d];
    for c in 0..r {
        col.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..rank {
            let w = rank_weights.as_ref().map_or(1.0, |w| w[k]);
            if w == 0.0 {
                continue;
            }
            let views: Vec<_> = (0..order).map(|i| factors.slice(s![i, c, .., k])).collect();
            add_simple_tensor(&mut col, &views, w);
        }
        out.column_mut(c).assign(&ArrayView1::from(&col[..]));
    }
    out
}

/// Rank-one materialization of already merged `(N, r, q)` factors.
pub(crate) fn materialize_merged(merged: ArrayView3<'_, f64>, d: usize) -> Array2<f64> {
    materialize_factors(merged.insert_axis(Axis(3)), d, None)
}

/// One adapter parameterization, or none.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    None,
    Lora(LoraAdapter),
    Tlora(TLoraFactors),
    Poly(PolyInventory),
    TensorPoly(TensorPolyInventory),
    TensorTrain(TensorTrainInventory),
}

impl Adapter {
    pub fn method(&self) -> Option<Method> {
        match self {
            Adapter::None => None,
            Adapter::Lora(_) => Some(Method::Lora),
            Adapter::Tlora(_) => Some(Method::Tlora),
            Adapter::Poly(_) => Some(Method::Poly),
            Adapter::TensorPoly(inv) => Some(inv.method()),
            Adapter::TensorTrain(_) => Some(Method::Tpx),
        }
    }

    /// `(d_in, d_out)` of the increment this adapter produces.
    pub fn io_dims(&self) -> Option<(usize, usize)> {
        match self {
            Adapter::None => None,
            Adapter::Lora(l) => Some((l.d_in(), l.d_out())),
            Adapter::Tlora(f) => Some((f.dims.d_in, f.dims.d_out)),
            Adapter::Poly(p) => Some((p.d_in(), p.d_out())),
            Adapter::TensorPoly(t) => Some((t.factors.dims.d_in, t.factors.dims.d_out)),
            Adapter::TensorTrain(t) => Some((t.d_in, t.d_out)),
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            Adapter::None => 0.0,
            Adapter::Lora(l) => l.scale,
            Adapter::Tlora(f) => f.scale,
            Adapter::Poly(p) => p.scale,
            Adapter::TensorPoly(t) => t.factors.scale,
            Adapter::TensorTrain(t) => t.scale,
        }
    }

    /// Expected per-task mixing-weight shape, `None` for unrouted adapters.
    pub fn mixing_shape(&self) -> Option<Vec<usize>> {
        match self {
            Adapter::Poly(p) => Some(vec![p.num_modules()]),
            Adapter::TensorPoly(t) => Some(
                t.variant()
                    .row_shape(t.factors.dims.order, t.factors.dims.rank),
            ),
            Adapter::TensorTrain(t) => Some(vec![t.cores.order() - 1, t.rank()]),
            _ => None,
        }
    }

    /// Collapses the adapter (and the task's mixing weights, if routed) into one increment.
    pub fn merge(&self, mixing: Option<ArrayViewD<'_, f64>>) -> Result<MergedDelta> {
        let routed = self.mixing_shape();
        match (&routed, &mixing) {
            (None, Some(_)) => return Err(Error::invalid("mixing weights given to an unrouted adapter")),
            (Some(_), None) => return Err(Error::invalid("routed adapter needs mixing weights")),
            (Some(want), Some(got)) if want.as_slice() != got.shape() => {
                return Err(Error::shape("mixing weights", want, got.shape()))
            }
            _ => {}
        }
        let merged = match self {
            Adapter::None => MergedDelta::Zero,
            Adapter::Lora(l) => MergedDelta::LowRank {
                a: l.a.clone(),
                b: l.b.clone(),
                scale: l.scale,
            },
            Adapter::Tlora(f) => MergedDelta::LowRank {
                a: tlora_materialize(f, Side::A),
                b: tlora_materialize(f, Side::B),
                scale: f.scale,
            },
            Adapter::Poly(p) => {
                let alpha = to_1d(mixing.unwrap())?;
                let (a, b) = routing::poly_combine(p, alpha)?;
                MergedDelta::LowRank { a, b, scale: p.scale }
            }
            Adapter::TensorPoly(t) => {
                let alpha = mixing.unwrap();
                let (a, b) = match t.variant() {
                    crate::method::RoutingVariant::Tp1 => routing::tp1_combine(t, to_1d(alpha)?)?,
                    _ => routing::tp2_combine(t, to_2d(alpha)?)?,
                };
                MergedDelta::LowRank {
                    a,
                    b,
                    scale: t.factors.scale,
                }
            }
            Adapter::TensorTrain(t) => MergedDelta::Dense {
                delta: routing::tpx_combine(t, to_2d(mixing.unwrap())?)?,
                scale: t.scale,
            },
        };
        Ok(merged)
    }
}

pub(crate) fn to_1d(v: ArrayViewD<'_, f64>) -> Result<ArrayView1<'_, f64>> {
    let shape = v.shape().to_vec();
    v.into_dimensionality()
        .map_err(|_| Error::shape("mixing weights (1-d)", &[0], &shape))
}

pub(crate) fn to_2d(v: ArrayViewD<'_, f64>) -> Result<ArrayView2<'_, f64>> {
    let shape = v.shape().to_vec();
    v.into_dimensionality()
        .map_err(|_| Error::shape("mixing weights (2-d)", &[0, 0], &shape))
}

impl Parameterized for Adapter {
    fn param_views(&self) -> Vec<ArrayViewD<'_, f64>> {
        match self {
            Adapter::None => vec![],
            Adapter::Lora(l) => vec![l.a.view().into_dyn(), l.b.view().into_dyn()],
            Adapter::Tlora(f) => vec![f.a_factors.view().into_dyn(), f.b_factors.view().into_dyn()],
            Adapter::Poly(p) => vec![p.a.view().into_dyn(), p.b.view().into_dyn()],
            Adapter::TensorPoly(t) => vec![
                t.factors.a_factors.view().into_dyn(),
                t.factors.b_factors.view().into_dyn(),
            ],
            Adapter::TensorTrain(t) => t.cores.cores().iter().map(|c| c.view().into_dyn()).collect(),
        }
    }

    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        match self {
            Adapter::None => vec![],
            Adapter::Lora(l) => vec![l.a.view_mut().into_dyn(), l.b.view_mut().into_dyn()],
            Adapter::Tlora(f) => vec![f.a_factors.view_mut().into_dyn(), f.b_factors.view_mut().into_dyn()],
            Adapter::Poly(p) => vec![p.a.view_mut().into_dyn(), p.b.view_mut().into_dyn()],
            Adapter::TensorPoly(t) => vec![
                t.factors.a_factors.view_mut().into_dyn(),
                t.factors.b_factors.view_mut().into_dyn(),
            ],
            Adapter::TensorTrain(t) => t
                .cores
                .cores_mut()
                .iter_mut()
                .map(|c| c.view_mut().into_dyn())
                .collect(),
        }
    }
}

/// An adapter collapsed for one task: a low-rank pair or a dense increment.
#[derive(Debug, Clone, PartialEq)]
pub enum MergedDelta {
    Zero,
    LowRank { a: Array2<f64>, b: Array2<f64>, scale: f64 },
    Dense { delta: Array2<f64>, scale: f64 },
}

impl MergedDelta {
    /// Dense `d_out x d_in` increment including the scale.
    pub fn to_dense(&self, d_in: usize, d_out: usize) -> Array2<f64> {
        match self {
            MergedDelta::Zero => Array2::zeros((d_out, d_in)),
            MergedDelta::LowRank { a, b, scale } => a.dot(&b.t()) * *scale,
            MergedDelta::Dense { delta, scale } => delta * *scale,
        }
    }
}

/// Frozen base weight plus one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    w0: Array2<f64>,
    pub adapter: Adapter,
    pub layer_id: usize,
}

impl AdapterLayer {
    pub fn new(w0: Array2<f64>, adapter: Adapter, layer_id: usize) -> Result<Self> {
        check_finite("base weight", w0.iter())?;
        if let Some((d_in, d_out)) = adapter.io_dims() {
            if w0.dim() != (d_out, d_in) {
                return Err(Error::shape("base weight vs adapter", &[d_out, d_in], w0.shape()));
            }
        }
        Ok(Self { w0, adapter, layer_id })
    }

    /// The frozen base weight; there is deliberately no mutable accessor.
    pub fn w0(&self) -> &Array2<f64> {
        &self.w0
    }

    pub fn d_in(&self) -> usize {
        self.w0.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.nrows()
    }

    /// Batched forward: rows of `x` are samples.
    pub fn forward_batch(&self, merged: &MergedDelta, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.d_in() {
            return Err(Error::shape("layer input", &[x.nrows(), self.d_in()], x.shape()));
        }
        let mut h = x.dot(&self.w0.t());
        match merged {
            MergedDelta::Zero => {}
            MergedDelta::LowRank { a, b, scale } => {
                let u = x.dot(b);
                h.scaled_add(*scale, &u.dot(&a.t()));
            }
            MergedDelta::Dense { delta, scale } => {
                h.scaled_add(*scale, &x.dot(&delta.t()));
            }
        }
        Ok(h)
    }
}

fn low_rank_apply(w0: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>, scale: f64, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if x.len() != w0.ncols() {
        return Err(Error::shape("input vector", &[w0.ncols()], &[x.len()]));
    }
    // B^T x first keeps the cost at O(d r).
    let u = b.t().dot(&x);
    let mut h = w0.dot(&x);
    h.scaled_add(scale, &a.dot(&u));
    Ok(h)
}

/// `W0 x + s A (B^T x)` for a layer carrying a plain LoRA adapter.
pub fn lora_forward(layer: &AdapterLayer, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    match &layer.adapter {
        Adapter::Lora(l) => low_rank_apply(&layer.w0, &l.a, &l.b, l.scale, x),
        _ => Err(Error::invalid("lora_forward needs a LoRA adapter")),
    }
}

/// TLoRA forward: materialize both sides, then apply the LoRA formula.
pub fn tlora_forward(layer: &AdapterLayer, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    match &layer.adapter {
        Adapter::Tlora(f) => {
            let a = tlora_materialize(f, Side::A);
            let b = tlora_materialize(f, Side::B);
            low_rank_apply(&layer.w0, &a, &b, f.scale, x)
        }
        _ => Err(Error::invalid("tlora_forward needs a TLoRA adapter")),
    }
}
