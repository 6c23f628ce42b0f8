//! Task-to-expert routing: Gumbel-sigmoid sampling, normalization into mixing
//! weights, and the merge rules of Poly and the three TensorPoly variants.

use ndarray::{Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, IxDyn, Zip};
use rand::Rng;

use crate::adapters::{check_finite, check_scale, materialize_factors, materialize_merged, LoraAdapter, TLoraFactors};
use crate::error::{Error, Result};
use crate::method::{Method, Parameterized, RoutingVariant};
use crate::tensor::{tt_contract_weighted, TensorTrainCores};

/// Clamp margin keeping samples strictly inside `(0, 1)`.
pub const SAMPLE_EPS: f64 = 1e-7;
/// Default denominator slack of [`normalize_weights`].
pub const NORM_EPS: f64 = 1e-12;

/// Sampling regime of the routing relaxation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Logistic noise is added before the sigmoid.
    Train,
    /// Deterministic `sigmoid(z / temperature)`.
    Eval,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic noise `log u - log(1 - u)`, the difference of two Gumbel draws.
pub fn logistic_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let u: f64 = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        };
        u.ln() - (-u).ln_1p()
    })
}

fn relaxed(z: f64, noise: f64, temperature: f64) -> f64 {
    sigmoid((z + noise) / temperature).clamp(SAMPLE_EPS, 1.0 - SAMPLE_EPS)
}

/// Gumbel-sigmoid relaxation of routing logits.
pub fn gumbel_sigmoid<R: Rng + ?Sized>(
    logits: ArrayViewD<'_, f64>,
    temperature: f64,
    rng: &mut R,
    mode: SampleMode,
) -> Result<ArrayD<f64>> {
    check_temperature(temperature)?;
    Ok(match mode {
        SampleMode::Eval => logits.mapv(|z| relaxed(z, 0.0, temperature)),
        SampleMode::Train => {
            let noise = logistic_noise(logits.shape(), rng);
            Zip::from(&logits)
                .and(&noise)
                .map_collect(|&z, &l| relaxed(z, l, temperature))
        }
    })
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// `z_hat / (sum along axis + epsilon)`.
pub fn normalize_weights(z_hat: ArrayViewD<'_, f64>, axis: Axis, epsilon: f64) -> ArrayD<f64> {
    let sums = z_hat.sum_axis(axis).insert_axis(axis);
    if sums.iter().any(|&s| s <= epsilon) {
        log::warn!("degenerate routing slice: all-zero weights along axis {}", axis.index());
    }
    &z_hat / &(sums + epsilon)
}

/// One task's relaxed routing sample with the noise realization kept for the
/// pathwise gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingSample {
    pub noise: Option<ArrayD<f64>>,
    pub z_hat: ArrayD<f64>,
    pub alpha: ArrayD<f64>,
    pub temperature: f64,
    /// Hard-thresholded eval sample; carries no gradient.
    pub hard: bool,
}

impl RoutingSample {
    /// Samples a routing row. `noise = None` gives the deterministic eval sample.
    pub fn from_row(z_row: ArrayViewD<'_, f64>, noise: Option<ArrayD<f64>>, temperature: f64, hard: bool) -> Result<Self> {
        check_temperature(temperature)?;
        if let Some(n) = &noise {
            if n.shape() != z_row.shape() {
                return Err(Error::shape("routing noise", z_row.shape(), n.shape()));
            }
        }
        let mut z_hat = match &noise {
            Some(n) => Zip::from(&z_row).and(n).map_collect(|&z, &l| relaxed(z, l, temperature)),
            None => z_row.mapv(|z| relaxed(z, 0.0, temperature)),
        };
        if hard {
            z_hat.mapv_inplace(|v| if v > 0.5 { 1.0 - SAMPLE_EPS } else { SAMPLE_EPS });
        }
        let axis = Axis(z_row.ndim() - 1);
        let alpha = normalize_weights(z_hat.view(), axis, NORM_EPS);
        Ok(Self {
            noise,
            z_hat,
            alpha,
            temperature,
            hard,
        })
    }

    /// Train-mode sample with fresh logistic noise.
    pub fn draw<R: Rng + ?Sized>(z_row: ArrayViewD<'_, f64>, temperature: f64, rng: &mut R) -> Result<Self> {
        let noise = logistic_noise(z_row.shape(), rng);
        Self::from_row(z_row, Some(noise), temperature, false)
    }

    /// Pulls a gradient w.r.t. `alpha` back to the routing logits of the row.
    pub fn backward(&self, grad_alpha: ArrayViewD<'_, f64>) -> Result<ArrayD<f64>> {
        if grad_alpha.shape() != self.alpha.shape() {
            return Err(Error::shape("alpha gradient", self.alpha.shape(), grad_alpha.shape()));
        }
        let axis = Axis(self.z_hat.ndim() - 1);
        let denom = self.z_hat.sum_axis(axis).insert_axis(axis) + NORM_EPS;
        // d alpha_i / d zhat_j = delta_ij / D - zhat_i / D^2
        let weighted = (&grad_alpha * &self.z_hat).sum_axis(axis).insert_axis(axis);
        let grad_zhat = &grad_alpha / &denom - &weighted / &(&denom * &denom);
        if self.hard {
            return Ok(ArrayD::zeros(grad_zhat.raw_dim()));
        }
        let t = self.temperature;
        Ok(Zip::from(&grad_zhat).and(&self.z_hat).map_collect(|&g, &s| {
            if s <= SAMPLE_EPS || s >= 1.0 - SAMPLE_EPS {
                0.0
            } else {
                g * s * (1.0 - s) / t
            }
        }))
    }
}

/// Per-task routing logits, shape `(T, row_shape..)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingLogits {
    pub variant: RoutingVariant,
    pub z: ArrayD<f64>,
}

impl RoutingLogits {
    pub fn new(variant: RoutingVariant, z: ArrayD<f64>) -> Result<Self> {
        let ndim_ok = match variant {
            RoutingVariant::Poly | RoutingVariant::Tp1 => z.ndim() == 2,
            RoutingVariant::Tp2 | RoutingVariant::Tpx => z.ndim() == 3,
        };
        if !ndim_ok {
            return Err(Error::invalid(format!("routing logits of rank {} do not fit {variant:?}", z.ndim())));
        }
        check_finite("routing logits", z.iter())?;
        Ok(Self { variant, z })
    }

    pub fn num_tasks(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn row_shape(&self) -> &[usize] {
        &self.z.shape()[1..]
    }

    pub fn row(&self, task: usize) -> Result<ArrayViewD<'_, f64>> {
        if task >= self.num_tasks() {
            return Err(Error::invalid(format!("task {task} out of range ({} rows)", self.num_tasks())));
        }
        Ok(self.z.index_axis(Axis(0), task))
    }
}

impl Parameterized for RoutingLogits {
    fn param_views(&self) -> Vec<ArrayViewD<'_, f64>> {
        vec![self.z.view()]
    }

    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![self.z.view_mut()]
    }
}

/// Logits i.i.d. uniform in `[-0.01, 0.01]`.
///
/// `experts` is `S` for Poly and `R` for the TensorPoly variants.
pub fn init_routing<R: Rng + ?Sized>(variant: RoutingVariant, tasks: usize, order: usize, experts: usize, rng: &mut R) -> Result<RoutingLogits> {
    if tasks == 0 || order == 0 || experts == 0 {
        return Err(Error::invalid("routing dimensions must be positive"));
    }
    let mut shape = vec![tasks];
    shape.extend(variant.row_shape(order, experts));
    let z = ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.random_range(-0.01..=0.01));
    RoutingLogits::new(variant, z)
}

/// Uniform mixing weights used when routing is discarded.
pub fn uniform_mixing(variant: RoutingVariant, order: usize, experts: usize) -> ArrayD<f64> {
    let shape = variant.row_shape(order, experts);
    ArrayD::from_elem(IxDyn(&shape), 1.0 / experts as f64)
}

/// `S` LoRA modules stored as `(S, d_out, r)` and `(S, d_in, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyInventory {
    pub a: Array3<f64>,
    pub b: Array3<f64>,
    pub scale: f64,
}

impl PolyInventory {
    pub fn new(a: Array3<f64>, b: Array3<f64>, scale: f64) -> Result<Self> {
        if a.dim().0 != b.dim().0 || a.dim().2 != b.dim().2 || a.dim().0 == 0 {
            return Err(Error::shape("Poly modules", &[a.dim().0, a.dim().2], &[b.dim().0, b.dim().2]));
        }
        check_finite("Poly modules", a.iter().chain(b.iter()))?;
        check_scale(scale)?;
        Ok(Self { a, b, scale })
    }

    pub fn from_modules(modules: &[LoraAdapter]) -> Result<Self> {
        let first = modules.first().ok_or_else(|| Error::invalid("Poly needs at least one module"))?;
        let (d_out, d_in, r) = (first.d_out(), first.d_in(), first.rank());
        let mut a = Array3::zeros((modules.len(), d_out, r));
        let mut b = Array3::zeros((modules.len(), d_in, r));
        for (i, m) in modules.iter().enumerate() {
            if (m.d_out(), m.d_in(), m.rank()) != (d_out, d_in, r) {
                return Err(Error::shape("Poly module", &[d_out, d_in, r], &[m.d_out(), m.d_in(), m.rank()]));
            }
            a.index_axis_mut(Axis(0), i).assign(&m.a);
            b.index_axis_mut(Axis(0), i).assign(&m.b);
        }
        Self::new(a, b, first.scale)
    }

    pub fn num_modules(&self) -> usize {
        self.a.dim().0
    }

    pub fn d_out(&self) -> usize {
        self.a.dim().1
    }

    pub fn d_in(&self) -> usize {
        self.b.dim().1
    }

    pub fn module(&self, i: usize) -> LoraAdapter {
        LoraAdapter {
            a: self.a.index_axis(Axis(0), i).to_owned(),
            b: self.b.index_axis(Axis(0), i).to_owned(),
            scale: self.scale,
        }
    }
}

/// Shared TLoRA factors whose rank axis is the expert axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorPolyInventory {
    pub factors: TLoraFactors,
    variant: RoutingVariant,
}

impl TensorPolyInventory {
    pub fn new(factors: TLoraFactors, variant: RoutingVariant) -> Result<Self> {
        match variant {
            RoutingVariant::Tp1 | RoutingVariant::Tp2 => Ok(Self { factors, variant }),
            other => Err(Error::invalid(format!("{other:?} is not a TensorPoly-I/II variant"))),
        }
    }

    pub fn variant(&self) -> RoutingVariant {
        self.variant
    }

    pub fn method(&self) -> Method {
        match self.variant {
            RoutingVariant::Tp1 => Method::Tp1,
            _ => Method::Tp2,
        }
    }
}

/// Tensor-train parameterization of a full increment `ΔW`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorTrainInventory {
    pub cores: TensorTrainCores,
    pub d_in: usize,
    pub d_out: usize,
    pub scale: f64,
}

impl TensorTrainInventory {
    pub fn new(cores: TensorTrainCores, d_in: usize, d_out: usize, scale: f64) -> Result<Self> {
        if cores.order() < 2 {
            return Err(Error::invalid("TensorPoly-X needs order N >= 2"));
        }
        if cores.rows() < d_out || cores.cols() < d_in {
            return Err(Error::shape("tensor-train extent", &[d_out, d_in], &[cores.rows(), cores.cols()]));
        }
        let bonds = cores.bond_dims();
        if bonds.iter().any(|&b| b != bonds[0]) {
            return Err(Error::invalid("TensorPoly-X needs equal internal bonds"));
        }
        check_scale(scale)?;
        Ok(Self {
            cores,
            d_in,
            d_out,
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.cores.bond_dims()[0]
    }
}

/// `A^τ = Σ α_i A^(i)`, `B^τ = Σ α_i B^(i)`.
pub fn poly_combine(inv: &PolyInventory, alpha: ArrayView1<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    if alpha.len() != inv.num_modules() {
        return Err(Error::shape("Poly weights", &[inv.num_modules()], &[alpha.len()]));
    }
    check_finite("Poly weights", alpha.iter())?;
    let mut a = Array2::zeros((inv.d_out(), inv.a.dim().2));
    let mut b = Array2::zeros((inv.d_in(), inv.b.dim().2));
    for (i, &w) in alpha.iter().enumerate() {
        a.scaled_add(w, &inv.a.index_axis(Axis(0), i));
        b.scaled_add(w, &inv.b.index_axis(Axis(0), i));
    }
    Ok((a, b))
}

/// TensorPoly-I: weighted sum over the rank (expert) axis of the entangled columns.
pub fn tp1_combine(inv: &TensorPolyInventory, alpha: ArrayView1<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let f = &inv.factors;
    if alpha.len() != f.dims.rank {
        return Err(Error::shape("TensorPoly-I weights", &[f.dims.rank], &[alpha.len()]));
    }
    check_finite("TensorPoly-I weights", alpha.iter())?;
    Ok((
        materialize_factors(f.a_factors.view(), f.dims.d_out, Some(alpha)),
        materialize_factors(f.b_factors.view(), f.dims.d_in, Some(alpha)),
    ))
}

/// Per-order merge `Σ_k alpha[i][k] factors[i, :, :, k]`, shape `(N, r, q)`.
pub(crate) fn merge_orders(factors: ndarray::ArrayView4<'_, f64>, alpha: ArrayView2<'_, f64>) -> Array3<f64> {
    let (order, r, q, rank) = factors.dim();
    let mut out = Array3::zeros((order, r, q));
    for i in 0..order {
        for k in 0..rank {
            out.index_axis_mut(Axis(0), i)
                .scaled_add(alpha[[i, k]], &factors.index_axis(Axis(0), i).index_axis(Axis(2), k));
        }
    }
    out
}

/// TensorPoly-II: merge the rank axis per order, then take the tensor product over orders.
pub fn tp2_combine(inv: &TensorPolyInventory, alpha: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let f = &inv.factors;
    let want = [f.dims.order, f.dims.rank];
    if alpha.shape() != want {
        return Err(Error::shape("TensorPoly-II weights", &want, alpha.shape()));
    }
    check_finite("TensorPoly-II weights", alpha.iter())?;
    Ok((
        materialize_merged(merge_orders(f.a_factors.view(), alpha).view(), f.dims.d_out),
        materialize_merged(merge_orders(f.b_factors.view(), alpha).view(), f.dims.d_in),
    ))
}

/// TensorPoly-X: weighted tensor-train contraction truncated to `d_out x d_in`.
pub fn tpx_combine(inv: &TensorTrainInventory, alpha: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let full = tt_contract_weighted(&inv.cores, alpha)?;
    Ok(full.slice(ndarray::s![..inv.d_out, ..inv.d_in]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use crate::tensor::TensorDims;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn int_factors(rng: &mut ChaCha8Rng, dims: TensorDims) -> TLoraFactors {
        let mut f = TLoraFactors::zeros(dims, 1.0);
        f.a_factors.mapv_inplace(|_| rng.random_range(-3i32..=3) as f64);
        f.b_factors.mapv_inplace(|_| rng.random_range(-3i32..=3) as f64);
        f
    }

    fn tp(rng: &mut ChaCha8Rng, dims: TensorDims, variant: RoutingVariant) -> TensorPolyInventory {
        TensorPolyInventory::new(int_factors(rng, dims), variant).unwrap()
    }

    #[test]
    fn eval_sigmoid_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = gumbel_sigmoid(ArrayD::zeros(IxDyn(&[1])).view(), 1.0, &mut rng, SampleMode::Eval).unwrap();
        assert_eq!(out[[0]], 0.5);
    }

    #[test]
    fn train_mean_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = gumbel_sigmoid(ArrayD::zeros(IxDyn(&[100_000])).view(), 1.0, &mut rng, SampleMode::Train).unwrap();
        let mean = out.mean().unwrap();
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn low_temperature_hard_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = gumbel_sigmoid(ArrayD::from_elem(IxDyn(&[100_000]), 3.0).view(), 0.01, &mut rng, SampleMode::Train).unwrap();
        let frac = out.iter().filter(|&&v| v > 0.5).count() as f64 / 1e5;
        assert!((frac - sigmoid(3.0)).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn temperature_must_be_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = ArrayD::zeros(IxDyn(&[2]));
        assert!(gumbel_sigmoid(z.view(), 0.0, &mut rng, SampleMode::Eval).is_err());
        assert!(gumbel_sigmoid(z.view(), -1.0, &mut rng, SampleMode::Train).is_err());
        assert!(RoutingSample::from_row(z.view(), None, 0.0, false).is_err());
    }

    #[test]
    fn normalize_examples() {
        let n = |v: Vec<f64>| normalize_weights(Array::from(v).into_dyn().view(), Axis(0), NORM_EPS);
        let close = |a: &ArrayD<f64>, b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-11);
        assert!(close(&n(vec![0.2, 0.2]), &[0.5, 0.5]));
        assert!(close(&n(vec![1.0, 0.0, 0.0]), &[1.0, 0.0, 0.0]));
        assert!(close(&n(vec![0.9, 0.3, 0.6]), &[0.5, 1.0 / 6.0, 1.0 / 3.0]));
        let zero = n(vec![0.0, 0.0]);
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_per_order_rows() {
        let z = array![[0.2, 0.6], [0.9, 0.1]].into_dyn();
        let a = normalize_weights(z.view(), Axis(1), NORM_EPS);
        for row in a.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalization_cancels_positive_scale() {
        // exact when the scale is a power of two
        let z = array![0.3, 0.45, 0.05].into_dyn();
        let a = normalize_weights(z.view(), Axis(0), 0.0);
        let b = normalize_weights((&z * 4.0).view(), Axis(0), 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn poly_combine_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array::from_shape_simple_fn((3, 4, 2), || rng.random_range(-3i32..=3) as f64);
        let b = Array::from_shape_simple_fn((3, 5, 2), || rng.random_range(-3i32..=3) as f64);
        let inv = PolyInventory::new(a.clone(), b.clone(), 1.0).unwrap();
        let (ta, tb) = poly_combine(&inv, array![0.0, 1.0, 0.0].view()).unwrap();
        assert_eq!(ta, a.index_axis(Axis(0), 1));
        assert_eq!(tb, b.index_axis(Axis(0), 1));

        let two = PolyInventory::new(a.slice(ndarray::s![..2, .., ..]).to_owned(), b.slice(ndarray::s![..2, .., ..]).to_owned(), 1.0).unwrap();
        let (ma, _) = poly_combine(&two, array![0.5, 0.5].view()).unwrap();
        assert_eq!(ma, (&a.index_axis(Axis(0), 0) + &a.index_axis(Axis(0), 1)) * 0.5);

        let alpha = array![2.0, -1.0, 3.0];
        let (ra, rb) = poly_combine(&inv, alpha.view()).unwrap();
        assert_eq!(ra, oracles::poly_brute(&a, alpha.as_slice().unwrap()));
        assert_eq!(rb, oracles::poly_brute(&b, alpha.as_slice().unwrap()));

        assert!(poly_combine(&inv, array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn tp1_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = TensorDims::square(9, 2, 2, 3).unwrap();
        let inv = tp(&mut rng, dims, RoutingVariant::Tp1);
        let (ones_a, ones_b) = tp1_combine(&inv, array![1.0, 1.0, 1.0].view()).unwrap();
        assert_eq!(ones_a, crate::adapters::tlora_materialize(&inv.factors, crate::adapters::Side::A));
        assert_eq!(ones_b, crate::adapters::tlora_materialize(&inv.factors, crate::adapters::Side::B));

        let (sel, _) = tp1_combine(&inv, array![0.0, 0.0, 1.0].view()).unwrap();
        let only_k = inv.factors.a_factors.slice(ndarray::s![.., .., .., 2..3]).to_owned();
        assert_eq!(sel, oracles::tlora_brute(&only_k, 9, None));

        let w = [2.0, -1.0, 3.0];
        let (wa, wb) = tp1_combine(&inv, ArrayView1::from(&w)).unwrap();
        assert_eq!(wa, oracles::tlora_brute(&inv.factors.a_factors, 9, Some(&w)));
        assert_eq!(wb, oracles::tlora_brute(&inv.factors.b_factors, 9, Some(&w)));
        assert!(tp1_combine(&inv, array![1.0].view()).is_err());
    }

    #[test]
    fn tp2_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // N = 1 collapses to TensorPoly-I
        let dims = TensorDims::square(5, 2, 1, 3).unwrap();
        let inv2 = tp(&mut rng, dims, RoutingVariant::Tp2);
        let inv1 = TensorPolyInventory::new(inv2.factors.clone(), RoutingVariant::Tp1).unwrap();
        let row = array![0.25, 0.5, 0.25];
        assert_eq!(
            tp2_combine(&inv2, row.view().insert_axis(Axis(0))).unwrap(),
            tp1_combine(&inv1, row.view()).unwrap()
        );

        let dims = TensorDims::square(4, 1, 2, 2).unwrap();
        let inv = tp(&mut rng, dims, RoutingVariant::Tp2);
        let (sel, _) = tp2_combine(&inv, array![[0.0, 1.0], [0.0, 1.0]].view()).unwrap();
        let only_k = inv.factors.a_factors.slice(ndarray::s![.., .., .., 1..2]).to_owned();
        assert_eq!(sel, oracles::tlora_brute(&only_k, 4, None));

        let alpha = array![[2.0, -1.0], [1.0, 3.0]];
        let (a, _) = tp2_combine(&inv, alpha.view()).unwrap();
        assert_eq!(a, oracles::tp2_brute(&inv.factors.a_factors, 4, alpha.view()));
        assert!(tp2_combine(&inv, array![[1.0, 0.0]].view()).is_err());
    }

    fn int_tt(rng: &mut ChaCha8Rng, order: usize, q: usize, rank: usize) -> TensorTrainCores {
        let mut tt = TensorTrainCores::zeros(order, q, rank);
        for c in tt.cores_mut() {
            c.mapv_inplace(|_| rng.random_range(-3i32..=3) as f64);
        }
        tt
    }

    #[test]
    fn tpx_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tt = int_tt(&mut rng, 3, 2, 2);
        let inv = TensorTrainInventory::new(tt.clone(), 7, 6, 1.0).unwrap();
        let ones = Array2::ones((2, 2));
        let full = crate::tensor::tt_contract(&tt);
        assert_eq!(tpx_combine(&inv, ones.view()).unwrap(), full.slice(ndarray::s![..6, ..7]));

        let alpha = Array2::from_shape_simple_fn((2, 2), || rng.random_range(-1.0..1.0));
        let got = tpx_combine(&inv, alpha.view()).unwrap();
        let brute = oracles::tt_brute(tt.cores(), Some(alpha.view()));
        for (g, b) in got.iter().zip(brute.slice(ndarray::s![..6, ..7]).iter()) {
            assert!((g - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert!(TensorTrainInventory::new(int_tt(&mut rng, 1, 3, 2), 3, 3, 1.0).is_err());
        assert!(TensorTrainInventory::new(tt, 9, 2, 1.0).is_err());
    }

    #[test]
    fn init_routing_shapes_and_determinism() {
        let z = init_routing(RoutingVariant::Tp1, 2, 3, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(z.z.shape(), &[2, 4]);
        assert!(z.z.iter().all(|v| v.abs() <= 0.01));
        let again = init_routing(RoutingVariant::Tp1, 2, 3, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(z, again);
        let z2 = init_routing(RoutingVariant::Tp2, 1, 2, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(z2.z.shape(), &[1, 2, 3]);
        let zx = init_routing(RoutingVariant::Tpx, 1, 3, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(zx.z.shape(), &[1, 2, 2]);
    }

    #[test]
    fn merged_norm_bounded_by_expert_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = TensorDims::square(9, 2, 2, 4).unwrap();
        let inv = tp(&mut rng, dims, RoutingVariant::Tp1);
        let z = Array::from_shape_simple_fn(4, || rng.random_range(-2.0..2.0)).into_dyn();
        let sample = RoutingSample::from_row(z.view(), None, 1.0, false).unwrap();
        let alpha = sample.alpha.clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let (merged, _) = tp1_combine(&inv, alpha.view()).unwrap();
        let fro = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut bound = 0.0;
        for k in 0..4 {
            let mut hot = Array::zeros(4);
            hot[k] = 1.0;
            let (ek, _) = tp1_combine(&inv, hot.view()).unwrap();
            bound += alpha[k] * fro(&ek);
        }
        assert!(fro(&merged) <= bound + 1e-12);
    }

    #[test]
    fn sample_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Array::from_shape_simple_fn((2, 3), || rng.random_range(-1.0..1.0)).into_dyn();
        let noise = logistic_noise(&[2, 3], &mut rng);
        let g = Array::from_shape_simple_fn((2, 3), || rng.random_range(-1.0..1.0)).into_dyn();
        let loss = |zz: &ArrayD<f64>| {
            let s = RoutingSample::from_row(zz.view(), Some(noise.clone()), 0.7, false).unwrap();
            (&s.alpha * &g).sum()
        };
        let s = RoutingSample::from_row(z.view(), Some(noise.clone()), 0.7, false).unwrap();
        let analytic = s.backward(g.view()).unwrap();
        let h = 1e-6;
        for idx in 0..6 {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - analytic.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn hard_threshold_eval() {
        let z = array![2.0, -2.0, 0.1].into_dyn();
        let s = RoutingSample::from_row(z.view(), None, 1.0, true).unwrap();
        assert!(s.alpha[[0]] > 0.49 && s.alpha[[1]] < 1e-6);
        assert!(s.backward(array![1.0, 0.0, 0.0].into_dyn().view()).unwrap().iter().all(|&v| v == 0.0));
    }
}
