//! Tensor-product primitives: simple tensors, entangled (sum-of-simple)
//! tensors with prefix truncation, and tensor-train contraction.
//!
//! Flattening convention everywhere: the FIRST factor is the most
//! significant index, so multi-index `(a_1, .., a_N)` lands at
//! `sum_i a_i * prod_{j>i} len_j`.

use ndarray::{Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least `q` with `q^order >= d`.
///
/// Exact powers need no padding: `min_base(625, 4) == 5`.
pub fn min_base(d: usize, order: usize) -> usize {
    assert!(d >= 1 && order >= 1, "min_base needs d >= 1 and order >= 1");
    // Float root as a starting guess, then fix up exactly in integers.
    let mut q = (d as f64).powf(1.0 / order as f64).round().max(1.0) as usize;
    while q > 1 && pow_at_least(q - 1, order, d) {
        q -= 1;
    }
    while !pow_at_least(q, order, d) {
        q += 1;
    }
    q
}

/// `base^exp >= target`, without overflow.
fn pow_at_least(base: usize, exp: usize, target: usize) -> bool {
    let mut acc: usize = 1;
    for _ in 0..exp {
        acc = match acc.checked_mul(base) {
            Some(v) => v,
            None => return true,
        };
        if acc >= target {
            return true;
        }
    }
    acc >= target
}

/// Geometry of one factorized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDims {
    pub d_in: usize,
    pub d_out: usize,
    /// LoRA rank.
    pub r: usize,
    /// Tensor order.
    pub order: usize,
    /// Tensor (entanglement) rank; also the expert count of the TensorPoly variants.
    pub rank: usize,
    pub q_in: usize,
    pub q_out: usize,
}

impl TensorDims {
    pub fn new(d_in: usize, d_out: usize, r: usize, order: usize, rank: usize) -> Result<Self> {
        for (name, v) in [
            ("d_in", d_in),
            ("d_out", d_out),
            ("r", r),
            ("N", order),
            ("R", rank),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        Ok(Self {
            d_in,
            d_out,
            r,
            order,
            rank,
            q_in: min_base(d_in, order),
            q_out: min_base(d_out, order),
        })
    }

    pub fn square(d: usize, r: usize, order: usize, rank: usize) -> Result<Self> {
        Self::new(d, d, r, order, rank)
    }

    /// Padded length `q^N` on the input side.
    pub fn padded_in(&self) -> usize {
        self.q_in.pow(self.order as u32)
    }

    pub fn padded_out(&self) -> usize {
        self.q_out.pow(self.order as u32)
    }
}

/// `R x N` factor vectors of length `q` that entangle into one `d`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorVectorSet {
    /// Shape `(R, N, q)`.
    factors: Array3<f64>,
    target_dim: usize,
}

impl FactorVectorSet {
    pub fn new(factors: Array3<f64>, target_dim: usize) -> Result<Self> {
        let (rank, order, q) = factors.dim();
        if rank == 0 || order == 0 || target_dim == 0 {
            return Err(Error::invalid("factor set needs R, N, d >= 1"));
        }
        let expected_q = min_base(target_dim, order);
        if q != expected_q {
            return Err(Error::shape(
                "FactorVectorSet",
                &[rank, order, expected_q],
                &[rank, order, q],
            ));
        }
        if factors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("factor vectors".into()));
        }
        Ok(Self {
            factors,
            target_dim,
        })
    }

    pub fn factors(&self) -> &Array3<f64> {
        &self.factors
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn rank(&self) -> usize {
        self.factors.dim().0
    }

    pub fn order(&self) -> usize {
        self.factors.dim().1
    }
}

/// Kronecker product of the given vectors, first factor most significant.
pub fn simple_tensor<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Vec<f64>> {
    if vectors.is_empty() {
        return Err(Error::invalid("simple_tensor needs at least one factor"));
    }
    let mut out = vec![1.0];
    for v in vectors {
        out = kron_extend(&out, v.as_ref().iter().copied());
    }
    Ok(out)
}

fn kron_extend(prefix: &[f64], next: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let mut out = Vec::with_capacity(prefix.len() * next.clone().count());
    for &p in prefix {
        out.extend(next.clone().map(|v| p * v));
    }
    out
}

/// Adds `weight * (f_1 ⊗ .. ⊗ f_N)` truncated to `out.len()` into `out`.
pub(crate) fn add_simple_tensor(out: &mut [f64], factors: &[ArrayView1<'_, f64>], weight: f64) {
    let mut prod = vec![weight];
    for f in factors {
        prod = kron_extend(&prod, f.iter().copied());
    }
    for (o, p) in out.iter_mut().zip(prod) {
        *o += p;
    }
}

/// Sum of the `R` simple tensors, truncated to the first `target_dim` entries.
pub fn entangled_reconstruct(fs: &FactorVectorSet) -> Vec<f64> {
    let mut out = vec![0.0; fs.target_dim];
    for rank_slice in fs.factors.axis_iter(Axis(0)) {
        let views: Vec<_> = rank_slice.axis_iter(Axis(0)).collect();
        add_simple_tensor(&mut out, &views, 1.0);
    }
    out
}

/// Cores of a tensor train; core `i` has shape `(bond_left, a_i, bond_right, b_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorTrainCores {
    cores: Vec<Array4<f64>>,
}

impl TensorTrainCores {
    pub fn new(cores: Vec<Array4<f64>>) -> Result<Self> {
        validate_chain(&cores)?;
        Ok(Self { cores })
    }

    /// Standard geometry: boundary bonds 1, internal bonds `rank`, modes `q`.
    pub fn zeros(order: usize, q: usize, rank: usize) -> Self {
        let cores = (0..order)
            .map(|i| {
                let left = if i == 0 { 1 } else { rank };
                let right = if i + 1 == order { 1 } else { rank };
                Array4::zeros((left, q, right, q))
            })
            .collect();
        Self { cores }
    }

    pub fn cores(&self) -> &[Array4<f64>] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [Array4<f64>] {
        &mut self.cores
    }

    pub fn order(&self) -> usize {
        self.cores.len()
    }

    /// Internal bond dimensions `r_1 .. r_{N-1}`.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.cores[..self.cores.len() - 1]
            .iter()
            .map(|c| c.dim().2)
            .collect()
    }

    pub fn rows(&self) -> usize {
        self.cores.iter().map(|c| c.dim().1).product()
    }

    pub fn cols(&self) -> usize {
        self.cores.iter().map(|c| c.dim().3).product()
    }

    pub fn num_params(&self) -> usize {
        self.cores.iter().map(|c| c.len()).sum()
    }
}

fn validate_chain(cores: &[Array4<f64>]) -> Result<()> {
    if cores.is_empty() {
        return Err(Error::invalid("tensor train needs at least one core"));
    }
    if cores[0].dim().0 != 1 {
        return Err(Error::invalid("first core must have left bond 1"));
    }
    if cores[cores.len() - 1].dim().2 != 1 {
        return Err(Error::invalid("last core must have right bond 1"));
    }
    for (i, pair) in cores.windows(2).enumerate() {
        if pair[0].dim().2 != pair[1].dim().0 {
            return Err(Error::invalid(format!(
                "bond mismatch between core {i} (right {}) and core {} (left {})",
                pair[0].dim().2,
                i + 1,
                pair[1].dim().0
            )));
        }
    }
    if cores.iter().flat_map(|c| c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tensor-train cores".into()));
    }
    Ok(())
}

/// Full contraction of the train into a `prod a_i x prod b_i` matrix.
pub fn tt_contract(tt: &TensorTrainCores) -> Array2<f64> {
    contract_cores(tt.cores.iter())
}

/// Contraction where internal bond `l` taking value `k` is weighted by `alpha[l][k]`.
pub fn tt_contract_weighted(tt: &TensorTrainCores, alpha: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let scaled = weighted_cores(tt, alpha)?;
    Ok(contract_cores(scaled.iter()))
}

/// Cores with the right bond of core `i < N` scaled by `alpha[i]`.
pub(crate) fn weighted_cores(tt: &TensorTrainCores, alpha: ArrayView2<'_, f64>) -> Result<Vec<Array4<f64>>> {
    let bonds = tt.bond_dims();
    let width = bonds.first().copied().unwrap_or(alpha.ncols());
    if alpha.nrows() != bonds.len() || bonds.iter().any(|&b| b != alpha.ncols()) {
        return Err(Error::shape("tt weights", &[bonds.len(), width], alpha.shape()));
    }
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tt weights".into()));
    }
    let mut cores = tt.cores.clone();
    for (core, weights) in cores.iter_mut().zip(alpha.outer_iter()) {
        for (mut slice, &w) in core.axis_iter_mut(Axis(2)).zip(weights.iter()) {
            slice *= w;
        }
    }
    Ok(cores)
}

fn contract_cores<'a>(cores: impl Iterator<Item = &'a Array4<f64>>) -> Array2<f64> {
    // state[(row prefix, col prefix, open bond)]
    let mut state = Array3::<f64>::ones((1, 1, 1));
    for core in cores {
        let (left, a, right, b) = core.dim();
        let (rows, cols, bond) = state.dim();
        debug_assert_eq!(bond, left);
        let mut next = Array3::<f64>::zeros((rows * a, cols * b, right));
        for p in 0..rows {
            for c in 0..cols {
                for l in 0..left {
                    let s = state[[p, c, l]];
                    if s == 0.0 {
                        continue;
                    }
                    for ai in 0..a {
                        for r2 in 0..right {
                            for bi in 0..b {
                                next[[p * a + ai, c * b + bi, r2]] += s * core[[l, ai, r2, bi]];
                            }
                        }
                    }
                }
            }
        }
        state = next;
    }
    state.index_axis_move(Axis(2), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn int_array3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
        Array::from_shape_simple_fn(shape, || rng.random_range(-3i32..=3) as f64)
    }

    #[test]
    fn min_base_reported_values() {
        assert_eq!(min_base(625, 4), 5);
        assert_eq!(min_base(512, 3), 8);
        assert_eq!(min_base(7, 1), 7);
        assert_eq!(min_base(512, 2), 23);
        assert_eq!(min_base(1, 5), 1);
    }

    proptest! {
        #[test]
        fn min_base_is_least(d in 1usize..5000, n in 1usize..6) {
            let q = min_base(d, n);
            prop_assert!(q.pow(n as u32) >= d);
            prop_assert!(q == 1 || (q - 1).pow(n as u32) < d);
        }
    }

    #[test]
    fn simple_tensor_examples() {
        assert_eq!(simple_tensor(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), vec![3.0, 4.0, 6.0, 8.0]);
        assert_eq!(simple_tensor(&[vec![2.5]]).unwrap(), vec![2.5]);
        let (x, y, u, v) = (2.0, 3.0, 5.0, 7.0);
        assert_eq!(
            simple_tensor(&[vec![1.0, 0.0], vec![x, y], vec![u, v]]).unwrap(),
            vec![x * u, x * v, y * u, y * v, 0.0, 0.0, 0.0, 0.0]
        );
        assert!(matches!(simple_tensor::<Vec<f64>>(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn simple_tensor_length_is_product() {
        let out = simple_tensor(&[vec![1.0; 2], vec![1.0; 3], vec![1.0; 4]]).unwrap();
        assert_eq!(out.len(), 24);
    }

    #[test]
    fn entangled_identity_and_axis_cases() {
        let fs = FactorVectorSet::new(array![[[5.0, -2.0, 0.0]]], 3).unwrap();
        assert_eq!(entangled_reconstruct(&fs), vec![5.0, -2.0, 0.0]);

        let fs = FactorVectorSet::new(array![[[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]], 4).unwrap();
        assert_eq!(entangled_reconstruct(&fs), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn entangled_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let factors = int_array3(&mut rng, (2, 3, 2));
            let fs = FactorVectorSet::new(factors.clone(), 7).unwrap();
            assert_eq!(entangled_reconstruct(&fs), oracles::entangled_brute(&factors, 7));
        }
    }

    #[test]
    fn factor_set_rejects_wrong_q_and_nan() {
        assert!(FactorVectorSet::new(Array3::zeros((1, 2, 3)), 4).is_err());
        let mut f = Array3::zeros((1, 1, 3));
        f[[0, 0, 1]] = f64::NAN;
        assert!(matches!(FactorVectorSet::new(f, 3), Err(Error::NonFinite(_))));
    }

    #[test]
    fn entangled_multilinear_per_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let factors = int_array3(&mut rng, (3, 2, 3));
        let per_rank = |f: &Array3<f64>, k: usize| {
            let one = f.slice(ndarray::s![k..k + 1, .., ..]).to_owned();
            entangled_reconstruct(&FactorVectorSet::new(one, 8).unwrap())
        };
        let mut scaled = factors.clone();
        scaled.slice_mut(ndarray::s![1, 0, ..]).mapv_inplace(|v| v * 3.0);
        for k in 0..3 {
            let before = per_rank(&factors, k);
            let after = per_rank(&scaled, k);
            let c = if k == 1 { 3.0 } else { 1.0 };
            let expect: Vec<f64> = before.iter().map(|v| v * c).collect();
            assert_eq!(after, expect);
        }
        let total = entangled_reconstruct(&FactorVectorSet::new(scaled.clone(), 8).unwrap());
        let mut sum = vec![0.0; 8];
        for k in 0..3 {
            for (s, v) in sum.iter_mut().zip(per_rank(&scaled, k)) {
                *s += v;
            }
        }
        assert_eq!(total, sum);
    }

    #[test]
    fn truncation_consistent_at_full_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let factors = int_array3(&mut rng, (2, 2, 3));
        let full = entangled_reconstruct(&FactorVectorSet::new(factors.clone(), 9).unwrap());
        let mut untruncated = vec![0.0; 9];
        for k in 0..2 {
            let st = simple_tensor(&[factors.slice(ndarray::s![k, 0, ..]).to_vec(), factors.slice(ndarray::s![k, 1, ..]).to_vec()]).unwrap();
            for (u, v) in untruncated.iter_mut().zip(st) {
                *u += v;
            }
        }
        assert_eq!(full, untruncated);
        let cut = entangled_reconstruct(&FactorVectorSet::new(factors, 7).unwrap());
        assert_eq!(cut.len(), 7);
        assert_eq!(&cut[..], &full[..7]);
    }

    fn random_tt(rng: &mut ChaCha8Rng, order: usize, q: usize, rank: usize) -> TensorTrainCores {
        let mut tt = TensorTrainCores::zeros(order, q, rank);
        for core in tt.cores_mut() {
            core.mapv_inplace(|_| rng.random_range(-3i32..=3) as f64);
        }
        tt
    }

    #[test]
    fn tt_single_core_is_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tt = random_tt(&mut rng, 1, 3, 2);
        let m = tt_contract(&tt);
        let core = &tt.cores()[0];
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(m[[a, b]], core[[0, a, 0, b]]);
            }
        }
    }

    #[test]
    fn tt_rank_one_is_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for order in [2usize, 3] {
            let tt = random_tt(&mut rng, order, 2, 1);
            let mats: Vec<Array2<f64>> = tt.cores().iter().map(|c| c.index_axis(Axis(0), 0).index_axis(Axis(1), 0).to_owned()).collect();
            assert_eq!(tt_contract(&tt), oracles::kron_matrices(&mats));
        }
    }

    #[test]
    fn tt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let tt = random_tt(&mut rng, 3, 2, 2);
            assert_eq!(tt_contract(&tt), oracles::tt_brute(tt.cores(), None));
        }
    }

    #[test]
    fn tt_weighted_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tt = random_tt(&mut rng, 3, 2, 2);
        let ones = Array2::ones((2, 2));
        assert_eq!(tt_contract_weighted(&tt, ones.view()).unwrap(), tt_contract(&tt));

        // one-hot at bonds (1, 0) equals the rank-1 train sliced there
        let alpha = array![[0.0, 1.0], [1.0, 0.0]];
        let picks = [1usize, 0];
        let sliced: Vec<Array4<f64>> = tt
            .cores()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let l = if i == 0 { 0..1 } else { picks[i - 1]..picks[i - 1] + 1 };
                let r = if i == 2 { 0..1 } else { picks[i]..picks[i] + 1 };
                c.slice(ndarray::s![l, .., r, ..]).to_owned()
            })
            .collect();
        let rank1 = TensorTrainCores::new(sliced).unwrap();
        assert_eq!(tt_contract_weighted(&tt, alpha.view()).unwrap(), tt_contract(&rank1));

        let alpha = Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0));
        let fast = tt_contract_weighted(&tt, alpha.view()).unwrap();
        let brute = oracles::tt_brute(tt.cores(), Some(alpha.view()));
        for (a, b) in fast.iter().zip(brute.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        assert!(tt_contract_weighted(&tt, Array2::ones((1, 2)).view()).is_err());
        assert!(tt_contract_weighted(&tt, Array2::ones((2, 3)).view()).is_err());
    }

    #[test]
    fn tt_rejects_broken_chain() {
        let cores = vec![Array4::zeros((1, 2, 2, 2)), Array4::zeros((3, 2, 1, 2))];
        assert!(matches!(TensorTrainCores::new(cores), Err(Error::InvalidArgument(_))));
        assert!(TensorTrainCores::new(vec![Array4::zeros((2, 2, 1, 2))]).is_err());
        assert!(TensorTrainCores::new(vec![]).is_err());
    }

    #[test]
    fn deterministic_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tt = random_tt(&mut rng, 3, 3, 2);
        let a = tt_contract(&tt);
        let b = tt_contract(&tt);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
