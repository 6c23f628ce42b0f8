//! Brute-force reference implementations and the oracle / degeneracy suites.
//!
//! Every reference here walks full multi-indices with plain nested loops and
//! shares no code with the fast paths it checks.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapters::{lora_forward, tlora_forward, tlora_materialize, Adapter, AdapterLayer, LoraAdapter, Side, TLoraFactors};
use crate::method::RoutingVariant;
use crate::routing::{poly_combine, tp1_combine, tp2_combine, tpx_combine, PolyInventory, TensorPolyInventory, TensorTrainInventory};
use crate::tensor::{entangled_reconstruct, min_base, tt_contract, tt_contract_weighted, FactorVectorSet, TensorDims, TensorTrainCores};

/// Digits of `flat` in base `q`, most significant first.
fn digits(mut flat: usize, q: usize, n: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    for slot in out.iter_mut().rev() {
        *slot = flat % q;
        flat /= q;
    }
    out
}

/// `Σ_k Π_i factors[k, i, a_i]` at every position, truncated to `d`.
pub fn entangled_brute(factors: &Array3<f64>, d: usize) -> Vec<f64> {
    let (rank, order, q) = factors.dim();
    let total = q.pow(order as u32);
    let mut out = Vec::with_capacity(d);
    for pos in 0..total.min(d) {
        let a = digits(pos, q, order);
        let mut sum = 0.0;
        for k in 0..rank {
            let mut prod = 1.0;
            for (i, &ai) in a.iter().enumerate() {
                prod *= factors[[k, i, ai]];
            }
            sum += prod;
        }
        out.push(sum);
    }
    out
}

/// Kronecker product of matrices, first factor most significant.
pub fn kron_matrices(mats: &[Array2<f64>]) -> Array2<f64> {
    let rows: usize = mats.iter().map(|m| m.nrows()).product();
    let cols: usize = mats.iter().map(|m| m.ncols()).product();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let (mut rr, mut cc) = (r, c);
            let mut prod = 1.0;
            for m in mats.iter().rev() {
                prod *= m[[rr % m.nrows(), cc % m.ncols()]];
                rr /= m.nrows();
                cc /= m.ncols();
            }
            out[[r, c]] = prod;
        }
    }
    out
}

/// Sum over every internal bond assignment of the product of core entries,
/// optionally weighted by `alpha[l][r_l]`.
pub fn tt_brute(cores: &[Array4<f64>], alpha: Option<ArrayView2<'_, f64>>) -> Array2<f64> {
    let n = cores.len();
    let q_rows: Vec<usize> = cores.iter().map(|c| c.dim().1).collect();
    let q_cols: Vec<usize> = cores.iter().map(|c| c.dim().3).collect();
    let bonds: Vec<usize> = cores[..n - 1].iter().map(|c| c.dim().2).collect();
    let rows: usize = q_rows.iter().product();
    let cols: usize = q_cols.iter().product();
    let paths: usize = bonds.iter().product();
    let mut out = Array2::zeros((rows, cols));
    for row in 0..rows {
        let a = mixed_digits(row, &q_rows);
        for col in 0..cols {
            let b = mixed_digits(col, &q_cols);
            let mut sum = 0.0;
            for p in 0..paths {
                let bond = mixed_digits(p, &bonds);
                let mut prod = 1.0;
                for i in 0..n {
                    let left = if i == 0 { 0 } else { bond[i - 1] };
                    let right = if i + 1 == n { 0 } else { bond[i] };
                    prod *= cores[i][[left, a[i], right, b[i]]];
                }
                if let Some(w) = alpha {
                    for (l, &k) in bond.iter().enumerate() {
                        prod *= w[[l, k]];
                    }
                }
                sum += prod;
            }
            out[[row, col]] = sum;
        }
    }
    out
}

fn mixed_digits(mut flat: usize, radices: &[usize]) -> Vec<usize> {
    let mut out = vec![0; radices.len()];
    for (slot, &r) in out.iter_mut().zip(radices).rev() {
        *slot = flat % r;
        flat /= r;
    }
    out
}

/// Column `c` = `Σ_k w_k Π_i factors[i, c, a_i, k]`, for `(N, r, q, R)` factors.
pub fn tlora_brute(factors: &Array4<f64>, d: usize, weights: Option<&[f64]>) -> Array2<f64> {
    let (order, r, q, rank) = factors.dim();
    let mut out = Array2::zeros((d, r));
    for c in 0..r {
        for pos in 0..d {
            let a = digits(pos, q, order);
            let mut sum = 0.0;
            for k in 0..rank {
                let mut prod = weights.map_or(1.0, |w| w[k]);
                for (i, &ai) in a.iter().enumerate() {
                    prod *= factors[[i, c, ai, k]];
                }
                sum += prod;
            }
            out[[pos, c]] = sum;
        }
    }
    out
}

/// Column `c` = `Π_i (Σ_k alpha[i][k] factors[i, c, a_i, k])`.
pub fn tp2_brute(factors: &Array4<f64>, d: usize, alpha: ArrayView2<'_, f64>) -> Array2<f64> {
    let (order, r, q, rank) = factors.dim();
    let mut out = Array2::zeros((d, r));
    for c in 0..r {
        for pos in 0..d {
            let a = digits(pos, q, order);
            let mut prod = 1.0;
            for (i, &ai) in a.iter().enumerate() {
                let mut s = 0.0;
                for k in 0..rank {
                    s += alpha[[i, k]] * factors[[i, c, ai, k]];
                }
                prod *= s;
            }
            out[[pos, c]] = prod;
        }
    }
    out
}

/// `Σ_i alpha_i modules[i]` by explicit loops.
pub fn poly_brute(modules: &Array3<f64>, alpha: &[f64]) -> Array2<f64> {
    let (s, rows, cols) = modules.dim();
    let mut out = Array2::zeros((rows, cols));
    for i in 0..s {
        for r in 0..rows {
            for c in 0..cols {
                out[[r, c]] += alpha[i] * modules[[i, r, c]];
            }
        }
    }
    out
}

/// `(W0 + s A B^T) x` with the dense matrix materialized first.
pub fn dense_lora_apply(w0: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>, s: f64, x: &Array1<f64>) -> Array1<f64> {
    let (d_out, d_in) = w0.dim();
    let mut w = w0.clone();
    for i in 0..d_out {
        for j in 0..d_in {
            let mut acc = 0.0;
            for c in 0..a.ncols() {
                acc += a[[i, c]] * b[[j, c]];
            }
            w[[i, j]] += s * acc;
        }
    }
    let mut out = Array1::zeros(d_out);
    for i in 0..d_out {
        for j in 0..d_in {
            out[i] += w[[i, j]] * x[j];
        }
    }
    out
}

/// Outcome of one oracle or degeneracy check family.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    /// Largest relative error seen on float instances.
    pub max_rel_err: f64,
    /// All integer instances matched bit for bit.
    pub exact: bool,
    pub passed: bool,
}

/// Float tolerance of the oracle and degeneracy suites.
pub const ORACLE_REL_TOL: f64 = 1e-12;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

struct Tally {
    name: &'static str,
    instances: usize,
    max_rel: f64,
    exact: bool,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            max_rel: 0.0,
            exact: true,
        }
    }

    fn integer(&mut self, got: &[f64], want: &[f64]) {
        self.instances += 1;
        self.exact &= got.len() == want.len() && got.iter().zip(want).all(|(a, b)| a == b);
    }

    fn float(&mut self, got: &[f64], want: &[f64]) {
        self.instances += 1;
        if got.len() != want.len() {
            self.max_rel = f64::INFINITY;
        } else {
            self.max_rel = self.max_rel.max(rel_err(got, want));
        }
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name.to_string(),
            instances: self.instances,
            max_rel_err: self.max_rel,
            exact: self.exact,
            passed: self.exact && self.max_rel <= ORACLE_REL_TOL,
        }
    }
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

struct Sampler {
    rng: ChaCha8Rng,
    integer: bool,
}

impl Sampler {
    fn value(&mut self) -> f64 {
        if self.integer {
            self.rng.random_range(-3i32..=3) as f64
        } else {
            self.rng.random_range(-1.0..1.0)
        }
    }

    fn dims(&mut self) -> (usize, usize, usize, usize) {
        let d = self.rng.random_range(1..=64);
        let order = self.rng.random_range(1..=3);
        let rank = self.rng.random_range(1..=3);
        let r = self.rng.random_range(1..=3);
        (d, order, rank, r)
    }

    fn array4(&mut self, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || self.value())
    }
}

/// Compares every fast path against its brute-force reference on
/// `instances` random cases per family (half integer-valued, half float).
pub fn run_oracle_suite(instances: usize, seed: u64) -> Vec<SuiteReport> {
    let mut ent = Tally::new("entangled_reconstruct");
    let mut mat = Tally::new("tlora_materialize");
    let mut tp1 = Tally::new("tp1_combine");
    let mut tp2 = Tally::new("tp2_combine");
    let mut tt = Tally::new("tt_contract");
    let mut ttw = Tally::new("tt_contract_weighted");
    let mut tpx = Tally::new("tpx_combine");

    for i in 0..instances {
        let integer = i % 2 == 0;
        let mut s = Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)),
            integer,
        };
        let (d, order, rank, r) = s.dims();
        let q = min_base(d, order);

        let factors = Array3::from_shape_simple_fn((rank, order, q), || s.value());
        let got = entangled_reconstruct(&FactorVectorSet::new(factors.clone(), d).expect("valid factor set"));
        let want = entangled_brute(&factors, d);
        record(&mut ent, integer, &got, &want);

        let dims = TensorDims::square(d, r, order, rank).expect("valid dims");
        let f = TLoraFactors::new(
            s.array4((order, r, q, rank)),
            s.array4((order, r, q, rank)),
            dims,
            1.0,
        )
        .expect("valid factors");
        let got = tlora_materialize(&f, Side::A);
        record(&mut mat, integer, &flat(&got), &flat(&tlora_brute(&f.a_factors, d, None)));

        let weights: Vec<f64> = (0..rank).map(|_| s.value()).collect();
        let inv1 = TensorPolyInventory::new(f.clone(), RoutingVariant::Tp1).expect("tp1 inventory");
        let (a1, b1) = tp1_combine(&inv1, ndarray::ArrayView1::from(&weights)).expect("tp1");
        let want_a = tlora_brute(&f.a_factors, d, Some(&weights));
        let want_b = tlora_brute(&f.b_factors, d, Some(&weights));
        record(&mut tp1, integer, &[flat(&a1), flat(&b1)].concat(), &[flat(&want_a), flat(&want_b)].concat());

        let alpha2 = Array2::from_shape_simple_fn((order, rank), || s.value());
        let inv2 = TensorPolyInventory::new(f.clone(), RoutingVariant::Tp2).expect("tp2 inventory");
        let (a2, b2) = tp2_combine(&inv2, alpha2.view()).expect("tp2");
        let want_a = tp2_brute(&f.a_factors, d, alpha2.view());
        let want_b = tp2_brute(&f.b_factors, d, alpha2.view());
        record(&mut tp2, integer, &[flat(&a2), flat(&b2)].concat(), &[flat(&want_a), flat(&want_b)].concat());

        // Tensor trains grow as q^(2N); keep the mode size small.
        let tq = s.rng.random_range(1..=3);
        let mut cores = TensorTrainCores::zeros(order, tq, rank);
        for c in cores.cores_mut() {
            c.mapv_inplace(|_| s.value());
        }
        let got = tt_contract(&cores);
        record(&mut tt, integer, &flat(&got), &flat(&tt_brute(cores.cores(), None)));

        let alpha_x = Array2::from_shape_simple_fn((order - 1, rank), || s.value());
        let got = tt_contract_weighted(&cores, alpha_x.view()).expect("weighted tt");
        let want = tt_brute(cores.cores(), Some(alpha_x.view()));
        record(&mut ttw, integer, &flat(&got), &flat(&want));

        // TensorPoly-X needs at least two cores
        let (cores, alpha_x, want) = if order >= 2 {
            (cores, alpha_x, want)
        } else {
            let mut cores = TensorTrainCores::zeros(2, tq, rank);
            for c in cores.cores_mut() {
                c.mapv_inplace(|_| s.value());
            }
            let alpha_x = Array2::from_shape_simple_fn((1, rank), || s.value());
            let want = tt_brute(cores.cores(), Some(alpha_x.view()));
            (cores, alpha_x, want)
        };
        let rows = s.rng.random_range(1..=cores.rows());
        let cols = s.rng.random_range(1..=cores.cols());
        let inv = TensorTrainInventory::new(cores, cols, rows, 1.0).expect("tpx inventory");
        let got = tpx_combine(&inv, alpha_x.view()).expect("tpx");
        let want = want.slice(ndarray::s![..rows, ..cols]).to_owned();
        record(&mut tpx, integer, &flat(&got), &flat(&want));
    }
    [ent, mat, tp1, tp2, tt, ttw, tpx].into_iter().map(Tally::finish).collect()
}

fn record(t: &mut Tally, integer: bool, got: &[f64], want: &[f64]) {
    if integer {
        t.integer(got, want);
    } else {
        t.float(got, want);
    }
}

/// Reductions between variants that must hold exactly (integer inputs) or to
/// [`ORACLE_REL_TOL`] (float inputs).
pub fn run_degeneracy_suite(instances: usize, seed: u64) -> Vec<SuiteReport> {
    let mut tp1_tlora = Tally::new("tp1(ones) == tlora_materialize");
    let mut tp2_tp1 = Tally::new("tp2(N=1) == tp1");
    let mut tlora_lora = Tally::new("tlora(N=1,R=1) forward == lora forward");
    let mut poly_hot = Tally::new("poly(one-hot) == module");

    for i in 0..instances {
        let integer = i % 2 == 0;
        let mut s = Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1_000_003 * i as u64 + 17)),
            integer,
        };
        let (d, order, rank, r) = s.dims();
        let q = min_base(d, order);
        let dims = TensorDims::square(d, r, order, rank).expect("dims");
        let f = TLoraFactors::new(s.array4((order, r, q, rank)), s.array4((order, r, q, rank)), dims, 1.0).expect("factors");

        let inv1 = TensorPolyInventory::new(f.clone(), RoutingVariant::Tp1).expect("tp1");
        let (a, b) = tp1_combine(&inv1, Array1::ones(rank).view()).expect("tp1");
        let want = [flat(&tlora_materialize(&f, Side::A)), flat(&tlora_materialize(&f, Side::B))].concat();
        record(&mut tp1_tlora, integer, &[flat(&a), flat(&b)].concat(), &want);

        let dims1 = TensorDims::square(d, r, 1, rank).expect("dims");
        let f1 = TLoraFactors::new(s.array4((1, r, d, rank)), s.array4((1, r, d, rank)), dims1, 1.0).expect("factors");
        let row: Vec<f64> = (0..rank).map(|_| s.value()).collect();
        let inv_a = TensorPolyInventory::new(f1.clone(), RoutingVariant::Tp2).expect("tp2");
        let inv_b = TensorPolyInventory::new(f1, RoutingVariant::Tp1).expect("tp1");
        let row_view = ndarray::ArrayView1::from(&row);
        let (a2, b2) = tp2_combine(&inv_a, row_view.insert_axis(Axis(0))).expect("tp2");
        let (a1, b1) = tp1_combine(&inv_b, row_view).expect("tp1");
        record(&mut tp2_tp1, integer, &[flat(&a2), flat(&b2)].concat(), &[flat(&a1), flat(&b1)].concat());

        let w0 = Array2::from_shape_simple_fn((d, d), || s.value());
        let la = Array2::from_shape_simple_fn((d, r), || s.value());
        let lb = Array2::from_shape_simple_fn((d, r), || s.value());
        let mut tf = TLoraFactors::zeros(TensorDims::square(d, r, 1, 1).expect("dims"), 1.0);
        tf.a_factors.slice_mut(ndarray::s![0, .., .., 0]).assign(&la.t());
        tf.b_factors.slice_mut(ndarray::s![0, .., .., 0]).assign(&lb.t());
        let x = Array1::from_shape_simple_fn(d, || s.value());
        let t_layer = AdapterLayer::new(w0.clone(), Adapter::Tlora(tf), 0).expect("layer");
        let l_layer = AdapterLayer::new(w0, Adapter::Lora(LoraAdapter::new(la, lb, 1.0).expect("lora")), 0).expect("layer");
        let got = tlora_forward(&t_layer, x.view()).expect("tlora forward");
        let want = lora_forward(&l_layer, x.view()).expect("lora forward");
        record(&mut tlora_lora, integer, got.as_slice().unwrap(), want.as_slice().unwrap());

        let modules = rank + 1;
        let pa = Array3::from_shape_simple_fn((modules, d, r), || s.value());
        let pb = Array3::from_shape_simple_fn((modules, d, r), || s.value());
        let inv = PolyInventory::new(pa.clone(), pb.clone(), 1.0).expect("poly");
        let pick = s.rng.random_range(0..modules);
        let mut hot = Array1::zeros(modules);
        hot[pick] = 1.0;
        let (ca, cb) = poly_combine(&inv, hot.view()).expect("poly");
        let want = [flat(&pa.index_axis(Axis(0), pick).to_owned()), flat(&pb.index_axis(Axis(0), pick).to_owned())].concat();
        record(&mut poly_hot, integer, &[flat(&ca), flat(&cb)].concat(), &want);
    }
    [tp1_tlora, tp2_tp1, tlora_lora, poly_hot].into_iter().map(Tally::finish).collect()
}
