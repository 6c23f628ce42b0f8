use ndarray::ArrayD;

use crate::method::Parameterized;

/// Central differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every coordinate.
pub fn finite_diff<F>(mut loss_fn: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = params.to_vec();
    (0..params.len())
        .map(|i| {
            point[i] = params[i] + step;
            let plus = loss_fn(&point);
            point[i] = params[i] - step;
            let minus = loss_fn(&point);
            point[i] = params[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Central differences over every array exposed by a [`Parameterized`] value,
/// returned in `param_views` order and shape.
pub fn finite_diff_params<P, F>(params: &P, mut loss_fn: F, step: f64) -> Vec<ArrayD<f64>>
where
    P: Parameterized + Clone,
    F: FnMut(&P) -> f64,
{
    let mut probe = params.clone();
    let shapes = params.param_shapes();
    let mut out: Vec<ArrayD<f64>> = shapes.iter().map(|s| ArrayD::zeros(s.as_slice())).collect();
    for (p, grad) in out.iter_mut().enumerate() {
        let len = grad.len();
        let grad = grad.as_slice_mut().expect("standard layout");
        for i in 0..len {
            let orig = nth(&probe, p, i);
            set_nth(&mut probe, p, i, orig + step);
            let plus = loss_fn(&probe);
            set_nth(&mut probe, p, i, orig - step);
            let minus = loss_fn(&probe);
            set_nth(&mut probe, p, i, orig);
            grad[i] = (plus - minus) / (2.0 * step);
        }
    }
    out
}

fn nth<P: Parameterized>(p: &P, param: usize, i: usize) -> f64 {
    p.param_views()[param].iter().nth(i).copied().expect("index in range")
}

fn set_nth<P: Parameterized>(p: &mut P, param: usize, i: usize, v: f64) {
    let mut views = p.param_views_mut();
    *views[param].iter_mut().nth(i).expect("index in range") = v;
}
