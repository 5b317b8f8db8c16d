//! Central-difference gradient checking.
//!
//! Finite differences are always evaluated in 64-bit. The analytic side runs
//! either in 32-bit (the training precision) or 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// A scalar function of a list of parameter tensors, evaluable at any precision.
pub trait Objective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var>;
}

impl<O: Objective> Objective for &O {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
        (*self).eval(tape, params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Number of coordinates to check; `None` checks every coordinate.
    pub samples: Option<usize>,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            samples: None,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tensors_covered: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_loss<O: Objective>(obj: &O, params: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = obj.eval(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` for coordinate `coord` of tensor `tensor`.
pub fn central_difference<O: Objective>(
    obj: &O,
    params: &mut [Tensor<f64>],
    (tensor, coord): (usize, usize),
    eps: f64,
) -> Result<f64> {
    let orig = params[tensor].data()[coord];
    params[tensor].data_mut()[coord] = orig + eps;
    let plus = eval_loss(obj, params);
    params[tensor].data_mut()[coord] = orig - eps;
    let minus = eval_loss(obj, params);
    params[tensor].data_mut()[coord] = orig;
    Ok((plus? - minus?) / (2.0 * eps))
}

fn analytic_grads<T: Real, O: Objective>(obj: &O, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::<T>::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.cast::<T>()))
        .collect::<Result<Vec<_>>>()?;
    let loss = obj.eval(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .take(v)
                .map(|g| g.cast::<f64>())
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect())
}

/// Coordinates to check: round-robin over tensors so every tensor is covered.
fn sample_coords(params: &[Tensor<f64>], samples: Option<usize>, seed: u64) -> Vec<(usize, usize)> {
    let total: usize = params.iter().map(Tensor::len).sum();
    match samples {
        Some(n) if n < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|j| {
                    let t = j % params.len();
                    (t, rng.random_range(0..params[t].len()))
                })
                .collect()
        }
        _ => params
            .iter()
            .enumerate()
            .flat_map(|(t, p)| (0..p.len()).map(move |c| (t, c)))
            .collect(),
    }
}

/// Max relative error between backward-pass gradients and central differences.
pub fn grad_check<O: Objective>(
    obj: &O,
    params: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = match opts.precision {
        Precision::F32 => analytic_grads::<f32, O>(obj, params)?,
        Precision::F64 => analytic_grads::<f64, O>(obj, params)?,
    };
    let coords = sample_coords(params, opts.samples, opts.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: coords.len(),
        tensors_covered: 0,
    };
    let mut covered = vec![false; params.len()];
    for &(t, c) in &coords {
        covered[t] = true;
        let numeric = central_difference(obj, &mut work, (t, c), opts.eps)?;
        let err = relative_error(analytic[t].data()[c], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((t, c));
        }
    }
    report.tensors_covered = covered.iter().filter(|&&c| c).count();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Bowl;
    impl Objective for Bowl {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
            let sq = tape.mul(params[0], params[0])?;
            tape.sum(sq)
        }
    }

    struct Zero;
    impl Objective for Zero {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
            tape.scale(params[0], T::zero()).and_then(|z| tape.sum(z))
        }
    }

    #[test]
    fn quadratic_bowl() {
        let p = vec![Tensor::from_f64([5], &[0.5, -1.0, 2.0, 0.1, -0.3]).unwrap()];
        let r = grad_check(&Bowl, &p, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn zero_function() {
        let p = vec![Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap()];
        let r = grad_check(&Zero, &p, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn sampling_covers_every_tensor() {
        let p = vec![Tensor::<f64>::zeros([10]), Tensor::zeros([3, 3]), Tensor::zeros([1])];
        let coords = sample_coords(&p, Some(7), 1);
        assert_eq!(coords.len(), 7);
        for t in 0..3 {
            assert!(coords.iter().any(|&(i, _)| i == t));
        }
    }
}
