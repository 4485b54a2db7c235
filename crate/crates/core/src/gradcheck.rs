//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every adjoint it is used to verify.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Relative error `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function with respect to every entry of `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Builds `f` on a fresh tape whose leaves are `inputs`, differentiates
/// the scalar it returns, and compares every input's adjoint to central
/// differences. Returns the worst relative error across inputs.
pub fn check_gradient<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars).expect("forward succeeds");
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars).expect("forward succeeds");
    let grads = tape.backward(out).expect("scalar output");

    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[idx])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = numeric_gradient(input.values(), FD_STEP, |probe| {
            let mut vals = inputs.to_vec();
            vals[idx] = Tensor::new(input.shape().to_vec(), probe.to_vec()).expect("same shape");
            eval(&vals)
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub fn random_tensor<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor<T> {
    let vals = (0..rows * cols)
        .map(|_| T::of(rng.random_range(-scale..scale)))
        .collect();
    Tensor::matrix(rows, cols, vals).expect("shape matches")
}
