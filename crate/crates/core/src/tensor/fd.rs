//! Central finite-difference oracle for checking tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NdArray, Tape, Var};
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error between two gradient vectors:
/// `|a - b| / max(|a|, |b|, 1e-10)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` may return a var of any shape; it is contracted against a fixed
/// random projection to obtain a scalar. Only inputs flagged in `wrt` are
/// differentiated (the rest are recorded as constants). Returns the
/// worst relative error over the checked inputs.
pub fn check_gradients<F>(inputs: &[NdArray], wrt: &[bool], seed: u64, step: f64, f: F) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(x, &g)| tape.leaf(x.clone(), g))
        .collect();
    let out = f(&tape, &vars)?;
    let proj = NdArray::from_fn(&out.shape(), |_| rng.gen_range(-1.0..1.0));
    let scalar = out.mul(&tape.constant(proj.clone()))?.sum()?;
    scalar.backward()?;

    let eval = |xs: &[NdArray]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&t, &vs)?;
        let y = y.value();
        Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        if !wrt[i] {
            continue;
        }
        let analytic = var.grad().unwrap_or_else(|| NdArray::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}
