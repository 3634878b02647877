//! Central finite-difference check of tape gradients, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Gradients whose largest entry is below this are compared absolutely;
/// an identically-zero gradient (e.g. a bias feeding batch norm) otherwise
/// turns rounding noise into a relative error of 1.
pub const SCALE_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest error over all inputs, each input's error being
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|, SCALE_FLOOR)`.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub evaluations: usize,
}

/// Compares reverse-mode gradients of `op` against central differences.
///
/// `op` receives a fresh tape and one leaf per input and may return a tensor
/// of any shape; it is reduced to a scalar by a fixed random projection so
/// every output element contributes.
pub fn finite_diff_check<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut projection: Option<Tensor<f64>> = None;
    let mut eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), with_grad)).collect();
        let y = op(&mut tape, &vars)?;
        let proj = projection
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                Tensor::from_fn(tape.shape(y), |_| rng.random_range(-1.0..1.0))
            })
            .clone();
        let loss = tape.dot(y, proj)?;
        let value = tape.value(loss).data()[0];
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.take_grad(v)).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut evaluations = 1;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let grad = analytic[k].clone().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = grad.max_abs();
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig;
            evaluations += 2;
            let numeric = (plus - minus) / (2.0 * eps);
            scale = scale.max(numeric.abs());
            max_diff = max_diff.max((numeric - grad.data()[i]).abs());
        }
        per_input.push(max_diff / scale.max(SCALE_FLOOR));
    }
    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        evaluations,
    })
}
