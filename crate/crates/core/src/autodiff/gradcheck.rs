use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences. Returns `max |analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps)
}

/// Multi-input variant of [`grad_check`]; every input is perturbed in turn.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p)).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::Validation("grad_check requires a scalar-valued function".into()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Validation(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; points[pi].len()],
        };
        for j in 0..points[pi].len() {
            let orig = points[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
