use super::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar loss on a fresh tape from the bound `params` (in the
/// given order). Returns the maximum over every parameter entry of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
#[allow(clippy::needless_range_loop)]
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    ensure((1e-7..=1e-3).contains(&eps), || format!("grad_check: eps {eps} outside [1e-7, 1e-3]"))?;
    ensure(params.iter().all(Tensor::is_finite), || "grad_check: non-finite parameters".to_string())?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Contract("grad_check: loss is not finite".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    drop(tape);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for pi in 0..work.len() {
        for k in 0..work[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][k];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
