//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |autodiff − fd| / max(1, |fd|)
    pub max_rel_error: f64,
    /// (parameter index, flat entry) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub per_param: Vec<f64>,
}

fn eval<F>(loss_fn: &F, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = loss_fn(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 || !v.data()[0].is_finite() {
        return Err(Error::NonFinite {
            what: format!("loss in gradient check ({:?})", v.data()),
        });
    }
    Ok((tape, vars, out))
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// with step `fd_step`. `loss_fn` must be deterministic (frozen noise).
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], fd_step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = eval(&loss_fn, params)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: vec![0.0; params.len()],
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + fd_step;
            let (tp, _, op) = eval(&loss_fn, &work)?;
            work[pi].data_mut()[k] = orig - fd_step;
            let (tm, _, om) = eval(&loss_fn, &work)?;
            work[pi].data_mut()[k] = orig;
            let fd = (tp.scalar_value(op) - tm.scalar_value(om)) / (2.0 * fd_step);
            let rel = (analytic.data()[k] - fd).abs() / fd.abs().max(1.0);
            if rel > report.per_param[pi] {
                report.per_param[pi] = rel;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl_is_exact() {
        let theta = Tensor::row(&[0.5, -1.5, 2.0, 3.25]);
        let r = grad_check(
            |t, p| {
                let sq = t.square(p[0])?;
                let s = t.sum(sq)?;
                Ok(t.scale(s, 0.5)?)
            },
            &[theta],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let theta = Tensor::row(&[1000.0]);
        let r = grad_check(
            |t, p| {
                let e = t.exp(p[0])?;
                Ok(t.sum(e)?)
            },
            &[theta],
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
