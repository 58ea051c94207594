//! Dense tensors, a reverse-mode tape, and a finite-difference gradient checker.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::{matmul, Precision, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("empty input vector")]
    Empty,
    #[error("target index {target} out of range for {len} classes")]
    TargetOutOfRange { target: usize, len: usize },
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
}

/// Numerically stabilized softmax of a logit vector.
pub fn softmax<T: Real>(logits: &[T]) -> Result<Vec<T>, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::Empty);
    }
    Ok(tape::softmax_slice(logits))
}

/// Negative log-likelihood of `target`, with the probability clamped at
/// [`PROB_FLOOR`].
pub fn nll<T: Real>(prob: &[T], target: usize) -> Result<T, NumericsError> {
    if prob.is_empty() {
        return Err(NumericsError::Empty);
    }
    let p = prob.get(target).ok_or(NumericsError::TargetOutOfRange {
        target,
        len: prob.len(),
    })?;
    Ok(-p.max(T::lit(PROB_FLOOR)).ln())
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// Analytic and finite-difference values at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Below this magnitude gradients are compared absolutely: exact zeros
/// (biases a softmax cannot see) meet finite-difference roundoff here.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Compares tape gradients against central finite differences for every
/// scalar in `params`.
///
/// `loss` builds a scalar loss on the given tape from parameter leaves that
/// it receives in the same order as `params`. It must be a pure function of
/// the parameter values (freeze any dropout masks beforehand).
pub fn check_gradients<F>(
    params: &mut [Tensor<f64>],
    eps: f64,
    mut loss: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut eval = |params: &[Tensor<f64>]| -> (Tape<f64>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.clone()))
            .collect();
        let out = loss(&mut tape, &vars);
        (tape, out)
    };

    let (tape, out) = eval(params);
    let base = tape.scalar(out);
    if !base.is_finite() {
        return Err(NumericsError::NonFiniteLoss(base));
    }
    let grads = tape.backward(out);
    let analytic: Vec<Option<Tensor<f64>>> = (0..params.len()).map(|i| grads.param(i)).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + eps;
            let (t, o) = eval(params);
            let plus = t.scalar(o);
            params[p].data_mut()[i] = orig - eps;
            let (t, o) = eval(params);
            let minus = t.scalar(o);
            params[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericsError::NonFiniteLoss(if plus.is_finite() { minus } else { plus }));
            }
            let fd = (plus - minus) / (2.0 * eps);
            let g = analytic[p].as_ref().map_or(0.0, |t| t.data()[i]);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(GRAD_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((p, i));
                report.worst_values = (g, fd);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0f64, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[2f64.ln(), 0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.25).abs() < 1e-15);
        assert!((p[2] - 0.25).abs() < 1e-15);
        assert_eq!(softmax::<f64>(&[]), Err(NumericsError::Empty));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1e4f64, -1e4, 0.0, 1e4]).unwrap();
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nll_examples() {
        assert_eq!(nll(&[1.0f64, 0.0], 0).unwrap(), 0.0);
        assert!((nll(&[0.5f64, 0.5], 1).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((nll(&[0.25f64, 0.75], 0).unwrap() - 1.386_294_361_119_890_6).abs() < 1e-12);
        assert!((nll(&[0.0f64, 1.0], 0).unwrap() - (1e12f64).ln()).abs() < 1e-9);
        assert!(matches!(
            nll(&[1.0f64], 3),
            Err(NumericsError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn gradcheck_square() {
        let mut params = vec![Tensor::new(vec![1], vec![3.0])];
        let mut tape = Tape::new();
        let x = tape.param(0, params[0].clone());
        let y = tape.matmul(x, x);
        let s = tape.sum(y);
        assert_eq!(tape.backward(s).param(0).unwrap().data()[0], 6.0);
        let report = check_gradients(&mut params, 1e-5, |tape, v| {
            let y = tape.matmul(v[0], v[0]);
            tape.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn gradcheck_rejects_non_finite() {
        let mut params = vec![Tensor::new(vec![1], vec![0.0])];
        let err = check_gradients(&mut params, 1e-5, |tape, v| {
            let s = tape.scale(v[0], f64::INFINITY);
            tape.sum(s)
        });
        assert!(matches!(err, Err(NumericsError::NonFiniteLoss(_))));
    }
}
