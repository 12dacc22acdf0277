use alloc::format;
use alloc::vec::Vec;

use super::{NodeId, ParamId, Tape};
use crate::error::GradError;
use crate::math;
use crate::tensor::Tensor;

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over all parameter elements of
    /// `|analytic - numeric| / max(1, |numeric|)`.
    pub max_relative_error: f64,
    /// Parameter and flat element index where the maximum occurred.
    pub worst: (ParamId, usize),
    pub evaluations: usize,
}

/// Compares the tape's gradient of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`
/// (registered as `ParamId(i)`) and must return a scalar node. Stop-gradient
/// outputs are held at their unperturbed values while differencing, so the
/// oracle checks the same surrogate objective the backward pass
/// differentiates.
pub fn finite_diff_check<F, E>(f: F, params: &[Tensor], epsilon: f64) -> Result<GradCheck, E>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, E>,
    E: From<GradError>,
{
    if !(epsilon > 0.0) {
        return Err(GradError::Contract(format!("epsilon must be positive, got {epsilon}")).into());
    }
    let mut base = Tape::new();
    let leaves = register(&mut base, params);
    let loss = f(&mut base, &leaves)?;
    let value = base.value(loss).item();
    if !value.is_finite() {
        return Err(GradError::NonFinite {
            context: "finite_diff_check base evaluation".into(),
            value,
        }
        .into());
    }
    let analytic = base.backward(loss)?;
    let frozen = base.stop_gradient_values();

    let eval = |perturbed: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::with_frozen_stops(frozen.clone());
        let leaves = register(&mut tape, perturbed);
        let loss = f(&mut tape, &leaves)?;
        let v = tape.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GradError::NonFinite {
                context: "finite_diff_check perturbed evaluation".into(),
                value: v,
            }
            .into())
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut result = GradCheck {
        max_relative_error: 0.0,
        worst: (ParamId(0), 0),
        evaluations: 1,
    };
    for (p, tensor) in params.iter().enumerate() {
        let grad = analytic.get(ParamId(p)).expect("every registered param has a gradient");
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            work[p].data_mut()[i] = orig + epsilon;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - epsilon;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            result.evaluations += 2;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = math::abs(grad.data()[i] - numeric) / f64::max(1.0, math::abs(numeric));
            if err > result.max_relative_error {
                result.max_relative_error = err;
                result.worst = (ParamId(p), i);
            }
        }
    }
    Ok(result)
}

fn register(tape: &mut Tape, params: &[Tensor]) -> Vec<NodeId> {
    params
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(ParamId(i), t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let check = finite_diff_check::<_, GradError>(
            |tape, p| {
                let sq = tape.mul(p[0], p[0])?;
                tape.sum(sq)
            },
            &[Tensor::from_vec(alloc::vec![3.0])],
            1e-5,
        )
        .unwrap();
        assert!(check.max_relative_error < 1e-9, "{check:?}");
    }

    #[test]
    fn non_finite_function_is_reported() {
        let res = finite_diff_check::<_, GradError>(
            |tape, p| {
                let e = tape.exp(p[0])?;
                tape.sum(e)
            },
            &[Tensor::from_vec(alloc::vec![1000.0])],
            1e-5,
        );
        assert!(matches!(res, Err(GradError::NonFinite { .. })));
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let res = finite_diff_check::<_, GradError>(
            |tape, p| tape.sum(p[0]),
            &[Tensor::from_vec(alloc::vec![1.0])],
            0.0,
        );
        assert!(res.is_err());
    }
}
