//! Central finite-difference check of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` rebuilds the computation on a fresh tape from leaf handles for
/// `params` and returns the scalar output. The numeric side only ever runs
/// forward passes. Returns the maximum over all coordinates of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|&v| grads.wrt(v).expect("leaf requires grad"))
            .collect::<Vec<_>>()
    };

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_tight() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn linear_is_exact_to_rounding() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let s = t.scale(v[0], 3.0);
                Ok(t.sum(s))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
