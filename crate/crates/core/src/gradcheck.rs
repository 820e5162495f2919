//! Central finite-difference gradient checks.

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once; the error is the max over
/// every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| t.map(|_| 0.0))
        })
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item().ok_or_else(|| {
            TensorError::NonScalarLoss(g.value(out).shape().clone())
        })?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].len() {
            let orig = inputs[which].values()[i];
            probe[which].values_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[which].values_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[which].values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.values()[i];
            if !a.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(&[1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function() {
        let x = Tensor::vector(&[1.0, -4.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let z = g.scale(x, 0.0)?;
                let s = g.sum(z)?;
                g.add_scalar(s, 3.0)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
