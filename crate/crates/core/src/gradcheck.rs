//! Finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A scalar-valued function of one tensor, expressible at any precision.
pub trait Differentiable {
    fn eval<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var>;
}

/// Analytic gradient of `f` at `x` in precision `S`.
pub fn analytic_grad<S: Scalar, F: Differentiable>(f: &F, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = f.eval(&mut g, xv)?;
    g.value(out).check_finite("grad_check objective")?;
    g.backward(out)?;
    Ok(g.take_grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

fn eval_f64<F: Differentiable>(f: &F, x: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f.eval(&mut g, xv)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Five-point central difference of `f` along element `i`, always in 64-bit.
pub fn central_difference<F: Differentiable>(f: &F, x: &Tensor<f64>, i: usize, eps: f64) -> Result<f64> {
    let mut probe = x.clone();
    let x0 = x.data()[i];
    let mut at = |d: f64| -> Result<f64> {
        probe.data_mut()[i] = x0 + d;
        eval_f64(f, &probe)
    };
    let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
    Ok((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * eps))
}

/// `|a − d| / (|a| + |d| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Maximum relative error between the analytic gradient (in precision `S`)
/// and central differences over the listed elements of `x`.
pub fn grad_check_at<S: Scalar, F: Differentiable>(
    f: &F,
    x: &Tensor<S>,
    eps: f64,
    indices: &[usize],
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step {eps} must be positive")));
    }
    let analytic = analytic_grad(f, x)?;
    let x64 = x.cast::<f64>();
    let mut worst = 0.0f64;
    for &i in indices {
        let num = central_difference(f, &x64, i, eps)?;
        worst = worst.max(relative_error(analytic.data()[i].as_f64(), num));
    }
    Ok(worst)
}

/// [`grad_check_at`] over every element of `x`.
pub fn grad_check<S: Scalar, F: Differentiable>(f: &F, x: &Tensor<S>, eps: f64) -> Result<f64> {
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Sum;
    impl Differentiable for Sum {
        fn eval<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
            let n = g.value(x).numel();
            let ones = g.constant(Tensor::ones(&[1, n]));
            let flat = g.reshape(x, &[n, 1])?;
            let s = g.matmul(ones, flat, false, false)?;
            g.reshape(s, &[1])
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::<f64>::from_fn(&[7], |i| i as f64 * 0.3 - 1.0);
        let g = analytic_grad(&Sum, &x).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
        assert!(grad_check(&Sum, &x, 1e-3).unwrap() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f64>::ones(&[2]);
        assert!(grad_check(&Sum, &x, 0.0).is_err());
    }

    #[test]
    fn relative_error_formula() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-8);
    }
}
