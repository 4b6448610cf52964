//! AdamW with decoupled weight decay.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state for an ordered list of parameter tensors.
pub struct AdamW<S> {
    cfg: AdamWConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u32,
}

impl<S: Scalar> AdamW<S> {
    pub fn new<'a>(cfg: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamW { cfg, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One update; `params[i]` pairs with `grads[i]` in construction order.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(
                "adamw",
                format!("{} params / {} grads for {} slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (ob1, ob2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
        let step = S::of(c.lr / bc1);
        let inv_bc2 = S::of(1.0 / bc2);
        let eps = S::of(c.eps);
        let decay = S::of(1.0 - c.lr * c.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            p.expect_same_shape(g, "adamw")?;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv = *pv * decay - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let k = S::of(max_norm / total);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = Tensor::<f64>::new(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::<f64>::new(&[2], vec![0.5, -3.0]).unwrap();
        let mut opt = AdamW::new(cfg, [&p]);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((p.data()[1] - (-1.0 + 2e-4)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut p = Tensor::<f64>::new(&[3], vec![2.0, -1.0, 0.5]).unwrap();
        let mut opt = AdamW::new(cfg, [&p]);
        for _ in 0..500 {
            let g = p.scale(2.0);
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.max_abs() < 1e-2);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::<f32>::new(&[2], vec![3.0, 4.0]).unwrap()];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-6);
        assert!((g[0].norm() - 1.0).abs() < 1e-6);
    }
}
