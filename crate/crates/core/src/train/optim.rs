use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `base_lr · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (PI * t).cos())
}

/// Zero velocity buffers shaped like `params`.
pub fn zero_velocity<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Vec<Tensor> {
    params.into_iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect()
}

/// `v ← μ·v + g + wd·θ; θ ← θ − lr·v`.
///
/// Nothing is modified if any gradient is non-finite or any shape disagrees.
pub fn sgd_momentum_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Dimension(format!(
                "tensor {i}: parameter {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        if let Some(index) = g.values().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { tensor: i, index });
        }
    }
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, gv), vv) in p.values_mut().iter_mut().zip(g.values()).zip(v.values_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.03), 0.03);
        assert!(cosine_lr(100, 100, 0.03).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.03) - 0.015).abs() < 1e-15);
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = Tensor::matrix(1, 2, vec![1.0, -2.0]);
        let g = Tensor::matrix(1, 2, vec![0.5, 0.25]);
        let mut v = zero_velocity([&p]);
        sgd_momentum_step([&mut p], &[g], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.values(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn velocity_decays_geometrically_without_gradient() {
        let mut p = Tensor::scalar(0.0);
        let mut v = vec![Tensor::scalar(1.0)];
        for k in 1..=10 {
            sgd_momentum_step([&mut p], &[Tensor::scalar(0.0)], &mut v, 0.1, 0.9, 0.0).unwrap();
            assert!((v[0].item() - 0.9f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // Independent scalar recurrence as the oracle.
        let (mut theta, mut vel) = (1.0f64, 0.0f64);
        let mut p = Tensor::scalar(1.0);
        let mut v = zero_velocity([&p]);
        for _ in 0..500 {
            let g = Tensor::scalar(p.item());
            sgd_momentum_step([&mut p], &[g], &mut v, 0.1, 0.9, 0.0).unwrap();
            vel = 0.9 * vel + theta;
            theta -= 0.1 * vel;
        }
        assert_eq!(p.item(), theta);
        assert!(p.item().abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_gradients_without_touching_params() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let mut v = zero_velocity([&a, &b]);
        let err = sgd_momentum_step(
            [&mut a, &mut b],
            &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)],
            &mut v,
            0.1,
            0.9,
            0.0,
        );
        assert!(matches!(err, Err(Error::NonFiniteGradient { tensor: 1, index: 0 })));
        assert_eq!((a.item(), b.item()), (1.0, 2.0));
        let err = sgd_momentum_step([&mut a], &[Tensor::zeros(vec![2])], &mut v[..1], 0.1, 0.9, 0.0);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
