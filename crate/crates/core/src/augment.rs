//! Stochastic views of feature rows: additive Gaussian noise, a random global
//! scale, and independent coordinate dropout.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            mask_prob: 0.1,
            scale_lo: 0.8,
            scale_hi: 1.2,
            seed: 0,
        }
    }
}

/// Which of the three per-step views a draw realizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum ViewDraw {
    /// Student view of the anchor.
    StudentAnchor = 1,
    /// Teacher (key) view of the anchor.
    TeacherAnchor = 2,
    /// Student view of the positive.
    StudentPositive = 3,
}

impl AugmentationPolicy {
    /// The policy that returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_sigma >= 0.0
            && self.noise_sigma.is_finite()
            && (0.0..=1.0).contains(&self.mask_prob)
            && self.scale_lo > 0.0
            && self.scale_lo <= self.scale_hi
            && self.scale_hi.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("augmentation policy {self:?}")))
        }
    }

    /// `x' = s·(x + ε)` with coordinates dropped to zero with `mask_prob`.
    ///
    /// The draw is a pure function of `(seed, instance, step, draw)`.
    pub fn sample_view(&self, x: &[f64], instance: u64, step: u64, draw: u64) -> Vec<f64> {
        let mut rng = keyed(
            self.seed,
            Stream::Augment,
            instance,
            step.wrapping_mul(8).wrapping_add(draw),
        );
        let s = if self.scale_lo == self.scale_hi {
            self.scale_lo
        } else {
            rng.random_range(self.scale_lo..=self.scale_hi)
        };
        let noise = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
        x.iter()
            .map(|&v| {
                let eps = if self.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                let masked = self.mask_prob > 0.0 && rng.random::<f64>() < self.mask_prob;
                if masked {
                    0.0
                } else {
                    s * (v + eps)
                }
            })
            .collect()
    }

    /// `(t1(x_a), t2(x_a), t3(x_p))` for one anchor slot at `step`.
    pub fn sample_three_views(
        &self,
        anchor: &[f64],
        positive: &[f64],
        instance: u64,
        step: u64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            self.sample_view(anchor, instance, step, ViewDraw::StudentAnchor as u64),
            self.sample_view(anchor, instance, step, ViewDraw::TeacherAnchor as u64),
            self.sample_view(positive, instance, step, ViewDraw::StudentPositive as u64),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const X: [f64; 5] = [0.5, -1.0, 2.0, 0.0, 3.5];

    #[test]
    fn identity_policy_is_identity() {
        assert_eq!(AugmentationPolicy::identity().sample_view(&X, 3, 7, 1), X.to_vec());
    }

    #[test]
    fn full_mask_zeroes_row() {
        let p = AugmentationPolicy {
            mask_prob: 1.0,
            ..AugmentationPolicy::default()
        };
        assert!(p.sample_view(&X, 0, 0, 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn draws_are_deterministic() {
        let p = AugmentationPolicy::default();
        assert_eq!(p.sample_view(&X, 4, 9, 2), p.sample_view(&X, 4, 9, 2));
        assert_ne!(p.sample_view(&X, 4, 9, 2), p.sample_view(&X, 4, 9, 3));
        assert_ne!(p.sample_view(&X, 4, 9, 2), p.sample_view(&X, 5, 9, 2));
    }

    #[test]
    fn three_views_identity() {
        let xp = [1.0, 1.0, 1.0, 1.0, 1.0];
        let id = AugmentationPolicy::identity();
        let (a, b, c) = id.sample_three_views(&X, &xp, 0, 0);
        assert_eq!((a, b, c), (X.to_vec(), X.to_vec(), xp.to_vec()));
        let (a2, b2, c2) = id.sample_three_views(&xp, &X, 0, 0);
        assert_eq!((a2, b2), (xp.to_vec(), xp.to_vec()));
        assert_eq!(c2, X.to_vec());
    }

    #[test]
    fn noisy_views_differ() {
        let p = AugmentationPolicy {
            noise_sigma: 0.1,
            mask_prob: 0.0,
            ..AugmentationPolicy::default()
        };
        for step in 0..100 {
            let (a, b, _) = p.sample_three_views(&X, &X, 1, step);
            assert_ne!(a, b);
        }
    }

    #[test]
    fn view_mean_matches_expectation() {
        // E[x'] = E[s]·(1−p)·x; check each coordinate within 3σ over 10^4 draws.
        let p = AugmentationPolicy {
            noise_sigma: 0.3,
            mask_prob: 0.25,
            scale_lo: 0.5,
            scale_hi: 1.5,
            seed: 12,
        };
        let n = 10_000;
        let mut sum = vec![0.0; X.len()];
        let mut sq = vec![0.0; X.len()];
        for d in 0..n {
            let v = p.sample_view(&X, 0, d, 1);
            for j in 0..X.len() {
                sum[j] += v[j];
                sq[j] += v[j] * v[j];
            }
        }
        for j in 0..X.len() {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let expected = 1.0 * 0.75 * X[j];
            assert!(
                (mean - expected).abs() < 3.0 * (var / n as f64).sqrt() + 1e-12,
                "coord {j}: {mean} vs {expected}"
            );
        }
    }

    #[test]
    fn validates_ranges() {
        assert!(AugmentationPolicy::default().validate().is_ok());
        let bad = AugmentationPolicy {
            scale_lo: 2.0,
            scale_hi: 1.0,
            ..AugmentationPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationPolicy {
            mask_prob: 1.5,
            ..AugmentationPolicy::default()
        };
        assert!(bad.validate().is_err());
    }
}
