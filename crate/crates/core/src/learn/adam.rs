//! Adam with global-norm clipping.

use crate::error::{Error, Result};
use crate::policy::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Gradient ascent, for log-likelihood and expected reward.
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<P: ParamSet> {
    pub m: P,
    pub v: P,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// What one update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global norm before clipping.
    pub norm: f64,
    /// Factor the gradient was multiplied by (1 when not clipped).
    pub scale: f64,
}

impl<P: ParamSet> Adam<P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Clips `grads` to `clip_norm` (if positive) and applies one Adam step.
    /// Non-finite gradients leave parameters and moments untouched.
    pub fn update(
        &mut self,
        params: &mut P,
        grads: &P,
        lr: f64,
        clip_norm: f64,
        objective: Objective,
    ) -> Result<StepInfo> {
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
        let norm = grads.global_norm();
        let scale = if clip_norm > 0.0 && norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let sign = match objective {
            Objective::Maximize => 1.0,
            Objective::Minimize => -1.0,
        };
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let revision = params.revision();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] += sign * lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        params.set_revision(revision + 1);
        Ok(StepInfo { norm, scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::tensor::Tensor;

    #[derive(Debug, Clone, PartialEq)]
    struct Scalar {
        x: Tensor,
        rev: u64,
    }

    impl ParamSet for Scalar {
        fn tensors(&self) -> Vec<(String, &Tensor)> {
            vec![("x".into(), &self.x)]
        }
        fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("x".into(), &mut self.x)]
        }
        fn revision(&self) -> u64 {
            self.rev
        }
        fn set_revision(&mut self, revision: u64) {
            self.rev = revision;
        }
    }

    fn scalar(v: &[f64]) -> Scalar {
        Scalar {
            x: Tensor::from_vec(&[v.len()], v.to_vec()).unwrap(),
            rev: 0,
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = scalar(&[1.5, -2.0]);
        let before = p.clone();
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &scalar(&[0.0, 0.0]), 0.1, 5.0, Objective::Minimize)
            .unwrap();
        assert_eq!(p.x, before.x);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn clipping_halves_norm_ten() {
        let mut p = scalar(&[0.0, 0.0]);
        let mut adam = Adam::new(&p);
        let info = adam
            .update(&mut p, &scalar(&[6.0, 8.0]), 0.1, 5.0, Objective::Minimize)
            .unwrap();
        assert_eq!(info.norm, 10.0);
        assert_eq!(info.scale, 0.5);
        assert!((adam.m.x.data()[0] - 0.1 * 3.0).abs() < 1e-15);
        assert!((adam.m.x.data()[1] - 0.1 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = scalar(&[1.0]);
        let mut adam = Adam::new(&p);
        let err = adam.update(&mut p, &scalar(&[f64::NAN]), 0.1, 5.0, Objective::Minimize);
        assert!(matches!(err, Err(Error::NonFiniteGradient(_))));
        assert_eq!(p.x.data(), &[1.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn quadratic_converges() {
        // minimize (x - 3)^2
        let mut p = scalar(&[0.0]);
        let mut adam = Adam::new(&p);
        for step in 0..10_000 {
            let x = p.x.data()[0];
            let lr = if step < 5_000 { 0.01 } else { 0.001 };
            adam.update(
                &mut p,
                &scalar(&[2.0 * (x - 3.0)]),
                lr,
                0.0,
                Objective::Minimize,
            )
            .unwrap();
        }
        assert!((p.x.data()[0] - 3.0).abs() < 1e-6, "{}", p.x.data()[0]);
        assert_eq!(p.rev, 10_000);
    }
}
