use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

/// Adaptive-moment optimizer over any number of named parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments keyed by `group/name`.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn key(group: &str, name: &str) -> String {
        format!("{group}/{name}")
    }

    /// Applies one update. `grads` holds one entry per parameter of each
    /// group, in the group's order; `None` means the parameter got no
    /// gradient this step.
    pub fn step(&mut self, lr: f64, groups: &mut [(&str, &mut ParamSet, Vec<Option<Tensor>>)]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let sqrt_bc2 = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (group, params, grads) in groups.iter_mut() {
            if grads.len() != params.len() {
                return Err(Error::Shape(format!("{group}: gradient count differs from parameter count")));
            }
            for ((name, p), g) in params.iter_mut().zip(grads.iter()) {
                let Some(g) = g else { continue };
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!("{group}/{name}: gradient shape mismatch")));
                }
                let (m, v) = self
                    .moments
                    .entry(Self::key(group, name))
                    .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
                for (((w, &gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut().iter_mut())
                    .zip(v.data_mut().iter_mut())
                {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    *w -= step * *mi / (vi.sqrt() / sqrt_bc2 + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        let g = Tensor::from_vec(&[3], vec![0.5, -2.0, 0.0]).unwrap();
        let mut adam = Adam::new(0.5, 0.999);
        adam.step(0.1, &mut [("g", &mut p, vec![Some(g)])]).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-5);
        assert!((w[1] - 1.1).abs() < 1e-5);
        assert_eq!(w[2], 1.0);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[2], vec![3.0, -4.0]).unwrap()).unwrap();
        let mut adam = Adam::new(0.9, 0.999);
        for _ in 0..2000 {
            let g = p.get("w").unwrap().map(|w| 2.0 * w);
            adam.step(0.01, &mut [("g", &mut p, vec![Some(g)])]).unwrap();
        }
        assert!(p.get("w").unwrap().data().iter().all(|w| w.abs() < 1e-2));
    }
}
