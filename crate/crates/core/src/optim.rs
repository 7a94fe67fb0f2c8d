//! SGD with momentum and coupled weight decay, plus the step learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f32 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f32 = 1e-5;
pub const DEFAULT_BASE_LR: f32 = 0.1;
pub const DEFAULT_MILESTONES: [usize; 3] = [60, 120, 160];
pub const DEFAULT_LR_FACTOR: f32 = 0.2;

/// Optimizer state: one momentum buffer per parameter, in parameter order.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: Vec<Option<Tensor>>,
}

impl OptimState {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn buffer(&self, i: usize) -> Option<&Tensor> {
        self.buffers.get(i).and_then(Option::as_ref)
    }

    /// `v ← μ·v + g + λ·p`, then `p ← p − lr·v`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("sgd_step", "gradient count", params.len(), grads.len()));
        }
        if self.buffers.len() < params.len() {
            self.buffers.resize(params.len(), None);
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.dims() != g.dims() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("gradient {i}"),
                    format!("{:?}", p.dims()),
                    format!("{:?}", g.dims()),
                ));
            }
            let v = self.buffers[i].get_or_insert_with(|| Tensor::zeros(p.dims()));
            if v.dims() != p.dims() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("momentum buffer {i}"),
                    format!("{:?}", p.dims()),
                    format!("{:?}", v.dims()),
                ));
            }
            let (mu, wd, lr) = (self.momentum, self.weight_decay, self.lr);
            for ((pv, &gv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut().iter_mut())
            {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptimState) -> Result<()> {
    state.step(params, grads)
}

/// `base · factor^(number of milestones ≤ epoch)`.
pub fn lr_at_epoch(epoch: usize, base: f32, milestones: &[usize], factor: f32) -> f32 {
    let drops = milestones.iter().filter(|&&m| m <= epoch).count() as i32;
    (base as f64 * (factor as f64).powi(drops)) as f32
}

/// Rescales the default milestones proportionally to a shorter run.
pub fn scaled_milestones(epochs: usize) -> Vec<usize> {
    DEFAULT_MILESTONES
        .iter()
        .map(|&m| ((m * epochs) as f64 / 200.0).round() as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut s = OptimState::new(0.1, 0.9, 0.0);
        sgd_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_plain_gradient_descent() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::from_vec(vec![0.5, 0.25]);
        let mut s = OptimState::new(0.1, 0.9, 0.0);
        sgd_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-7);
        assert!((p.data()[1] + 2.025).abs() < 1e-7);
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = g, v2 = 0.9 g + g = 1.9 g; second update −lr·1.9·g, cumulative −lr·2.9·g
        let (lr, g0) = (0.1f32, 0.5f32);
        let mut p = Tensor::from_vec(vec![0.0]);
        let g = Tensor::from_vec(vec![g0]);
        let mut s = OptimState::new(lr, 0.9, 0.0);
        sgd_step(&mut [&mut p], &[&g], &mut s).unwrap();
        let after_one = p.item();
        sgd_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert!(((p.item() - after_one) - (-lr * 1.9 * g0)).abs() < 1e-7);
        assert!((p.item() - (-lr * 2.9 * g0)).abs() < 1e-7);
    }

    #[test]
    fn weight_decay_enters_before_momentum() {
        let mut p = Tensor::from_vec(vec![2.0]);
        let g = Tensor::from_vec(vec![0.0]);
        let mut s = OptimState::new(1.0, 0.9, 0.5);
        sgd_step(&mut [&mut p], &[&g], &mut s).unwrap();
        assert_eq!(p.item(), 1.0);
        assert_eq!(s.buffer(0).unwrap().item(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut s = OptimState::new(0.1, 0.9, 0.0);
        assert!(sgd_step(&mut [&mut p], &[&g], &mut s).is_err());
    }

    #[test]
    fn step_schedule() {
        let lr = |e| lr_at_epoch(e, 0.1, &DEFAULT_MILESTONES, 0.2);
        assert_eq!(lr(0), 0.1);
        assert_eq!(lr(59), 0.1);
        assert!((lr(60) - 0.02).abs() < 1e-8);
        assert!((lr(199) - 0.0008).abs() < 1e-9);
    }

    #[test]
    fn milestones_scale_with_run_length() {
        assert_eq!(scaled_milestones(200), vec![60, 120, 160]);
        assert_eq!(scaled_milestones(30), vec![9, 18, 24]);
    }
}
