//! Adam with decoupled weight decay, global-norm gradient clipping, and the
//! warmup learning-rate schedule.

use crate::tensor::Tensor;

pub const PEAK_LR: f32 = 8e-5;

/// Linear warmup from zero to the peak rate, constant afterwards.
pub fn lr_schedule(step: u64, warmup_steps: u64) -> f32 {
    if warmup_steps == 0 || step >= warmup_steps {
        PEAK_LR
    } else {
        PEAK_LR * step as f32 / warmup_steps as f32
    }
}

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// One parameter group: the tensors it owns plus a learning-rate multiplier
/// relative to the scheduled base rate.
pub struct ParamGroup {
    pub params: Vec<Tensor>,
    pub lr_scale: f32,
}

pub struct AdamW {
    groups: Vec<ParamGroup>,
    slots: Vec<Vec<Slot>>,
    beta1: f32,
    beta2: f32,
    eps: f32,
    pub weight_decay: f32,
    pub max_norm: f32,
    t: u64,
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        let slots = groups
            .iter()
            .map(|g| {
                g.params
                    .iter()
                    .map(|p| Slot { m: vec![0.0; p.numel()], v: vec![0.0; p.numel()] })
                    .collect()
            })
            .collect();
        AdamW {
            groups,
            slots,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_norm: 1.0,
            t: 0,
        }
    }

    pub fn single(params: Vec<Tensor>) -> Self {
        Self::new(vec![ParamGroup { params, lr_scale: 1.0 }])
    }

    pub fn zero_grads(&self) {
        for g in &self.groups {
            for p in &g.params {
                p.zero_grad();
            }
        }
    }

    /// Euclidean norm of all gradients currently stored across every group.
    pub fn grad_norm(&self) -> f64 {
        let mut norm_sq = 0.0f64;
        for g in &self.groups {
            for p in &g.params {
                if let Some(grad) = p.grad() {
                    norm_sq += grad.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                }
            }
        }
        norm_sq.sqrt()
    }

    /// Applies one update from the gradients currently stored on the
    /// parameters. Clipping is joint: one norm over every group. Parameters
    /// that received no gradient are left untouched.
    pub fn step(&mut self, base_lr: f32) {
        let grads: Vec<Vec<Option<Vec<f32>>>> =
            self.groups.iter().map(|g| g.params.iter().map(|p| p.grad()).collect()).collect();
        let norm = self.grad_norm();
        let clip = if norm > self.max_norm as f64 { (self.max_norm as f64 / norm) as f32 } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (gi, group) in self.groups.iter().enumerate() {
            let lr = base_lr * group.lr_scale;
            for (pi, p) in group.params.iter().enumerate() {
                let Some(g) = &grads[gi][pi] else { continue };
                let slot = &mut self.slots[gi][pi];
                let mut x = p.to_vec();
                for j in 0..x.len() {
                    let gj = g[j] * clip;
                    slot.m[j] = self.beta1 * slot.m[j] + (1.0 - self.beta1) * gj;
                    slot.v[j] = self.beta2 * slot.v[j] + (1.0 - self.beta2) * gj * gj;
                    let mh = slot.m[j] / bc1;
                    let vh = slot.v[j] / bc2;
                    x[j] = x[j] * (1.0 - lr * self.weight_decay) - lr * mh / (vh.sqrt() + self.eps);
                }
                p.set_data(&x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_hits_zero_peak_and_plateau_exactly() {
        assert_eq!(lr_schedule(0, 500), 0.0);
        assert_eq!(lr_schedule(500, 500), PEAK_LR);
        assert_eq!(lr_schedule(1000, 500), PEAK_LR);
        assert!((lr_schedule(250, 500) - PEAK_LR / 2.0).abs() < 1e-12);
        assert_eq!(lr_schedule(0, 0), PEAK_LR);
    }

    #[test]
    fn first_step_matches_the_closed_form() {
        // At t=1 the bias corrections cancel the decay factors exactly, so
        // the update is lr * g / (|g| + eps) plus the decoupled decay.
        let p = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
        let loss = p.mul(&p).unwrap().sum_all();
        loss.backward().unwrap();
        let g = p.grad().unwrap();
        let mut opt = AdamW::single(vec![p.clone()]);
        opt.weight_decay = 0.1;
        opt.max_norm = 1e9;
        let lr = 0.01;
        opt.step(lr);
        let got = p.to_vec();
        for j in 0..2 {
            let x0 = [1.0f32, -2.0][j];
            let expect = x0 * (1.0 - lr * 0.1) - lr * g[j] / (g[j].abs() + 1e-8);
            assert!((got[j] - expect).abs() < 1e-6, "{} vs {expect}", got[j]);
        }
    }

    #[test]
    fn norm_clip_rescales_the_effective_gradients() {
        let a = Tensor::param(vec![0.0], &[1]).unwrap();
        let b = Tensor::param(vec![0.0], &[1]).unwrap();
        // gradients 3 and 4 -> group norm 5, clip factor 0.2
        a.mul(&a).unwrap().sum_all().scale(0.5).add(&a.scale(3.0).sum_all()).unwrap().backward().unwrap();
        b.scale(4.0).sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0]);
        let mut opt = AdamW::new(vec![ParamGroup { params: vec![a.clone(), b.clone()], lr_scale: 1.0 }]);
        opt.weight_decay = 0.0;
        let lr = 0.1;
        opt.step(lr);
        // after clipping both effective gradients, each update is
        // -lr * g_c / (|g_c| + eps), identical magnitude for both
        let ua = a.to_vec()[0];
        let ub = b.to_vec()[0];
        assert!((ua + lr).abs() < 1e-5, "{ua}");
        assert!((ub + lr).abs() < 1e-5, "{ub}");
    }

    #[test]
    fn clip_norm_spans_every_group() {
        let a = Tensor::param(vec![0.0], &[1]).unwrap();
        let b = Tensor::param(vec![0.0], &[1]).unwrap();
        a.scale(3.0).sum_all().backward().unwrap();
        b.scale(4.0).sum_all().backward().unwrap();
        let opt = AdamW::new(vec![
            ParamGroup { params: vec![a.clone()], lr_scale: 1.0 },
            ParamGroup { params: vec![b.clone()], lr_scale: 10.0 },
        ]);
        assert!((opt.grad_norm() - 5.0).abs() < 1e-9, "{}", opt.grad_norm());
    }

    #[test]
    fn lr_scale_separates_groups() {
        let fast = Tensor::param(vec![0.0], &[1]).unwrap();
        let slow = Tensor::param(vec![0.0], &[1]).unwrap();
        fast.scale(1.0).sum_all().backward().unwrap();
        slow.scale(1.0).sum_all().backward().unwrap();
        let mut opt = AdamW::new(vec![
            ParamGroup { params: vec![fast.clone()], lr_scale: 10.0 },
            ParamGroup { params: vec![slow.clone()], lr_scale: 0.1 },
        ]);
        opt.weight_decay = 0.0;
        opt.max_norm = 1e9;
        opt.step(0.01);
        let f = fast.to_vec()[0].abs();
        let s = slow.to_vec()[0].abs();
        assert!((f / s - 100.0).abs() < 1e-3, "ratio {}", f / s);
    }

    #[test]
    fn parameters_without_gradients_are_untouched() {
        let used = Tensor::param(vec![1.0], &[1]).unwrap();
        let unused = Tensor::param(vec![5.0], &[1]).unwrap();
        used.mul(&used).unwrap().sum_all().backward().unwrap();
        let mut opt = AdamW::new(vec![ParamGroup { params: vec![used.clone(), unused.clone()], lr_scale: 1.0 }]);
        opt.step(0.01);
        assert_eq!(unused.to_vec(), vec![5.0]);
        assert_ne!(used.to_vec(), vec![1.0]);
    }

    #[test]
    fn repeated_steps_descend_a_quadratic() {
        let p = Tensor::param(vec![3.0, -2.0, 0.5], &[3]).unwrap();
        let mut opt = AdamW::single(vec![p.clone()]);
        opt.weight_decay = 0.0;
        for _ in 0..400 {
            p.zero_grad();
            let loss = p.mul(&p).unwrap().sum_all();
            loss.backward().unwrap();
            opt.step(0.05);
        }
        let final_loss: f32 = p.to_vec().iter().map(|v| v * v).sum();
        assert!(final_loss < 1e-3, "loss {final_loss}");
    }
}
