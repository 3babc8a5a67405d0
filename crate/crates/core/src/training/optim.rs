use crate::tensor::{Float, Tensor};

use super::TrainConfig;

/// Adam with bias correction. Moment buffers are keyed by position in the
/// parameter slice, so callers must pass parameters in a stable order.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates every parameter that requires a gradient and holds one.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.take_grad() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.is_empty() {
                *m = vec![0.0; g.len()];
                *v = vec![0.0; g.len()];
            }
            for (j, w) in p.values_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as Float;
            }
            p.set_grad(g);
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: Float) -> Float {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum();
    let norm = sq.sqrt() as Float;
    if norm > max_norm {
        let k = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(mut g) = p.take_grad() {
                g.iter_mut().for_each(|x| *x *= k);
                p.set_grad(g);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            ..TrainConfig::pretrain_default()
        }
    }

    #[test]
    fn quadratic_matches_reference_recurrence() {
        let mut w = Tensor::from_vec(&[1], vec![0.0]).unwrap().with_requires_grad(true);
        let mut adam = Adam::new(&cfg(0.1));
        let (mut rw, mut rm, mut rv) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * (w.values()[0] as f64 - 3.0);
            w.set_grad(vec![g as Float]);
            adam.step(&mut [&mut w]);
            w.zero_grad();

            let rg = 2.0 * (rw - 3.0);
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mh = rm / (1.0 - 0.9f64.powi(t));
            let vh = rv / (1.0 - 0.999f64.powi(t));
            rw -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((w.values()[0] as f64 - rw).abs() < 1e-6);
        assert!((w.values()[0] as f64 - 3.0).abs() < 1e-2, "{}", w.values()[0]);
    }

    #[test]
    fn zero_and_missing_grads_leave_params() {
        let mut a = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap().with_requires_grad(true);
        let mut b = Tensor::from_vec(&[2], vec![5.0, 6.0]).unwrap().with_requires_grad(true);
        a.set_grad(vec![0.0, 0.0]);
        let mut adam = Adam::new(&cfg(0.5));
        adam.step(&mut [&mut a, &mut b]);
        assert_eq!(a.values(), &[1.0, -1.0]);
        assert_eq!(b.values(), &[5.0, 6.0]);
    }

    #[test]
    fn frozen_params_ignore_stale_grads() {
        let mut f = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        f.set_grad(vec![10.0]);
        let mut adam = Adam::new(&cfg(0.5));
        adam.step(&mut [&mut f]);
        assert_eq!(f.values(), &[2.0]);
    }

    #[test]
    fn clipping_caps_joint_norm() {
        let mut a = Tensor::zeros(&[1]).with_requires_grad(true);
        let mut b = Tensor::zeros(&[1]).with_requires_grad(true);
        a.set_grad(vec![3.0]);
        b.set_grad(vec![4.0]);
        let before = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert!((before - 5.0).abs() < 1e-6);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-6);
        assert!((b.grad().unwrap()[0] - 0.8).abs() < 1e-6);
        assert!((clip_grad_norm(&mut [&mut a, &mut b], 10.0) - 1.0).abs() < 1e-6);
    }
}
