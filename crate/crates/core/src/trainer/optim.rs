//! Adaptive-moment optimizer and learning-rate schedule.

use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = shapes.into_iter().map(|len| (vec![0.0; len], vec![0.0; len])).unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every tensor in place, at learning rate `lr`.
    pub fn step(&mut self, params: &mut [Tensor<f64>], grads: &[Tensor<f64>], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Linear warm-up over the first `warmup_ratio` of steps, then linear decay to zero.
pub fn scheduled_lr(base: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let warmup = ((warmup_ratio * total as f64).ceil() as usize).max(1);
    let s = step + 1;
    if s <= warmup {
        base * s as f64 / warmup as f64
    } else {
        let remaining = (total - s) as f64 + 1.0;
        base * remaining / (total - warmup + 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_quadratic() {
        let target = [0.3, -0.2, 0.25, 0.0, -0.1];
        let mut params = vec![Tensor::zeros(vec![1, target.len()])];
        let mut opt = Adam::new(AdamConfig::default(), [target.len()]);
        let mut converged_at = None;
        for step in 0..2000 {
            // f(θ) = ‖θ − θ*‖², ∇f = 2(θ − θ*)
            let g: Vec<f64> = params[0]
                .data()
                .iter()
                .zip(&target)
                .map(|(p, t)| 2.0 * (p - t))
                .collect();
            opt.step(&mut params, &[Tensor::new(vec![1, target.len()], g).unwrap()], 1e-3);
            let err = params[0]
                .data()
                .iter()
                .zip(&target)
                .map(|(p, t)| (p - t).abs())
                .fold(0.0, f64::max);
            if err < 1e-6 && converged_at.is_none() {
                converged_at = Some(step);
            }
        }
        let err = params[0]
            .data()
            .iter()
            .zip(&target)
            .map(|(p, t)| (p - t).abs())
            .fold(0.0, f64::max);
        assert!(
            converged_at.is_some() && err < 1e-6,
            "final error {err}, converged at {converged_at:?}"
        );
    }

    #[test]
    fn schedule_shape() {
        let total = 100;
        let lrs: Vec<f64> = (0..total).map(|s| scheduled_lr(1.0, s, total, 0.05)).collect();
        assert_eq!(lrs[4], 1.0);
        assert!(lrs[..5].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[5..].windows(2).all(|w| w[0] > w[1]));
        assert!(lrs[99] > 0.0);
        assert_eq!(scheduled_lr(0.5, 0, 0, 0.05), 0.5);
    }
}
