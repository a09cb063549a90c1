//! First-order optimizers and early stopping.
//!
//! All updates are *ascent* steps: the training loop maximizes the ELBO and
//! hands the optimizer gradients of the objective itself, never of its
//! negation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamax,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            "adamax" => Some(OptimizerKind::Adamax),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adamax => "adamax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Number of steps taken so far.
    pub t: u64,
    /// First moments (empty for SGD).
    pub m: Vec<Tensor>,
    /// Second moments for Adam, infinity norms for Adamax.
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let (m, v) = match config.kind {
            OptimizerKind::Sgd => (vec![], vec![]),
            _ => (zeros(), zeros()),
        };
        OptimizerState { config, t: 0, m, v }
    }

    /// Applies one ascent step in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::InvalidArgument(format!(
                    "gradient {i} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        match self.config.kind {
            OptimizerKind::Sgd => sgd_step(self.config.lr, params, grads),
            OptimizerKind::Adam => self.adam_step(params, grads),
            OptimizerKind::Adamax => self.adamax_step(params, grads),
        }
        Ok(())
    }

    fn adam_step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] += c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }

    fn adamax_step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        let c = self.config;
        self.t += 1;
        let lr_t = c.lr / (1.0 - c.beta1.powi(self.t as i32));
        for ((p, g), (m, u)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, g, m, u) = (p.data_mut(), g.data(), m.data_mut(), u.data_mut());
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                u[k] = (c.beta2 * u[k]).max(g[k].abs());
                if u[k] > 0.0 {
                    p[k] += lr_t * m[k] / u[k];
                }
            }
        }
    }
}

/// `θ ← θ + α g`
pub fn sgd_step(lr: f64, params: &mut [Tensor], grads: &[Tensor]) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (pk, gk) in p.data_mut().iter_mut().zip(g.data()) {
            *pk += lr * gk;
        }
    }
}

/// True once the best held-out value (higher is better) is `patience` or
/// more evaluations old.
pub fn early_stop_check(holdout_history: &[f64], patience: usize) -> bool {
    let Some(first) = holdout_history.first() else {
        return false;
    };
    let mut best = *first;
    let mut best_at = 0;
    for (i, &v) in holdout_history.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            best_at = i;
        }
    }
    holdout_history.len() - 1 - best_at >= patience
}

pub const DEFAULT_PATIENCE: usize = 10;

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: OptimizerKind, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            lr,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn sgd_arithmetic_and_fixed_point() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = OptimizerState::new(cfg(OptimizerKind::Sgd, 0.1), &p);
        s.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
        assert!((p[0].data()[0] - 1.2).abs() < 1e-15);
        s.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert!((p[0].data()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_steps_equal_summed_step() {
        let g1 = Tensor::row(&[0.5, -1.0]);
        let g2 = Tensor::row(&[0.25, 2.0]);
        let mut a = vec![Tensor::row(&[1.0, 1.0])];
        let mut b = a.clone();
        let mut sa = OptimizerState::new(cfg(OptimizerKind::Sgd, 0.1), &a);
        sa.step(&mut a, &[g1.clone()]).unwrap();
        sa.step(&mut a, &[g2.clone()]).unwrap();
        let mut sb = OptimizerState::new(cfg(OptimizerKind::Sgd, 0.1), &b);
        sb.step(&mut b, &[g1.add(&g2).unwrap()]).unwrap();
        for (x, y) in a[0].data().iter().zip(b[0].data()) {
            assert!((x - y).abs() < 1e-15);
        }
        // Adam does not have this property
        let mut c = vec![Tensor::row(&[1.0, 1.0])];
        let mut d = c.clone();
        let mut sc = OptimizerState::new(cfg(OptimizerKind::Adam, 0.1), &c);
        sc.step(&mut c, &[g1.clone()]).unwrap();
        sc.step(&mut c, &[g2.clone()]).unwrap();
        let mut sd = OptimizerState::new(cfg(OptimizerKind::Adam, 0.1), &d);
        sd.step(&mut d, &[g1.add(&g2).unwrap()]).unwrap();
        assert!((c[0].data()[0] - d[0].data()[0]).abs() > 1e-3);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = vec![Tensor::row(&[0.0, 0.0, 0.0])];
        let mut s = OptimizerState::new(cfg(OptimizerKind::Adam, 0.01), &p);
        s.step(&mut p, &[Tensor::row(&[3.0, -0.002, 50.0])]).unwrap();
        for (v, sign) in p[0].data().iter().zip([1.0, -1.0, 1.0]) {
            assert!((v - 0.01 * sign).abs() < 1e-7, "{v}");
        }
    }

    #[test]
    fn adam_is_invariant_to_gradient_scale() {
        let g = Tensor::row(&[0.3, -1.7, 0.05]);
        let mut a = vec![Tensor::row(&[1.0, 2.0, 3.0])];
        let mut b = a.clone();
        let mut sa = OptimizerState::new(cfg(OptimizerKind::Adam, 0.01), &a);
        let mut sb = OptimizerState::new(cfg(OptimizerKind::Adam, 0.01), &b);
        sa.step(&mut a, &[g.clone()]).unwrap();
        sb.step(&mut b, &[g.scale(10.0)]).unwrap();
        for (x, y) in a[0].data().iter().zip(b[0].data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Adamax] {
            let mut p = vec![Tensor::row(&[1.0, -2.0])];
            let mut s = OptimizerState::new(cfg(kind, 0.1), &p);
            for _ in 0..100 {
                s.step(&mut p, &[Tensor::zeros(&[1, 2])]).unwrap();
            }
            assert_eq!(p[0].data(), &[1.0, -2.0]);
        }
    }

    fn bowl_grad(p: &Tensor, target: &[f64]) -> Tensor {
        // gradient of −½‖θ − target‖²
        Tensor::row(&p.data().iter().zip(target).map(|(a, b)| b - a).collect::<Vec<_>>())
    }

    #[test]
    fn quadratic_bowl_convergence() {
        let target = [1.5, -0.5, 2.0];
        let mut p = vec![Tensor::row(&[0.0; 3])];
        let mut s = OptimizerState::new(cfg(OptimizerKind::Sgd, 0.1), &p);
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let g = bowl_grad(&p[0], &target);
            let dist = g.l2_norm_sq();
            assert!(dist <= last);
            last = dist;
            s.step(&mut p, &[g]).unwrap();
        }
        assert!(last < 1e-12);

        let mut p = vec![Tensor::row(&[0.0; 3])];
        let mut s = OptimizerState::new(cfg(OptimizerKind::Adam, 0.05), &p);
        for _ in 0..5000 {
            let g = bowl_grad(&p[0], &target);
            s.step(&mut p, &[g]).unwrap();
        }
        for (v, t) in p[0].data().iter().zip(target) {
            assert!((v - t).abs() < 1e-6, "{v} vs {t}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::row(&[0.0; 3])];
        let mut s = OptimizerState::new(cfg(OptimizerKind::Adam, 0.05), &p);
        assert!(s.step(&mut p, &[Tensor::row(&[0.0; 2])]).is_err());
    }

    #[test]
    fn early_stopping() {
        assert!(!early_stop_check(&[1.0, 2.0, 3.0, 4.0], 2));
        assert!(early_stop_check(&[1.0; 11], 10));
        assert!(!early_stop_check(&[1.0; 10], 10));
        let mut h = vec![5.0, 1.0, 1.0, 1.0];
        assert!(early_stop_check(&h, 3));
        h.push(6.0);
        assert!(!early_stop_check(&h, 3));
    }
}
