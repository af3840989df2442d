use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adaptive-moment optimizer settings. Defaults follow the training protocol:
/// beta1 = 0.5, beta2 = 0.9, learning rate 0.0002, batch size 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-8,
            batch_size: 1,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        // zero is allowed: a frozen run must leave parameters bit-identical
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam over a fixed list of leaf parameters.
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    params: Vec<Tensor<T>>,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: Vec<Tensor<T>>) -> Self {
        let m = params.iter().map(|p| ArrayD::zeros(p.data().raw_dim())).collect();
        let v = params.iter().map(|p| ArrayD::zeros(p.data().raw_dim())).collect();
        Adam { cfg, params, m, v, t: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients and clears them.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self) {
        self.t += 1;
        let lr = T::from_f64(self.cfg.learning_rate);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.epsilon);
        let one = T::one();
        let bc1 = one - T::from_f64(self.cfg.beta1.powi(self.t as i32));
        let bc2 = one - T::from_f64(self.cfg.beta2.powi(self.t as i32));

        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.take_grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|mv, &gv| {
                *mv = b1 * *mv + (one - b1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|vv, &gv| {
                *vv = b2 * *vv + (one - b2) * gv * gv;
            });
            let mut data = p.to_array();
            ndarray::Zip::from(&mut data).and(&*m).and(&*v).for_each(|dv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *dv = *dv - lr * mhat / (vhat.sqrt() + eps);
            });
            p.set_data(data);
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Optimizer moment buffers, for checkpointing. Order matches the
    /// parameter list passed at construction.
    pub fn state(&self) -> (u64, &[ArrayD<T>], &[ArrayD<T>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<ArrayD<T>>, v: Vec<ArrayD<T>>) -> Result<()> {
        if m.len() != self.params.len() || v.len() != self.params.len() {
            return Err(Error::Checkpoint(
                "optimizer state length does not match parameter count".into(),
            ));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn adam_descends_quadratic() {
        // minimize (x - 3)^2
        let p = Tensor::param(arr1(&[0.0f64]).into_dyn());
        let mut opt = Adam::new(
            AdamConfig { learning_rate: 0.1, ..Default::default() },
            vec![p.clone()],
        );
        for _ in 0..500 {
            let loss = p.add_scalar(-3.0).mul(&p.add_scalar(-3.0)).mean();
            loss.backward();
            opt.step();
        }
        let x = p.to_array()[0];
        assert!((x - 3.0).abs() < 0.05, "got {x}");
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let p = Tensor::param(arr1(&[1.0f32, -2.0]).into_dyn());
        let before = p.to_array();
        let mut opt = Adam::new(
            AdamConfig { learning_rate: 1e-30, ..Default::default() },
            vec![p.clone()],
        );
        let loss = p.mul(&p).mean();
        loss.backward();
        opt.step();
        let after = p.to_array();
        // effectively-zero learning rate must not move parameters measurably
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-20);
        }
    }

    #[test]
    fn bad_config_rejected() {
        assert!(AdamConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { learning_rate: 0.0, ..Default::default() }.validate().is_ok());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
