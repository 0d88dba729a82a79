//! AdamW with decoupled weight decay and a reduce-on-plateau schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamWState {
    pub fn new(params: &Params) -> Self {
        let zeros: BTreeMap<String, Tensor> = params.iter().map(|(k, t)| (k.clone(), t.zeros_like())).collect();
        AdamWState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update of every parameter in `params`.
///
/// `grads` must carry exactly the parameter names (missing entries are an
/// error; use zeros for untouched arrays). Decay is applied to the
/// parameter directly: `p ← p − lr·(m̂/(√v̂+ε) + λ·p)`.
pub fn adamw_step(
    params: &mut Params,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::invalid(
            "adamw_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid("adamw_step", format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        match (state.m.get(name), state.v.get(name)) {
            (Some(m), Some(v)) if m.shape() == p.shape() && v.shape() == p.shape() => {}
            _ => return Err(Error::invalid("adamw_step", format!("optimizer state missing `{name}`"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, f64::from(t));
    let bc2 = 1.0 - libm::pow(cfg.beta2, f64::from(t));
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (libm::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * *p);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: u32,
    /// Minimum decrease that counts as an improvement.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 5,
            threshold: 1e-8,
            min_lr: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: u32,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        PlateauState {
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch. The rate halves once more than `patience` epochs in a
    /// row fail to improve on the best loss.
    pub fn step(&mut self, val_loss: f64, cfg: &PlateauConfig) -> Result<f64> {
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                what: format!("validation loss {val_loss}"),
            });
        }
        if val_loss < self.best - cfg.threshold {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > cfg.patience {
                self.lr = (self.lr * cfg.factor).max(cfg.min_lr);
                self.bad_epochs = 0;
            }
        }
        Ok(self.lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, vals: &[f64]) -> Params {
        let mut p = Params::new();
        p.insert(name, Tensor::vector(vals).unwrap());
        p
    }

    fn grads(name: &str, vals: &[f64]) -> BTreeMap<String, Tensor> {
        let mut g = BTreeMap::new();
        g.insert(String::from(name), Tensor::vector(vals).unwrap());
        g
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut p = one("w", &[1.0, -2.0]);
        let mut s = AdamWState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &grads("w", &[0.0, 0.0]), &mut s, 1e-3, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut p = one("w", &[0.0, 0.0, 0.0]);
        let mut s = AdamWState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let g = [0.5, -2.0, 1e-3];
        adamw_step(&mut p, &grads("w", &g), &mut s, 1e-2, &cfg).unwrap();
        for (x, g) in p.get("w").unwrap().data().iter().zip(g) {
            let expect = -1e-2 * g / (g.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-15, "{x} vs {expect}");
        }
    }

    #[test]
    fn decoupled_decay() {
        let mut p = one("w", &[2.0]);
        let mut s = AdamWState::new(&p);
        adamw_step(&mut p, &grads("w", &[0.0]), &mut s, 0.1, &AdamWConfig::default()).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn mismatches_are_errors() {
        let mut p = one("w", &[1.0]);
        let mut s = AdamWState::new(&p);
        let cfg = AdamWConfig::default();
        assert!(adamw_step(&mut p, &grads("x", &[0.0]), &mut s, 0.1, &cfg).is_err());
        assert!(adamw_step(&mut p, &grads("w", &[0.0, 1.0]), &mut s, 0.1, &cfg).is_err());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn plateau_examples() {
        let cfg = PlateauConfig::default();
        let mut s = PlateauState::new(1e-4);
        for l in [5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.25] {
            assert_eq!(s.step(l, &cfg).unwrap(), 1e-4);
        }
        let mut s = PlateauState::new(1e-4);
        s.step(1.0, &cfg).unwrap();
        for _ in 0..5 {
            assert_eq!(s.step(1.0, &cfg).unwrap(), 1e-4);
        }
        assert_eq!(s.step(1.0, &cfg).unwrap(), 5e-5);
        for _ in 0..1000 {
            s.step(1.0, &cfg).unwrap();
        }
        assert_eq!(s.lr, 1e-7);
        assert!(s.step(f64::NAN, &cfg).is_err());
    }
}
