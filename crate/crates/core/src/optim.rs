//! Adam with bias correction and L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diff::Array;
use crate::error::{Error, Result};
use crate::params::Params;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam.eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// First and second moment buffers, one set per parameter name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops the buffers of every parameter whose name starts with `prefix`.
    pub fn forget(&mut self, prefix: &str) {
        self.state.retain(|k, _| !k.starts_with(prefix));
    }

    /// Steps every parameter that has a gradient in `grads`.
    ///
    /// All gradients are checked before anything moves, so a non-finite
    /// gradient leaves `params` and the buffers untouched.
    pub fn step(&mut self, params: &mut Params, grads: &[(String, Array)], lr: f64, weight_decay: f64, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
        }
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let n = p.len();
            let st = self.state.entry(name.clone()).or_default();
            if st.m.len() != n {
                *st = Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                };
            }
            st.t += 1;
            let c1 = 1.0 - cfg.beta1.powf(st.t as f64);
            let c2 = 1.0 - cfg.beta2.powf(st.t as f64);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] + weight_decay * *w;
                st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * gi;
                st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * gi * gi;
                if lr != 0.0 {
                    let m_hat = st.m[i] / c1;
                    let v_hat = st.v[i] / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Params {
        let mut p = Params::new();
        p.insert("w", Array::from_vec(vec![v]));
        p
    }

    fn grad(v: f64) -> Vec<(String, Array)> {
        vec![("w".to_string(), Array::from_vec(vec![v]))]
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig::default();
        let mut p = scalar(0.5);
        let mut opt = Adam::new();
        opt.step(&mut p, &grad(1.0), 0.1, 0.0, &cfg).unwrap();
        let want = 0.5 - 0.1 * 1.0 / (1.0 + cfg.eps);
        assert!((p.get("w").unwrap().item() - want).abs() < 1e-10);
    }

    #[test]
    fn second_step_matches_hand_computation() {
        let cfg = AdamConfig::default();
        let mut p = scalar(0.0);
        let mut opt = Adam::new();
        opt.step(&mut p, &grad(1.0), 0.01, 0.0, &cfg).unwrap();
        opt.step(&mut p, &grad(-2.0), 0.01, 0.0, &cfg).unwrap();
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let m = b1 * (1.0 - b1) + (1.0 - b1) * -2.0;
        let v = b2 * (1.0 - b2) + (1.0 - b2) * 4.0;
        let step2 = 0.01 * (m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + cfg.eps);
        let want = -0.01 / (1.0 + cfg.eps) - step2;
        assert!((p.get("w").unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar(-0.25);
        let before = p.clone();
        let mut opt = Adam::new();
        for _ in 0..5 {
            opt.step(&mut p, &grad(0.0), 0.1, 0.0, &AdamConfig::default()).unwrap();
        }
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn zero_learning_rate_is_bitwise_no_op() {
        let mut p = scalar(-0.0);
        let mut opt = Adam::new();
        opt.step(&mut p, &grad(3.0), 0.0, 0.1, &AdamConfig::default()).unwrap();
        assert!(p.bit_eq(&scalar(-0.0)));
    }

    #[test]
    fn weight_decay_alone_shrinks_monotonically() {
        let mut p = scalar(2.0);
        let mut opt = Adam::new();
        let mut prev = 2.0;
        for _ in 0..50 {
            opt.step(&mut p, &grad(0.0), 0.01, 0.1, &AdamConfig::default()).unwrap();
            let now = p.get("w").unwrap().item();
            assert!(now < prev && now > 0.0);
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut p = scalar(1.0);
        let mut opt = Adam::new();
        let err = opt.step(&mut p, &grad(f64::NAN), 0.1, 0.0, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert!(p.bit_eq(&scalar(1.0)));
        assert_eq!(opt, Adam::new());
    }

    #[test]
    fn forget_resets_buffers() {
        let mut p = scalar(1.0);
        p.insert("cls.weight", Array::from_vec(vec![1.0]));
        let mut opt = Adam::new();
        let g = vec![
            ("w".to_string(), Array::from_vec(vec![1.0])),
            ("cls.weight".to_string(), Array::from_vec(vec![1.0])),
        ];
        opt.step(&mut p, &g, 0.1, 0.0, &AdamConfig::default()).unwrap();
        opt.forget("cls.");
        assert_eq!(opt.state.len(), 1);
        assert!(opt.state.contains_key("w"));
    }
}
