use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GradMap;
use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub bias_correction: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            bias_correction: true,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// First and second moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW state. Buffers are stored in f32; each element update is evaluated
/// in f64 and rounded once.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    /// Number of completed steps.
    pub t: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }

    pub fn moments_iter(&self) -> impl Iterator<Item = (&String, &Moments)> {
        self.moments.iter()
    }

    /// Overwrites the buffers of one parameter (tests, checkpoint loading).
    pub fn set_moments(&mut self, name: impl Into<String>, m: Tensor, v: Tensor) -> Result<()> {
        if m.shape() != v.shape() {
            return Err(shape_err("adamw", format!("m {:?} vs v {:?}", m.shape(), v.shape())));
        }
        if v.data().iter().any(|&x| x < 0.0) {
            return Err(Error::Input("second moment must be non-negative".into()));
        }
        self.moments.insert(name.into(), Moments { m, v });
        Ok(())
    }

    /// One AdamW step over every parameter in `params`. `grads` must hold an
    /// entry for each of them; zeros have to be explicit.
    pub fn adamw_step(&mut self, params: &mut [(String, &mut Tensor)], grads: &GradMap) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(shape_err(
                    "adamw",
                    format!("gradient {:?} for `{name}` with shape {:?}", g.shape(), p.shape()),
                ));
            }
        }

        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1, c.beta2);
        let (corr1, corr2) = if c.bias_correction {
            (1.0 - b1.powi(self.t as i32), 1.0 - b2.powi(self.t as i32))
        } else {
            (1.0, 1.0)
        };
        let decay = c.lr * c.weight_decay;

        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let st = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let m_new = b1 * *m as f64 + (1.0 - b1) * g;
                let v_new = b2 * *v as f64 + (1.0 - b2) * g * g;
                let mut th = *theta as f64;
                th -= decay * th;
                th -= c.lr * (m_new / corr1) / ((v_new / corr2).sqrt() + c.eps);
                *theta = th as f32;
                *m = m_new as f32;
                *v = v_new as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn cfg(bias_correction: bool, weight_decay: f64) -> AdamWConfig {
        AdamWConfig {
            bias_correction,
            weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn step(state: &mut OptimizerState, theta: &mut Tensor, g: Tensor) {
        let grads = GradMap::from([("p".to_string(), g)]);
        state.adamw_step(&mut [("p".to_string(), theta)], &grads).unwrap();
    }

    #[test]
    fn cold_momentum_zero_gradient_only_decays() {
        let mut st = OptimizerState::new(cfg(true, 0.01));
        let mut theta = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        step(&mut st, &mut theta, Tensor::zeros(&[2]));
        let f = 1.0 - 1e-4 * 0.01;
        assert_eq!(theta.data(), &[(1.0f64 * f) as f32, (-2.0f64 * f) as f32]);
    }

    #[test]
    fn zero_everything_is_exact_noop() {
        let mut st = OptimizerState::new(cfg(true, 0.0));
        let mut theta = Tensor::new(vec![3], vec![0.3, -7.0, 1e-20]).unwrap();
        let before = theta.clone();
        step(&mut st, &mut theta, Tensor::zeros(&[3]));
        assert_eq!(theta, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn implicit_update_closed_form() {
        let mut st = OptimizerState::new(cfg(false, 0.0));
        st.set_moments("p", Tensor::scalar(0.1), Tensor::scalar(0.01)).unwrap();
        let mut theta = Tensor::scalar(0.0);
        step(&mut st, &mut theta, Tensor::scalar(0.0));
        let want = -1e-4 * 0.09 / (0.00999f64.sqrt() + 1e-8);
        assert!((theta.data()[0] as f64 - want).abs() < 1e-10);
        assert!((want + 9.0045e-5).abs() < 1e-8);
    }

    #[test]
    fn momentum_decays_geometrically_under_zero_gradients() {
        let mut st = OptimizerState::new(cfg(true, 0.0));
        let mut theta = Tensor::zeros(&[4]);
        step(&mut st, &mut theta, Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        let m0 = st.moments("p").unwrap().m.clone();
        for s in 1..=20 {
            step(&mut st, &mut theta, Tensor::zeros(&[4]));
            let m = &st.moments("p").unwrap().m;
            for (a, b) in m.data().iter().zip(m0.data()) {
                let want = *b as f64 * 0.9f64.powi(s);
                assert!((*a as f64 - want).abs() <= want.abs() * 1e-5);
            }
        }
    }

    #[test]
    fn matches_hand_rolled_trace() {
        // Scalar θ = 0.5, g = 1 for three steps, lr 1e-3, wd 0.01, bias correction on.
        // Frozen from a standalone evaluation of the textbook AdamW recurrences.
        let want = [0.498_995_000_01, 0.497_990_010_07, 0.496_985_030_18];
        let mut st = OptimizerState::new(AdamWConfig {
            lr: 1e-3,
            ..cfg(true, 0.01)
        });
        let mut theta = Tensor::scalar(0.5);
        for w in want {
            step(&mut st, &mut theta, Tensor::scalar(1.0));
            assert!((theta.data()[0] as f64 - w).abs() < 3e-7, "{} vs {w}", theta.data()[0]);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut st = OptimizerState::new(AdamWConfig::default());
        let mut theta = Tensor::scalar(1.0);
        let err = st.adamw_step(&mut [("p".to_string(), &mut theta)], &GradMap::new());
        assert!(matches!(err, Err(Error::MissingGradient(n)) if n == "p"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut rng = stream_rng(3, 0);
        let mut st = OptimizerState::new(AdamWConfig::default());
        let mut theta = Tensor::zeros(&[16]);
        for _ in 0..50 {
            let g = Tensor::new(vec![16], (0..16).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap();
            step(&mut st, &mut theta, g);
            assert!(st.moments("p").unwrap().v.data().iter().all(|&v| v >= 0.0));
        }
    }
}
