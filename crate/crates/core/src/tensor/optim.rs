use super::{ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 weight added to every gradient as `l2 · param`.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 1e-5,
        }
    }
}

/// First/second moment buffers per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<T: Scalar>(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update over the supplied gradients.
    ///
    /// Frozen parameters (no `requires_grad`) are skipped. A non-finite
    /// gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Vec<f32>)]) -> Result<()> {
        for (id, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch: 0,
                    batch: 0,
                    what: "gradient",
                    param: store.name(*id).to_string(),
                });
            }
            if self.first[id.0].len() != g.len() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    axis: 0,
                    expected: self.first[id.0].len(),
                    got: g.len(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads {
            if !store.trainable(*id) {
                continue;
            }
            let p = store.get_mut(*id).data_mut();
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            for i in 0..p.len() {
                let gi = g[i] as f64 + c.l2 * p[i] as f64;
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p[i] = (p[i] as f64 - c.lr * mhat / (vhat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::full(vec![1], v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        st.step(&mut s, &[(ParamId(0), vec![0.0])]).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[0.0]);
    }

    #[test]
    fn one_step_closed_form() {
        let mut s = store(0.0);
        let mut st = AdamState::new(&s, AdamConfig { l2: 0.0, ..Default::default() });
        st.step(&mut s, &[(ParamId(0), vec![1.0])]).unwrap();
        let p = s.get(ParamId(0)).data()[0];
        assert!((p + 1e-3).abs() < 1e-9, "{p}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut s = store(0.3);
            let mut st = AdamState::new(&s, AdamConfig::default());
            for k in 0..5 {
                st.step(&mut s, &[(ParamId(0), vec![0.1 * k as f32 - 0.2])]).unwrap();
            }
            s.get(ParamId(0)).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut s = store(1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let err = st.step(&mut s, &[(ParamId(0), vec![f32::NAN])]).unwrap_err();
        assert!(matches!(err, Error::Divergence { ref param, .. } if param == "p"));
        assert_eq!(s.get(ParamId(0)).data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = store(1.0);
        s.set_trainable("p", false);
        let mut st = AdamState::new(&s, AdamConfig::default());
        st.step(&mut s, &[(ParamId(0), vec![1.0])]).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[1.0]);
    }
}
