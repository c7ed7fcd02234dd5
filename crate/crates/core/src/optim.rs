use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias-corrected moments. Moments are kept in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Completed update count.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &BTreeMap<String, Vec<f32>>,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.len() != g.len() {
                return Err(Error::Dimension {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut data = p.to_vec();
            for (k, (&gk, w)) in g.iter().zip(data.iter_mut()).enumerate() {
                let gk = gk as f64;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
            let shape = p.shape().to_vec();
            params.insert(name.clone(), Tensor::new(&shape, data)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(0.5f32));
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let grads = BTreeMap::from([("w".to_string(), vec![1.0f32])]);
        adam.step(&mut params, &grads).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps) = lr * (1 - eps) to first order
        let want = 0.5f64 - 1e-3 / (1.0 + 1e-8);
        let got = params.get("w").unwrap().data()[0] as f64;
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        assert_eq!(adam.steps(), 1);
        let (m, v) = adam.moments("w").unwrap();
        assert!((m[0] - 0.1).abs() < 1e-15 && (v[0] - 0.001).abs() < 1e-15);
    }
}
