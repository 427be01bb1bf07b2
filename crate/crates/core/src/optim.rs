//! Adam with decoupled weight decay.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.001 }
    }
}

/// First and second moments for every parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig, params: &ParamSet<F>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Array2::zeros(p.value.raw_dim())).collect::<Vec<_>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update. Missing gradients count as zero. Any non-finite gradient aborts the step
    /// before anything is modified.
    pub fn update(&mut self, params: &mut ParamSet<F>, grads: &[Option<Array2<F>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for ((_, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.raw_dim() != p.value.raw_dim() {
                    return Err(Error::Shape(format!("gradient of {} has shape {:?}", p.name, g.dim())));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = F::lit(c.learning_rate);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let bc1 = F::lit(1.0 - c.beta1.powi(t));
        let bc2 = F::lit(1.0 - c.beta2.powi(t));
        let eps = F::lit(c.eps);
        let decay = F::lit(c.learning_rate * c.weight_decay);
        let one = F::one();
        let kinds: Vec<_> = params.iter().map(|(id, p)| (id, p.kind)).collect();
        for (i, (id, kind)) in kinds.into_iter().enumerate() {
            let w = params.value_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if kind.decays() && c.weight_decay != 0.0 {
                w.mapv_inplace(|x| x - decay * x);
            }
            let Some(g) = &grads[i] else {
                // A missing gradient is a zero gradient.
                m.mapv_inplace(|x| x * b1);
                v.mapv_inplace(|x| x * b2);
                ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));
                continue;
            };
            ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use ndarray::array;

    fn set(kind: ParamKind) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("w", kind, array![[1.0, -2.0]]).unwrap();
        ps
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = set(ParamKind::Bias);
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, weight_decay: 0.5, ..Default::default() }, &ps);
        opt.update(&mut ps, &[Some(array![[3.0, -0.5]])]).unwrap();
        let w = &ps.iter().next().unwrap().1.value;
        // Bias-corrected first step is lr·g/(|g| + eps'); no decay on biases.
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_applies_to_weights_only() {
        let mut ps = set(ParamKind::Weight);
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, weight_decay: 0.5, ..Default::default() }, &ps);
        opt.update(&mut ps, &[Some(array![[0.0, 0.0]])]).unwrap();
        let w = &ps.iter().next().unwrap().1.value;
        assert!((w[[0, 0]] - 0.95).abs() < 1e-12);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = set(ParamKind::Weight);
        let before = ps.get("w").unwrap().clone();
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        let err = opt.update(&mut ps, &[Some(array![[f64::NAN, 0.0]])]).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(ps.get("w").unwrap(), &before);
        assert_eq!(opt.step, 0);
    }
}
