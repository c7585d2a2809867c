use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{mismatch, ParamStore, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimState,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            state: OptimState {
                m: zeros(),
                v: zeros(),
                step: 0,
            },
        }
    }

    /// One update with learning rate `lr`; `grads` is aligned with the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<(), TensorError> {
        if grads.len() != store.len() || self.state.m.len() != store.len() {
            return Err(mismatch("adamw_step", &[store.len()], &[grads.len()]));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(mismatch("adamw_step", p.value.shape(), g.shape()));
            }
        }
        if !(lr >= 0.0) {
            return Err(TensorError::Domain {
                name: "lr",
                value: lr,
                domain: ">= 0",
            });
        }
        self.state.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((param, g), m), v) in store
            .iter_mut()
            .zip(grads)
            .zip(self.state.m.iter_mut())
            .zip(self.state.v.iter_mut())
        {
            let decay = if param.decay { weight_decay } else { 0.0 };
            let (pd, gd) = (param.value.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * pd[i]);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero
/// at `total`. Steps beyond `total` stay at zero.
pub fn lr_at(step: u64, warmup: u64, peak: f64, total: u64) -> Result<f64, TensorError> {
    if warmup == 0 || warmup >= total {
        return Err(TensorError::Domain {
            name: "warmup",
            value: warmup as f64,
            domain: "0 < warmup < total",
        });
    }
    if step <= warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    if step >= total {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("p", Tensor::new(vec![1], vec![value]).unwrap(), true);
        store
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut store = scalar_store(1.5);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..5 {
            opt.step(&mut store, &[Tensor::zeros(&[1])], 0.1).unwrap();
        }
        assert_eq!(store.get(store.find("p").unwrap()).data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut store, &[Tensor::full(&[1], 1.0)], 0.1).unwrap();
        let p = store.get(store.find("p").unwrap()).data()[0];
        assert!((p + 0.1).abs() < 1e-8, "{p}");
    }

    #[test]
    fn decoupled_decay_shrinks_toward_zero() {
        let mut store = scalar_store(2.0);
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
        );
        opt.step(&mut store, &[Tensor::zeros(&[1])], 0.1).unwrap();
        assert!((store.get(store.find("p").unwrap()).data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = scalar_store(0.0);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        assert!(matches!(
            opt.step(&mut store, &[Tensor::zeros(&[2])], 0.1),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(5, 10, 1.0, 100).unwrap(), 0.5);
        assert_eq!(lr_at(10, 10, 0.3, 100).unwrap(), 0.3);
        assert!((lr_at(55, 10, 2.0, 100).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(lr_at(100, 10, 2.0, 100).unwrap(), 0.0);
        assert_eq!(lr_at(0, 10, 2.0, 100).unwrap(), 0.0);
        assert!(lr_at(1, 0, 1.0, 100).is_err());
        assert!(lr_at(1, 100, 1.0, 100).is_err());
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut grads = vec![Tensor::full(&[4], 1.0)];
        let before = clip_global_norm(&mut grads, 1.0);
        assert_eq!(before, 2.0);
        assert!(grads[0].data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }
}
