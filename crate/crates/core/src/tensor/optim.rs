use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, TResult, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the joint gradient to at most this L2 norm before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.98, eps: 1e-6, weight_decay: 0.2, max_grad_norm: None }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrix-shaped
/// parameters only; gains, biases and single embeddings are not shrunk.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> TResult<Self> {
        let ok = (0.0..1.0).contains(&cfg.beta1)
            && (0.0..1.0).contains(&cfg.beta2)
            && cfg.eps > 0.0
            && cfg.weight_decay >= 0.0
            && cfg.max_grad_norm.is_none_or(|n| n > 0.0);
        if !ok {
            return Err(TensorError::Invalid { op: "adamw", message: format!("bad hyperparameters {cfg:?}") });
        }
        Ok(AdamW { cfg, step: 0, moments: BTreeMap::new() })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> TResult<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TensorError::Invalid { op: "adamw", message: format!("learning rate must be positive, got {lr}") });
        }
        let gs = grads.params();
        let mut clip = 1.0;
        if let Some(maxn) = self.cfg.max_grad_norm {
            let n = gs.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
            if n > maxn {
                clip = maxn / n;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (id, g) in gs {
            if !store.is_trainable(id) {
                continue;
            }
            let decay = if store.value(id).shape().len() >= 2 { self.cfg.weight_decay } else { 0.0 };
            let p = store.value_mut(id).data_mut();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * decay * p[i];
                p[i] -= lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps, then half-cosine decay to zero at
/// `total`. `step` counts from zero.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v), true).unwrap();
        (s, id)
    }

    fn grads_of(store: &ParamStore, id: ParamId, f: impl Fn(crate::tensor::Var<'_>) -> crate::tensor::Var<'_>) -> Gradients {
        let tape = Tape::new();
        let p = tape.param(store, id);
        let loss = f(p);
        tape.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = scalar_store(1.5);
        let g = grads_of(&s, id, |p| p.scale(0.0).unwrap());
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        opt.step(&mut s, &g, 0.1).unwrap();
        assert_eq!(s.value(id).item(), 1.5);
    }

    #[test]
    fn first_step_descends() {
        let (mut s, id) = scalar_store(1.0);
        let g = grads_of(&s, id, |p| p);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        opt.step(&mut s, &g, 0.1).unwrap();
        assert!(s.value(id).item() < 1.0);
    }

    #[test]
    fn quadratic_bowl_loss_decreases_every_step() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap(), true).unwrap();
        let loss = |s: &ParamStore| s.value(id).data().iter().map(|v| v * v).sum::<f64>();
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        let mut prev = loss(&s);
        for _ in 0..5 {
            let g = grads_of(&s, id, |p| p.mul(p).unwrap().sum().unwrap());
            opt.step(&mut s, &g, 0.05).unwrap();
            let now = loss(&s);
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn rejects_non_positive_lr_and_skips_frozen() {
        let (mut s, id) = scalar_store(1.0);
        let g = grads_of(&s, id, |p| p);
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        assert!(opt.step(&mut s, &g, 0.0).is_err());
        s.set_trainable(id, false);
        opt.step(&mut s, &g, 0.1).unwrap();
        assert_eq!(s.value(id).item(), 1.0);
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(cosine_lr(1.0, 0, 10, 0), 1.0);
        assert!((cosine_lr(1.0, 5, 10, 0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 10, 0).abs() < 1e-12);
        assert_eq!(cosine_lr(2.0, 0, 10, 2), 1.0);
    }
}
