use serde::{Deserialize, Serialize};

use super::{CheckpointRecord, ParamStore, Result, Tensor, TensorError};

/// Learning-rate multiplier as a function of the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up followed by cosine decay to `min_factor * lr`.
    Cosine {
        warmup_steps: u64,
        total_steps: u64,
        min_factor: f64,
    },
}

impl LrSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine {
                warmup_steps,
                total_steps,
                min_factor,
            } => {
                if step < warmup_steps {
                    return (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total_steps.saturating_sub(warmup_steps).max(1);
                let p = ((step - warmup_steps) as f64 / span as f64).min(1.0);
                min_factor + (1.0 - min_factor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Adam with decoupled weight decay, global-norm clipping and a schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub grad_norm: f64,
    pub lr: f64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || store.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Ok(Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.schedule.factor(self.step)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<StepStats> {
        if grads.len() != store.len() {
            return Err(TensorError::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (g, p) in grads.iter().zip(store.values()) {
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFinite("adamw_step gradient"));
            }
        }
        let mut grads = grads.to_vec();
        let grad_norm = clip_gradients(&mut grads, self.config.clip_norm);

        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (param, grad)) in store.values_mut().iter_mut().zip(&grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(StepStats { grad_norm, lr })
    }

    /// Moments and step counter as checkpoint records under `prefix`.
    pub fn to_records(&self, store: &ParamStore, prefix: &str) -> Vec<CheckpointRecord> {
        let mut out = Vec::with_capacity(2 * store.len() + 1);
        for id in store.ids() {
            let shape = store.get(id).shape().to_vec();
            for (tag, buf) in [("m", &self.first[id.0]), ("v", &self.second[id.0])] {
                out.push(CheckpointRecord {
                    name: format!("{prefix}{tag}/{}", store.name(id)),
                    tensor: Tensor::new(shape.clone(), buf.clone()).expect("moment shape"),
                });
            }
        }
        out.push(CheckpointRecord {
            name: format!("{prefix}step"),
            tensor: Tensor::scalar(self.step as f64),
        });
        out
    }

    pub fn load_records(&mut self, store: &ParamStore, records: &[CheckpointRecord], prefix: &str) -> Result<()> {
        let find = |name: String| {
            records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| TensorError::Invalid(format!("checkpoint lacks {name}")))
        };
        for id in store.ids() {
            let numel = store.get(id).numel();
            for (tag, buf) in [("m", &mut self.first[id.0]), ("v", &mut self.second[id.0])] {
                let rec = find(format!("{prefix}{tag}/{}", store.name(id)))?;
                if rec.tensor.numel() != numel {
                    return Err(TensorError::Invalid(format!("moment size for {}", store.name(id))));
                }
                buf.copy_from_slice(rec.tensor.data());
            }
        }
        self.step = find(format!("{prefix}step"))?.tensor.item() as u64;
        Ok(())
    }
}
