//! Named parameter sets, AdamW with decoupled weight decay, and the
//! linear-warmup + cosine-decay learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, VarId};

/// One named parameter with its freeze flag.
#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Map from dot-separated parameter path to tensor. Iteration order is the
/// sorted name order, which fixes checkpoint layout and update order.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, Param { tensor, frozen: false });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Set the freeze flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen_by_prefix(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for p in self.entries.values_mut() {
            p.frozen = frozen;
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }
}

/// Parameter leaves inserted into one graph: name -> node handle. Frozen
/// parameters become constant leaves that never receive gradient.
#[derive(Debug)]
pub struct BoundParams {
    map: BTreeMap<String, VarId>,
}

impl BoundParams {
    pub fn bind(graph: &mut Graph, params: &ParameterSet) -> Self {
        let mut map = BTreeMap::new();
        for (name, p) in params.iter() {
            let t = p.tensor.clone().with_requires_grad(!p.frozen);
            map.insert(name.clone(), graph.leaf(t));
        }
        BoundParams { map }
    }

    pub fn get(&self, name: &str) -> Result<VarId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} not bound")))
    }

    /// Collect gradients for every non-frozen bound parameter that received one.
    pub fn gradients(&self, graph: &Graph) -> BTreeMap<String, Vec<f32>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.map {
            if let Some(g) = graph.grad(id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

/// AdamW optimizer state: per-parameter first/second moments plus the
/// shared step counter and hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
    #[serde(skip)]
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamWState {
    pub fn new(weight_decay: f32) -> Self {
        AdamWState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            moments: BTreeMap::new(),
        }
    }

    /// One optimizer step over all non-frozen parameters. `grads` must carry
    /// an entry for every non-frozen parameter; frozen entries are never
    /// touched, and moments update with bias correction before the decoupled
    /// weight-decay term is applied.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f32,
    ) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let g = grads.get(name).ok_or_else(|| {
                Error::Contract(format!("missing gradient for non-frozen parameter {name}"))
            })?;
            if g.len() != p.tensor.numel() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    g.len(),
                    p.tensor.numel()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let data = p.tensor.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

/// One row of a training loss curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: u64,
    pub lr: f32,
    pub loss: f32,
}

/// Write a loss curve as `step,lr,loss` CSV.
pub fn write_metrics_csv(path: &std::path::Path, rows: &[StepMetric]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "step,lr,loss").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(w, "{},{},{}", r.step, r.lr, r.loss).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Linear warmup to `base_lr` over `warmup_steps`, then cosine decay to 0
/// at `total_steps`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CosineWarmupSchedule {
    pub base_lr: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineWarmupSchedule {
    pub fn new(base_lr: f32, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                warmup_steps, total_steps
            )));
        }
        Ok(CosineWarmupSchedule {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> f32 {
        if step > self.total_steps {
            log::warn!(
                "lr_at called with step {} past total_steps {}; clamping to 0",
                step,
                self.total_steps
            );
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base_lr * step as f32 / self.warmup_steps as f32;
        }
        let decay_span = self.total_steps - self.warmup_steps;
        if decay_span == 0 {
            return if step == self.total_steps { 0.0 } else { self.base_lr };
        }
        let progress = (step - self.warmup_steps) as f64 / decay_span as f64;
        (self.base_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
    }
}
