//! Named parameter store with Adam moments and an EMA shadow per entry.
//!
//! Entries keep their insertion order, which fixes both the update order
//! (bit-for-bit reproducibility) and the serialization layout.

use crate::error::{BootError, Result};
use crate::tensorcore::tape::{Gradients, NodeId, Tape};
use crate::tensorcore::tensor::Tensor;
use std::collections::BTreeMap;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// EMA shadow, updated only by `ema_update`, never by gradient steps.
    pub shadow: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
    /// Number of optimizer steps applied so far; drives Adam bias correction.
    pub step: u64,
}

/// Handle tying a `ParamSet` to the leaf nodes it occupies on a tape.
pub struct TapeBinding {
    ids: Vec<(String, NodeId, usize)>,
}

impl TapeBinding {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.ids
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, id, _)| *id)
            .ok_or_else(|| BootError::contract(format!("no parameter named {name} on tape")))
    }

    /// Collects gradients for every bound parameter; parameters the loss
    /// never touched come back as zeros.
    pub fn grads(&self, gradients: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.ids
            .iter()
            .map(|(name, id, len)| (name.clone(), gradients.dense(*id, *len)))
            .collect()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|p| p.name == name) {
            return Err(BootError::contract(format!("duplicate parameter {name}")));
        }
        let n = value.len();
        self.entries.push(Param {
            shadow: value.data().to_vec(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            name,
            value,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
            .ok_or_else(|| BootError::contract(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
            .ok_or_else(|| BootError::contract(format!("no parameter named {name}")))
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn assert_finite(&self) -> Result<()> {
        for p in &self.entries {
            if !p.value.is_finite() {
                return Err(BootError::numeric(format!(
                    "parameter {} contains non-finite entries",
                    p.name
                )));
            }
        }
        Ok(())
    }

    /// Inserts every parameter as a tape leaf, returning the binding used to
    /// look nodes up by name and to read gradients back.
    pub fn bind(&self, tape: &mut Tape) -> TapeBinding {
        let ids = self
            .entries
            .iter()
            .map(|p| (p.name.clone(), tape.leaf(p.value.clone()), p.value.len()))
            .collect();
        TapeBinding { ids }
    }

    /// One AdamW update over all entries. Weight decay is decoupled: it
    /// scales the parameter directly and never enters the moments.
    pub fn adamw_step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for p in &self.entries {
            let g = grads
                .get(&p.name)
                .ok_or_else(|| BootError::contract(format!("missing gradient for {}", p.name)))?;
            if g.len() != p.value.len() {
                return Err(BootError::shape(
                    format!("adamw_step gradient for {}", p.name),
                    format!("{}", p.value.len()),
                    format!("{}", g.len()),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(BootError::numeric(format!(
                    "non-finite gradient for parameter {}",
                    p.name
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for p in &mut self.entries {
            let g = &grads[&p.name];
            let data = p.value.data_mut();
            for i in 0..g.len() {
                p.m[i] = ADAM_BETA1 * p.m[i] + (1.0 - ADAM_BETA1) * g[i];
                p.v[i] = ADAM_BETA2 * p.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * data[i]);
            }
        }
        Ok(())
    }

    /// shadow <- decay * shadow + (1 - decay) * value, for decay in [0, 1).
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(BootError::domain(format!(
                "ema decay must lie in [0, 1), got {decay}"
            )));
        }
        for p in &mut self.entries {
            for (s, v) in p.shadow.iter_mut().zip(p.value.data()) {
                *s = decay * *s + (1.0 - decay) * v;
            }
        }
        Ok(())
    }

    /// Swaps in another set whose names and shapes match entry for entry;
    /// used for EMA adoption and checkpoint restore.
    pub fn replace_with(&mut self, incoming: ParamSet) -> Result<()> {
        if self.entries.len() != incoming.entries.len() {
            return Err(BootError::shape(
                "replace_with",
                format!("{} parameters", self.entries.len()),
                format!("{}", incoming.entries.len()),
            ));
        }
        for (cur, inc) in self.entries.iter().zip(&incoming.entries) {
            if cur.name != inc.name {
                return Err(BootError::contract(format!(
                    "parameter order mismatch: {} vs {}",
                    cur.name, inc.name
                )));
            }
            if cur.value.shape() != inc.value.shape() {
                return Err(BootError::shape(
                    format!("parameter {}", cur.name),
                    format!("{:?}", cur.value.shape()),
                    format!("{:?}", inc.value.shape()),
                ));
            }
        }
        *self = incoming;
        Ok(())
    }

    /// Copy of this set with the EMA shadow promoted to the live values.
    pub fn ema_snapshot(&self) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|p| Param {
                name: p.name.clone(),
                value: Tensor::new(p.value.shape().to_vec(), p.shadow.clone())
                    .expect("shadow length tracks value length"),
                m: vec![0.0; p.shadow.len()],
                v: vec![0.0; p.shadow.len()],
                shadow: p.shadow.clone(),
            })
            .collect();
        ParamSet {
            entries,
            step: self.step,
        }
    }
}
