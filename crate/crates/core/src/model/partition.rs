use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{AcnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Backbone,
    Adapter,
    Copy,
}

impl ParamKind {
    pub fn of(name: &str) -> Self {
        if name.starts_with("adapter.") {
            ParamKind::Adapter
        } else if name.starts_with("copy.") {
            ParamKind::Copy
        } else {
            ParamKind::Backbone
        }
    }
}

/// Which parameters an optimizer may touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamPartition {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
}

impl ParamPartition {
    fn by_kind(model: &Model, train: impl Fn(ParamKind) -> bool) -> Self {
        let mut p = Self {
            frozen: BTreeSet::new(),
            trainable: BTreeSet::new(),
        };
        for (name, _) in model.params() {
            if train(ParamKind::of(&name)) {
                p.trainable.insert(name);
            } else {
                p.frozen.insert(name);
            }
        }
        p
    }

    /// Backbone frozen; adapters and copy head trainable.
    pub fn adapter_finetune(model: &Model) -> Self {
        Self::by_kind(model, |k| k != ParamKind::Backbone)
    }

    /// Backbone only; adapters and copy head frozen.
    pub fn backbone_only(model: &Model) -> Self {
        Self::by_kind(model, |k| k == ParamKind::Backbone)
    }

    /// Everything trainable.
    pub fn full(model: &Model) -> Self {
        Self::by_kind(model, |_| true)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    /// Checks disjointness and exhaustiveness against `model`.
    pub fn validate(&self, model: &Model) -> Result<()> {
        if let Some(n) = self.frozen.intersection(&self.trainable).next() {
            return Err(AcnError::Config(format!("parameter {n} is both frozen and trainable")));
        }
        let names: BTreeSet<String> = model.params().into_iter().map(|(n, _)| n).collect();
        if let Some(n) = names
            .iter()
            .find(|n| !self.frozen.contains(*n) && !self.trainable.contains(*n))
        {
            return Err(AcnError::Config(format!("parameter {n} is in neither set")));
        }
        if let Some(n) = self
            .frozen
            .iter()
            .chain(&self.trainable)
            .find(|n| !names.contains(*n))
        {
            return Err(AcnError::Config(format!("unknown parameter {n}")));
        }
        Ok(())
    }

    /// True when every backbone parameter is frozen and every adapter and
    /// copy-head parameter is trainable.
    pub fn is_adapter_finetune(&self) -> bool {
        self.frozen.iter().all(|n| ParamKind::of(n) == ParamKind::Backbone)
            && self.trainable.iter().all(|n| ParamKind::of(n) != ParamKind::Backbone)
    }

    /// Sets each parameter's `requires_grad` flag from this partition.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        self.validate(model)?;
        for (name, t) in model.params_mut() {
            t.requires_grad = self.trainable.contains(&name);
        }
        Ok(())
    }
}
