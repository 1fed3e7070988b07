//! Per-class composed prototypes maintained from teacher embeddings of
//! source pixels.

use crate::error::{contract, Result};
use crate::gaussian::{compose_product_iter, ema_blend, DiagonalGaussian};
use crate::model::Embeddings;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassSlot {
    pub proto: Option<DiagonalGaussian>,
    /// Batches that contained the class.
    pub updates: u64,
    /// Consecutive batches without the class.
    pub staleness: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    slots: Vec<ClassSlot>,
}

impl PrototypeBank {
    pub fn new(classes: usize) -> Self {
        Self {
            slots: vec![ClassSlot::default(); classes],
        }
    }

    pub fn from_slots(slots: Vec<ClassSlot>) -> Self {
        Self { slots }
    }

    pub fn classes(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[ClassSlot] {
        &self.slots
    }

    pub fn get(&self, class: usize) -> Option<&DiagonalGaussian> {
        self.slots.get(class).and_then(|s| s.proto.as_ref())
    }

    pub fn prototypes(&self) -> Vec<Option<DiagonalGaussian>> {
        self.slots.iter().map(|s| s.proto.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(|s| s.proto.is_none())
    }

    /// Composes each present class from its member Gaussians and blends it
    /// into the stored prototype with momentum `beta`. A class seen for the
    /// first time takes the composition directly; absent classes are left
    /// untouched apart from their staleness counter.
    pub fn update_from_members(&mut self, members: &[Vec<DiagonalGaussian>], beta: f64) -> Result<()> {
        contract!((0.0..=1.0).contains(&beta), "prototype momentum {beta} outside [0, 1]");
        contract!(
            members.len() == self.slots.len(),
            "members for {} classes, bank has {}",
            members.len(),
            self.slots.len()
        );
        for (slot, group) in self.slots.iter_mut().zip(members) {
            if group.is_empty() {
                slot.staleness += 1;
                continue;
            }
            let fresh = compose_product_iter(group)?;
            slot.proto = Some(match &slot.proto {
                None => fresh,
                Some(old) => ema_blend(old, &fresh, beta)?,
            });
            slot.updates += 1;
            slot.staleness = 0;
        }
        Ok(())
    }

    /// [`Self::update_from_members`] with members grouped by `labels`.
    pub fn update(&mut self, emb: &Embeddings, labels: &[usize], beta: f64) -> Result<()> {
        contract!(
            labels.len() == emb.len(),
            "{} labels for {} embeddings",
            labels.len(),
            emb.len()
        );
        let mut members: Vec<Vec<DiagonalGaussian>> = vec![Vec::new(); self.slots.len()];
        for (i, &c) in labels.iter().enumerate() {
            contract!(c < self.slots.len(), "label {c} out of range");
            members[c].push(emb.gaussian(i)?);
        }
        self.update_from_members(&members, beta)
    }
}
