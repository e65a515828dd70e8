//! FIFO memory bank `M`, the dataset-wide epoch cache, and the auxiliary bank
//! `M′` assembled from it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::numeric::UnitVec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub label: u32,
    pub conf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub embedding: UnitVec,
    pub dataset_idx: usize,
    pub label: Option<u32>,
    pub pseudo: Option<PseudoLabel>,
    /// Insertion counter, assigned by the bank.
    pub tick: u64,
}

impl BankEntry {
    pub fn new(embedding: UnitVec, dataset_idx: usize) -> Self {
        Self { embedding, dataset_idx, label: None, pseudo: None, tick: 0 }
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn with_pseudo(mut self, pseudo: Option<PseudoLabel>) -> Self {
        self.pseudo = pseudo;
        self
    }
}

/// Fixed-capacity ring; position 0 is the oldest entry.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
    next_tick: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory bank capacity must be positive");
        Self { capacity, entries: VecDeque::with_capacity(capacity), next_tick: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, pos: usize) -> &BankEntry {
        &self.entries[pos]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &BankEntry> + '_ {
        self.entries.iter()
    }

    pub fn embedding(&self, pos: usize) -> &[f64] {
        self.entries[pos].embedding.as_slice()
    }

    /// Appends in order and returns whatever fell off the old end, oldest
    /// first.
    pub fn push(&mut self, entries: impl IntoIterator<Item = BankEntry>) -> Vec<BankEntry> {
        let mut evicted = Vec::new();
        for mut e in entries {
            e.tick = self.next_tick;
            self.next_tick += 1;
            self.entries.push_back(e);
            if self.entries.len() > self.capacity {
                evicted.extend(self.entries.pop_front());
            }
        }
        evicted
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CachedEmbedding {
    pub embedding: UnitVec,
    pub epoch: u32,
}

/// Most recent evicted target embedding per dataset index.
#[derive(Clone, Debug)]
pub struct EpochCache {
    slots: Vec<Option<CachedEmbedding>>,
    epoch: u32,
}

impl EpochCache {
    pub fn new(dataset_len: usize) -> Self {
        Self { slots: vec![None; dataset_len], epoch: 0 }
    }

    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    /// Overwrites the slot of every entry's dataset index; later entries win.
    pub fn absorb(&mut self, evicted: &[BankEntry]) {
        for e in evicted {
            if let Some(slot) = self.slots.get_mut(e.dataset_idx) {
                *slot = Some(CachedEmbedding { embedding: e.embedding.clone(), epoch: self.epoch });
            }
        }
    }

    pub fn get(&self, dataset_idx: usize) -> Option<&UnitVec> {
        self.slots.get(dataset_idx).and_then(|s| s.as_ref()).map(|c| &c.embedding)
    }

    pub fn get_entry(&self, dataset_idx: usize) -> Option<&CachedEmbedding> {
        self.slots.get(dataset_idx).and_then(|s| s.as_ref())
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<Option<&UnitVec>> {
        indices.iter().map(|&i| self.get(i)).collect()
    }

    pub fn populated(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// Embeddings positionally aligned with a [`MemoryBank`] snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedBank {
    pub dataset_idx: Vec<usize>,
    pub embeddings: Vec<UnitVec>,
}

impl AlignedBank {
    /// Position `j` holds `lookup(M[j].dataset_idx)`, or `M[j]`'s own
    /// embedding when the lookup has nothing.
    pub fn build<'a, F>(bank: &'a MemoryBank, mut lookup: F) -> Self
    where
        F: FnMut(usize) -> Option<&'a UnitVec>,
    {
        let (dataset_idx, embeddings) = bank
            .iter()
            .map(|e| (e.dataset_idx, lookup(e.dataset_idx).unwrap_or(&e.embedding).clone()))
            .unzip();
        Self { dataset_idx, embeddings }
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn is_aligned_with(&self, bank: &MemoryBank) -> bool {
        self.len() == bank.len() && self.dataset_idx.iter().zip(bank.iter()).all(|(&i, e)| i == e.dataset_idx)
    }
}

/// `M′`: previous-epoch embeddings from the cache, falling back to `M` itself
/// for samples the cache has not seen.
pub fn build_aux_bank<'a>(bank: &'a MemoryBank, cache: &'a EpochCache) -> AlignedBank {
    AlignedBank::build(bank, |i| cache.get(i))
}
