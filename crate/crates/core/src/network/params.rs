use std::collections::HashMap;

use super::tensor::Tensor;
use crate::{Error, Result};

/// Whether an entry is optimized or only tracked (normalization statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Trainable,
    Statistic,
}

impl EntryKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            EntryKind::Trainable => 0,
            EntryKind::Statistic => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(EntryKind::Trainable),
            1 => Some(EntryKind::Statistic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub kind: EntryKind,
    pub tensor: Tensor,
}

/// Named tensors in insertion order. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, ParamEntry)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        kind: EntryKind,
        tensor: Tensor,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, ParamEntry { kind, tensor }));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entry(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1.tensor),
            None => Err(Error::invalid(format!("missing parameter `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(n, e)| (n.as_str(), e))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Same names, kinds and shapes, all values zero.
    pub fn zeros_like(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            out.insert(name.clone(), e.kind, Tensor::zeros(e.tensor.shape()))
                .expect("names are unique");
        }
        out
    }

    /// Moves every entry of `other` into `self`; names must be disjoint.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, e) in other.entries {
            self.insert(name, e.kind, e.tensor)?;
        }
        Ok(())
    }

    /// Entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, e) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(name.clone(), e.kind, e.tensor.clone())
                .expect("names are unique");
        }
        out
    }

    /// Total number of stored scalars, statistics included.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|(_, e)| e.tensor.len()).sum()
    }

    /// Number of optimized scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == EntryKind::Trainable)
            .map(|(_, e)| e.tensor.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, e)| e.tensor.all_finite())
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ea), (b, eb))| a == b && ea.tensor.shape() == eb.tensor.shape())
    }
}
