use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use crate::corpus::{Polarity, TraitId};
use crate::{Error, Result};

/// One residual-stream vector for a (pair, polarity, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub pair_id: u64,
    pub polarity: Polarity,
    pub layer: u16,
    pub vector: Vec<f32>,
}

impl ActivationRecord {
    fn key(&self) -> (u64, Polarity, u16) {
        (self.pair_id, self.polarity, self.layer)
    }
}

/// All activations for one trait dataset on one model.
///
/// Invariants are checked on construction, so every `ActivationSet` in
/// circulation has a uniform `d`, in-range layers and unique record keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    trait_id: TraitId,
    d: usize,
    n_layers: usize,
    records: Vec<ActivationRecord>,
    /// Free-text provenance. Not persisted by the container.
    pub source: String,
}

impl ActivationSet {
    pub fn new(
        trait_id: TraitId,
        d: usize,
        n_layers: usize,
        records: Vec<ActivationRecord>,
        source: impl Into<String>,
    ) -> Result<Self> {
        if d == 0 || d > u32::MAX as usize {
            return Err(Error::InvalidSet(format!("d = {d} out of range")));
        }
        if n_layers == 0 || n_layers > u16::MAX as usize + 1 {
            return Err(Error::InvalidSet(format!("n_layers = {n_layers} out of range")));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.vector.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: r.vector.len(),
                });
            }
            if r.layer as usize >= n_layers {
                return Err(Error::InvalidSet(format!(
                    "record layer {} >= n_layers {n_layers}",
                    r.layer
                )));
            }
            if !seen.insert(r.key()) {
                return Err(Error::DuplicateRecord {
                    pair_id: r.pair_id,
                    polarity: r.polarity.as_i8(),
                    layer: r.layer,
                });
            }
        }
        Ok(ActivationSet {
            trait_id,
            d,
            n_layers,
            records,
            source: source.into(),
        })
    }

    pub fn trait_id(&self) -> &TraitId {
        &self.trait_id
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn records(&self) -> &[ActivationRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ActivationRecord> {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Layers that hold at least one record, ascending.
    pub fn layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.records.iter().map(|r| r.layer as usize).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn at_layer(&self, layer: usize) -> impl Iterator<Item = &ActivationRecord> {
        self.records.iter().filter(move |r| r.layer as usize == layer)
    }

    /// `(positive, negative)` record counts per layer.
    pub fn counts_by_layer(&self) -> BTreeMap<usize, (usize, usize)> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            let e = m.entry(r.layer as usize).or_insert((0, 0));
            match r.polarity {
                Polarity::Positive => e.0 += 1,
                Polarity::Negative => e.1 += 1,
            }
        }
        m
    }

    /// Human-readable header and per-layer counts.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "trait:    {}", self.trait_id);
        let _ = writeln!(s, "d:        {}", self.d);
        let _ = writeln!(s, "n_layers: {}", self.n_layers);
        let _ = writeln!(s, "records:  {}", self.records.len());
        let _ = writeln!(s, "layer  positive  negative");
        for (layer, (p, n)) in self.counts_by_layer() {
            let _ = writeln!(s, "{layer:>5}  {p:>8}  {n:>8}");
        }
        s
    }
}

/// Union of several sets for the same trait and model.
pub fn merge(sets: &[ActivationSet]) -> Result<ActivationSet> {
    let first = sets.first().ok_or(Error::Empty("merge needs at least one set"))?;
    let mut records = Vec::with_capacity(sets.iter().map(|s| s.records.len()).sum());
    let mut sources: Vec<&str> = Vec::new();
    for s in sets {
        if s.trait_id != first.trait_id {
            return Err(Error::TraitMismatch(
                first.trait_id.to_string(),
                s.trait_id.to_string(),
            ));
        }
        if s.d != first.d {
            return Err(Error::DimensionMismatch {
                expected: first.d,
                found: s.d,
            });
        }
        if s.n_layers != first.n_layers {
            return Err(Error::InvalidSet(format!(
                "n_layers mismatch: {} vs {}",
                first.n_layers, s.n_layers
            )));
        }
        if !s.source.is_empty() && !sources.contains(&s.source.as_str()) {
            sources.push(&s.source);
        }
        records.extend(s.records.iter().cloned());
    }
    ActivationSet::new(
        first.trait_id.clone(),
        first.d,
        first.n_layers,
        records,
        sources.join(" + "),
    )
}
