//! Contrastive mean-difference steering vectors.
//!
//! `v = mean(H+) - mean(H-)` per layer, accumulated in f64 over records in
//! ascending `pair_id` order, so results are bit-reproducible regardless of
//! record order or thread count.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::actio::{self, ActivationRecord, ActivationSet};
use crate::corpus::{Polarity, TraitId};
use crate::linalg;
use crate::{Error, Result};

/// Tolerance for the unit-norm invariant of normalized vectors.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub trait_id: TraitId,
    pub layer: usize,
    pub v: Vec<f32>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub normalized: bool,
}

impl SteeringVector {
    pub fn d(&self) -> usize {
        self.v.len()
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.v)
    }

    /// Build a vector directly, e.g. from a planted direction.
    pub fn from_direction(trait_id: TraitId, layer: usize, v: Vec<f32>) -> Self {
        let normalized = (linalg::norm(&v) - 1.0).abs() <= UNIT_TOLERANCE;
        SteeringVector {
            trait_id,
            layer,
            v,
            n_pos: 1,
            n_neg: 1,
            normalized,
        }
    }
}

pub fn compute_vector(set: &ActivationSet, layer: usize) -> Result<SteeringVector> {
    let mut pos: Vec<&ActivationRecord> = Vec::new();
    let mut neg: Vec<&ActivationRecord> = Vec::new();
    for r in set.at_layer(layer) {
        match r.polarity {
            Polarity::Positive => pos.push(r),
            Polarity::Negative => neg.push(r),
        }
    }
    if pos.is_empty() {
        return Err(Error::MissingSide { layer, side: "positive" });
    }
    if neg.is_empty() {
        return Err(Error::MissingSide { layer, side: "negative" });
    }
    let mean = |side: &mut Vec<&ActivationRecord>| -> Vec<f64> {
        side.sort_by_key(|r| r.pair_id);
        let mut acc = vec![0.0f64; set.d()];
        for r in side.iter() {
            for (a, &x) in acc.iter_mut().zip(&r.vector) {
                *a += x as f64;
            }
        }
        let n = side.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    };
    let mp = mean(&mut pos);
    let mn = mean(&mut neg);
    Ok(SteeringVector {
        trait_id: set.trait_id().clone(),
        layer,
        v: mp.iter().zip(&mn).map(|(p, n)| (p - n) as f32).collect(),
        n_pos: pos.len(),
        n_neg: neg.len(),
        normalized: false,
    })
}

pub fn normalize(sv: &SteeringVector) -> Result<SteeringVector> {
    Ok(SteeringVector {
        v: linalg::unit(&sv.v)?,
        normalized: true,
        ..sv.clone()
    })
}

/// Mid-residual layer: `floor(0.6 * n_layers)`, clamped to the last layer.
pub fn default_layer(n_layers: usize) -> usize {
    assert!(n_layers >= 1, "model must have at least one layer");
    (n_layers * 3 / 5).min(n_layers - 1)
}

/// A layer index or `auto` (resolved through [`default_layer`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerChoice {
    #[default]
    Auto,
    Fixed(usize),
}

impl LayerChoice {
    pub fn resolve(self, n_layers: usize) -> Result<usize> {
        match self {
            LayerChoice::Auto => Ok(default_layer(n_layers)),
            LayerChoice::Fixed(k) if k < n_layers => Ok(k),
            LayerChoice::Fixed(layer) => Err(Error::InvalidLayer { layer, n_layers }),
        }
    }
}

impl FromStr for LayerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(LayerChoice::Auto);
        }
        s.parse()
            .map(LayerChoice::Fixed)
            .map_err(|_| Error::Config(format!("layer must be an integer or `auto`, got `{s}`")))
    }
}

impl fmt::Display for LayerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerChoice::Auto => f.write_str("auto"),
            LayerChoice::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for LayerChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerChoice::Auto => s.serialize_str("auto"),
            LayerChoice::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for LayerChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) => Ok(LayerChoice::Fixed(k as usize)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Per-layer vectors plus the layers skipped for lacking one polarity.
#[derive(Debug, Clone)]
pub struct LayerVectors {
    pub vectors: BTreeMap<usize, SteeringVector>,
    pub omitted: Vec<usize>,
}

pub fn compute_all_layers(set: &ActivationSet) -> LayerVectors {
    let layers = set.layers();
    #[cfg(feature = "parallel")]
    let results: Vec<(usize, Result<SteeringVector>)> = {
        use rayon::prelude::*;
        layers
            .par_iter()
            .map(|&l| (l, compute_vector(set, l)))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(usize, Result<SteeringVector>)> =
        layers.iter().map(|&l| (l, compute_vector(set, l))).collect();

    let mut out = LayerVectors {
        vectors: BTreeMap::new(),
        omitted: Vec::new(),
    };
    for (layer, r) in results {
        match r {
            Ok(sv) => {
                out.vectors.insert(layer, sv);
            }
            Err(e) => {
                log::warn!("{}: skipping layer {layer}: {e}", set.trait_id());
                out.omitted.push(layer);
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorMeta {
    #[serde(rename = "trait")]
    trait_id: TraitId,
    layer: usize,
    n_pos: usize,
    n_neg: usize,
    normalized: bool,
}

/// Sidecar metadata path for a vector file: `<file>.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Encoded vector container and its sidecar JSON.
pub fn encode_vector(sv: &SteeringVector) -> Result<(Vec<u8>, String)> {
    let set = ActivationSet::new(
        sv.trait_id.clone(),
        sv.d(),
        sv.layer + 1,
        vec![ActivationRecord {
            pair_id: 0,
            polarity: Polarity::Positive,
            layer: sv.layer as u16,
            vector: sv.v.clone(),
        }],
        "",
    )?;
    let mut bytes = Vec::new();
    actio::encode_set(&set, &mut bytes)?;
    let meta = VectorMeta {
        trait_id: sv.trait_id.clone(),
        layer: sv.layer,
        n_pos: sv.n_pos,
        n_neg: sv.n_neg,
        normalized: sv.normalized,
    };
    let mut json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("vector meta", e))?;
    json.push('\n');
    Ok((bytes, json))
}

/// Write a vector as a one-record `ACTV` container plus its `.json` sidecar.
pub fn save_vector(sv: &SteeringVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (bytes, json) = encode_vector(sv)?;
    crate::actio::ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    fs::write(&mp, json).map_err(|e| Error::io(mp, e))
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<SteeringVector> {
    let path = path.as_ref();
    let set = actio::read_set(path)?;
    let [rec] = set.records() else {
        return Err(Error::Malformed(format!(
            "{}: vector file must hold exactly one record",
            path.display()
        )));
    };
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: VectorMeta =
        serde_json::from_str(&text).map_err(|e| Error::json(mp.display().to_string(), e))?;
    if &meta.trait_id != set.trait_id() || meta.layer != rec.layer as usize {
        return Err(Error::Malformed(format!(
            "{}: sidecar disagrees with container",
            path.display()
        )));
    }
    let sv = SteeringVector {
        trait_id: meta.trait_id,
        layer: meta.layer,
        v: rec.vector.clone(),
        n_pos: meta.n_pos,
        n_neg: meta.n_neg,
        normalized: meta.normalized,
    };
    if sv.normalized && (sv.norm() - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NotNormalized(sv.trait_id.to_string()));
    }
    Ok(sv)
}
