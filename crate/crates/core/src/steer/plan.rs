use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caa::load_vector;
use crate::linalg;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerMode {
    Add,
    Subtract,
    ProjectOut,
}

/// Which sequence positions an intervention touches.
///
/// `GeneratedOnly` covers every position whose output predicts a generated
/// token: the last prompt position and everything after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    All,
    Last,
    GeneratedOnly,
}

impl Scope {
    pub fn contains(self, pos: usize, seq_len: usize, prompt_len: usize) -> bool {
        match self {
            Scope::All => true,
            Scope::Last => pos + 1 == seq_len,
            Scope::GeneratedOnly => pos + 1 >= prompt_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionStep {
    pub layer: usize,
    pub mode: SteerMode,
    pub direction: Vec<f32>,
    pub lambda: f32,
    pub scope: Scope,
}

impl InterventionStep {
    pub(crate) fn apply(&self, h: &mut [f32]) {
        match self.mode {
            SteerMode::Add => h.iter_mut().zip(&self.direction).for_each(|(x, u)| *x += self.lambda * u),
            SteerMode::Subtract => h.iter_mut().zip(&self.direction).for_each(|(x, u)| *x -= self.lambda * u),
            SteerMode::ProjectOut => {
                let c = linalg::dot(h, &self.direction);
                h.iter_mut()
                    .zip(&self.direction)
                    .for_each(|(x, &u)| *x = (*x as f64 - c * u as f64) as f32);
            }
        }
    }
}

/// Ordered intervention schedule; steps on the same layer apply in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterventionPlan {
    pub steps: Vec<InterventionStep>,
}

const PLAN_UNIT_TOLERANCE: f64 = 1e-5;

impl InterventionPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(layer: usize, mode: SteerMode, direction: Vec<f32>, lambda: f32, scope: Scope) -> Self {
        InterventionPlan {
            steps: vec![InterventionStep {
                layer,
                mode,
                direction,
                lambda,
                scope,
            }],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn at_layer(&self, layer: usize) -> impl Iterator<Item = &InterventionStep> {
        self.steps.iter().filter(move |s| s.layer == layer)
    }

    pub fn validate(&self, d: usize, n_layers: usize) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.steps {
            if s.layer >= n_layers {
                return Err(Error::InvalidLayer { layer: s.layer, n_layers });
            }
            if s.direction.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: s.direction.len(),
                });
            }
            let n = linalg::norm(&s.direction);
            if (n - 1.0).abs() > PLAN_UNIT_TOLERANCE {
                return Err(Error::InvalidPlan(format!(
                    "direction at layer {} has norm {n}, expected 1",
                    s.layer
                )));
            }
            if !s.lambda.is_finite() {
                return Err(Error::InvalidPlan("lambda must be finite".into()));
            }
            if !seen.insert((s.layer, s.mode)) {
                return Err(Error::InvalidPlan(format!(
                    "more than one {:?} step at layer {}",
                    s.mode, s.layer
                )));
            }
        }
        Ok(())
    }
}

/// One entry of a JSON plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub layer: usize,
    pub mode: SteerMode,
    pub vec_file: String,
    #[serde(default)]
    pub lambda: f32,
    #[serde(default)]
    pub scope: Scope,
}

/// Load a JSON list of [`PlanEntry`]; `vec_file` paths resolve relative to
/// the plan file's directory. Directions are normalized on load.
pub fn load_plan(path: impl AsRef<Path>) -> Result<InterventionPlan> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<PlanEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidPlan(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut steps = Vec::with_capacity(entries.len());
    for e in entries {
        let sv = load_vector(dir.join(&e.vec_file))?;
        steps.push(InterventionStep {
            layer: e.layer,
            mode: e.mode,
            direction: linalg::unit(&sv.v)?,
            lambda: e.lambda,
            scope: e.scope,
        });
    }
    Ok(InterventionPlan { steps })
}
