//! Desk-scale decoder with residual-stream interventions.
//!
//! Pre-norm blocks (causal multi-head attention, then a GELU MLP) write into
//! the residual stream; interventions apply after each block's residual
//! additions, and snapshots are taken after interventions. With the final
//! norm disabled the logits are `W_U h` of the last residual, which makes
//! steering effects exactly checkable.

mod capture;
mod model;
mod plan;

pub use capture::{byte_tokens, capture_activations};
pub use model::{ForwardOutput, ModelConfig, ToyTransformer};
pub use plan::{load_plan, InterventionPlan, InterventionStep, PlanEntry, Scope, SteerMode};

use serde::{Deserialize, Serialize};

use crate::caa::{SteeringVector, UNIT_TOLERANCE};
use crate::corpus::TraitId;
use crate::linalg;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn forward(model: &ToyTransformer, tokens: &[u32], plan: &InterventionPlan) -> Result<ForwardOutput> {
    model.forward(tokens, plan, tokens.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReading {
    pub layer: usize,
    #[serde(rename = "trait")]
    pub trait_id: TraitId,
    pub strength: f64,
}

/// Activation strength `⟨h_last, v̂⟩` at each direction's layer.
pub fn probe(
    model: &ToyTransformer,
    tokens: &[u32],
    plan: &InterventionPlan,
    directions: &[SteeringVector],
) -> Result<Vec<ProbeReading>> {
    let n_layers = model.config().n_layers;
    for v in directions {
        if v.layer >= n_layers {
            return Err(Error::InvalidLayer { layer: v.layer, n_layers });
        }
        if v.d() != model.config().d {
            return Err(Error::DimensionMismatch {
                expected: model.config().d,
                found: v.d(),
            });
        }
        if !v.normalized || (v.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotNormalized(v.trait_id.to_string()));
        }
    }
    let out = forward(model, tokens, plan)?;
    Ok(directions
        .iter()
        .map(|v| ProbeReading {
            layer: v.layer,
            trait_id: v.trait_id.clone(),
            strength: linalg::dot(out.last_snapshot(v.layer), &v.v),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

/// Lowest index wins ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive decoding, re-running the full sequence each step and
/// applying `plan` every time.
pub fn generate(
    model: &ToyTransformer,
    prompt: &[u32],
    plan: &InterventionPlan,
    sampler: Sampler,
    max_new: usize,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let total = prompt.len() + max_new;
    if total > model.config().max_seq {
        return Err(Error::SequenceTooLong {
            len: total,
            max_seq: model.config().max_seq,
        });
    }
    let mut rng = match sampler {
        Sampler::Temperature { temperature, seed } => {
            if !(temperature > 0.0) {
                return Err(Error::Config("temperature must be > 0".into()));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Sampler::Greedy => None,
    };
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let out = model.forward(&tokens, plan, prompt.len())?;
        let logits = out.logits.last().expect("non-empty sequence");
        let next = match (sampler, rng.as_mut()) {
            (Sampler::Temperature { temperature, .. }, Some(rng)) => sample(logits, temperature, rng),
            _ => argmax(logits),
        } as u32;
        tokens.push(next);
        generated.push(next);
    }
    Ok(generated)
}

fn sample(logits: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        r -= w;
        if r < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DosePoint {
    pub lambda: f64,
    pub gap: f64,
}

/// What a dose-response sweep intervenes with.
#[derive(Debug, Clone)]
pub struct DoseSetup<'a> {
    pub direction: &'a [f32],
    pub layer: usize,
    pub mode: SteerMode,
    pub scope: Scope,
    pub target: u32,
    pub baseline: u32,
}

/// Logit gap `logit[target] − logit[baseline]` at the first generated
/// position for each λ.
pub fn dose_response(
    model: &ToyTransformer,
    prompt: &[u32],
    setup: &DoseSetup<'_>,
    lambdas: &[f64],
) -> Result<Vec<DosePoint>> {
    if lambdas.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Config("lambdas must be sorted ascending".into()));
    }
    let vocab = model.config().vocab;
    for t in [setup.target, setup.baseline] {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { token: t, vocab });
        }
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let plan = InterventionPlan::single(
                setup.layer,
                setup.mode,
                setup.direction.to_vec(),
                lambda as f32,
                setup.scope,
            );
            let out = model.forward(prompt, &plan, prompt.len())?;
            let last = out.logits.last().ok_or(Error::Empty("prompt"))?;
            Ok(DosePoint {
                lambda,
                gap: last[setup.target as usize] as f64 - last[setup.baseline as usize] as f64,
            })
        })
        .collect()
}
