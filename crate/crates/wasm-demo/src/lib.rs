//! Browser bindings for three interactive views over the synthetic oracle
//! and the toy model. Each binding wraps a plain function that native tests
//! exercise directly.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use traitc::algebra::similarity_matrix;
use traitc::caa::{compute_vector, normalize};
use traitc::corpus::TraitId;
use traitc::pipeline::readout_tokens;
use traitc::report::heatmap_svg;
use traitc::steer::{byte_tokens, dose_response, DoseSetup, ModelConfig, Scope, SteerMode, ToyTransformer};
use traitc::synth::{default_traits, equicorrelated_gram, plant, plant_directions, recovery_sweep, PlantSpec, RecoveryGrid};

const MAX_D: usize = 1024;
const MAX_PAIRS: usize = 512;

fn guard(name: &str, value: usize, lo: usize, hi: usize) -> Result<(), String> {
    if (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(format!("{name} must be in {lo}..={hi}, got {value}"))
    }
}

/// Plant `traits` directions with pairwise cosine `rho`, extract them back
/// and render the recovered similarity matrix.
pub fn planted_heatmap(d: usize, traits: usize, rho: f64, noise: f64, pairs: usize, seed: u64) -> Result<String, String> {
    guard("d", d, 2, MAX_D)?;
    guard("traits", traits, 1, 7.min(d))?;
    guard("pairs", pairs, 1, MAX_PAIRS)?;
    let mut spec = PlantSpec::new(d, default_traits(traits));
    if rho != 0.0 {
        spec.gram = Some(equicorrelated_gram(traits, rho));
    }
    spec.noise_sigma = noise;
    spec.n_pairs = pairs;
    spec.seed = seed;
    let planted = plant(&spec).map_err(|e| e.to_string())?;
    let vectors = spec
        .traits
        .iter()
        .map(|t| compute_vector(&planted.sets[t], 0).and_then(|v| normalize(&v)))
        .collect::<traitc::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let mut m = similarity_matrix(&vectors).map_err(|e| e.to_string())?;
    m.model = format!("synthetic d={d} noise={noise} pairs={pairs}");
    Ok(heatmap_svg(&m))
}

#[derive(Serialize)]
struct CurvePoint {
    noise: f64,
    mean_cosine: f64,
    min_cosine: f64,
}

/// Mean and worst recovery cosine on `steps` evenly spaced noise levels in
/// `[0, max_noise]`, as JSON.
pub fn recovery_curve(d: usize, pairs: usize, seeds: usize, max_noise: f64, steps: usize) -> Result<String, String> {
    guard("d", d, 2, MAX_D)?;
    guard("pairs", pairs, 1, MAX_PAIRS)?;
    guard("seeds", seeds, 1, 100)?;
    guard("steps", steps, 2, 50)?;
    if !(max_noise > 0.0 && max_noise.is_finite()) {
        return Err("max_noise must be positive".into());
    }
    let grid = RecoveryGrid {
        d,
        intensity_scale: 1.0,
        noise_sigmas: (0..steps).map(|i| max_noise * i as f64 / (steps - 1) as f64).collect(),
        n_pairs: vec![pairs],
        seeds,
        seed: 7,
    };
    let cells = recovery_sweep(&grid).map_err(|e| e.to_string())?;
    let points: Vec<CurvePoint> = cells
        .iter()
        .map(|c| CurvePoint {
            noise: c.noise_sigma,
            mean_cosine: c.mean_cosine,
            min_cosine: c.min_cosine,
        })
        .collect();
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct DoseCurve {
    target: u32,
    baseline: u32,
    points: Vec<traitc::steer::DosePoint>,
}

/// Logit gap under `add` steering at `layer` of a seeded toy model, along a
/// seeded random direction, on `steps` λ values in `[-lambda_max, lambda_max]`.
pub fn toy_dose_response(
    model_seed: u64,
    direction_seed: u64,
    layer: usize,
    final_norm: bool,
    lambda_max: f64,
    steps: usize,
    prompt: &str,
) -> Result<String, String> {
    guard("steps", steps, 2, 101)?;
    if !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err("lambda_max must be positive".into());
    }
    let config = ModelConfig {
        final_norm_enabled: final_norm,
        ..ModelConfig::default()
    };
    let model = ToyTransformer::seeded(config.clone(), model_seed).map_err(|e| e.to_string())?;
    let mut spec = PlantSpec::new(config.d, vec![TraitId::sycophancy()]);
    spec.seed = direction_seed;
    let u = plant_directions(&spec)
        .map_err(|e| e.to_string())?
        .remove(&TraitId::sycophancy())
        .expect("one planted direction");
    let (target, baseline) = readout_tokens(&model, &u, None, None);
    let setup = DoseSetup {
        direction: &u,
        layer,
        mode: SteerMode::Add,
        scope: Scope::All,
        target,
        baseline,
    };
    let lambdas: Vec<f64> = (0..steps)
        .map(|i| -lambda_max + 2.0 * lambda_max * i as f64 / (steps - 1) as f64)
        .collect();
    let tokens = byte_tokens(prompt, config.vocab, config.max_seq);
    let points = dose_response(&model, &tokens, &setup, &lambdas).map_err(|e| e.to_string())?;
    serde_json::to_string(&DoseCurve {
        target,
        baseline,
        points,
    })
    .map_err(|e| e.to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = plantedHeatmap)]
pub fn planted_heatmap_js(d: usize, traits: usize, rho: f64, noise: f64, pairs: usize, seed: u32) -> Result<String, JsValue> {
    js(planted_heatmap(d, traits, rho, noise, pairs, seed as u64))
}

#[wasm_bindgen(js_name = recoveryCurve)]
pub fn recovery_curve_js(d: usize, pairs: usize, seeds: usize, max_noise: f64, steps: usize) -> Result<String, JsValue> {
    js(recovery_curve(d, pairs, seeds, max_noise, steps))
}

#[wasm_bindgen(js_name = doseResponse)]
pub fn toy_dose_response_js(
    model_seed: u32,
    direction_seed: u32,
    layer: usize,
    final_norm: bool,
    lambda_max: f64,
    steps: usize,
    prompt: &str,
) -> Result<String, JsValue> {
    js(toy_dose_response(
        model_seed as u64,
        direction_seed as u64,
        layer,
        final_norm,
        lambda_max,
        steps,
        prompt,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_is_svg_with_one_cell_per_entry() {
        let svg = planted_heatmap(32, 4, 0.3, 0.0, 8, 1).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.matches("<rect").count() >= 16);
        assert!(svg.contains("0.30"));
        assert!(planted_heatmap(32, 9, 0.0, 0.0, 8, 1).is_err());
    }

    #[test]
    fn recovery_curve_starts_exact_and_decays() {
        let json = recovery_curve(32, 16, 3, 2.0, 5).unwrap();
        let pts: Vec<serde_json::Value> = serde_json::from_str(&json).unwrap();
        assert_eq!(pts.len(), 5);
        let first = pts[0]["mean_cosine"].as_f64().unwrap();
        let last = pts[4]["mean_cosine"].as_f64().unwrap();
        assert!(first > 0.9999 && last < first);
    }

    #[test]
    fn dose_response_without_norm_is_affine_at_the_last_layer() {
        let json = toy_dose_response(3, 1, 3, false, 2.0, 5, "User: hi\nAssistant:").unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let gaps: Vec<f64> = v["points"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["gap"].as_f64().unwrap())
            .collect();
        let step = gaps[1] - gaps[0];
        assert!(step > 0.0);
        for w in gaps.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-3);
        }
        assert!(toy_dose_response(3, 1, 9, false, 2.0, 5, "x").is_err());
    }
}
