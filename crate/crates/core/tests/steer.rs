use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use traitc::caa::SteeringVector;
use traitc::corpus::TraitId;
use traitc::steer::{
    dose_response, forward, generate, probe, DoseSetup, InterventionPlan, InterventionStep, ModelConfig, Sampler,
    Scope, SteerMode, ToyTransformer,
};
use traitc::Error;

const LAMBDAS: [f32; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];

fn config(final_norm: bool) -> ModelConfig {
    ModelConfig {
        d: 64,
        n_layers: 4,
        n_heads: 4,
        vocab: 128,
        max_seq: 32,
        d_ff: 256,
        final_norm_enabled: final_norm,
        tied_unembedding: false,
    }
}

fn unit(d: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    raw.iter().map(|x| (x / n) as f32).collect()
}

fn prompt() -> Vec<u32> {
    vec![5, 17, 99, 3, 42, 42, 7, 120]
}

fn add(layer: usize, u: &[f32], lambda: f32) -> InterventionPlan {
    InterventionPlan::single(layer, SteerMode::Add, u.to_vec(), lambda, Scope::All)
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[test]
fn empty_plan_and_zero_lambda_are_bitwise_noops() {
    let m = ToyTransformer::seeded(config(true), 3).unwrap();
    let base = forward(&m, &prompt(), &InterventionPlan::empty()).unwrap();
    let again = forward(&m, &prompt(), &InterventionPlan::empty()).unwrap();
    assert_eq!(base, again);
    let u = unit(64, 1);
    for layer in 0..4 {
        let out = forward(&m, &prompt(), &add(layer, &u, 0.0)).unwrap();
        assert_eq!(out.logits, base.logits);
    }
}

#[test]
fn final_layer_add_shifts_logits_by_unembedded_direction() {
    let m = ToyTransformer::seeded(config(false), 3).unwrap();
    let u = unit(64, 11);
    let base = forward(&m, &prompt(), &InterventionPlan::empty()).unwrap();
    for lambda in LAMBDAS {
        let out = forward(&m, &prompt(), &add(3, &u, lambda)).unwrap();
        for (pos, (row, brow)) in out.logits.iter().zip(&base.logits).enumerate() {
            for t in 0..128u32 {
                let expected = lambda as f64 * dot64(m.unembedding_row(t), &u);
                let shift = row[t as usize] as f64 - brow[t as usize] as f64;
                assert!(
                    (shift - expected).abs() <= 1e-4,
                    "pos {pos} token {t} lambda {lambda}: {shift} vs {expected}"
                );
            }
        }
    }
}

fn sv(layer: usize, u: &[f32]) -> SteeringVector {
    SteeringVector::from_direction(TraitId::behavior("probe").unwrap(), layer, u.to_vec())
}

#[test]
fn probe_strength_moves_by_lambda_and_is_linear() {
    let m = ToyTransformer::seeded(config(false), 3).unwrap();
    let u = unit(64, 5);
    let dirs = [sv(2, &u)];
    let s = |lambda: f32| probe(&m, &prompt(), &add(2, &u, lambda), &dirs).unwrap()[0].strength;
    let s0 = s(0.0);
    for lambda in LAMBDAS {
        assert!((s(lambda) - s0 - lambda as f64).abs() <= 1e-4);
    }
    assert!((s(0.5) + s(1.25) - s0 - s(1.75)).abs() <= 1e-4);
}

#[test]
fn project_out_zeroes_probe_at_intervened_layer() {
    let m = ToyTransformer::seeded(config(true), 8).unwrap();
    let u = unit(64, 6);
    let plan = InterventionPlan::single(1, SteerMode::ProjectOut, u.clone(), 0.0, Scope::All);
    let r = probe(&m, &prompt(), &plan, &[sv(1, &u)]).unwrap();
    assert!(r[0].strength.abs() <= 1e-5);
}

#[test]
fn probe_orthogonal_to_forced_residual_is_zero() {
    let mut m = ToyTransformer::zeros(config(false)).unwrap();
    let mut e = vec![0.0f32; 64];
    e[0] = 2.5;
    m.set_token_embedding(9, &e).unwrap();
    let mut v = vec![0.0f32; 64];
    v[1] = 1.0;
    let r = probe(&m, &[9], &InterventionPlan::empty(), &[sv(0, &v), sv(3, &v)]).unwrap();
    assert!(r.iter().all(|p| p.strength == 0.0));
    let mut along = vec![0.0f32; 64];
    along[0] = 1.0;
    let r = probe(&m, &[9], &InterventionPlan::empty(), &[sv(3, &along)]).unwrap();
    assert!((r[0].strength - 2.5).abs() < 1e-6);
}

#[test]
fn probe_rejects_layer_beyond_depth() {
    let m = ToyTransformer::seeded(config(true), 1).unwrap();
    let u = unit(64, 2);
    let err = probe(&m, &prompt(), &InterventionPlan::empty(), &[sv(4, &u)]).unwrap_err();
    assert!(matches!(err, Error::InvalidLayer { layer: 4, n_layers: 4 }));
}

#[test]
fn intervention_leaves_lower_layers_untouched() {
    let m = ToyTransformer::seeded(config(true), 4).unwrap();
    let u = unit(64, 9);
    let base = forward(&m, &prompt(), &InterventionPlan::empty()).unwrap();
    for k in 0..4 {
        let out = forward(&m, &prompt(), &add(k, &u, 3.0)).unwrap();
        for l in 0..k {
            assert_eq!(out.snapshots[l], base.snapshots[l], "layer {l} changed by plan at {k}");
        }
        assert_ne!(out.snapshots[k], base.snapshots[k]);
    }
}

#[test]
fn scope_last_touches_only_final_position() {
    let m = ToyTransformer::seeded(config(true), 4).unwrap();
    let u = unit(64, 9);
    let base = forward(&m, &prompt(), &InterventionPlan::empty()).unwrap();
    let plan = InterventionPlan::single(3, SteerMode::Add, u.clone(), 1.0, Scope::Last);
    let out = forward(&m, &prompt(), &plan).unwrap();
    let n = prompt().len();
    assert_eq!(out.snapshots[3][..n - 1], base.snapshots[3][..n - 1]);
    assert_ne!(out.snapshots[3][n - 1], base.snapshots[3][n - 1]);
}

#[test]
fn greedy_generation_is_deterministic() {
    let m = ToyTransformer::seeded(config(true), 3).unwrap();
    let a = generate(&m, &prompt(), &InterventionPlan::empty(), Sampler::Greedy, 12).unwrap();
    let b = generate(&m, &prompt(), &InterventionPlan::empty(), Sampler::Greedy, 12).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 12);
    let s = Sampler::Temperature { temperature: 0.8, seed: 21 };
    assert_eq!(
        generate(&m, &prompt(), &InterventionPlan::empty(), s, 12).unwrap(),
        generate(&m, &prompt(), &InterventionPlan::empty(), s, 12).unwrap()
    );
}

#[test]
fn large_lambda_along_unembedding_forces_token() {
    let m = ToyTransformer::seeded(config(false), 3).unwrap();
    let p = prompt();
    let base = forward(&m, &p, &InterventionPlan::empty()).unwrap();
    let base_last = base.last_logits();
    for t in [0u32, 17, 64, 127] {
        let row = m.unembedding_row(t);
        let n = dot64(row, row).sqrt();
        let u: Vec<f32> = row.iter().map(|&x| (x as f64 / n) as f32).collect();
        let lambda = 200.0f32;
        let shift: Vec<f64> = (0..128u32).map(|j| lambda as f64 * dot64(m.unembedding_row(j), &u)).collect();
        let predicted = (0..128)
            .max_by(|&a, &b| {
                (base_last[a] as f64 + shift[a])
                    .partial_cmp(&(base_last[b] as f64 + shift[b]))
                    .unwrap()
            })
            .unwrap() as u32;
        let plan = InterventionPlan::single(3, SteerMode::Add, u, lambda, Scope::GeneratedOnly);
        let out = generate(&m, &p, &plan, Sampler::Greedy, 1).unwrap();
        assert_eq!(out[0], predicted);
        assert_eq!(out[0], t);
    }
}

#[test]
fn add_and_subtract_are_symmetric_about_unsteered() {
    let m = ToyTransformer::seeded(config(false), 3).unwrap();
    let u = unit(64, 13);
    let base = forward(&m, &prompt(), &InterventionPlan::empty()).unwrap();
    for layer in [1, 3] {
        let plus = forward(&m, &prompt(), &add(layer, &u, 1.5)).unwrap();
        let minus = forward(
            &m,
            &prompt(),
            &InterventionPlan::single(layer, SteerMode::Subtract, u.clone(), 1.5, Scope::All),
        )
        .unwrap();
        if layer == 3 {
            for t in 0..128 {
                let up = plus.last_logits()[t] as f64 - base.last_logits()[t] as f64;
                let down = minus.last_logits()[t] as f64 - base.last_logits()[t] as f64;
                assert!((up + down).abs() <= 1e-4);
            }
        }
        let neg = forward(&m, &prompt(), &add(layer, &u, -1.5)).unwrap();
        assert_eq!(neg.logits, minus.logits);
    }
}

#[test]
fn dose_response_is_affine_at_final_layer() {
    let m = ToyTransformer::seeded(config(false), 3).unwrap();
    let u = unit(64, 17);
    let setup = DoseSetup {
        direction: &u,
        layer: 3,
        mode: SteerMode::Add,
        scope: Scope::All,
        target: 10,
        baseline: 20,
    };
    let lambdas: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.5).collect();
    let pts = dose_response(&m, &prompt(), &setup, &lambdas).unwrap();
    let slope = dot64(m.unembedding_row(10), &u) - dot64(m.unembedding_row(20), &u);
    let g0 = pts.iter().find(|p| p.lambda == 0.0).unwrap().gap;
    for p in &pts {
        assert!((p.gap - g0 - p.lambda * slope).abs() <= 1e-4);
    }
    let zero = dose_response(&m, &prompt(), &setup, &[0.0]).unwrap();
    let base = forward(&m, &prompt(), &InterventionPlan::empty()).unwrap();
    let gap = base.last_logits()[10] as f64 - base.last_logits()[20] as f64;
    assert_eq!(zero[0].gap, gap);
}

#[test]
fn dose_response_monotone_on_copy_path_with_norm() {
    let raw = unit(64, 23);
    let (m, u) = ToyTransformer::planted_copy_path(config(true), 3, &raw, 2.0, 10, 20).unwrap();
    let setup = DoseSetup {
        direction: &u,
        layer: 1,
        mode: SteerMode::Add,
        scope: Scope::All,
        target: 10,
        baseline: 20,
    };
    let lambdas: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.5).collect();
    let pts = dose_response(&m, &prompt(), &setup, &lambdas).unwrap();
    for w in pts.windows(2) {
        assert!(w[1].gap > w[0].gap, "{:?}", w);
    }
}

#[test]
fn dose_response_requires_sorted_lambdas() {
    let m = ToyTransformer::seeded(config(false), 3).unwrap();
    let u = unit(64, 17);
    let setup = DoseSetup {
        direction: &u,
        layer: 3,
        mode: SteerMode::Add,
        scope: Scope::All,
        target: 1,
        baseline: 2,
    };
    assert!(dose_response(&m, &prompt(), &setup, &[1.0, 0.0]).is_err());
}

#[test]
fn forward_rejects_bad_inputs() {
    let m = ToyTransformer::seeded(config(true), 3).unwrap();
    assert!(matches!(
        forward(&m, &[128], &InterventionPlan::empty()),
        Err(Error::TokenOutOfRange { token: 128, .. })
    ));
    assert!(matches!(
        forward(&m, &vec![1; 33], &InterventionPlan::empty()),
        Err(Error::SequenceTooLong { len: 33, .. })
    ));
    let mut u = unit(64, 1);
    u[0] += 0.5;
    assert!(forward(&m, &prompt(), &add(1, &u, 1.0)).is_err());
    assert!(forward(&m, &prompt(), &add(4, &unit(64, 1), 1.0)).is_err());
    let dup = InterventionPlan {
        steps: vec![
            InterventionStep {
                layer: 1,
                mode: SteerMode::Add,
                direction: unit(64, 1),
                lambda: 1.0,
                scope: Scope::All,
            };
            2
        ],
    };
    assert!(forward(&m, &prompt(), &dup).is_err());
}

#[test]
fn weights_round_trip_through_actw() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.actw");
    let m = ToyTransformer::seeded(config(true), 77).unwrap();
    m.save(&path).unwrap();
    let back = ToyTransformer::load(&path).unwrap();
    assert_eq!(m, back);
    let bytes = std::fs::read(&path).unwrap();
    m.save(&path).unwrap();
    assert_eq!(bytes, std::fs::read(&path).unwrap());
    let tied = ToyTransformer::seeded(ModelConfig { tied_unembedding: true, ..config(false) }, 5).unwrap();
    tied.save(&path).unwrap();
    assert_eq!(ToyTransformer::load(&path).unwrap(), tied);
}
