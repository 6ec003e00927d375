use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use traitc::actio::write_set;
use traitc::corpus::{builtin_compositions, TraitId};
use traitc::pipeline::{
    run_all, run_composition, run_similarity, run_steering, CompositionReport, ExperimentConfig, Manifest,
    RunOptions,
};
use traitc::synth::{equicorrelated_gram, plant, plant_behavior, PlantSpec};
use traitc::Error;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

const PAIRS: [(&str, &str); 7] = [
    ("honesty_humility", "H"),
    ("emotionality", "E"),
    ("extraversion", "X"),
    ("agreeableness", "A"),
    ("conscientiousness", "C"),
    ("openness", "O"),
    ("sycophancy", "sycophancy"),
];

/// Small toy architecture keeps capture fast; `toy_extra` adds keys to it.
fn fixture_config_with(out: &Path, extra: &str, toy_extra: &str) -> ExperimentConfig {
    let mut toml = format!(
        "model_ref = \"toy:3\"\noutput_dir = \"{}\"\nlambda_grid = [-2.0, -1.0, 0.0, 1.0, 2.0]\n{extra}\n\
         [toy]\nd = 32\nn_layers = 4\nn_heads = 4\nvocab = 128\nmax_seq = 40\n{toy_extra}\n[datasets]\n",
        out.display()
    );
    for (label, file) in PAIRS {
        toml.push_str(&format!("{label} = \"pairs/{file}.jsonl\"\n"));
    }
    ExperimentConfig::from_toml_str(&toml, fixtures()).unwrap()
}

fn fixture_config(out: &Path, extra: &str) -> ExperimentConfig {
    fixture_config_with(out, extra, "")
}

fn read_matrix(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').skip(1).map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn bundled_experiment_config_parses() {
    let cfg = ExperimentConfig::load(fixtures().join("experiment.toml")).unwrap();
    assert_eq!(cfg.datasets.len(), 7);
    assert_eq!(cfg.compositions().unwrap().len(), 2);
}

#[test]
fn fixture_similarity_is_square_with_unit_diagonal_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture_config(&dir.path().join("out"), "");
    let art = run_similarity(&cfg, RunOptions::default()).unwrap();
    assert_eq!(art.ran, ["extract", "similarity"]);
    let (labels, rows) = read_matrix(art.path("matrix.csv").unwrap());
    assert_eq!(
        labels,
        [
            "honesty_humility",
            "emotionality",
            "extraversion",
            "agreeableness",
            "conscientiousness",
            "openness",
            "sycophancy"
        ]
    );
    assert_eq!(rows.len(), 7);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 7);
        assert!((r[i] - 1.0).abs() < 1e-6);
    }
    let svg = fs::read_to_string(art.path("heatmap.svg").unwrap()).unwrap();
    assert_eq!(svg.matches(">1.00<").count() >= 7, true);

    let csv = fs::read(art.path("matrix.csv").unwrap()).unwrap();
    let manifest = fs::read(art.path("manifest.json").unwrap()).unwrap();
    let again = run_similarity(&cfg, RunOptions::default()).unwrap();
    assert_eq!(again.skipped, ["extract", "similarity"]);
    assert_eq!(fs::read(again.path("matrix.csv").unwrap()).unwrap(), csv);
    let forced = run_similarity(&cfg, RunOptions { force: true }).unwrap();
    assert_eq!(forced.ran, ["extract", "similarity"]);
    assert_eq!(fs::read(forced.path("matrix.csv").unwrap()).unwrap(), csv);
    assert_eq!(fs::read(forced.path("manifest.json").unwrap()).unwrap(), manifest);

    let other = tempfile::tempdir().unwrap();
    let fresh = run_similarity(&fixture_config(&other.path().join("out"), ""), RunOptions::default()).unwrap();
    assert_eq!(fs::read(fresh.path("matrix.csv").unwrap()).unwrap(), csv);
    assert_eq!(
        fs::read(fresh.path("heatmap.svg").unwrap()).unwrap(),
        fs::read(art.path("heatmap.svg").unwrap()).unwrap()
    );
}

#[test]
fn manifest_lists_every_output_with_digest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = fixture_config(&out, "");
    run_all(&cfg, RunOptions::default()).unwrap();
    let m = Manifest::load(out.join("manifest.json")).unwrap();
    assert_eq!(m.config_hash, cfg.hash());
    assert_eq!(m.layer, Some(2));
    for stage in ["extract", "similarity", "composition", "steering"] {
        let rec = &m.stages[stage];
        assert!(!rec.outputs.is_empty());
        for (rel, digest) in &rec.outputs {
            let bytes = fs::read(out.join(rel)).unwrap();
            assert_eq!(&traitc::pipeline::sha256_hex(&bytes), digest, "{rel}");
        }
    }
    assert_eq!(m.stages["extract"].inputs.len(), 7);
}

#[test]
fn corrupted_output_triggers_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = fixture_config(&out, "");
    run_similarity(&cfg, RunOptions::default()).unwrap();
    fs::write(out.join("matrix.csv"), "tampered").unwrap();
    let art = run_similarity(&cfg, RunOptions::default()).unwrap();
    assert_eq!(art.skipped, ["extract"]);
    assert_eq!(art.ran, ["similarity"]);
}

fn write_planted(dir: &Path, sets: &BTreeMap<TraitId, traitc::actio::ActivationSet>) -> String {
    let mut toml = String::from("[datasets]\n");
    for (t, s) in sets {
        let p = dir.join(format!("{}.actv", t.label()));
        write_set(s, &p).unwrap();
        toml.push_str(&format!("{} = \"{}\"\n", t.label(), p.display()));
    }
    toml
}

fn synth_config(dir: &Path, head: &str, datasets: &str) -> ExperimentConfig {
    let toml = format!(
        "model_ref = \"toy:0\"\noutput_dir = \"{}\"\nlayer = 0\n{head}\n{datasets}",
        dir.join("out").display()
    );
    ExperimentConfig::from_toml_str(&toml, dir).unwrap()
}

#[test]
fn planted_gram_is_recovered_by_similarity() {
    let dir = tempfile::tempdir().unwrap();
    let traits: Vec<TraitId> = ["agreeableness", "conscientiousness", "extraversion", "openness"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let mut spec = PlantSpec::new(256, traits);
    spec.gram = Some(equicorrelated_gram(4, 0.4));
    spec.noise_sigma = 0.1;
    spec.n_pairs = 64;
    spec.seed = 11;
    assert!(spec.snr() >= 10.0);
    let planted = plant(&spec).unwrap();
    let cfg = synth_config(dir.path(), "", &write_planted(dir.path(), &planted.sets));
    let art = run_similarity(&cfg, RunOptions::default()).unwrap();
    let (_, rows) = read_matrix(art.path("matrix.csv").unwrap());
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            let g = if i == j { 1.0 } else { 0.4 };
            assert!((v - g).abs() <= 0.05, "({i},{j}) = {v}");
        }
    }
}

fn preset_traits() -> Vec<TraitId> {
    let mut ts: Vec<TraitId> = builtin_compositions()
        .iter()
        .flat_map(|c| c.traits().cloned().collect::<Vec<_>>())
        .collect();
    ts.sort();
    ts.dedup();
    ts
}

#[test]
fn behavior_planted_as_first_preset_ranks_it_first() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = PlantSpec::new(256, preset_traits());
    spec.noise_sigma = 0.1;
    spec.seed = 5;
    let planted = plant(&spec).unwrap();
    let first = &builtin_compositions()[0];
    let alphas: BTreeMap<TraitId, f64> = first.terms.iter().map(|t| (t.trait_id.clone(), t.coefficient)).collect();
    let syc = TraitId::sycophancy();
    let (_, bset) = plant_behavior(&syc, &planted.directions, &alphas, &spec).unwrap();
    let mut sets = planted.sets.clone();
    sets.insert(syc.clone(), bset);
    let names: Vec<String> = builtin_compositions().iter().map(|c| format!("\"{}\"", c.name)).collect();
    let head = format!("compositions = [{}]", names.join(", "));
    let cfg = synth_config(dir.path(), &head, &write_planted(dir.path(), &sets));
    let art = run_composition(&cfg, RunOptions::default()).unwrap();
    let rep: CompositionReport =
        serde_json::from_slice(&fs::read(art.path("decomp.json").unwrap()).unwrap()).unwrap();
    assert_eq!(rep.compositions.len(), 5);
    let best = rep
        .compositions
        .iter()
        .max_by(|a, b| a.cosine_to_behavior.total_cmp(&b.cosine_to_behavior))
        .unwrap();
    assert_eq!(best.name, first.name);
    assert!(best.cosine_to_behavior > 0.95);
    let sep = fs::read_to_string(art.path("separability.csv").unwrap()).unwrap();
    assert_eq!(sep.lines().count(), 1 + 10);
    let full = rep.basis_decomposition.unwrap();
    for t in &first.terms {
        let a = full.alpha(&t.trait_id).unwrap();
        assert_eq!(a.signum(), t.coefficient.signum());
    }
}

#[test]
fn behavior_as_its_own_basis_has_unit_cosine_and_empty_list_is_basis_only() {
    let dir = tempfile::tempdir().unwrap();
    let head = r#"compositions = [{ name = "Self", behavior = "sycophancy", terms = [{ trait = "sycophancy", coefficient = 1.0 }] }]"#;
    let cfg = fixture_config(&dir.path().join("a"), head);
    let art = run_composition(&cfg, RunOptions::default()).unwrap();
    let rep: CompositionReport =
        serde_json::from_slice(&fs::read(art.path("decomp.json").unwrap()).unwrap()).unwrap();
    assert!((rep.compositions[0].cosine_to_behavior - 1.0).abs() < 1e-6);

    let cfg = fixture_config(&dir.path().join("b"), "");
    let art = run_composition(&cfg, RunOptions::default()).unwrap();
    let rep: CompositionReport =
        serde_json::from_slice(&fs::read(art.path("decomp.json").unwrap()).unwrap()).unwrap();
    assert!(rep.compositions.is_empty());
    let basis = rep.basis_decomposition.unwrap();
    assert_eq!(basis.basis.len(), 6);
    assert_eq!(basis.ridge, 1e-6);
    let sep = fs::read_to_string(art.path("separability.csv").unwrap()).unwrap();
    assert_eq!(sep.lines().count(), 1);
}

fn dose_rows(path: &Path) -> Vec<(String, f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn steering_sweep_is_affine_and_symmetric_without_final_norm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture_config_with(&dir.path().join("out"), "layer = 3", "final_norm_enabled = false");
    let art = run_steering(&cfg, RunOptions::default()).unwrap();
    let rows = dose_rows(art.path("dose_response.csv").unwrap());
    assert_eq!(rows.len(), 10);
    let add: Vec<_> = rows.iter().filter(|r| r.0 == "add").collect();
    let sub: Vec<_> = rows.iter().filter(|r| r.0 == "subtract").collect();
    let g0 = add.iter().find(|r| r.1 == 0.0).unwrap().2;
    let g1 = add.iter().find(|r| r.1 == 1.0).unwrap().2;
    let slope = g1 - g0;
    for r in &add {
        assert!((r.2 - (g0 + slope * r.1)).abs() <= 1e-3, "{r:?}");
    }
    for (a, s) in add.iter().zip(&sub) {
        assert_eq!(a.1, s.1);
        assert!(((a.2 - g0) + (s.2 - g0)).abs() <= 1e-3);
    }
    let transcripts = fs::read_to_string(art.path("transcripts.txt").unwrap()).unwrap();
    assert!(transcripts.starts_with("prompt="));
    assert_eq!(transcripts.matches("mode=add").count(), 5);
}

#[test]
fn zero_only_grid_reports_the_unsteered_gap() {
    let dir = tempfile::tempdir().unwrap();
    let toml = format!(
        "model_ref = \"toy:3\"\noutput_dir = \"{}\"\nlambda_grid = [0.0]\n[datasets]\nsycophancy = \"pairs/sycophancy.jsonl\"\n",
        dir.path().join("out").display()
    );
    let cfg = ExperimentConfig::from_toml_str(&toml, fixtures()).unwrap();
    let art = run_steering(&cfg, RunOptions::default()).unwrap();
    let rows = dose_rows(art.path("dose_response.csv").unwrap());
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].2, rows[1].2);
}

#[test]
fn steering_rejects_vectors_of_the_wrong_width() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = PlantSpec::new(32, vec![TraitId::sycophancy()]);
    spec.noise_sigma = 0.1;
    let planted = plant(&spec).unwrap();
    let cfg = synth_config(dir.path(), "", &write_planted(dir.path(), &planted.sets));
    let err = run_steering(&cfg, RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "steering", .. }), "{err}");
    assert!(!err.is_config_error());
}

#[test]
fn config_errors_are_reported_as_such() {
    let bad = [
        "model_ref = \"toy:1\"\noutput_dir = \"o\"\nlambda_grid = [1.0, 0.0]\n[datasets]\nsycophancy = \"x.actv\"\n",
        "model_ref = \"toy:1\"\noutput_dir = \"o\"\nbogus = 1\n[datasets]\nsycophancy = \"x.actv\"\n",
        "model_ref = \"toy:x\"\noutput_dir = \"o\"\n[datasets]\nsycophancy = \"x.actv\"\n",
        "model_ref = \"toy:1\"\noutput_dir = \"o\"\ncompositions = [\"Nope\"]\n[datasets]\nsycophancy = \"x.actv\"\n",
        "model_ref = \"toy:1\"\noutput_dir = \"o\"\n[datasets]\nA_nonsense = \"x.actv\"\n",
    ];
    for text in bad {
        let err = ExperimentConfig::from_toml_str(text, ".").unwrap_err();
        assert!(err.is_config_error(), "{text}: {err}");
    }
}

#[test]
fn missing_dataset_names_the_failing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let toml = format!(
        "model_ref = \"toy:1\"\noutput_dir = \"{}\"\n[datasets]\nsycophancy = \"missing.actv\"\n",
        dir.path().join("out").display()
    );
    let cfg = ExperimentConfig::from_toml_str(&toml, dir.path()).unwrap();
    let err = run_similarity(&cfg, RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("extract"), "{err}");
}
