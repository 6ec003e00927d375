use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn traitc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_traitc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = traitc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    traitc(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pairs(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/pairs").join(name)
}

/// Planted sets for four traits plus a behavior, and their extracted vectors.
fn planted(dir: &Path) -> Vec<PathBuf> {
    ok(&[
        "synth", "gen", "--d", "48", "--traits", "4", "--noise", "0.05", "--pairs", "16", "--seed", "2",
        "--alphas", "agreeableness=1,extraversion=1,honesty_humility=-1", "--out-dir", s(&dir.join("syn")),
    ]);
    ["honesty_humility", "emotionality", "extraversion", "agreeableness", "sycophancy"]
        .iter()
        .map(|t| {
            let out = dir.join(format!("v/{t}.vec"));
            ok(&[
                "extract", "--actv", s(&dir.join(format!("syn/{t}.actv"))), "--layer", "0", "--normalize",
                "--out", s(&out),
            ]);
            out
        })
        .collect()
}

#[test]
fn synth_gen_writes_sets_truth_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "synth".to_string(), "gen".into(), "--d".into(), "16".into(), "--traits".into(), "3".into(),
            "--pairs".into(), "4".into(), "--noise".into(), "0.5".into(), "--out-dir".into(), s(out).into(),
        ]
    };
    for sub in ["a", "b"] {
        let a = args(&dir.path().join(sub));
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for f in ["honesty_humility.actv", "truth/emotionality.vec", "truth.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(a.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["gram"][1][1].as_f64().unwrap().round(), 1.0);
    let inspect = ok(&["actv", "inspect", s(&a.join("extraversion.actv"))]);
    assert!(inspect.contains("records:  8"), "{inspect}");
}

#[test]
fn sim_compose_and_decompose_recover_the_plant() {
    let dir = tempfile::tempdir().unwrap();
    let vecs = planted(dir.path());
    let sim = dir.path().join("sim");
    let mut args = vec!["sim", "--out", s(&sim), "--vecs"];
    args.extend(vecs.iter().map(|p| s(p)));
    ok(&args);
    let csv = fs::read_to_string(dir.path().join("sim/matrix.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("trait,honesty_humility,emotionality"));
    for (i, row) in rows[1..].iter().enumerate() {
        assert_eq!(row.split(',').nth(i + 1), Some("1.000000"));
    }
    assert!(fs::read_to_string(dir.path().join("sim/heatmap.svg")).unwrap().starts_with("<svg"));

    let out = dir.path().join("d.json");
    ok(&[
        "decompose", "--behavior", s(&vecs[4]), "--basis", s(&vecs[0]), s(&vecs[1]), s(&vecs[2]), s(&vecs[3]),
        "--ridge", "0", "--out", s(&out),
    ]);
    let d: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let alphas: Vec<f64> = d["alphas"].as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).collect();
    assert!(alphas[0] < -0.4 && alphas[2] > 0.4 && alphas[3] > 0.4 && alphas[1].abs() < 0.1, "{alphas:?}");

    let spec = dir.path().join("spec.toml");
    fs::write(
        &spec,
        "name = \"Planted\"\nbehavior = \"sycophancy\"\nterms = [\n  { trait = \"agreeableness\", coefficient = 1.0 },\n  \
         { trait = \"extraversion\", coefficient = 1.0 },\n  { trait = \"honesty_humility\", coefficient = -1.0 },\n]\n",
    )
    .unwrap();
    let composed = dir.path().join("c.vec");
    let mut args = vec!["compose", "--spec", s(&spec), "--out", s(&composed), "--vecs"];
    args.extend(vecs.iter().map(|p| s(p)));
    let report = ok(&args);
    let cos: f64 = report.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(cos > 0.99, "{report}");
}

#[test]
fn exit_codes_separate_usage_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["extract", "--bogus"]), 2);
    assert_eq!(code(&["sim"]), 2);
    let missing = dir.path().join("none.actv");
    assert_eq!(code(&["extract", "--actv", s(&missing), "--out", s(&dir.path().join("x.vec"))]), 3);
    let bad = dir.path().join("bad.actv");
    fs::write(&bad, b"NOPE0000").unwrap();
    assert_eq!(code(&["actv", "inspect", s(&bad)]), 3);
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "model_ref = \"toy:1\"\nunknown_key = 3\n").unwrap();
    assert_eq!(code(&["report", "--config", s(&cfg)]), 2);
    assert_eq!(code(&["compose", "--spec", "no such preset", "--vecs", s(&missing), "--out", "x"]), 2);
    let vecs = planted(dir.path());
    assert_eq!(
        code(&["compose", "--spec", "deferential_agreement", "--vecs", s(&vecs[0]), "--out", s(&dir.path().join("c.vec"))]),
        3
    );
    let out = Command::new(env!("CARGO_BIN_EXE_traitc"))
        .args(["actv", "inspect", s(&vecs[0])])
        .env("TRAITC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn steer_verbs_are_deterministic_and_respect_plans() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("toy.actw");
    let small = ["--d", "32", "--max-seq", "24"];
    let mut init = vec!["steer", "init", "--seed", "5", "--out", s(&w)];
    init.extend(small);
    ok(&init);
    let gen = |plan: Option<&Path>| {
        let mut a = vec!["steer", "run", "--model", s(&w), "--prompt-tokens", "1,2,3", "--max-new", "6"];
        a.extend(small);
        if let Some(p) = plan {
            a.extend(["--plan", s(p)]);
        }
        ok(&a)
    };
    let base = gen(None);
    assert_eq!(base, gen(None));
    assert_eq!(base.trim().split(',').count(), 6);

    let (a_pairs, actv) = (pairs("A.jsonl"), dir.path().join("A.actv"));
    let mut cap = vec!["actv", "capture", "--pairs", s(&a_pairs), "--model", s(&w), "--out", s(&actv)];
    cap.extend(small);
    ok(&cap);
    let inspect = ok(&["actv", "inspect", s(&actv)]);
    assert!(inspect.contains("records:  128"), "{inspect}");
    let vec = dir.path().join("a3.vec");
    ok(&["extract", "--actv", s(&actv), "--layer", "3", "--normalize", "--out", s(&vec)]);

    let zero = dir.path().join("zero.json");
    fs::write(&zero, r#"[{"layer": 3, "mode": "add", "vec_file": "a3.vec", "lambda": 0.0}]"#).unwrap();
    assert_eq!(gen(Some(&zero)), base);

    let dose = dir.path().join("dose.csv");
    let mut a = vec![
        "steer", "dose", "--model", s(&w), "--prompt-tokens", "1,2,3", "--vec", s(&vec), "--lambdas", "-1,0,1",
        "--target", "4", "--baseline", "9", "--out", s(&dose),
    ];
    a.extend(small);
    ok(&a);
    let csv = fs::read_to_string(&dose).unwrap();
    assert_eq!(csv.lines().next(), Some("direction,mode,lambda,gap"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn transcode_fit_sense_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let actv = dir.path().join("A.actv");
    ok(&[
        "actv", "capture", "--pairs", s(&pairs("A.jsonl")), "--model", "toy:1", "--d", "32", "--max-seq", "40",
        "--out", s(&actv),
    ]);
    let t = dir.path().join("t.actw");
    ok(&["transcode", "fit", "--actv", s(&actv), "--src", "0", "--dst", "1", "--ridge", "1e-3", "--out", s(&t)]);
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("t.actw.json")).unwrap()).unwrap();
    assert_eq!(meta["n_samples"], 32);
    assert_eq!(code(&["transcode", "fit", "--actv", s(&actv), "--src", "0", "--dst", "9", "--out", s(&t)]), 3);
    let vec = dir.path().join("a0.vec");
    ok(&["extract", "--actv", s(&actv), "--layer", "0", "--normalize", "--out", s(&vec)]);
    let gains = dir.path().join("gains.csv");
    ok(&["transcode", "sense", "--t", s(&t), "--vec", s(&vec), "--top", "4", "--out", s(&gains)]);
    let csv = fs::read_to_string(&gains).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let report = dir.path().join("hops.csv");
    ok(&["transcode", "report", "--t", s(&t), "--vec", s(&vec), "--out", s(&report)]);
    let rows = fs::read_to_string(&report).unwrap();
    assert_eq!(rows.lines().next(), Some("src_layer,dst_layer,gain"));
    assert!(rows.lines().nth(1).unwrap().starts_with("0,1,"));
}

#[test]
fn report_reruns_only_stale_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    let datasets: String = [("H", "honesty_humility"), ("A", "agreeableness"), ("sycophancy", "sycophancy")]
        .iter()
        .map(|(f, t)| format!("{t} = {:?}\n", s(&pairs(&format!("{f}.jsonl")))))
        .collect();
    fs::write(
        &cfg,
        format!(
            "model_ref = \"toy:2\"\noutput_dir = \"out\"\nlambda_grid = [0.0, 1.0]\n[datasets]\n{datasets}\
             [toy]\nd = 32\nmax_seq = 40\n[steering]\nprompt = \"hi\"\nmax_new = 2\n"
        ),
    )
    .unwrap();
    let first = ok(&["report", "--config", s(&cfg)]);
    assert!(first.contains("ran      steering"), "{first}");
    let matrix = fs::read(dir.path().join("out/matrix.csv")).unwrap();
    let second = ok(&["report", "--config", s(&cfg)]);
    assert!(!second.contains("ran "), "{second}");
    fs::write(dir.path().join("out/matrix.csv"), "tampered").unwrap();
    let third = ok(&["sim", "--config", s(&cfg)]);
    assert!(third.contains("ran      similarity") && third.contains("current  extract"), "{third}");
    assert_eq!(fs::read(dir.path().join("out/matrix.csv")).unwrap(), matrix);
    let forced = ok(&["report", "--config", s(&cfg), "--force"]);
    assert!(forced.contains("ran      extract"));

    ok(&["transcode", "--config", s(&cfg), "--ridge", "1e-2"]);
    let hops = fs::read_to_string(dir.path().join("out/transcoders/agreeableness.csv")).unwrap();
    assert_eq!(hops.lines().count(), 4, "{hops}");
    assert!(dir.path().join("out/transcoders/sycophancy.2-3.actw").exists());
}
