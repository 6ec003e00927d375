use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use traitc::actio::{self, ActivationSet, Polarity};
use traitc::algebra;
use traitc::caa::{self, LayerChoice, SteeringVector};
use traitc::corpus::{find_composition, load_pairs, CompositionSpec, PromptTemplate, TraitId};
use traitc::linalg;
use traitc::pipeline::{self, sha256_hex, ExperimentConfig, RunOptions};
use traitc::report;
use traitc::steer::{self, DoseSetup, ModelConfig, Sampler, Scope, SteerMode, ToyTransformer};
use traitc::synth::{self, PlantSpec};
use traitc::transcoder::{self, LinearTranscoder};
use traitc::{Error, Result};

#[derive(Parser)]
#[command(name = "traitc", version, about = "Trait steering vectors: extraction, algebra, steering and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Steering vector from an activation file, or the extract stage of a config.
    Extract(ExtractArgs),
    /// Cosine-similarity matrix and heatmap.
    Sim(SimArgs),
    /// Weighted sum of trait vectors.
    Compose(ComposeArgs),
    /// Ridge decomposition of a behavior vector onto trait vectors.
    Decompose(DecomposeArgs),
    /// Toy-model interventions.
    Steer(SteerArgs),
    /// Cross-layer linear transcoders.
    Transcode(TranscodeArgs),
    /// Synthetic activation sets with planted directions.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Every pipeline stage for a config.
    Report(ConfigArgs),
    /// Activation file utilities.
    #[command(subcommand)]
    Actv(ActvCmd),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Rerun stages even when the manifest says they are current.
    #[arg(long)]
    force: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<(ExperimentConfig, RunOptions)> {
        Ok((ExperimentConfig::load(&self.config)?, RunOptions { force: self.force }))
    }
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long, conflicts_with_all = ["actv", "out"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "config")]
    force: bool,
    #[arg(long, required_unless_present = "config")]
    actv: Option<PathBuf>,
    /// Layer index or `auto`.
    #[arg(long, default_value = "auto")]
    layer: LayerChoice,
    #[arg(long)]
    normalize: bool,
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, conflicts_with_all = ["vecs", "out"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "config")]
    force: bool,
    #[arg(long, num_args = 1.., required_unless_present = "config")]
    vecs: Vec<PathBuf>,
    /// Output directory for matrix.csv and heatmap.svg.
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    #[arg(long, default_value = "unknown")]
    model: String,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long, conflicts_with_all = ["spec", "vecs", "out"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "config")]
    force: bool,
    /// Preset name or slug, or a TOML file holding one spec.
    #[arg(long, required_unless_present = "config")]
    spec: Option<String>,
    #[arg(long, num_args = 1.., required_unless_present = "config")]
    vecs: Vec<PathBuf>,
    /// Keep the raw weighted sum instead of renormalizing.
    #[arg(long)]
    raw: bool,
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long, conflicts_with_all = ["behavior", "basis", "out"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "config")]
    force: bool,
    #[arg(long, required_unless_present = "config")]
    behavior: Option<PathBuf>,
    #[arg(long, num_args = 1.., required_unless_present = "config")]
    basis: Vec<PathBuf>,
    #[arg(long, default_value_t = algebra::DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct SteerArgs {
    #[command(subcommand)]
    command: Option<SteerCmd>,
    /// Run the steering stage of a config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, requires = "config")]
    force: bool,
}

#[derive(Args, Clone)]
struct ToyArgs {
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 128)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    max_seq: usize,
    #[arg(long)]
    no_final_norm: bool,
    #[arg(long)]
    tied: bool,
}

impl ToyArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            vocab: self.vocab,
            max_seq: self.max_seq,
            d_ff: 0,
            final_norm_enabled: !self.no_final_norm,
            tied_unembedding: self.tied,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Add,
    Subtract,
    ProjectOut,
}

impl From<ModeArg> for SteerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Add => SteerMode::Add,
            ModeArg::Subtract => SteerMode::Subtract,
            ModeArg::ProjectOut => SteerMode::ProjectOut,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    All,
    Last,
    GeneratedOnly,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::All => Scope::All,
            ScopeArg::Last => Scope::Last,
            ScopeArg::GeneratedOnly => Scope::GeneratedOnly,
        }
    }
}

#[derive(Subcommand)]
enum SteerCmd {
    /// Generate tokens under an intervention plan.
    Run {
        /// `toy:<seed>` or an ACTW weight file.
        #[arg(long)]
        model: String,
        #[command(flatten)]
        toy: ToyArgs,
        /// Comma-separated token ids.
        #[arg(long)]
        prompt_tokens: String,
        /// JSON list of {layer, mode, vec_file, lambda, scope}.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: DecodeMode,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Logit gap between two tokens across a λ grid.
    Dose {
        #[arg(long)]
        model: String,
        #[command(flatten)]
        toy: ToyArgs,
        #[arg(long)]
        prompt_tokens: String,
        #[arg(long)]
        vec: PathBuf,
        /// Defaults to the vector's layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, value_enum, default_value = "add")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "generated-only")]
        scope: ScopeArg,
        /// Comma-separated, ascending.
        #[arg(long, allow_hyphen_values = true)]
        lambdas: String,
        #[arg(long)]
        target: Option<u32>,
        #[arg(long)]
        baseline: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded toy weights to an ACTW file.
    Init {
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        toy: ToyArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum RecordFilter {
    All,
    Positive,
    Negative,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct TranscodeArgs {
    #[command(subcommand)]
    command: Option<TranscodeCmd>,
    /// Fit every adjacent-layer hop for each dataset of a config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3, requires = "config")]
    ridge: f64,
}

#[derive(Subcommand)]
enum TranscodeCmd {
    /// Fit a transcoder between two layers of an activation file.
    Fit {
        #[arg(long)]
        actv: PathBuf,
        #[arg(long)]
        src: usize,
        #[arg(long)]
        dst: usize,
        #[arg(long, default_value_t = 1e-4)]
        ridge: f64,
        /// Which records train the map.
        #[arg(long, value_enum, default_value = "all")]
        records: RecordFilter,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gain of a transcoder along a vector.
    Sense {
        #[arg(long = "t")]
        transcoder: PathBuf,
        #[arg(long)]
        vec: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-hop gains; each vector is used for the hop starting at its layer.
    Report {
        #[arg(long = "t", num_args = 1.., required = true)]
        transcoders: Vec<PathBuf>,
        #[arg(long = "vec", num_args = 1.., required = true)]
        vecs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthGenArgs {
    /// TOML file with the same keys as the flags (snake_case).
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    #[serde(default = "d256")]
    d: usize,
    #[arg(long, default_value_t = 7)]
    #[serde(default = "seven")]
    traits: usize,
    #[arg(long, default_value_t = 1.0)]
    #[serde(default = "one")]
    intensity: f64,
    #[arg(long, default_value_t = 0.0)]
    #[serde(default)]
    noise: f64,
    #[arg(long, default_value_t = 64)]
    #[serde(default = "sixty_four")]
    pairs: usize,
    /// Off-diagonal of an equicorrelated planted Gram matrix.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    #[serde(default)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    seed: u64,
    /// Plant the behavior as `trait=alpha,…` over the other traits.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(default)]
    alphas: Option<String>,
    #[arg(long, default_value = "sycophancy")]
    #[serde(default = "syc")]
    behavior: String,
    #[arg(long, required_unless_present = "config")]
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

fn d256() -> usize {
    256
}
fn seven() -> usize {
    7
}
fn one() -> f64 {
    1.0
}
fn sixty_four() -> usize {
    64
}
fn syc() -> String {
    "sycophancy".into()
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Write planted activation sets, ground-truth vectors and a manifest.
    Gen(SynthGenArgs),
}

#[derive(Subcommand)]
enum ActvCmd {
    /// Print header fields and per-layer counts.
    Inspect { file: PathBuf },
    /// Run a pairs file through a toy model and record every layer.
    Capture {
        #[arg(long)]
        pairs: PathBuf,
        /// Defaults to the trait named in the first pair.
        #[arg(long = "trait")]
        trait_id: Option<TraitId>,
        #[arg(long)]
        model: String,
        #[command(flatten)]
        toy: ToyArgs,
        #[arg(long, default_value = "{text}")]
        template: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load_model(model: &str, toy: &ToyArgs) -> Result<ToyTransformer> {
    pipeline::load_model(model, Some(toy.config()), Path::new(""))
}

fn parse_tokens(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| config_error(format!("bad token id `{t}`"))))
        .collect()
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .map(|t| t.parse().map_err(|_| config_error(format!("bad number `{t}`"))))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    report::write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

fn load_unit(path: &Path) -> Result<SteeringVector> {
    let v = caa::load_vector(path)?;
    if v.normalized {
        Ok(v)
    } else {
        log::warn!("{}: normalizing", path.display());
        caa::normalize(&v)
    }
}

fn print_artifacts(a: &pipeline::Artifacts) {
    for name in &a.ran {
        println!("ran      {name}");
    }
    for name in &a.skipped {
        println!("current  {name}");
    }
    for p in a.files.values() {
        println!("wrote    {}", p.display());
    }
}

fn extract(a: ExtractArgs) -> Result<()> {
    if let Some(config) = a.config {
        let cfg = ExperimentConfig::load(config)?;
        print_artifacts(&pipeline::run_extract(&cfg, RunOptions { force: a.force })?);
        return Ok(());
    }
    let (actv, out) = (a.actv.unwrap(), a.out.unwrap());
    let set = actio::read_set(&actv)?;
    let layer = a.layer.resolve(set.n_layers())?;
    let mut sv = caa::compute_vector(&set, layer)?;
    if a.normalize {
        sv = caa::normalize(&sv)?;
    }
    caa::save_vector(&sv, &out)?;
    println!(
        "{} layer {layer}: |v| = {:.6}, {} + / {} -",
        sv.trait_id,
        sv.norm(),
        sv.n_pos,
        sv.n_neg
    );
    Ok(())
}

fn sim(a: SimArgs) -> Result<()> {
    if let Some(config) = a.config {
        let cfg = ExperimentConfig::load(config)?;
        print_artifacts(&pipeline::run_similarity(&cfg, RunOptions { force: a.force })?);
        return Ok(());
    }
    let out = a.out.unwrap();
    let mut vectors = BTreeMap::new();
    for p in &a.vecs {
        let v = caa::load_vector(p)?;
        if vectors.insert(v.trait_id.clone(), v).is_some() {
            return Err(config_error(format!("{}: trait given twice", p.display())));
        }
    }
    let m = pipeline::similarity(&vectors, &a.model)?;
    write_text(&out.join("matrix.csv"), &report::matrix_csv(&m))?;
    report::emit_heatmap(&m, out.join("heatmap.svg"))?;
    print!("{}", report::matrix_csv(&m));
    Ok(())
}

fn load_spec(s: &str) -> Result<CompositionSpec> {
    if let Some(spec) = find_composition(s) {
        return Ok(spec);
    }
    let path = Path::new(s);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let spec: CompositionSpec =
            toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        return Ok(spec);
    }
    Err(config_error(format!("`{s}` is neither a preset nor a spec file")))
}

fn compose(a: ComposeArgs) -> Result<()> {
    if let Some(config) = a.config {
        let cfg = ExperimentConfig::load(config)?;
        print_artifacts(&pipeline::run_composition(&cfg, RunOptions { force: a.force })?);
        return Ok(());
    }
    let spec = load_spec(a.spec.as_deref().unwrap())?;
    let vectors: BTreeMap<TraitId, SteeringVector> = a
        .vecs
        .iter()
        .map(|p| load_unit(p).map(|v| (v.trait_id.clone(), v)))
        .collect::<Result<_>>()?;
    let v = algebra::compose(&spec, &vectors, !a.raw)?;
    caa::save_vector(&v, a.out.as_ref().unwrap())?;
    if let Some(b) = vectors.get(&spec.behavior) {
        println!("cos({}, {}) = {:.6}", spec.slug(), b.trait_id, algebra::cosine(&v.v, &b.v)?);
    }
    Ok(())
}

fn decompose(a: DecomposeArgs) -> Result<()> {
    if let Some(config) = a.config {
        let cfg = ExperimentConfig::load(config)?;
        print_artifacts(&pipeline::run_composition(&cfg, RunOptions { force: a.force })?);
        return Ok(());
    }
    let behavior = load_unit(a.behavior.as_ref().unwrap())?;
    let basis: Vec<SteeringVector> = a.basis.iter().map(|p| load_unit(p)).collect::<Result<_>>()?;
    let d = algebra::decompose(&behavior, &basis, a.ridge)?;
    write_json(a.out.as_ref().unwrap(), &d)?;
    for (t, alpha) in d.basis.iter().zip(&d.alphas) {
        println!("{t:<24} {alpha:+.6}");
    }
    println!("cosine_fit {:.6}  residual {:.6}", d.cosine_fit, d.residual_norm);
    Ok(())
}

fn steer_cmd(a: SteerArgs) -> Result<()> {
    let cmd = match (a.command, a.config) {
        (_, Some(config)) => {
            let cfg = ExperimentConfig::load(config)?;
            print_artifacts(&pipeline::run_steering(&cfg, RunOptions { force: a.force })?);
            return Ok(());
        }
        (Some(cmd), None) => cmd,
        (None, None) => return Err(config_error("steer needs a subcommand or --config")),
    };
    match cmd {
        SteerCmd::Run {
            model,
            toy,
            prompt_tokens,
            plan,
            mode,
            temperature,
            seed,
            max_new,
            out,
        } => {
            let model = load_model(&model, &toy)?;
            let prompt = parse_tokens(&prompt_tokens)?;
            let plan = match plan {
                Some(p) => steer::load_plan(p)?,
                None => steer::InterventionPlan::empty(),
            };
            let sampler = match mode {
                DecodeMode::Greedy => Sampler::Greedy,
                DecodeMode::Sample => Sampler::Temperature { temperature, seed },
            };
            let toks = steer::generate(&model, &prompt, &plan, sampler, max_new)?;
            let line = toks.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
            match out {
                Some(p) => write_text(&p, &format!("{line}\n"))?,
                None => println!("{line}"),
            }
        }
        SteerCmd::Dose {
            model,
            toy,
            prompt_tokens,
            vec,
            layer,
            mode,
            scope,
            lambdas,
            target,
            baseline,
            out,
        } => {
            let model = load_model(&model, &toy)?;
            let prompt = parse_tokens(&prompt_tokens)?;
            let sv = load_unit(&vec)?;
            let lambdas = parse_floats(&lambdas)?;
            let (target, baseline) = pipeline::readout_tokens(&model, &sv.v, target, baseline);
            let setup = DoseSetup {
                direction: &sv.v,
                layer: layer.unwrap_or(sv.layer),
                mode: mode.into(),
                scope: scope.into(),
                target,
                baseline,
            };
            let rows: Vec<report::DoseRow> = steer::dose_response(&model, &prompt, &setup, &lambdas)?
                .into_iter()
                .map(|p| report::DoseRow {
                    direction: sv.trait_id.to_string(),
                    mode: setup.mode,
                    lambda: p.lambda,
                    gap: p.gap,
                })
                .collect();
            let csv = report::dose_response_csv(&rows);
            write_text(&out, &csv)?;
            print!("{csv}");
        }
        SteerCmd::Init { seed, toy, out } => {
            let model = ToyTransformer::seeded(toy.config(), seed)?;
            let n = model.save(&out)?;
            println!("wrote {} ({n} bytes)", out.display());
        }
    }
    Ok(())
}

/// Writes `transcoders/<trait>.<src>-<dst>.actw` and a per-trait
/// transmission table along that trait's own per-layer vectors.
fn transcode_config(config: &Path, ridge: f64) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let needs_model = cfg.datasets.values().any(|p| p.extension().is_none_or(|e| e != "actv"));
    let model = if needs_model {
        Some(pipeline::load_model(&cfg.model_ref, cfg.toy, &cfg.base_dir)?)
    } else {
        None
    };
    let dir = cfg.output_path().join("transcoders");
    for t in cfg.datasets.keys() {
        let set = pipeline::load_dataset(&cfg, t, model.as_ref())?;
        let hops: Vec<(usize, usize)> = (1..set.n_layers()).map(|l| (l - 1, l)).collect();
        let ts = transcoder::fit_hops(&set, &hops, ridge)?;
        for tc in &ts {
            let path = dir.join(format!("{}.{}-{}.actw", t.label(), tc.src_layer, tc.dst_layer));
            tc.save(&path)?;
        }
        let dirs: BTreeMap<usize, Vec<f32>> = caa::compute_all_layers(&set)
            .vectors
            .into_iter()
            .map(|(l, v)| caa::normalize(&v).map(|u| (l, u.v)))
            .collect::<Result<_>>()?;
        let rows = transcoder::transmission_report(&ts, &dirs)?;
        let csv_path = dir.join(format!("{}.csv", t.label()));
        write_text(&csv_path, &report::transmission_csv(&rows))?;
        println!("wrote    {}", csv_path.display());
    }
    Ok(())
}

fn transcode(a: TranscodeArgs) -> Result<()> {
    let cmd = match (a.command, a.config) {
        (_, Some(config)) => return transcode_config(&config, a.ridge),
        (Some(cmd), None) => cmd,
        (None, None) => return Err(config_error("transcode needs a subcommand or --config")),
    };
    match cmd {
        TranscodeCmd::Fit {
            actv,
            src,
            dst,
            ridge,
            records,
            out,
        } => {
            let set = actio::read_set(&actv)?;
            let keep: Vec<_> = set
                .records()
                .iter()
                .filter(|r| match records {
                    RecordFilter::All => true,
                    RecordFilter::Positive => r.polarity == Polarity::Positive,
                    RecordFilter::Negative => r.polarity == Polarity::Negative,
                })
                .cloned()
                .collect();
            let set = ActivationSet::new(set.trait_id().clone(), set.d(), set.n_layers(), keep, set.source.clone())?;
            let t = transcoder::fit_from_set(&set, src, dst, ridge)?;
            t.save(&out)?;
            println!(
                "{src} -> {dst}: {} samples, fit_rmse {:.6e}, |W|_F {:.6}",
                t.n_samples,
                t.fit_rmse,
                t.frobenius_norm()
            );
        }
        TranscodeCmd::Sense {
            transcoder,
            vec,
            top,
            out,
        } => {
            let t = LinearTranscoder::load(&transcoder)?;
            let sv = load_unit(&vec)?;
            let s = t.sensitivity(&sv.v, top)?;
            let csv = report::gains_csv(s.gain, &s.top_coords);
            write_text(&out, &csv)?;
            print!("{csv}");
        }
        TranscodeCmd::Report { transcoders, vecs, out } => {
            let ts: Vec<LinearTranscoder> = transcoders.iter().map(LinearTranscoder::load).collect::<Result<_>>()?;
            let mut dirs = BTreeMap::new();
            for p in &vecs {
                let v = load_unit(p)?;
                dirs.insert(v.layer, v.v);
            }
            let rows = transcoder::transmission_report(&ts, &dirs)?;
            let csv = report::transmission_csv(&rows);
            write_text(&out, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthTruth {
    spec: PlantSpec,
    behavior: Option<TraitId>,
    alphas: BTreeMap<TraitId, f64>,
    /// Realized Gram matrix of the planted directions, in `spec.traits` order.
    gram: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct SynthManifest {
    tool: &'static str,
    version: &'static str,
    files: BTreeMap<String, String>,
}

fn parse_alphas(s: &str) -> Result<BTreeMap<TraitId, f64>> {
    s.split(',')
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| config_error(format!("alpha `{kv}` is not trait=value")))?;
            let t: TraitId = k.trim().parse()?;
            let a: f64 = v.trim().parse().map_err(|_| config_error(format!("bad alpha `{v}`")))?;
            Ok((t, a))
        })
        .collect()
}

fn synth_gen(mut a: SynthGenArgs) -> Result<()> {
    if let Some(config) = a.config.take() {
        let text = fs::read_to_string(&config).map_err(|e| Error::Io {
            path: config.clone(),
            source: e,
        })?;
        let mut from_file: SynthGenArgs =
            toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", config.display())))?;
        if let Some(out) = a.out_dir.take() {
            from_file.out_dir = Some(out);
        } else if let Some(out) = &from_file.out_dir {
            from_file.out_dir = Some(config.parent().unwrap_or(Path::new("")).join(out));
        }
        a = from_file;
    }
    let out_dir = a.out_dir.clone().ok_or_else(|| config_error("synth gen needs --out-dir"))?;
    let behavior: TraitId = a.behavior.parse()?;
    let alphas = a.alphas.as_deref().map(parse_alphas).transpose()?.unwrap_or_default();
    let mut traits = synth::default_traits(a.traits);
    if !alphas.is_empty() {
        traits.retain(|t| t != &behavior);
        for t in alphas.keys() {
            if !traits.contains(t) {
                traits.push(t.clone());
            }
        }
    }
    let k = traits.len();
    let mut spec = PlantSpec::new(a.d, traits);
    spec.intensity_scale = a.intensity;
    spec.noise_sigma = a.noise;
    spec.n_pairs = a.pairs;
    spec.seed = a.seed;
    if a.rho != 0.0 {
        spec.gram = Some(synth::equicorrelated_gram(k, a.rho));
    }
    let planted = synth::plant(&spec)?;
    let mut files = BTreeMap::new();
    let mut emit = |rel: String, bytes: Vec<u8>| -> Result<()> {
        report::write_atomic(out_dir.join(&rel), &bytes)?;
        files.insert(rel, sha256_hex(&bytes));
        Ok(())
    };
    let mut directions = planted.directions.clone();
    let mut sets = planted.sets;
    if !alphas.is_empty() {
        let (u, set) = synth::plant_behavior(&behavior, &planted.directions, &alphas, &spec)?;
        directions.insert(behavior.clone(), u);
        sets.insert(behavior.clone(), set);
    }
    for (t, set) in &sets {
        let mut bytes = Vec::new();
        actio::encode_set(set, &mut bytes)?;
        emit(format!("{}.actv", t.label()), bytes)?;
    }
    for (t, u) in &directions {
        let sv = SteeringVector::from_direction(t.clone(), 0, u.clone());
        let (bytes, json) = caa::encode_vector(&sv)?;
        emit(format!("truth/{}.vec", t.label()), bytes)?;
        emit(format!("truth/{}.vec.json", t.label()), json.into_bytes())?;
    }
    let gram = spec
        .traits
        .iter()
        .map(|a| {
            spec.traits
                .iter()
                .map(|b| linalg::dot(&directions[a], &directions[b]))
                .collect()
        })
        .collect();
    let truth = SynthTruth {
        spec: spec.clone(),
        behavior: (!alphas.is_empty()).then(|| behavior.clone()),
        alphas,
        gram,
    };
    let mut json = serde_json::to_string_pretty(&truth).map_err(|e| config_error(e.to_string()))?;
    json.push('\n');
    emit("truth.json".into(), json.into_bytes())?;
    let manifest = SynthManifest {
        tool: "traitc",
        version: env!("CARGO_PKG_VERSION"),
        files,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    println!(
        "planted {} traits (d = {}, {} pairs, snr {}) in {}",
        sets.len(),
        spec.d,
        spec.n_pairs,
        spec.snr(),
        out_dir.display()
    );
    Ok(())
}

fn actv_cmd(cmd: ActvCmd) -> Result<()> {
    match cmd {
        ActvCmd::Inspect { file } => {
            let set = actio::read_set(&file)?;
            print!("{}", set.summary());
            println!("header:   {} bytes", actio::header_len(set.trait_id().label().len()));
        }
        ActvCmd::Capture {
            pairs,
            trait_id,
            model,
            toy,
            template,
            out,
        } => {
            let trait_id = match trait_id {
                Some(t) => t,
                None => first_trait(&pairs)?,
            };
            let model_ref = model.clone();
            let model = load_model(&model, &toy)?;
            let pairs_v = load_pairs(&pairs, &trait_id)?;
            let template = PromptTemplate::parse(&template)?;
            let set = steer::capture_activations(
                &model,
                &trait_id,
                &pairs_v,
                &template,
                &format!("pairs:{} model:{model_ref}", pairs.display()),
            )?;
            let n = actio::write_set(&set, &out)?;
            println!("wrote {} ({} records, {n} bytes)", out.display(), set.records().len());
        }
    }
    Ok(())
}

fn first_trait(pairs: &Path) -> Result<TraitId> {
    #[derive(Deserialize)]
    struct Head {
        #[serde(rename = "trait")]
        trait_id: TraitId,
    }
    let text = fs::read_to_string(pairs).map_err(|e| Error::Io {
        path: pairs.to_path_buf(),
        source: e,
    })?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or(Error::Empty("pairs file"))?;
    let head: Head = serde_json::from_str(line).map_err(|e| Error::PairParse {
        line: 1,
        message: e.to_string(),
    })?;
    Ok(head.trait_id)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TRAITC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_error(format!("TRAITC_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config_error(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Extract(a) => extract(a),
        Command::Sim(a) => sim(a),
        Command::Compose(a) => compose(a),
        Command::Decompose(a) => decompose(a),
        Command::Steer(a) => steer_cmd(a),
        Command::Transcode(a) => transcode(a),
        Command::Synth(SynthCmd::Gen(a)) => synth_gen(a),
        Command::Report(a) => {
            let (cfg, opts) = a.load()?;
            print_artifacts(&pipeline::run_all(&cfg, opts)?);
            Ok(())
        }
        Command::Actv(c) => actv_cmd(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut shown = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let msg = s.to_string();
                if !shown.contains(&msg) {
                    eprintln!("  caused by: {msg}");
                }
                shown = msg;
                src = s.source();
            }
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
