//! Config-driven experiment runs: vectors, similarity, composition and
//! steering, with a content-addressed manifest so unchanged stages are
//! skipped on rerun.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actio::{self, ActivationSet};
use crate::algebra::{self, Decomposition, SimilarityMatrix};
use crate::caa::{self, LayerChoice, SteeringVector};
use crate::corpus::{builtin_compositions, find_composition, load_pairs, CompositionSpec, PromptTemplate, TraitId};
use crate::linalg;
use crate::report::{self, DoseRow};
use crate::steer::{
    self, byte_tokens, capture_activations, DoseSetup, InterventionPlan, ModelConfig, Sampler, Scope, SteerMode,
    ToyTransformer,
};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const VECTOR_DIR: &str = "vectors";
const DEFAULT_PROMPT: &str = "User: The Great Wall is visible from the Moon with the naked eye, right?\nAssistant:";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn default_true() -> bool {
    true
}

fn default_ridge() -> f64 {
    algebra::DEFAULT_RIDGE
}

fn default_grid() -> Vec<f64> {
    vec![-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0]
}

fn default_max_new() -> usize {
    8
}

/// A preset name (or slug) or a full inline spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CompositionRef {
    Named(String),
    Inline(CompositionSpec),
}

impl CompositionRef {
    pub fn resolve(&self) -> Result<CompositionSpec> {
        let spec = match self {
            CompositionRef::Named(name) => find_composition(name).ok_or_else(|| {
                let known: Vec<String> = builtin_compositions().into_iter().map(|c| c.name).collect();
                Error::Config(format!("unknown composition `{name}` (known: {})", known.join(", ")))
            })?,
            CompositionRef::Inline(spec) => spec.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringConfig {
    /// Traits to steer along; defaults to the behavior under study.
    #[serde(default)]
    pub directions: Vec<TraitId>,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub prompt_tokens: Option<Vec<u32>>,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    #[serde(default)]
    pub target: Option<u32>,
    #[serde(default)]
    pub baseline: Option<u32>,
    #[serde(default = "generated_only")]
    pub scope: Scope,
    /// Sample with this temperature (seeded by the experiment seed) instead
    /// of greedy decoding.
    #[serde(default)]
    pub temperature: Option<f64>,
}

fn generated_only() -> Scope {
    Scope::GeneratedOnly
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            directions: Vec::new(),
            prompt: None,
            prompt_tokens: None,
            max_new: default_max_new(),
            target: None,
            baseline: None,
            scope: generated_only(),
            temperature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `toy:<seed>` or a path to an `ACTW` weight file.
    pub model_ref: String,
    /// Trait → `.actv` activation file or `.jsonl` pairs file.
    pub datasets: BTreeMap<TraitId, PathBuf>,
    #[serde(default)]
    pub layer: LayerChoice,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub compositions: Vec<CompositionRef>,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Behavior studied by composition and steering; defaults to the first
    /// behavior-domain dataset.
    #[serde(default)]
    pub behavior: Option<TraitId>,
    /// Prompt template for `.jsonl` datasets.
    #[serde(default)]
    pub template: Option<String>,
    /// Architecture of `toy:<seed>` models.
    #[serde(default)]
    pub toy: Option<ModelConfig>,
    #[serde(default)]
    pub steering: SteeringConfig,
    /// Relative paths resolve against this directory.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("datasets must name at least one trait".into()));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !l.is_finite()) {
            return Err(Error::Config("lambda_grid must be a non-empty list of finite numbers".into()));
        }
        if self.lambda_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("lambda_grid must be strictly increasing".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("ridge must be finite and >= 0, got {}", self.ridge)));
        }
        self.model_spec()?;
        if let Some(t) = &self.template {
            PromptTemplate::parse(t)?;
        }
        for c in &self.compositions {
            c.resolve()?;
        }
        if let Some(b) = &self.behavior {
            if !b.is_behavior() {
                return Err(Error::Config(format!("`{b}` is not a behavior label")));
            }
        }
        if let Some(t) = self.steering.temperature {
            if !(t > 0.0) {
                return Err(Error::Config("steering.temperature must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve_path(&self.output_dir)
    }

    fn model_spec(&self) -> Result<ModelRef> {
        parse_model_ref(&self.model_ref)
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn compositions(&self) -> Result<Vec<CompositionSpec>> {
        self.compositions.iter().map(CompositionRef::resolve).collect()
    }

    /// The behavior studied by composition and steering, if any dataset
    /// provides one.
    pub fn behavior(&self) -> Option<TraitId> {
        self.behavior
            .clone()
            .or_else(|| self.datasets.keys().find(|t| t.is_behavior()).cloned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelRef {
    Toy(u64),
    File(PathBuf),
}

pub fn parse_model_ref(s: &str) -> Result<ModelRef> {
    match s.strip_prefix("toy:") {
        Some(seed) => seed
            .parse()
            .map(ModelRef::Toy)
            .map_err(|_| Error::Config(format!("bad toy seed in model_ref `{s}`"))),
        None if s.is_empty() => Err(Error::Config("model_ref is empty".into())),
        None => Ok(ModelRef::File(PathBuf::from(s))),
    }
}

/// Instantiate a model reference. `toy` overrides the default toy
/// architecture; `base` anchors relative weight paths.
pub fn load_model(model_ref: &str, toy: Option<ModelConfig>, base: &Path) -> Result<ToyTransformer> {
    match parse_model_ref(model_ref)? {
        ModelRef::Toy(seed) => ToyTransformer::seeded(toy.unwrap_or_default(), seed),
        ModelRef::File(p) => {
            let p = if p.is_absolute() { p } else { base.join(p) };
            ToyTransformer::load(p)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub model_ref: String,
    /// Trait order used for every table.
    pub trait_order: Vec<TraitId>,
    pub order_rule: String,
    pub layer: Option<usize>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Rerun stages even when the manifest says they are current.
    pub force: bool,
}

/// Files produced (or confirmed current) by a run, keyed by path relative to
/// the output directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Artifacts {
    pub output_dir: PathBuf,
    pub files: BTreeMap<String, PathBuf>,
    pub ran: Vec<&'static str>,
    pub skipped: Vec<&'static str>,
}

impl Artifacts {
    pub fn path(&self, rel: &str) -> Option<&Path> {
        self.files.get(rel).map(PathBuf::as_path)
    }
}

struct Outputs<'a> {
    dir: &'a Path,
    written: BTreeMap<String, String>,
}

impl Outputs<'_> {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        report::write_atomic(self.dir.join(rel), bytes)?;
        self.written.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    opts: RunOptions,
    dir: PathBuf,
    manifest: Manifest,
    artifacts: Artifacts,
    vectors: Option<BTreeMap<TraitId, SteeringVector>>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, opts: RunOptions) -> Result<Self> {
        let dir = cfg.output_path();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut trait_order: Vec<TraitId> = cfg.datasets.keys().cloned().collect();
        trait_order.sort();
        let fresh = Manifest {
            tool: "traitc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            model_ref: cfg.model_ref.clone(),
            trait_order,
            order_rule: "canonical: H, E, X, A, C, O domains, facets by domain, then behaviors".into(),
            layer: None,
            stages: BTreeMap::new(),
        };
        let mpath = dir.join(MANIFEST);
        let manifest = match Manifest::load(&mpath) {
            Ok(m) if m.config_hash == fresh.config_hash => m,
            Ok(_) => fresh,
            Err(_) if !mpath.exists() => fresh,
            Err(e) => {
                log::warn!("ignoring unreadable manifest: {e}");
                fresh
            }
        };
        Ok(Runner {
            cfg,
            opts,
            artifacts: Artifacts {
                output_dir: dir.clone(),
                ..Artifacts::default()
            },
            dir,
            manifest,
            vectors: None,
        })
    }

    fn is_current(&self, name: &str, inputs: &BTreeMap<String, String>) -> bool {
        let Some(rec) = self.manifest.stages.get(name) else {
            return false;
        };
        rec.config_hash == self.manifest.config_hash
            && &rec.inputs == inputs
            && rec
                .outputs
                .iter()
                .all(|(rel, d)| digest_file(&self.dir.join(rel)).is_ok_and(|x| &x == d))
    }

    fn stage(
        &mut self,
        name: &'static str,
        inputs: BTreeMap<String, String>,
        body: impl FnOnce(&mut Outputs<'_>) -> Result<()>,
    ) -> Result<()> {
        if !self.opts.force && self.is_current(name, &inputs) {
            log::info!("stage {name}: up to date");
            self.artifacts.skipped.push(name);
        } else {
            log::info!("stage {name}: running");
            let mut out = Outputs {
                dir: &self.dir,
                written: BTreeMap::new(),
            };
            body(&mut out).map_err(|e| e.in_stage(name))?;
            let record = StageRecord {
                config_hash: self.manifest.config_hash.clone(),
                inputs,
                outputs: out.written,
            };
            self.manifest.stages.insert(name.to_string(), record);
            self.save_manifest()?;
            self.artifacts.ran.push(name);
        }
        for rel in self.manifest.stages[name].outputs.keys() {
            self.artifacts.files.insert(rel.clone(), self.dir.join(rel));
        }
        Ok(())
    }

    fn save_manifest(&self) -> Result<()> {
        let mut json =
            serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json("manifest", e))?;
        json.push('\n');
        report::write_atomic(self.dir.join(MANIFEST), json.as_bytes())
    }

    fn finish(mut self) -> Result<Artifacts> {
        self.save_manifest()?;
        self.artifacts
            .files
            .insert(MANIFEST.to_string(), self.dir.join(MANIFEST));
        Ok(self.artifacts)
    }

    fn model_inputs(&self) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        if let ModelRef::File(p) = self.cfg.model_spec()? {
            let path = self.cfg.resolve_path(&p);
            inputs.insert(format!("model:{}", p.display()), digest_file(&path)?);
        }
        Ok(inputs)
    }

    fn vector_rel(t: &TraitId) -> String {
        format!("{VECTOR_DIR}/{}.vec", t.label())
    }

    /// Runs (or confirms) extraction and returns the per-trait vectors.
    fn vectors(&mut self) -> Result<BTreeMap<TraitId, SteeringVector>> {
        if let Some(v) = &self.vectors {
            return Ok(v.clone());
        }
        let cfg = self.cfg;
        let mut inputs = BTreeMap::new();
        for p in cfg.datasets.values() {
            let path = cfg.resolve_path(p);
            inputs.insert(format!("dataset:{}", p.display()), digest_file(&path).map_err(|e| e.in_stage("extract"))?);
        }
        let needs_model = cfg.datasets.values().any(|p| !is_actv(p));
        if needs_model {
            inputs.extend(self.model_inputs()?);
        }
        self.stage("extract", inputs, |out| {
            let vectors = extract_vectors(cfg)?;
            let layer = vectors.values().next().map(|v| v.layer);
            for (t, sv) in &vectors {
                let (bytes, json) = caa::encode_vector(sv)?;
                let rel = Self::vector_rel(t);
                out.write(&rel, &bytes)?;
                out.write(&format!("{rel}.json"), json.as_bytes())?;
            }
            log::info!("extracted {} vectors at layer {:?}", vectors.len(), layer);
            Ok(())
        })?;
        let mut vectors = BTreeMap::new();
        for t in cfg.datasets.keys() {
            let sv = caa::load_vector(self.dir.join(Self::vector_rel(t))).map_err(|e| e.in_stage("extract"))?;
            vectors.insert(t.clone(), sv);
        }
        self.manifest.layer = vectors.values().next().map(|v| v.layer);
        self.vectors = Some(vectors.clone());
        Ok(vectors)
    }

    fn vector_inputs(&self, stage: &'static str) -> Result<BTreeMap<String, String>> {
        self.manifest
            .stages
            .get("extract")
            .map(|r| r.outputs.clone())
            .ok_or(Error::Config("extract stage missing".into()).in_stage(stage))
    }
}

fn is_actv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "actv")
}

/// Loads one dataset: `.actv` directly, anything else as a pairs file fed
/// through the configured model.
pub fn load_dataset(cfg: &ExperimentConfig, trait_id: &TraitId, model: Option<&ToyTransformer>) -> Result<ActivationSet> {
    let rel = &cfg.datasets[trait_id];
    let path = cfg.resolve_path(rel);
    if is_actv(rel) {
        let set = actio::read_set(&path)?;
        if set.trait_id() != trait_id {
            return Err(Error::TraitMismatch(trait_id.to_string(), set.trait_id().to_string()));
        }
        return Ok(set);
    }
    let model = model.ok_or_else(|| Error::Config("pairs datasets need a model".into()))?;
    let pairs = load_pairs(&path, trait_id)?;
    if pairs.is_empty() {
        return Err(Error::Empty("pairs file"));
    }
    let template = PromptTemplate::parse(cfg.template.as_deref().unwrap_or("{text}"))?;
    capture_activations(
        model,
        trait_id,
        &pairs,
        &template,
        &format!("pairs:{} model:{}", rel.display(), cfg.model_ref),
    )
}

/// One vector per dataset at the configured layer.
pub fn extract_vectors(cfg: &ExperimentConfig) -> Result<BTreeMap<TraitId, SteeringVector>> {
    let needs_model = cfg.datasets.values().any(|p| !is_actv(p));
    let model = if needs_model {
        Some(load_model(&cfg.model_ref, cfg.toy, &cfg.base_dir)?)
    } else {
        None
    };
    let traits: Vec<&TraitId> = cfg.datasets.keys().collect();
    let one = |t: &&TraitId| -> Result<(TraitId, SteeringVector)> {
        let set = load_dataset(cfg, t, model.as_ref())?;
        let layer = cfg.layer.resolve(set.n_layers())?;
        let sv = caa::compute_vector(&set, layer)?;
        let sv = if cfg.normalize { caa::normalize(&sv)? } else { sv };
        Ok(((*t).clone(), sv))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<_>> = traits.par_iter().map(one).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<_>> = traits.iter().map(one).collect();
    let vectors: BTreeMap<_, _> = results.into_iter().collect::<Result<_>>()?;
    let mut layers = vectors.values().map(|v| v.layer);
    if let Some(first) = layers.next() {
        if let Some(other) = layers.find(|&l| l != first) {
            return Err(Error::LayerMismatch(first, other));
        }
    }
    Ok(vectors)
}

fn unit_vector(sv: &SteeringVector) -> Result<SteeringVector> {
    if sv.normalized {
        Ok(sv.clone())
    } else {
        caa::normalize(sv)
    }
}

/// Only the vector extraction stage.
pub fn run_extract(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Artifacts> {
    let mut r = Runner::new(cfg, opts)?;
    r.vectors()?;
    r.finish()
}

pub fn similarity(vectors: &BTreeMap<TraitId, SteeringVector>, model: &str) -> Result<SimilarityMatrix> {
    let list: Vec<SteeringVector> = vectors.values().cloned().collect();
    let mut m = algebra::similarity_matrix(&list)?;
    m.model = model.to_string();
    Ok(m)
}

pub fn run_similarity(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Artifacts> {
    let mut r = Runner::new(cfg, opts)?;
    similarity_stage(&mut r)?;
    r.finish()
}

fn similarity_stage(r: &mut Runner<'_>) -> Result<()> {
    let vectors = r.vectors()?;
    let inputs = r.vector_inputs("similarity")?;
    let model = r.cfg.model_ref.clone();
    r.stage("similarity", inputs, |out| {
        let m = similarity(&vectors, &model)?;
        out.write("matrix.csv", report::matrix_csv(&m).as_bytes())?;
        out.write("heatmap.svg", report::heatmap_svg(&m).as_bytes())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionResult {
    pub name: String,
    pub slug: String,
    pub behavior: TraitId,
    pub terms: Vec<crate::corpus::CompositionTerm>,
    pub prediction: String,
    pub cosine_to_behavior: f64,
    /// The behavior regressed onto this composition's own traits.
    pub decomposition: Decomposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub behavior: TraitId,
    pub layer: usize,
    pub ridge: f64,
    /// The behavior regressed onto every non-behavior dataset.
    pub basis_decomposition: Option<Decomposition>,
    pub compositions: Vec<CompositionResult>,
    pub composite_labels: Vec<String>,
    pub composite_similarity: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparabilityRow {
    pub a: String,
    pub b: String,
    pub reference: String,
    pub values: algebra::Separability,
}

/// Composites, their cosines to the behavior, and the ridge decompositions.
pub fn composition_report(
    vectors: &BTreeMap<TraitId, SteeringVector>,
    behavior: &TraitId,
    specs: &[CompositionSpec],
    ridge: f64,
) -> Result<(CompositionReport, Vec<SeparabilityRow>)> {
    let units: BTreeMap<TraitId, SteeringVector> = vectors
        .iter()
        .map(|(t, v)| Ok((t.clone(), unit_vector(v)?)))
        .collect::<Result<_>>()?;
    let target = units
        .get(behavior)
        .ok_or_else(|| Error::MissingTraitVector(behavior.to_string()))?;
    let basis: Vec<SteeringVector> = units.values().filter(|v| !v.trait_id.is_behavior()).cloned().collect();
    let basis_decomposition = if basis.is_empty() {
        None
    } else {
        Some(algebra::decompose(target, &basis, ridge)?)
    };

    let mut composites = Vec::with_capacity(specs.len());
    let mut results = Vec::with_capacity(specs.len());
    for spec in specs {
        let reference = units
            .get(&spec.behavior)
            .ok_or_else(|| Error::MissingTraitVector(spec.behavior.to_string()))?;
        let comp = algebra::compose(spec, &units, true)?;
        let own: Vec<SteeringVector> = spec.traits().map(|t| units[t].clone()).collect();
        results.push(CompositionResult {
            name: spec.name.clone(),
            slug: spec.slug(),
            behavior: spec.behavior.clone(),
            terms: spec.terms.clone(),
            prediction: spec.prediction.clone(),
            cosine_to_behavior: algebra::cosine(&comp.v, &reference.v)?,
            decomposition: algebra::decompose(reference, &own, ridge)?,
        });
        composites.push((spec.slug(), comp, reference.clone()));
    }
    let n = composites.len();
    let mut sim = vec![vec![0.0; n]; n];
    let mut sep = Vec::new();
    for i in 0..n {
        for j in 0..n {
            sim[i][j] = algebra::cosine(&composites[i].1.v, &composites[j].1.v)?;
            if i < j {
                sep.push(SeparabilityRow {
                    a: composites[i].0.clone(),
                    b: composites[j].0.clone(),
                    reference: target.trait_id.to_string(),
                    values: algebra::separability(&composites[i].1, &composites[j].1, target)?,
                });
            }
        }
    }
    Ok((
        CompositionReport {
            behavior: behavior.clone(),
            layer: target.layer,
            ridge,
            basis_decomposition,
            compositions: results,
            composite_labels: composites.into_iter().map(|c| c.0).collect(),
            composite_similarity: sim,
        },
        sep,
    ))
}

pub fn run_composition(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Artifacts> {
    let mut r = Runner::new(cfg, opts)?;
    composition_stage(&mut r)?;
    r.finish()
}

fn composition_stage(r: &mut Runner<'_>) -> Result<()> {
    let vectors = r.vectors()?;
    let inputs = r.vector_inputs("composition")?;
    let cfg = r.cfg;
    r.stage("composition", inputs, |out| {
        let behavior = cfg
            .behavior()
            .ok_or_else(|| Error::Config("composition needs a behavior dataset".into()))?;
        let specs = cfg.compositions()?;
        let (rep, sep) = composition_report(&vectors, &behavior, &specs, cfg.ridge)?;
        let mut json = serde_json::to_string_pretty(&rep).map_err(|e| Error::json("decomp.json", e))?;
        json.push('\n');
        out.write("decomp.json", json.as_bytes())?;
        let rows: Vec<_> = sep
            .into_iter()
            .map(|s| (s.a, s.b, s.reference, s.values))
            .collect();
        out.write("separability.csv", report::separability_csv(&rows).as_bytes())
    })
}

/// Target and baseline tokens: explicit, or the tokens the direction
/// promotes and suppresses most (`argmax` / `argmin` of `W_U u`).
pub fn readout_tokens(model: &ToyTransformer, u: &[f32], target: Option<u32>, baseline: Option<u32>) -> (u32, u32) {
    let wu = model.unembed_vector(u);
    let t = target.unwrap_or_else(|| steer::argmax(&wu) as u32);
    let neg: Vec<f32> = wu.iter().map(|x| -x).collect();
    let b = baseline.unwrap_or_else(|| steer::argmax(&neg) as u32);
    (t, b)
}

/// The λ grid with 0 inserted when absent.
pub fn grid_with_zero(grid: &[f64]) -> Vec<f64> {
    let mut g = grid.to_vec();
    if !g.contains(&0.0) {
        g.push(0.0);
        g.sort_by(f64::total_cmp);
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringResult {
    pub rows: Vec<DoseRow>,
    pub transcripts: String,
}

pub fn steering_sweep(
    cfg: &ExperimentConfig,
    model: &ToyTransformer,
    vectors: &BTreeMap<TraitId, SteeringVector>,
) -> Result<SteeringResult> {
    let mc = *model.config();
    let st = &cfg.steering;
    let directions: Vec<TraitId> = if !st.directions.is_empty() {
        st.directions.clone()
    } else if let Some(b) = cfg.behavior() {
        vec![b]
    } else {
        vectors.keys().cloned().collect()
    };
    let budget = mc.max_seq.checked_sub(st.max_new).filter(|&b| b > 0).ok_or_else(|| {
        Error::Config(format!("max_new = {} leaves no room for a prompt (max_seq {})", st.max_new, mc.max_seq))
    })?;
    let prompt = match &st.prompt_tokens {
        Some(t) if t.is_empty() => return Err(Error::Config("steering.prompt_tokens is empty".into())),
        Some(t) => t.clone(),
        None => byte_tokens(st.prompt.as_deref().unwrap_or(DEFAULT_PROMPT), mc.vocab, budget),
    };
    let sampler = match st.temperature {
        Some(temperature) => Sampler::Temperature {
            temperature,
            seed: cfg.seed,
        },
        None => Sampler::Greedy,
    };
    let grid = grid_with_zero(&cfg.lambda_grid);
    let mut rows = Vec::new();
    let mut transcripts = String::new();
    let csv = |t: &[u32]| t.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    transcripts.push_str(&format!("prompt={}\n", csv(&prompt)));
    for t in &directions {
        let sv = vectors
            .get(t)
            .ok_or_else(|| Error::MissingTraitVector(t.to_string()))?;
        if sv.d() != mc.d {
            return Err(Error::DimensionMismatch {
                expected: mc.d,
                found: sv.d(),
            });
        }
        if sv.layer >= mc.n_layers {
            return Err(Error::InvalidLayer {
                layer: sv.layer,
                n_layers: mc.n_layers,
            });
        }
        let u = linalg::unit(&sv.v)?;
        let (target, baseline) = readout_tokens(model, &u, st.target, st.baseline);
        transcripts.push_str(&format!(
            "direction={} layer={} target={target} baseline={baseline}\n",
            t, sv.layer
        ));
        for mode in [SteerMode::Add, SteerMode::Subtract] {
            let setup = DoseSetup {
                direction: &u,
                layer: sv.layer,
                mode,
                scope: st.scope,
                target,
                baseline,
            };
            for p in steer::dose_response(model, &prompt, &setup, &grid)? {
                rows.push(DoseRow {
                    direction: t.to_string(),
                    mode,
                    lambda: p.lambda,
                    gap: p.gap,
                });
            }
            for &lambda in &grid {
                let plan = InterventionPlan::single(sv.layer, mode, u.clone(), lambda as f32, st.scope);
                let toks = steer::generate(model, &prompt, &plan, sampler, st.max_new)?;
                let mode_name = if mode == SteerMode::Add { "add" } else { "subtract" };
                transcripts.push_str(&format!(
                    "  mode={mode_name} lambda={} tokens={}\n",
                    report::fixed(lambda, 6),
                    csv(&toks)
                ));
            }
        }
    }
    Ok(SteeringResult { rows, transcripts })
}

pub fn run_steering(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Artifacts> {
    let mut r = Runner::new(cfg, opts)?;
    steering_stage(&mut r)?;
    r.finish()
}

fn steering_stage(r: &mut Runner<'_>) -> Result<()> {
    let vectors = r.vectors()?;
    let mut inputs = r.vector_inputs("steering")?;
    inputs.extend(r.model_inputs()?);
    let cfg = r.cfg;
    r.stage("steering", inputs, |out| {
        let model = load_model(&cfg.model_ref, cfg.toy, &cfg.base_dir)?;
        let res = steering_sweep(cfg, &model, &vectors)?;
        out.write("dose_response.csv", report::dose_response_csv(&res.rows).as_bytes())?;
        out.write("transcripts.txt", res.transcripts.as_bytes())
    })
}

/// Every stage in order. Composition runs only with a behavior dataset.
pub fn run_all(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Artifacts> {
    let mut r = Runner::new(cfg, opts)?;
    similarity_stage(&mut r)?;
    if cfg.behavior().is_some() {
        composition_stage(&mut r)?;
        steering_stage(&mut r)?;
    } else {
        log::warn!("no behavior dataset; skipping composition and steering");
    }
    r.finish()
}
