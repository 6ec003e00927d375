use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the workbench can report.
///
/// Variants are grouped by the stage that raises them; the CLI maps
/// [`Error::is_config_error`] to exit code 2 and everything else to 3.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // -- corpus --
    #[error("unknown trait label `{0}`")]
    UnknownTrait(String),
    #[error("line {line}: {message}")]
    PairParse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: duplicate pair_id {pair_id}")]
    DuplicatePairId { line: usize, pair_id: u64 },
    #[error("invalid template: {0}")]
    Template(String),
    #[error("invalid composition `{name}`: {reason}")]
    InvalidComposition { name: String, reason: String },

    // -- actio --
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported container version {0}")]
    VersionMismatch(u32),
    #[error("truncated file: record {record} is incomplete")]
    Truncated { record: u64 },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid activation set: {0}")]
    InvalidSet(String),
    #[error("non-finite value in record {record}")]
    NonFinite { record: usize },
    #[error("duplicate record (pair_id {pair_id}, polarity {polarity}, layer {layer})")]
    DuplicateRecord { pair_id: u64, polarity: i8, layer: u16 },
    #[error("trait mismatch: {0} vs {1}")]
    TraitMismatch(String, String),
    #[error("malformed container: {0}")]
    Malformed(String),

    // -- caa / algebra --
    #[error("layer {layer} has no {side} records")]
    MissingSide { layer: usize, side: &'static str },
    #[error("degenerate direction (norm {norm:e})")]
    DegenerateDirection { norm: f64 },
    #[error("layer mismatch: {0} vs {1}")]
    LayerMismatch(usize, usize),
    #[error("invalid layer {layer} for a model with {n_layers} layers")]
    InvalidLayer { layer: usize, n_layers: usize },
    #[error("no vector for trait `{0}`")]
    MissingTraitVector(String),
    #[error("vector `{0}` must be normalized")]
    NotNormalized(String),
    #[error("basis is ill-conditioned (condition number {condition:e} > {limit:e}); raise the ridge or prune the basis")]
    IllConditioned { condition: f64, limit: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),

    // -- synth --
    #[error("infeasible Gram matrix: {0}")]
    InfeasibleGram(String),

    // -- steer --
    #[error("invalid intervention plan: {0}")]
    InvalidPlan(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    // -- pipeline --
    #[error("config error: {0}")]
    Config(String),
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by the user's configuration rather than data.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::UnknownTrait(_)
            | Error::Template(_)
            | Error::InvalidComposition { .. }
            | Error::InvalidPlan(_) => true,
            Error::Stage { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
