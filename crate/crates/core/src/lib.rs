//! Trait-direction workbench.
//!
//! Extracts contrastive mean-difference directions from residual-stream
//! activations, analyses their geometry (cosine similarity, composition,
//! least-squares decomposition, projection), fits linear cross-layer
//! transcoders, and steers a small deterministic decoder to test causal
//! claims. A synthetic generator with planted directions provides ground
//! truth for every numeric routine.
//!
//! Module map:
//!
//! - [`corpus`]: trait taxonomy, contrastive pair datasets, preset compositions
//! - [`actio`]: the `ACTV` activation container and `ACTW` named-tensor file
//! - [`caa`]: mean-difference steering vectors and layer selection
//! - [`algebra`]: cosine geometry, composition, decomposition, projection
//! - [`synth`]: planted-direction activation generator
//! - [`steer`]: toy transformer with residual-stream interventions
//! - [`transcoder`]: affine layer-to-layer maps and their sensitivity
//! - [`pipeline`]: config-driven end-to-end runs and their manifests
//! - [`report`]: CSV and SVG emission

pub mod actio;
pub mod algebra;
pub mod caa;
pub mod corpus;
mod error;
pub mod linalg;
pub mod pipeline;
pub mod report;
pub mod steer;
pub mod synth;
pub mod transcoder;

pub use error::{Error, Result};
