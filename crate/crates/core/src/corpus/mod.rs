//! Trait taxonomy, contrastive datasets and preset compositions.
//!
//! Everything downstream names traits through [`TraitId`]; behaviour labels
//! such as `sycophancy` share the type under [`Domain::Behavior`].

mod pairs;
mod presets;
mod taxonomy;
mod template;

pub use pairs::{load_pairs, parse_pairs, save_pairs, ContrastivePair, Polarity};
pub use presets::{builtin_compositions, find_composition, CompositionSpec, CompositionTerm};
pub use taxonomy::{builtin_taxonomy, canonical_order, Domain, TraitId, TraitTaxonomy};
pub use template::{render_prompt, PromptTemplate};
