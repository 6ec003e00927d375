use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Domain, TraitId};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionTerm {
    #[serde(rename = "trait")]
    pub trait_id: TraitId,
    pub coefficient: f64,
}

/// A signed combination of trait directions hypothesised to produce a behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionSpec {
    pub name: String,
    pub behavior: TraitId,
    pub terms: Vec<CompositionTerm>,
    #[serde(default)]
    pub prediction: String,
}

impl CompositionSpec {
    pub fn new(
        name: impl Into<String>,
        behavior: TraitId,
        terms: Vec<(TraitId, f64)>,
        prediction: impl Into<String>,
    ) -> Result<Self> {
        let spec = CompositionSpec {
            name: name.into(),
            behavior,
            terms: terms
                .into_iter()
                .map(|(trait_id, coefficient)| CompositionTerm { trait_id, coefficient })
                .collect(),
            prediction: prediction.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| Error::InvalidComposition {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.behavior.domain() != Domain::Behavior {
            return Err(fail("behavior must be a behaviour label"));
        }
        if self.terms.is_empty() {
            return Err(fail("no terms"));
        }
        let mut seen = HashSet::new();
        for t in &self.terms {
            if t.coefficient == 0.0 || !t.coefficient.is_finite() {
                return Err(fail(&format!("coefficient of {} must be finite and non-zero", t.trait_id)));
            }
            if !seen.insert(&t.trait_id) {
                return Err(fail(&format!("{} appears twice", t.trait_id)));
            }
        }
        Ok(())
    }

    pub fn coefficient(&self, id: &TraitId) -> Option<f64> {
        self.terms.iter().find(|t| &t.trait_id == id).map(|t| t.coefficient)
    }

    pub fn traits(&self) -> impl Iterator<Item = &TraitId> {
        self.terms.iter().map(|t| &t.trait_id)
    }

    /// Lower-case, underscore-separated form of the name, used for file names
    /// and config references.
    pub fn slug(&self) -> String {
        slugify(&self.name)
    }
}

fn slugify(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') && !out.is_empty() {
            out.push('_');
        }
    }
    out.trim_end_matches('_').to_string()
}

fn facet(label: &str) -> TraitId {
    label.parse().expect("preset facet label")
}

/// The five facet-level sycophancy pathways, each as `+a +b -c`.
pub fn builtin_compositions() -> Vec<CompositionSpec> {
    let rows: [(&str, [&str; 3], &str); 5] = [
        (
            "Deferential Agreement",
            ["A_flexibility", "E_sentimentality", "O_inquisitiveness"],
            "More agreement, especially with emotionally charged claims; fewer counter-suggestions. Removal: more polite disagreement.",
        ),
        (
            "Dependent Compliance",
            ["A_gentleness", "E_dependence", "C_diligence"],
            "Compliance even with trivially false claims, little elaboration. Removal: more critical elaboration.",
        ),
        (
            "Status-Conscious Compliance",
            ["X_social_self_esteem", "A_patience", "H_modesty"],
            "Strategic agreement with praise and flattery markers. Removal: blunter disagreement.",
        ),
        (
            "Protective Compliance",
            ["A_forgivingness", "E_fearfulness", "O_creativity"],
            "Risk-averse compliance where conflict is implied. Removal: more willingness to challenge.",
        ),
        (
            "Instrumental Ingratiation",
            ["A_flexibility", "X_liveliness", "H_fairness"],
            "High-energy agreement with influential sources. Removal: flatter, more neutral tone.",
        ),
    ];
    rows.into_iter()
        .map(|(name, [a, b, c], prediction)| {
            CompositionSpec::new(
                name,
                TraitId::sycophancy(),
                vec![(facet(a), 1.0), (facet(b), 1.0), (facet(c), -1.0)],
                prediction,
            )
            .expect("preset is valid")
        })
        .collect()
}

/// Find a preset by display name or slug (`deferential_agreement`).
pub fn find_composition(name: &str) -> Option<CompositionSpec> {
    let wanted = slugify(name);
    builtin_compositions().into_iter().find(|c| c.slug() == wanted)
}
