use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// HEXACO domain, the interstitial scale, or a behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    HonestyHumility,
    Emotionality,
    Extraversion,
    Agreeableness,
    Conscientiousness,
    Openness,
    Interstitial,
    Behavior,
}

impl Domain {
    pub const HEXACO: [Domain; 6] = [
        Domain::HonestyHumility,
        Domain::Emotionality,
        Domain::Extraversion,
        Domain::Agreeableness,
        Domain::Conscientiousness,
        Domain::Openness,
    ];

    /// Single-letter prefix used in facet labels (`A_flexibility`).
    pub fn letter(self) -> Option<char> {
        Some(match self {
            Domain::HonestyHumility => 'H',
            Domain::Emotionality => 'E',
            Domain::Extraversion => 'X',
            Domain::Agreeableness => 'A',
            Domain::Conscientiousness => 'C',
            Domain::Openness => 'O',
            Domain::Interstitial | Domain::Behavior => return None,
        })
    }

    pub fn key(self) -> &'static str {
        match self {
            Domain::HonestyHumility => "honesty_humility",
            Domain::Emotionality => "emotionality",
            Domain::Extraversion => "extraversion",
            Domain::Agreeableness => "agreeableness",
            Domain::Conscientiousness => "conscientiousness",
            Domain::Openness => "openness",
            Domain::Interstitial => "interstitial",
            Domain::Behavior => "behavior",
        }
    }

    /// Facet names under this domain, in inventory order.
    pub fn facets(self) -> &'static [&'static str] {
        match self {
            Domain::HonestyHumility => &["sincerity", "fairness", "greed_avoidance", "modesty"],
            Domain::Emotionality => &["fearfulness", "anxiety", "dependence", "sentimentality"],
            Domain::Extraversion => &[
                "social_self_esteem",
                "social_boldness",
                "sociability",
                "liveliness",
            ],
            Domain::Agreeableness => &["forgivingness", "gentleness", "flexibility", "patience"],
            Domain::Conscientiousness => {
                &["organization", "diligence", "perfectionism", "prudence"]
            }
            Domain::Openness => &[
                "aesthetic_appreciation",
                "inquisitiveness",
                "creativity",
                "unconventionality",
            ],
            Domain::Interstitial => &["altruism"],
            Domain::Behavior => &[],
        }
    }

    fn from_letter(c: &str) -> Option<Domain> {
        Domain::HEXACO
            .into_iter()
            .find(|d| d.letter().map(|l| l.to_string()).as_deref() == Some(c))
    }

    fn from_key(s: &str) -> Option<Domain> {
        Domain::HEXACO.into_iter().find(|d| d.key() == s)
    }
}

/// Facet spellings that appear in the literature but differ from the
/// inventory name.
const FACET_ALIASES: &[(&str, &str)] = &[
    ("forgiveness", "forgivingness"),
    ("organisation", "organization"),
    ("aesthetic", "aesthetic_appreciation"),
];

/// A trait, facet or behaviour label.
///
/// The rendered label is the canonical key: `agreeableness`, `A_flexibility`,
/// `altruism`, `sycophancy`. Parsing a rendered label gives back the same id.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraitId {
    domain: Domain,
    facet: Option<&'static str>,
    label: String,
}

impl TraitId {
    pub fn domain_trait(domain: Domain) -> Self {
        assert!(
            !matches!(domain, Domain::Interstitial | Domain::Behavior),
            "{domain:?} has no domain-level trait"
        );
        TraitId {
            domain,
            facet: None,
            label: domain.key().to_string(),
        }
    }

    pub fn facet(domain: Domain, name: &str) -> Result<Self> {
        let name = FACET_ALIASES
            .iter()
            .find(|(alias, _)| *alias == name)
            .map_or(name, |(_, canonical)| canonical);
        let facet = domain
            .facets()
            .iter()
            .copied()
            .find(|f| *f == name)
            .ok_or_else(|| Error::UnknownTrait(format!("{}:{name}", domain.key())))?;
        let label = match domain.letter() {
            Some(l) => format!("{l}_{facet}"),
            None => facet.to_string(),
        };
        Ok(TraitId {
            domain,
            facet: Some(facet),
            label,
        })
    }

    pub fn behavior(name: &str) -> Result<Self> {
        let valid = name
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_lowercase())
            && name
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
        if !valid || Domain::from_key(name).is_some() || name == "altruism" {
            return Err(Error::UnknownTrait(name.to_string()));
        }
        Ok(TraitId {
            domain: Domain::Behavior,
            facet: None,
            label: name.to_string(),
        })
    }

    pub fn sycophancy() -> Self {
        TraitId::behavior("sycophancy").expect("valid behaviour label")
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn facet_name(&self) -> Option<&'static str> {
        self.facet
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_behavior(&self) -> bool {
        self.domain == Domain::Behavior
    }

    fn facet_rank(&self) -> usize {
        match self.facet {
            None => 0,
            Some(f) => 1 + self.domain.facets().iter().position(|x| *x == f).unwrap_or(0),
        }
    }
}

impl Ord for TraitId {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.domain, self.facet_rank(), &self.label).cmp(&(
            other.domain,
            other.facet_rank(),
            &other.label,
        ))
    }
}

impl PartialOrd for TraitId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for TraitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl FromStr for TraitId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(d) = Domain::from_key(s).or_else(|| Domain::from_letter(s)) {
            return Ok(TraitId::domain_trait(d));
        }
        if s == "altruism" || s == "I_altruism" {
            return TraitId::facet(Domain::Interstitial, "altruism");
        }
        if let Some((prefix, facet)) = s.split_once('_') {
            if let Some(d) = Domain::from_letter(prefix) {
                return TraitId::facet(d, facet);
            }
        }
        TraitId::behavior(s)
    }
}

impl Serialize for TraitId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.label)
    }
}

impl<'de> Deserialize<'de> for TraitId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The fixed trait hierarchy plus known behaviour labels.
#[derive(Debug, Clone)]
pub struct TraitTaxonomy {
    traits: Vec<TraitId>,
}

impl TraitTaxonomy {
    pub fn all(&self) -> &[TraitId] {
        &self.traits
    }

    pub fn domains(&self) -> impl Iterator<Item = &TraitId> {
        self.traits
            .iter()
            .filter(|t| t.facet.is_none() && !t.is_behavior())
    }

    /// The 24 HEXACO facets (interstitial excluded).
    pub fn facets(&self) -> impl Iterator<Item = &TraitId> {
        self.traits
            .iter()
            .filter(|t| t.facet.is_some() && t.domain != Domain::Interstitial)
    }

    pub fn interstitial(&self) -> impl Iterator<Item = &TraitId> {
        self.traits.iter().filter(|t| t.domain == Domain::Interstitial)
    }

    pub fn behaviors(&self) -> impl Iterator<Item = &TraitId> {
        self.traits.iter().filter(|t| t.is_behavior())
    }

    pub fn facets_of(&self, domain: Domain) -> impl Iterator<Item = &TraitId> {
        self.traits
            .iter()
            .filter(move |t| t.domain == domain && t.facet.is_some())
    }

    /// Strict lookup: only labels registered in this taxonomy resolve.
    pub fn lookup(&self, label: &str) -> Option<&TraitId> {
        let parsed: TraitId = label.parse().ok()?;
        self.traits.iter().find(|t| **t == parsed)
    }

    pub fn contains(&self, id: &TraitId) -> bool {
        self.traits.contains(id)
    }
}

pub fn builtin_taxonomy() -> TraitTaxonomy {
    let mut traits = Vec::with_capacity(32);
    for d in Domain::HEXACO {
        traits.push(TraitId::domain_trait(d));
    }
    for d in Domain::HEXACO.into_iter().chain([Domain::Interstitial]) {
        for f in d.facets() {
            traits.push(TraitId::facet(d, f).expect("facet table entry"));
        }
    }
    traits.push(TraitId::sycophancy());
    TraitTaxonomy { traits }
}

/// Reporting order for the top-level datasets: H, E, X, A, C, O, sycophancy.
pub fn canonical_order() -> Vec<TraitId> {
    Domain::HEXACO
        .into_iter()
        .map(TraitId::domain_trait)
        .chain([TraitId::sycophancy()])
        .collect()
}
