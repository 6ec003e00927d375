use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TraitId;
use crate::{Error, Result};

/// Which side of a contrastive pair an activation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
}

impl Polarity {
    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "+",
            Polarity::Negative => "-",
        })
    }
}

/// One high-trait / low-trait rendering of the same situation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastivePair {
    pub pair_id: u64,
    pub trait_id: TraitId,
    pub positive_text: String,
    pub negative_text: String,
    pub meta: BTreeMap<String, String>,
}

impl ContrastivePair {
    pub fn text(&self, polarity: Polarity) -> &str {
        match polarity {
            Polarity::Positive => &self.positive_text,
            Polarity::Negative => &self.negative_text,
        }
    }
}

#[derive(Deserialize)]
struct RawLine {
    pair_id: Option<serde_json::Value>,
    #[serde(rename = "trait")]
    trait_label: Option<String>,
    positive: Option<String>,
    negative: Option<String>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct OutLine<'a> {
    pair_id: u64,
    #[serde(rename = "trait")]
    trait_label: &'a str,
    positive: &'a str,
    negative: &'a str,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    meta: &'a BTreeMap<String, String>,
}

/// Parse line-delimited pair records. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse_pairs(text: &str, expected: &TraitId) -> Result<Vec<ContrastivePair>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(line).map_err(|e| Error::PairParse {
            line: line_no,
            message: e.to_string(),
        })?;
        let pair_id = raw
            .pair_id
            .ok_or(Error::MissingField { line: line_no, field: "pair_id" })?
            .as_u64()
            .ok_or_else(|| Error::PairParse {
                line: line_no,
                message: "pair_id must be a non-negative integer".into(),
            })?;
        let label = raw
            .trait_label
            .ok_or(Error::MissingField { line: line_no, field: "trait" })?;
        let positive_text = raw
            .positive
            .ok_or(Error::MissingField { line: line_no, field: "positive" })?;
        let negative_text = raw
            .negative
            .ok_or(Error::MissingField { line: line_no, field: "negative" })?;
        let trait_id: TraitId = label.parse().map_err(|_| Error::PairParse {
            line: line_no,
            message: format!("unknown trait `{label}`"),
        })?;
        if &trait_id != expected {
            return Err(Error::PairParse {
                line: line_no,
                message: format!("trait `{trait_id}` does not match dataset trait `{expected}`"),
            });
        }
        if positive_text == negative_text {
            return Err(Error::PairParse {
                line: line_no,
                message: "positive and negative text are identical".into(),
            });
        }
        if !seen.insert(pair_id) {
            return Err(Error::DuplicatePairId { line: line_no, pair_id });
        }
        out.push(ContrastivePair {
            pair_id,
            trait_id,
            positive_text,
            negative_text,
            meta: raw.meta,
        });
    }
    Ok(out)
}

pub fn load_pairs(path: impl AsRef<Path>, expected: &TraitId) -> Result<Vec<ContrastivePair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pairs = parse_pairs(&text, expected)?;
    if pairs.is_empty() {
        log::warn!("{}: no contrastive pairs", path.display());
    } else {
        log::info!("{}: loaded {} pairs for {expected}", path.display(), pairs.len());
    }
    Ok(pairs)
}

pub fn save_pairs(path: impl AsRef<Path>, pairs: &[ContrastivePair]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for p in pairs {
        let line = OutLine {
            pair_id: p.pair_id,
            trait_label: p.trait_id.label(),
            positive: &p.positive_text,
            negative: &p.negative_text,
            meta: &p.meta,
        };
        serde_json::to_writer(&mut buf, &line).map_err(|e| Error::json("pairs", e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn agree() -> TraitId {
        "agreeableness".parse().unwrap()
    }

    fn line(id: u64) -> String {
        format!(
            r#"{{"pair_id":{id},"trait":"agreeableness","positive":"Fine, let's do it your way.","negative":"No. My way or nothing."}}"#
        )
    }

    #[test]
    fn eight_lines_eight_pairs() {
        let text: String = (0..8).map(|i| line(i) + "\n").collect();
        let pairs = parse_pairs(&text, &agree()).unwrap();
        assert_eq!(pairs.len(), 8);
        assert!(pairs.iter().map(|p| p.pair_id).eq(0..8));
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_pairs(&path, &agree()).unwrap().is_empty());
    }

    #[test]
    fn missing_negative_names_field() {
        let text = format!(
            "{}\n{}\n",
            line(0),
            r#"{"pair_id":1,"trait":"agreeableness","positive":"Sure."}"#
        );
        match parse_pairs(&text, &agree()) {
            Err(Error::MissingField { line: 2, field: "negative" }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json\n", line(0));
        assert!(matches!(
            parse_pairs(&text, &agree()),
            Err(Error::PairParse { line: 2, .. })
        ));
    }

    #[test]
    fn duplicate_pair_id_rejected() {
        let text = format!("{}\n{}\n", line(3), line(3));
        assert!(matches!(
            parse_pairs(&text, &agree()),
            Err(Error::DuplicatePairId { line: 2, pair_id: 3 })
        ));
    }

    #[test]
    fn identical_texts_rejected() {
        let text = r#"{"pair_id":0,"trait":"agreeableness","positive":"same","negative":"same"}"#;
        assert!(parse_pairs(text, &agree()).is_err());
    }

    #[test]
    fn wrong_trait_rejected() {
        let text = line(0).replace("agreeableness", "openness");
        assert!(parse_pairs(&text, &agree()).is_err());
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(
            texts in proptest::collection::vec(("[ -~]{1,40}", "[ -~]{1,40}", "\\PC{0,10}"), 0..12)
        ) {
            let pairs: Vec<ContrastivePair> = texts
                .into_iter()
                .enumerate()
                .filter(|(_, (p, n, _))| p != n)
                .map(|(i, (p, n, m))| ContrastivePair {
                    pair_id: i as u64 * 3,
                    trait_id: agree(),
                    positive_text: p,
                    negative_text: n,
                    meta: if m.is_empty() { BTreeMap::new() } else { BTreeMap::from([("note".to_string(), m)]) },
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.jsonl");
            save_pairs(&path, &pairs).unwrap();
            prop_assert_eq!(load_pairs(&path, &agree()).unwrap(), pairs);
        }
    }
}
