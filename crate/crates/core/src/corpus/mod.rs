//! Annotated sentences, synthetic mini-languages and their ingestion paths.

mod conllu;
mod generate;
mod languages;
mod pairs;
pub mod schema;
mod spec;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conllu::{parse_conllu, parse_feats};
pub use generate::{generate_corpus, label_marginals, presence_rates};
pub use languages::{default_specs, spec_for};
pub use pairs::{make_minimal_pairs, MinimalPair};
pub use spec::{Adposition, Cell, Lexicon, MiniLanguageSpec, Paradigm, Paradigms, Thing, WordOrder};
pub use vocab::{Encoded, Vocabulary, BOS, EOS, PAD, UNK};

/// One (concept, value) pair such as `(Number, Plur)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConceptLabel {
    pub concept: String,
    pub value: String,
}

impl ConceptLabel {
    /// Rejects illegal values for concepts in the schema table.
    pub fn new(concept: impl Into<String>, value: impl Into<String>) -> Result<Self> {
        let (concept, value) = (concept.into(), value.into());
        if !schema::is_legal(&concept, &value) {
            return Err(crate::error::invalid(format!("{value} is not a legal {concept} value")));
        }
        Ok(Self { concept, value })
    }

    pub(crate) fn of(concept: &str, value: &str) -> Self {
        Self {
            concept: concept.to_owned(),
            value: value.to_owned(),
        }
    }
}

impl std::fmt::Display for ConceptLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}={}", self.concept, self.value)
    }
}

impl std::str::FromStr for ConceptLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (c, v) = s
            .split_once('=')
            .ok_or_else(|| crate::error::invalid(format!("expected Concept=Value, got {s:?}")))?;
        Self::new(c, v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "TokenRecord", try_from = "TokenRecord")]
pub struct Token {
    pub form: String,
    pub lemma: String,
    /// Sorted and free of duplicates.
    pub labels: Vec<ConceptLabel>,
}

impl Token {
    pub fn new(form: impl Into<String>, lemma: impl Into<String>, labels: impl IntoIterator<Item = ConceptLabel>) -> Self {
        let labels: BTreeSet<_> = labels.into_iter().collect();
        Self {
            form: form.into(),
            lemma: lemma.into(),
            labels: labels.into_iter().collect(),
        }
    }

    pub fn value_of(&self, concept: &str) -> Option<&str> {
        self.labels
            .iter()
            .find(|l| l.concept == concept)
            .map(|l| l.value.as_str())
    }
}

/// JSON shape: `{"form", "lemma", "feats": {"Number": "Plur"}}`; several
/// values for one key are comma-joined as in CoNLL-U.
#[derive(Serialize, Deserialize)]
struct TokenRecord {
    form: String,
    lemma: String,
    #[serde(default)]
    feats: BTreeMap<String, String>,
}

impl From<Token> for TokenRecord {
    fn from(t: Token) -> Self {
        let mut feats: BTreeMap<String, String> = BTreeMap::new();
        for l in t.labels {
            feats
                .entry(l.concept)
                .and_modify(|v| {
                    v.push(',');
                    v.push_str(&l.value)
                })
                .or_insert(l.value);
        }
        Self {
            form: t.form,
            lemma: t.lemma,
            feats,
        }
    }
}

impl TryFrom<TokenRecord> for Token {
    type Error = Error;

    fn try_from(r: TokenRecord) -> Result<Self> {
        if r.form.is_empty() {
            return Err(crate::error::invalid("empty token form"));
        }
        let mut labels = Vec::new();
        for (k, vs) in r.feats {
            for v in vs.split(',') {
                labels.push(ConceptLabel::new(k.clone(), v)?);
            }
        }
        Ok(Token::new(r.form, r.lemma, labels))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    /// Index within its source. Generated corpora share ids across
    /// languages: sentences with equal ids realise the same plan.
    #[serde(default)]
    pub id: u64,
    pub language: String,
    pub tokens: Vec<Token>,
}

impl AnnotatedSentence {
    /// Union of token labels.
    pub fn labels(&self) -> BTreeSet<ConceptLabel> {
        self.tokens.iter().flat_map(|t| t.labels.iter().cloned()).collect()
    }

    pub fn has(&self, label: &ConceptLabel) -> bool {
        self.tokens.iter().any(|t| t.labels.contains(label))
    }

    pub fn has_concept(&self, concept: &str) -> bool {
        self.tokens.iter().any(|t| t.value_of(concept).is_some())
    }

    pub fn forms(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.form.as_str()).collect()
    }

    pub fn text(&self) -> String {
        self.forms().join(" ")
    }
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_json_shape() {
        let t = Token::new(
            "kings",
            "king",
            [ConceptLabel::of("Number", "Plur"), ConceptLabel::of("Gender", "Masc")],
        );
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"form":"kings","lemma":"king","feats":{"Gender":"Masc","Number":"Plur"}}"#);
        let back: Token = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn multi_value_feats_round_trip() {
        let t = Token::new("x", "x", [ConceptLabel::of("Gender", "Fem"), ConceptLabel::of("Gender", "Masc")]);
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.contains(r#""Gender":"Fem,Masc""#));
        assert_eq!(serde_json::from_str::<Token>(&json).unwrap(), t);
    }

    #[test]
    fn illegal_value_rejected_on_read() {
        let bad = r#"{"form":"x","lemma":"x","feats":{"Number":"Masc"}}"#;
        assert!(serde_json::from_str::<Token>(bad).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let s = AnnotatedSentence {
            id: 7,
            language: "en".into(),
            tokens: vec![Token::new("the", "the", [])],
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&s)).unwrap();
        let back: Vec<AnnotatedSentence> = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn label_parsing() {
        let l: ConceptLabel = "Number=Plur".parse().unwrap();
        assert_eq!(l.to_string(), "Number=Plur");
        assert!("Number".parse::<ConceptLabel>().is_err());
    }
}
