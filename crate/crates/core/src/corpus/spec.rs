use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{schema, ConceptLabel};
use crate::error::{Error, Result};

pub type Bundle = BTreeMap<String, String>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordOrder {
    Svo,
    Sov,
    Vso,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adposition {
    /// Adposition precedes its noun phrase; the phrase follows the head noun.
    Pre,
    /// Adposition follows its noun phrase; the phrase precedes the head noun.
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thing {
    pub lemma: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
}

/// Word lists. Sentence plans index into these modulo their length, so specs
/// for different languages need not have equal list sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    /// Person nouns as (masculine, feminine) lemma pairs.
    pub persons: Vec<[String; 2]>,
    pub things: Vec<Thing>,
    /// Proper names as (masculine, feminine) pairs.
    pub names: Vec<[String; 2]>,
    pub verbs: Vec<String>,
    pub adpositions: Vec<String>,
    pub conjunctions: Vec<String>,
    /// Whether nouns and names carry an inherent Gender label.
    #[serde(default)]
    pub noun_gender: bool,
}

/// One inflection cell: applies when `feats` is a subset of the word's
/// feature bundle. `form` is a `##`-prefixed suffix, the empty string for a
/// zero morpheme, or a whole word that replaces the stem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(default)]
    pub feats: Bundle,
    pub form: String,
}

impl Cell {
    pub fn new(feats: &[(&str, &str)], form: &str) -> Self {
        Self {
            feats: feats.iter().map(|&(k, v)| (k.to_owned(), v.to_owned())).collect(),
            form: form.to_owned(),
        }
    }
}

/// Ordered morpheme slots. In each slot the most specific matching cell wins.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Paradigm {
    /// Lemma for closed-class words whose forms are all suppletive.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub lemma: String,
    pub slots: Vec<Vec<Cell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paradigms {
    pub noun: Paradigm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det: Option<Paradigm>,
    pub verb: Paradigm,
    pub pronoun: Paradigm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiniLanguageSpec {
    pub language: String,
    pub order: WordOrder,
    pub adposition: Adposition,
    /// Realised concepts with the target frequency of each value. A value's
    /// frequency is measured over tokens that carry a label for the concept.
    pub concepts: BTreeMap<String, BTreeMap<String, f64>>,
    pub lexicon: Lexicon,
    pub paradigms: Paradigms,
}

impl Paradigm {
    fn select<'a>(&'a self, slot: &'a [Cell], bundle: &Bundle) -> std::result::Result<&'a Cell, String> {
        let matching: Vec<&Cell> = slot
            .iter()
            .filter(|c| c.feats.iter().all(|(k, v)| bundle.get(k) == Some(v)))
            .collect();
        let best = matching.iter().map(|c| c.feats.len()).max().ok_or_else(|| format!("no cell for {bundle:?}"))?;
        let mut top = matching.into_iter().filter(|c| c.feats.len() == best);
        let cell = top.next().expect("max exists");
        if top.next().is_some() {
            return Err(format!("ambiguous cells for {bundle:?}"));
        }
        Ok(cell)
    }

    /// Surface form and the concept labels realised by the matched cells.
    pub fn inflect(&self, stem: &str, bundle: &Bundle) -> std::result::Result<(String, Vec<ConceptLabel>), String> {
        let mut form = stem.to_owned();
        let mut labels = Vec::new();
        for slot in &self.slots {
            let cell = self.select(slot, bundle)?;
            match cell.form.strip_prefix("##") {
                Some(suffix) => form.push_str(suffix),
                None if cell.form.is_empty() => {}
                None => form = cell.form.clone(),
            }
            labels.extend(cell.feats.iter().map(|(k, v)| ConceptLabel::of(k, v)));
        }
        if form.is_empty() {
            return Err(format!("empty form for stem {stem:?} and {bundle:?}"));
        }
        Ok((form, labels))
    }

    fn morphemes(&self, out: &mut BTreeSet<String>) {
        for cell in self.slots.iter().flatten() {
            if !cell.form.is_empty() {
                out.insert(cell.form.clone());
            }
        }
    }
}

impl MiniLanguageSpec {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Spec {
            language: self.language.clone(),
            message: message.into(),
        }
    }

    pub fn realizes(&self, concept: &str) -> bool {
        self.concepts.contains_key(concept)
    }

    /// Checks vocabulary, concept declarations and paradigm totality.
    pub fn validate(&self) -> Result<()> {
        if self.language.is_empty() {
            return Err(self.err("empty language id"));
        }
        let lex = &self.lexicon;
        let lists = [
            ("persons", lex.persons.len()),
            ("things", lex.things.len()),
            ("names", lex.names.len()),
            ("verbs", lex.verbs.len()),
            ("adpositions", lex.adpositions.len()),
            ("conjunctions", lex.conjunctions.len()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, n)| *n == 0) {
            return Err(self.err(format!("empty vocabulary: no {name}")));
        }
        let words = lex.persons.iter().flatten().chain(lex.names.iter().flatten()).chain(&lex.verbs);
        if let Some(w) = words
            .chain(lex.things.iter().map(|t| &t.lemma))
            .chain(&lex.adpositions)
            .chain(&lex.conjunctions)
            .find(|w| w.is_empty() || w.starts_with("##") || w.contains(char::is_whitespace))
        {
            return Err(self.err(format!("bad lexical entry {w:?}")));
        }
        for (concept, values) in &self.concepts {
            if values.len() < 2 {
                return Err(self.err(format!("{concept} declares fewer than 2 values")));
            }
            for (v, &freq) in values {
                if !schema::is_legal(concept, v) {
                    return Err(self.err(format!("{v} is not a legal {concept} value")));
                }
                if !(freq > 0.0 && freq < 1.0) {
                    return Err(self.err(format!("target frequency of {concept}={v} must be in (0,1)")));
                }
            }
            let total: f64 = values.values().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(self.err(format!("{concept} frequencies sum to {total}")));
            }
        }
        if lex.noun_gender {
            let genders = self.concepts.get(schema::GENDER).ok_or_else(|| self.err("noun_gender without Gender"))?;
            for t in &lex.things {
                match &t.gender {
                    Some(g) if genders.contains_key(g) => {}
                    _ => return Err(self.err(format!("noun {} lacks a declared gender", t.lemma))),
                }
            }
        }
        let p = &self.paradigms;
        let named = [Some(("noun", &p.noun)), p.det.as_ref().map(|d| ("det", d)), Some(("verb", &p.verb)), Some(("pronoun", &p.pronoun))];
        for (name, paradigm) in named.into_iter().flatten() {
            self.check_paradigm(name, paradigm)?;
        }
        Ok(())
    }

    fn check_paradigm(&self, name: &str, paradigm: &Paradigm) -> Result<()> {
        for cell in paradigm.slots.iter().flatten() {
            for (k, v) in &cell.feats {
                if !self.concepts.get(k).is_some_and(|vals| vals.contains_key(v)) {
                    return Err(self.err(format!("{name} cell uses undeclared {k}={v}")));
                }
            }
        }
        // Every combination of declared values must select exactly one cell per slot.
        let mut combos: Vec<Bundle> = vec![Bundle::new()];
        for (concept, values) in &self.concepts {
            combos = combos
                .into_iter()
                .flat_map(|b| {
                    values.keys().map(move |v| {
                        let mut b = b.clone();
                        b.insert(concept.clone(), v.clone());
                        b
                    })
                })
                .collect();
        }
        for bundle in &combos {
            for slot in &paradigm.slots {
                paradigm.select(slot, bundle).map_err(|m| self.err(format!("{name} paradigm: {m}")))?;
            }
        }
        Ok(())
    }

    /// Stems, whole-word forms and suffix pieces the language can produce.
    pub fn morphemes(&self) -> BTreeSet<String> {
        let lex = &self.lexicon;
        let mut out: BTreeSet<String> = lex
            .persons
            .iter()
            .flatten()
            .chain(lex.names.iter().flatten())
            .chain(&lex.verbs)
            .chain(lex.things.iter().map(|t| &t.lemma))
            .chain(&lex.adpositions)
            .chain(&lex.conjunctions)
            .cloned()
            .collect();
        let p = &self.paradigms;
        for paradigm in [Some(&p.noun), p.det.as_ref(), Some(&p.verb), Some(&p.pronoun)].into_iter().flatten() {
            paradigm.morphemes(&mut out);
        }
        out
    }
}
