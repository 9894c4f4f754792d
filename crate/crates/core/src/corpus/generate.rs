//! Sentence plans shared across languages and their realisation.

use std::collections::BTreeMap;

use polylens_nn::rng::stream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::schema::{GENDER, NUMBER, POLARITY, TENSE};
use super::spec::{Adposition, Bundle, MiniLanguageSpec, WordOrder};
use super::{AnnotatedSentence, ConceptLabel, Token};
use crate::error::{Error, Result};

const P_NAME: f64 = 0.2;
const P_ATTRACTOR: f64 = 0.5;
const P_PERSON_ATTRACTOR: f64 = 0.3;
const P_OBJECT: f64 = 0.7;
const P_PERSON_OBJECT: f64 = 0.3;
const P_CLAUSE2: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Head {
    Person { idx: usize, fem: bool },
    Name { idx: usize, fem: bool },
    Thing { idx: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Np {
    pub head: Head,
    pub plural: bool,
}

/// Language-independent content of one sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Plan {
    pub subject: Np,
    pub attractor: Option<(usize, Np)>,
    pub verb: usize,
    pub object: Option<Np>,
    pub past: bool,
    pub negative: bool,
    /// Coordinated clause with a pronoun subject coreferent with `subject`;
    /// it shares tense and polarity with the main clause.
    pub clause2: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Role {
    Subject,
    Attractor,
    Verb,
    Object,
    Conjunction,
    Pronoun,
    Verb2,
}

/// Probabilities of the marked value of each concept.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Targets {
    plural: f64,
    fem: f64,
    past: f64,
    negative: f64,
}

impl Targets {
    pub fn from_specs(specs: &[MiniLanguageSpec]) -> Result<Self> {
        let pick = |concept: &str, value: &str| -> Result<f64> {
            let mut found: Option<(String, f64)> = None;
            for s in specs {
                if let Some(&f) = s.concepts.get(concept).and_then(|vals| vals.get(value)) {
                    match &found {
                        Some((lang, prev)) if (prev - f).abs() > 1e-9 => {
                            return Err(Error::Spec {
                                language: s.language.clone(),
                                message: format!("{concept}={value} target {f} conflicts with {prev} in {lang}"),
                            })
                        }
                        Some(_) => {}
                        None => found = Some((s.language.clone(), f)),
                    }
                }
            }
            Ok(found.map_or(0.5, |(_, f)| f))
        };
        Ok(Self {
            plural: pick(NUMBER, "Plur")?,
            fem: pick(GENDER, "Fem")?,
            past: pick(TENSE, "Past")?,
            negative: pick(POLARITY, "Neg")?,
        })
    }
}

/// Upper bounds for lexical indices; languages reduce them modulo their own list sizes.
const SPAN: usize = 1 << 16;

fn sample_np(rng: &mut ChaCha8Rng, t: &Targets, p_person: f64) -> Np {
    let head = if rng.random_bool(p_person) {
        Head::Person {
            idx: rng.random_range(0..SPAN),
            fem: rng.random_bool(t.fem),
        }
    } else {
        Head::Thing {
            idx: rng.random_range(0..SPAN),
        }
    };
    Np {
        head,
        plural: rng.random_bool(t.plural),
    }
}

pub(crate) fn sample_plan(rng: &mut ChaCha8Rng, t: &Targets, force_clause2: bool) -> Plan {
    // Names are always singular; person subjects compensate so the overall
    // subject plural rate matches the target.
    let subject = if rng.random_bool(P_NAME) {
        Np {
            head: Head::Name {
                idx: rng.random_range(0..SPAN),
                fem: rng.random_bool(t.fem),
            },
            plural: false,
        }
    } else {
        Np {
            head: Head::Person {
                idx: rng.random_range(0..SPAN),
                fem: rng.random_bool(t.fem),
            },
            plural: rng.random_bool((t.plural / (1.0 - P_NAME)).min(1.0)),
        }
    };
    let attractor = rng
        .random_bool(P_ATTRACTOR)
        .then(|| (rng.random_range(0..SPAN), sample_np(rng, t, P_PERSON_ATTRACTOR)));
    let verb = rng.random_range(0..SPAN);
    let object = rng.random_bool(P_OBJECT).then(|| sample_np(rng, t, P_PERSON_OBJECT));
    let past = rng.random_bool(t.past);
    let negative = rng.random_bool(t.negative);
    let clause2 = (force_clause2 || rng.random_bool(P_CLAUSE2)).then(|| (rng.random_range(0..SPAN), rng.random_range(0..SPAN)));
    Plan {
        subject,
        attractor,
        verb,
        object,
        past,
        negative,
        clause2,
    }
}

impl Plan {
    /// The same plan with `concept` of the agreement controller switched
    /// from `from` to its other value. `None` when the controller does not
    /// carry `from` or cannot change (names are always singular).
    pub fn counterfactual(&self, concept: &str, from: &str) -> Option<Plan> {
        let mut p = self.clone();
        match (concept, from) {
            (NUMBER, v) => {
                if matches!(p.subject.head, Head::Name { .. }) || p.subject.plural != (v == "Plur") {
                    return None;
                }
                p.subject.plural = !p.subject.plural;
            }
            (GENDER, v) => match &mut p.subject.head {
                Head::Person { fem, .. } | Head::Name { fem, .. } if *fem == (v == "Fem") => *fem = !*fem,
                _ => return None,
            },
            (TENSE, v) if p.past == (v == "Past") => p.past = !p.past,
            (POLARITY, v) if p.negative == (v == "Neg") => p.negative = !p.negative,
            _ => return None,
        }
        Some(p)
    }

    pub fn controller(concept: &str) -> Role {
        match concept {
            TENSE | POLARITY => Role::Verb,
            _ => Role::Subject,
        }
    }
}

fn gender_of(spec: &MiniLanguageSpec, head: Head) -> Option<&str> {
    match head {
        Head::Person { fem, .. } | Head::Name { fem, .. } => Some(if fem { "Fem" } else { "Masc" }),
        Head::Thing { idx } => {
            let things = &spec.lexicon.things;
            things[idx % things.len()].gender.as_deref()
        }
    }
}

fn np_bundle(spec: &MiniLanguageSpec, np: Np) -> Bundle {
    let mut b = Bundle::new();
    b.insert(NUMBER.into(), if np.plural { "Plur" } else { "Sing" }.into());
    if let Some(g) = gender_of(spec, np.head) {
        b.insert(GENDER.into(), g.into());
    }
    b
}

fn verb_bundle(spec: &MiniLanguageSpec, plan: &Plan) -> Bundle {
    let mut b = np_bundle(spec, plan.subject);
    b.insert(TENSE.into(), if plan.past { "Past" } else { "Pres" }.into());
    b.insert(POLARITY.into(), if plan.negative { "Neg" } else { "Pos" }.into());
    b
}

struct Realizer<'a> {
    spec: &'a MiniLanguageSpec,
    tokens: Vec<Token>,
    roles: Vec<Role>,
}

impl Realizer<'_> {
    fn fail(&self, message: String) -> Error {
        Error::Spec {
            language: self.spec.language.clone(),
            message,
        }
    }

    fn push(&mut self, role: Role, form: String, lemma: String, labels: Vec<ConceptLabel>) {
        self.tokens.push(Token::new(form, lemma, labels));
        self.roles.push(role);
    }

    fn plain(&mut self, role: Role, word: &str) {
        self.push(role, word.to_owned(), word.to_owned(), Vec::new());
    }

    fn closed_class(&mut self, role: Role, paradigm: &super::Paradigm, bundle: &Bundle) -> Result<()> {
        let (form, labels) = paradigm.inflect("", bundle).map_err(|m| self.fail(m))?;
        let lemma = if paradigm.lemma.is_empty() { form.clone() } else { paradigm.lemma.clone() };
        self.push(role, form, lemma, labels);
        Ok(())
    }

    fn noun_phrase(&mut self, role: Role, np: Np) -> Result<()> {
        let spec = self.spec;
        let lex = &spec.lexicon;
        let bundle = np_bundle(spec, np);
        let (lemma, is_name) = match np.head {
            Head::Person { idx, fem } => (&lex.persons[idx % lex.persons.len()][fem as usize], false),
            Head::Name { idx, fem } => (&lex.names[idx % lex.names.len()][fem as usize], true),
            Head::Thing { idx } => (&lex.things[idx % lex.things.len()].lemma, false),
        };
        if !is_name {
            if let Some(det) = &spec.paradigms.det {
                self.closed_class(role, det, &bundle)?;
            }
        }
        let (form, mut labels) = spec.paradigms.noun.inflect(lemma, &bundle).map_err(|m| self.fail(m))?;
        if lex.noun_gender {
            if let Some(g) = bundle.get(GENDER) {
                labels.push(ConceptLabel::of(GENDER, g));
            }
        }
        self.push(role, form, lemma.clone(), labels);
        Ok(())
    }

    fn subject_phrase(&mut self, plan: &Plan) -> Result<()> {
        let adp = |idx: usize| {
            let a = &self.spec.lexicon.adpositions;
            a[idx % a.len()].clone()
        };
        match (plan.attractor, self.spec.adposition) {
            (None, _) => self.noun_phrase(Role::Subject, plan.subject),
            (Some((a, np)), Adposition::Pre) => {
                self.noun_phrase(Role::Subject, plan.subject)?;
                self.plain(Role::Attractor, &adp(a));
                self.noun_phrase(Role::Attractor, np)
            }
            (Some((a, np)), Adposition::Post) => {
                self.noun_phrase(Role::Attractor, np)?;
                self.plain(Role::Attractor, &adp(a));
                self.noun_phrase(Role::Subject, plan.subject)
            }
        }
    }

    fn verb(&mut self, role: Role, idx: usize, bundle: &Bundle) -> Result<()> {
        let verbs = &self.spec.lexicon.verbs;
        let stem = &verbs[idx % verbs.len()];
        let (form, labels) = self.spec.paradigms.verb.inflect(stem, bundle).map_err(|m| self.fail(m))?;
        self.push(role, form, stem.clone(), labels);
        Ok(())
    }

    fn object(&mut self, plan: &Plan) -> Result<()> {
        match plan.object {
            Some(np) => self.noun_phrase(Role::Object, np),
            None => Ok(()),
        }
    }
}

/// Tokens of `plan` in `spec`'s language with the role of every token.
pub(crate) fn realize(spec: &MiniLanguageSpec, plan: &Plan) -> Result<(Vec<Token>, Vec<Role>)> {
    let mut r = Realizer {
        spec,
        tokens: Vec::new(),
        roles: Vec::new(),
    };
    let vb = verb_bundle(spec, plan);
    match spec.order {
        WordOrder::Svo => {
            r.subject_phrase(plan)?;
            r.verb(Role::Verb, plan.verb, &vb)?;
            r.object(plan)?;
        }
        WordOrder::Sov => {
            r.subject_phrase(plan)?;
            r.object(plan)?;
            r.verb(Role::Verb, plan.verb, &vb)?;
        }
        WordOrder::Vso => {
            r.verb(Role::Verb, plan.verb, &vb)?;
            r.subject_phrase(plan)?;
            r.object(plan)?;
        }
    }
    if let Some((conj, verb2)) = plan.clause2 {
        let conjs = &spec.lexicon.conjunctions;
        r.plain(Role::Conjunction, &conjs[conj % conjs.len()].clone());
        let pb = np_bundle(spec, plan.subject);
        let pronoun = spec.paradigms.pronoun.clone();
        if spec.order == WordOrder::Vso {
            r.verb(Role::Verb2, verb2, &vb)?;
            r.closed_class(Role::Pronoun, &pronoun, &pb)?;
        } else {
            r.closed_class(Role::Pronoun, &pronoun, &pb)?;
            r.verb(Role::Verb2, verb2, &vb)?;
        }
    }
    Ok((r.tokens, r.roles))
}

/// `n_per_language` sentences for every spec. Sentence `k` of each language
/// realises the same plan, so the output is a parallel corpus laid out
/// language by language.
pub fn generate_corpus(specs: &[MiniLanguageSpec], n_per_language: usize, seed: u64) -> Result<Vec<AnnotatedSentence>> {
    if specs.is_empty() {
        return Err(crate::error::invalid("no language specs"));
    }
    if n_per_language == 0 {
        return Err(crate::error::invalid("n_per_language must be at least 1"));
    }
    for s in specs {
        s.validate()?;
    }
    let targets = Targets::from_specs(specs)?;
    let mut rng = stream(seed, "corpus-plans");
    let plans: Vec<Plan> = (0..n_per_language).map(|_| sample_plan(&mut rng, &targets, false)).collect();
    let mut out = Vec::with_capacity(specs.len() * n_per_language);
    for spec in specs {
        for (k, plan) in plans.iter().enumerate() {
            let (tokens, _) = realize(spec, plan)?;
            out.push(AnnotatedSentence {
                id: k as u64,
                language: spec.language.clone(),
                tokens,
            });
        }
    }
    Ok(out)
}

/// Token-level value frequencies per concept for one language: among tokens
/// labelled with a concept, the share carrying each value.
pub fn label_marginals(sentences: &[AnnotatedSentence], language: &str) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for s in sentences.iter().filter(|s| s.language == language) {
        for l in s.tokens.iter().flat_map(|t| &t.labels) {
            *counts.entry(l.concept.clone()).or_default().entry(l.value.clone()).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(c, vals)| {
            let total: usize = vals.values().sum();
            let freqs = vals.into_iter().map(|(v, n)| (v, n as f64 / total as f64)).collect();
            (c, freqs)
        })
        .collect()
}

/// Share of a language's sentences containing each concept-value.
pub fn presence_rates(sentences: &[AnnotatedSentence], language: &str) -> BTreeMap<ConceptLabel, f64> {
    let mine: Vec<_> = sentences.iter().filter(|s| s.language == language).collect();
    let mut counts: BTreeMap<ConceptLabel, usize> = BTreeMap::new();
    for s in &mine {
        for l in s.labels() {
            *counts.entry(l).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(l, n)| (l, n as f64 / mine.len().max(1) as f64))
        .collect()
}
