use polylens_nn::rng::stream;
use serde::{Deserialize, Serialize};

use super::generate::{realize, sample_plan, Plan, Targets};
use super::spec::MiniLanguageSpec;
use super::ConceptLabel;
use crate::error::{invalid, Result};

/// Two prefixes that differ only in the tokens realising one concept, each
/// with the word that correctly continues it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub language: String,
    pub labels: [ConceptLabel; 2],
    pub prefixes: [Vec<String>; 2],
    pub continuations: [String; 2],
}

impl MinimalPair {
    pub fn concept(&self) -> &str {
        &self.labels[0].concept
    }

    /// Prefix positions where the two sides differ.
    pub fn realizing_positions(&self) -> Vec<usize> {
        let [a, b] = &self.prefixes;
        (0..a.len().max(b.len())).filter(|&i| a.get(i) != b.get(i)).collect()
    }
}

fn value_in(plan: &Plan, concept: &str) -> Option<&'static str> {
    use super::generate::Head;
    Some(match concept {
        "Number" => {
            if plan.subject.plural {
                "Plur"
            } else {
                "Sing"
            }
        }
        "Gender" => match plan.subject.head {
            Head::Person { fem, .. } | Head::Name { fem, .. } => {
                if fem {
                    "Fem"
                } else {
                    "Masc"
                }
            }
            Head::Thing { .. } => return None,
        },
        "Tense" => {
            if plan.past {
                "Past"
            } else {
                "Pres"
            }
        }
        "Polarity" => {
            if plan.negative {
                "Neg"
            } else {
                "Pos"
            }
        }
        _ => return None,
    })
}

fn build(spec: &MiniLanguageSpec, concept: &str, plan: &Plan) -> Result<Option<MinimalPair>> {
    let Some(from) = value_in(plan, concept) else { return Ok(None) };
    let Some(other) = plan.counterfactual(concept, from) else { return Ok(None) };
    let (ta, roles) = realize(spec, plan)?;
    let (tb, _) = realize(spec, &other)?;
    if ta.len() != tb.len() {
        return Ok(None);
    }
    let controller = Plan::controller(concept);
    let Some(last_ctrl) = roles.iter().rposition(|&r| r == controller) else { return Ok(None) };
    let differs = |i: usize| ta[i].form != tb[i].form;
    let Some(target) = (last_ctrl + 1..ta.len()).find(|&i| roles[i] != controller && differs(i)) else {
        return Ok(None);
    };
    // Changed prefix tokens are the controller itself or words agreeing with
    // it. English nouns swap lexemes for gender without carrying the label.
    let realizing: Vec<usize> = (0..target).filter(|&i| differs(i)).collect();
    let agrees = |i: usize| roles[i] == controller || ta[i].value_of(concept) != tb[i].value_of(concept);
    if realizing.is_empty() || !realizing.iter().all(|&i| agrees(i)) {
        return Ok(None);
    }
    let to = value_in(&other, concept).expect("counterfactual keeps the concept");
    let forms = |t: &[super::Token]| t[..target].iter().map(|t| t.form.clone()).collect::<Vec<_>>();
    Ok(Some(MinimalPair {
        language: spec.language.clone(),
        labels: [ConceptLabel::of(concept, from), ConceptLabel::of(concept, to)],
        prefixes: [forms(&ta), forms(&tb)],
        continuations: [ta[target].form.clone(), tb[target].form.clone()],
    }))
}

/// `n` minimal pairs contrasting the values of `concept`. The continuation is
/// the first word after the controller that agrees with it.
pub fn make_minimal_pairs(spec: &MiniLanguageSpec, concept: &str, n: usize, seed: u64) -> Result<Vec<MinimalPair>> {
    let values = spec
        .concepts
        .get(concept)
        .ok_or_else(|| invalid(format!("{} does not realise {concept}", spec.language)))?;
    if values.len() < 2 {
        return Err(invalid(format!("{concept} needs at least 2 values in {}", spec.language)));
    }
    spec.validate()?;
    let targets = Targets::from_specs(std::slice::from_ref(spec))?;
    let mut rng = stream(seed, &format!("pairs/{}/{concept}", spec.language));
    let mut out = Vec::with_capacity(n);
    let max_attempts = 200 * n.max(1);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(invalid(format!("could not build {concept} pairs for {}", spec.language)));
        }
        let plan = sample_plan(&mut rng, &targets, true);
        if let Some(pair) = build(spec, concept, &plan)? {
            out.push(pair);
        }
    }
    Ok(out)
}
