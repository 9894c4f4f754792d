//! Built-in mini-languages: two SVO, two SOV, one VSO and one agglutinative
//! SOV language without grammatical gender.

use std::collections::BTreeMap;

use super::spec::{Adposition, Cell, Lexicon, MiniLanguageSpec, Paradigm, Paradigms, Thing, WordOrder};

const NAMES: [[&str; 2]; 4] = [["sam", "sarah"], ["louis", "charlotte"], ["lukas", "hannah"], ["hasan", "mary"]];

fn strings(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| (*w).to_owned()).collect()
}

fn pairs(words: &[[&str; 2]]) -> Vec<[String; 2]> {
    words.iter().map(|[m, f]| [(*m).to_owned(), (*f).to_owned()]).collect()
}

fn things(words: &[(&str, Option<&str>)]) -> Vec<Thing> {
    words
        .iter()
        .map(|&(lemma, gender)| Thing {
            lemma: lemma.to_owned(),
            gender: gender.map(str::to_owned),
        })
        .collect()
}

fn slot(cells: &[(&[(&str, &str)], &str)]) -> Vec<Cell> {
    cells.iter().map(|&(feats, form)| Cell::new(feats, form)).collect()
}

fn paradigm(lemma: &str, slots: Vec<Vec<Cell>>) -> Paradigm {
    Paradigm {
        lemma: lemma.to_owned(),
        slots,
    }
}

fn concepts(names: &[&str]) -> BTreeMap<String, BTreeMap<String, f64>> {
    names
        .iter()
        .map(|&c| {
            let values: &[(&str, f64)] = match c {
                "Number" => &[("Sing", 0.5), ("Plur", 0.5)],
                "Gender" => &[("Masc", 0.5), ("Fem", 0.5)],
                "Tense" => &[("Pres", 0.5), ("Past", 0.5)],
                "Polarity" => &[("Pos", 0.7), ("Neg", 0.3)],
                other => unreachable!("no default frequencies for {other}"),
            };
            (c.to_owned(), values.iter().map(|&(v, f)| (v.to_owned(), f)).collect())
        })
        .collect()
}

const SG: (&str, &str) = ("Number", "Sing");
const PL: (&str, &str) = ("Number", "Plur");
const M: (&str, &str) = ("Gender", "Masc");
const F: (&str, &str) = ("Gender", "Fem");
const PRES: (&str, &str) = ("Tense", "Pres");
const PAST: (&str, &str) = ("Tense", "Past");
const POS: (&str, &str) = ("Polarity", "Pos");
const NEG: (&str, &str) = ("Polarity", "Neg");

fn number_suffix(plural: &str) -> Vec<Cell> {
    slot(&[(&[SG], ""), (&[PL], plural)])
}

fn polarity_suffix(neg: &str) -> Vec<Cell> {
    slot(&[(&[POS], ""), (&[NEG], neg)])
}

fn english() -> MiniLanguageSpec {
    MiniLanguageSpec {
        language: "en".into(),
        order: WordOrder::Svo,
        adposition: Adposition::Pre,
        concepts: concepts(&["Number", "Gender", "Tense"]),
        lexicon: Lexicon {
            persons: pairs(&[
                ["king", "queen"],
                ["father", "mother"],
                ["brother", "sister"],
                ["boy", "girl"],
                ["uncle", "aunt"],
                ["son", "daughter"],
                ["monk", "nun"],
                ["husband", "wife"],
            ]),
            things: things(&[
                ("car", None),
                ("house", None),
                ("book", None),
                ("tree", None),
                ("river", None),
                ("door", None),
                ("table", None),
                ("garden", None),
            ]),
            names: pairs(&NAMES),
            verbs: strings(&["call", "help", "visit", "follow", "paint", "open", "clean", "want"]),
            adpositions: strings(&["near", "behind", "with", "beside"]),
            conjunctions: strings(&["and", "while"]),
            noun_gender: false,
        },
        paradigms: Paradigms {
            noun: paradigm("", vec![number_suffix("##s")]),
            det: Some(paradigm("the", vec![slot(&[(&[], "the")])])),
            verb: paradigm("", vec![slot(&[(&[PRES, SG], "##s"), (&[PRES, PL], ""), (&[PAST], "##ed")])]),
            pronoun: paradigm("", vec![slot(&[(&[SG, M], "he"), (&[SG, F], "she"), (&[SG], "it"), (&[PL], "they")])]),
        },
    }
}

fn french() -> MiniLanguageSpec {
    MiniLanguageSpec {
        language: "fr".into(),
        order: WordOrder::Svo,
        adposition: Adposition::Pre,
        concepts: concepts(&["Number", "Gender", "Tense"]),
        lexicon: Lexicon {
            persons: pairs(&[
                ["roi", "reine"],
                ["pere", "mere"],
                ["frere", "soeur"],
                ["garcon", "fille"],
                ["oncle", "tante"],
                ["prince", "princesse"],
                ["moine", "nonne"],
                ["mari", "femme"],
            ]),
            things: things(&[
                ("voiture", Some("Fem")),
                ("maison", Some("Fem")),
                ("porte", Some("Fem")),
                ("table", Some("Fem")),
                ("livre", Some("Masc")),
                ("arbre", Some("Masc")),
                ("jardin", Some("Masc")),
                ("mur", Some("Masc")),
            ]),
            names: pairs(&NAMES),
            verbs: strings(&["aim", "aid", "regard", "visit", "cherch", "pouss", "trouv", "gard"]),
            adpositions: strings(&["pres", "derriere", "avec", "devant"]),
            conjunctions: strings(&["et", "mais"]),
            noun_gender: true,
        },
        paradigms: Paradigms {
            noun: paradigm("", vec![number_suffix("##s")]),
            det: Some(paradigm("le", vec![slot(&[(&[SG, M], "le"), (&[SG, F], "la"), (&[PL], "les")])])),
            verb: paradigm(
                "",
                vec![slot(&[
                    (&[PRES, SG], "##e"),
                    (&[PRES, PL], "##ent"),
                    (&[PAST, SG], "##ait"),
                    (&[PAST, PL], "##aient"),
                ])],
            ),
            pronoun: paradigm("", vec![slot(&[(&[SG, M], "il"), (&[SG, F], "elle"), (&[PL, M], "ils"), (&[PL, F], "elles")])]),
        },
    }
}

fn german() -> MiniLanguageSpec {
    MiniLanguageSpec {
        language: "de".into(),
        order: WordOrder::Sov,
        adposition: Adposition::Pre,
        concepts: concepts(&["Number", "Gender", "Tense", "Polarity"]),
        lexicon: Lexicon {
            persons: pairs(&[
                ["koenig", "koenigin"],
                ["vater", "mutter"],
                ["bruder", "schwester"],
                ["junge", "maedchen"],
                ["onkel", "tante"],
                ["sohn", "tochter"],
                ["moench", "nonne"],
                ["mann", "frau"],
            ]),
            things: things(&[
                ("wagen", Some("Masc")),
                ("baum", Some("Masc")),
                ("tisch", Some("Masc")),
                ("garten", Some("Masc")),
                ("tuer", Some("Fem")),
                ("strasse", Some("Fem")),
                ("lampe", Some("Fem")),
                ("blume", Some("Fem")),
            ]),
            names: pairs(&NAMES),
            verbs: strings(&["hol", "such", "frag", "kauf", "mal", "zeig", "lieb", "bau"]),
            adpositions: strings(&["bei", "hinter", "mit", "neben"]),
            conjunctions: strings(&["und", "aber"]),
            noun_gender: true,
        },
        paradigms: Paradigms {
            noun: paradigm("", vec![number_suffix("##en")]),
            det: Some(paradigm("der", vec![slot(&[(&[SG, M], "der"), (&[SG, F], "die"), (&[PL], "die")])])),
            verb: paradigm(
                "",
                vec![
                    slot(&[(&[PRES, SG], "##t"), (&[PRES, PL], "##en"), (&[PAST, SG], "##te"), (&[PAST, PL], "##ten")]),
                    polarity_suffix("##nie"),
                ],
            ),
            pronoun: paradigm("", vec![slot(&[(&[SG, M], "er"), (&[SG, F], "sie"), (&[PL], "sie")])]),
        },
    }
}

fn hindi() -> MiniLanguageSpec {
    MiniLanguageSpec {
        language: "hi".into(),
        order: WordOrder::Sov,
        adposition: Adposition::Post,
        concepts: concepts(&["Number", "Gender", "Tense", "Polarity"]),
        lexicon: Lexicon {
            persons: pairs(&[
                ["raja", "rani"],
                ["pita", "mata"],
                ["bhai", "behen"],
                ["ladka", "ladki"],
                ["chacha", "chachi"],
                ["beta", "beti"],
                ["sadhu", "sadhvi"],
                ["pati", "patni"],
            ]),
            things: things(&[
                ("ghar", Some("Masc")),
                ("ped", Some("Masc")),
                ("darwaza", Some("Masc")),
                ("bagicha", Some("Masc")),
                ("kitab", Some("Fem")),
                ("gaadi", Some("Fem")),
                ("nadi", Some("Fem")),
                ("mez", Some("Fem")),
            ]),
            names: pairs(&NAMES),
            verbs: strings(&["dekh", "bula", "padh", "likh", "khol", "dhoondh", "pakad", "chhod"]),
            adpositions: strings(&["paas", "peeche", "saath", "bagal"]),
            conjunctions: strings(&["aur", "lekin"]),
            noun_gender: true,
        },
        paradigms: Paradigms {
            noun: paradigm("", vec![slot(&[(&[SG], ""), (&[PL, M], "##on"), (&[PL, F], "##en")])]),
            det: None,
            verb: paradigm(
                "",
                vec![
                    slot(&[
                        (&[PRES, SG, M], "##ta"),
                        (&[PRES, SG, F], "##ti"),
                        (&[PRES, PL, M], "##te"),
                        (&[PRES, PL, F], "##tin"),
                        (&[PAST, SG, M], "##a"),
                        (&[PAST, SG, F], "##i"),
                        (&[PAST, PL, M], "##e"),
                        (&[PAST, PL, F], "##in"),
                    ]),
                    polarity_suffix("##na"),
                ],
            ),
            pronoun: paradigm("", vec![slot(&[(&[SG], "vah"), (&[PL], "ve")])]),
        },
    }
}

fn welsh() -> MiniLanguageSpec {
    MiniLanguageSpec {
        language: "cy".into(),
        order: WordOrder::Vso,
        adposition: Adposition::Pre,
        concepts: concepts(&["Number", "Gender", "Tense", "Polarity"]),
        lexicon: Lexicon {
            persons: pairs(&[
                ["brenin", "brenhines"],
                ["tad", "mam"],
                ["brawd", "chwaer"],
                ["bachgen", "merch"],
                ["ewythr", "modryb"],
                ["mab", "geneth"],
                ["mynach", "lleian"],
                ["gwr", "gwraig"],
            ]),
            things: things(&[
                ("llyfr", Some("Masc")),
                ("ty", Some("Masc")),
                ("drws", Some("Masc")),
                ("coed", Some("Masc")),
                ("ffordd", Some("Fem")),
                ("cadair", Some("Fem")),
                ("afon", Some("Fem")),
                ("ffenest", Some("Fem")),
            ]),
            names: pairs(&NAMES),
            verbs: strings(&["gwel", "galw", "help", "darllen", "agor", "dilyn", "pryn", "cof"]),
            adpositions: strings(&["ger", "tu", "gyda", "wrth"]),
            conjunctions: strings(&["a", "ond"]),
            noun_gender: true,
        },
        paradigms: Paradigms {
            noun: paradigm("", vec![number_suffix("##au")]),
            det: Some(paradigm("an", vec![slot(&[(&[SG, M], "an"), (&[SG, F], "na"), (&[PL], "nan")])])),
            verb: paradigm(
                "",
                vec![
                    slot(&[(&[PRES, SG], "##a"), (&[PRES, PL], "##ant"), (&[PAST, SG], "##odd"), (&[PAST, PL], "##on")]),
                    polarity_suffix("##dim"),
                ],
            ),
            pronoun: paradigm("", vec![slot(&[(&[SG, M], "ef"), (&[SG, F], "hi"), (&[PL], "nhw")])]),
        },
    }
}

fn turkish() -> MiniLanguageSpec {
    MiniLanguageSpec {
        language: "tr".into(),
        order: WordOrder::Sov,
        adposition: Adposition::Post,
        concepts: concepts(&["Number", "Tense", "Polarity"]),
        lexicon: Lexicon {
            persons: pairs(&[
                ["kral", "kralice"],
                ["baba", "anne"],
                ["abi", "abla"],
                ["oglan", "kiz"],
                ["amca", "teyze"],
                ["damat", "gelin"],
                ["kesis", "rahibe"],
                ["koca", "karisi"],
            ]),
            things: things(&[
                ("araba", None),
                ("ev", None),
                ("kitap", None),
                ("agac", None),
                ("nehir", None),
                ("kapi", None),
                ("masa", None),
                ("bahce", None),
            ]),
            names: pairs(&NAMES),
            verbs: strings(&["gor", "bul", "sev", "ara", "ac", "izle", "tut", "bekle"]),
            adpositions: strings(&["yaninda", "arkasinda", "ile", "onunde"]),
            conjunctions: strings(&["ve", "ama"]),
            noun_gender: false,
        },
        paradigms: Paradigms {
            noun: paradigm("", vec![number_suffix("##ler")]),
            det: None,
            verb: paradigm(
                "",
                vec![
                    polarity_suffix("##me"),
                    slot(&[(&[PRES], "##iyor"), (&[PAST], "##di")]),
                    number_suffix("##ler"),
                ],
            ),
            pronoun: paradigm("", vec![slot(&[(&[SG], "o"), (&[PL], "onlar")])]),
        },
    }
}

/// The six built-in languages in a fixed order.
pub fn default_specs() -> Vec<MiniLanguageSpec> {
    vec![english(), french(), german(), hindi(), welsh(), turkish()]
}

pub fn spec_for(language: &str) -> Option<MiniLanguageSpec> {
    default_specs().into_iter().find(|s| s.language == language)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typological_spread() {
        let specs = default_specs();
        let count = |o| specs.iter().filter(|s| s.order == o).count();
        assert_eq!(count(WordOrder::Svo), 2);
        assert_eq!(count(WordOrder::Sov), 3);
        assert_eq!(count(WordOrder::Vso), 1);
        let tr = spec_for("tr").unwrap();
        assert!(!tr.realizes("Gender"));
        // every concept used for probing appears in at least two languages
        for c in ["Number", "Gender", "Tense", "Polarity"] {
            assert!(specs.iter().filter(|s| s.realizes(c)).count() >= 2, "{c}");
        }
    }

    #[test]
    fn specs_round_trip_through_json() {
        for spec in default_specs() {
            let json = serde_json::to_string(&spec).unwrap();
            let back: MiniLanguageSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, spec);
        }
    }
}
