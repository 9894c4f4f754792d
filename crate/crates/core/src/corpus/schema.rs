//! Legal values for the morphosyntactic features the pipeline knows about.
//! Lists follow the Universal Dependencies feature inventory.

pub const NUMBER: &str = "Number";
pub const GENDER: &str = "Gender";
pub const TENSE: &str = "Tense";
pub const CASE: &str = "Case";
pub const POLARITY: &str = "Polarity";

const NUMBER_VALUES: &[&str] = &[
    "Coll", "Count", "Dual", "Grpa", "Grpl", "Inv", "Pauc", "Plur", "Ptan", "Sing", "Tri",
];
const GENDER_VALUES: &[&str] = &["Com", "Fem", "Masc", "Neut"];
const TENSE_VALUES: &[&str] = &["Fut", "Imp", "Past", "Pqp", "Pres"];
const CASE_VALUES: &[&str] = &[
    "Abe", "Abl", "Abs", "Acc", "Add", "Ade", "All", "Ben", "Cau", "Cmp", "Cns", "Com", "Dat",
    "Del", "Dis", "Ela", "Equ", "Erg", "Ess", "Gen", "Ill", "Ine", "Ins", "Lat", "Loc", "Nom",
    "Par", "Per", "Sbe", "Sbl", "Spl", "Sub", "Sup", "Tem", "Ter", "Tra", "Voc",
];
const POLARITY_VALUES: &[&str] = &["Neg", "Pos"];

/// Legal values for a known concept, `None` for concepts outside the table.
pub fn legal_values(concept: &str) -> Option<&'static [&'static str]> {
    match concept {
        NUMBER => Some(NUMBER_VALUES),
        GENDER => Some(GENDER_VALUES),
        TENSE => Some(TENSE_VALUES),
        CASE => Some(CASE_VALUES),
        POLARITY => Some(POLARITY_VALUES),
        _ => None,
    }
}

/// Unknown concepts pass; known concepts must use a listed value.
pub fn is_legal(concept: &str, value: &str) -> bool {
    legal_values(concept).is_none_or(|vals| vals.contains(&value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_and_unknown_concepts() {
        assert!(is_legal("Number", "Plur"));
        assert!(!is_legal("Number", "Masc"));
        assert!(is_legal("Mood", "Whatever"));
        assert!(legal_values("Polarity").unwrap().contains(&"Neg"));
    }
}
