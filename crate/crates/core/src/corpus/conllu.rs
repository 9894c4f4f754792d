use std::collections::BTreeSet;

use super::{schema, AnnotatedSentence, ConceptLabel, Token};
use crate::error::{Error, Result};

/// Parses a FEATS column: `_` or `Key=Value|Key=Value`, values possibly
/// comma-separated. Unknown keys are kept; known keys must use legal values.
pub fn parse_feats(feats: &str) -> std::result::Result<Vec<ConceptLabel>, String> {
    let feats = feats.trim();
    if feats == "_" {
        return Ok(Vec::new());
    }
    let mut seen = BTreeSet::new();
    let mut out = BTreeSet::new();
    for pair in feats.split('|') {
        let (key, values) = pair.split_once('=').ok_or_else(|| format!("feature {pair:?} lacks '='"))?;
        if key.is_empty() || values.is_empty() {
            return Err(format!("feature {pair:?} has an empty key or value"));
        }
        if !seen.insert(key) {
            return Err(format!("duplicate feature key {key}"));
        }
        for value in values.split(',') {
            if value.is_empty() {
                return Err(format!("feature {pair:?} has an empty value"));
            }
            if !schema::is_legal(key, value) {
                return Err(format!("{value} is not a legal {key} value"));
            }
            out.insert(ConceptLabel::of(key, value));
        }
    }
    Ok(out.into_iter().collect())
}

fn metadata_language(line: &str) -> Option<&str> {
    let body = line.trim_start_matches('#').trim();
    let (key, value) = body.split_once('=')?;
    matches!(key.trim(), "lang" | "language").then(|| value.trim()).filter(|v| !v.is_empty())
}

/// Parses CoNLL-U text. The language comes from a `# lang = xx` (or
/// `# language = xx`) comment when present, else from `language`. Multiword
/// token ranges and empty nodes are skipped.
pub fn parse_conllu(text: &str, language: &str) -> Result<Vec<AnnotatedSentence>> {
    let mut out = Vec::new();
    let mut file_lang: Option<String> = None;
    let mut sent_lang: Option<String> = None;
    let mut tokens: Vec<Token> = Vec::new();
    let flush = |out: &mut Vec<AnnotatedSentence>, tokens: &mut Vec<Token>, sent_lang: &mut Option<String>, file_lang: &Option<String>| {
        if !tokens.is_empty() {
            let lang = sent_lang.take().or_else(|| file_lang.clone()).unwrap_or_else(|| language.to_owned());
            out.push(AnnotatedSentence {
                id: out.len() as u64,
                language: lang,
                tokens: std::mem::take(tokens),
            });
        }
        *sent_lang = None;
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut out, &mut tokens, &mut sent_lang, &file_lang);
            continue;
        }
        if line.starts_with('#') {
            if let Some(lang) = metadata_language(line) {
                if out.is_empty() && tokens.is_empty() && file_lang.is_none() {
                    file_lang = Some(lang.to_owned());
                } else {
                    sent_lang = Some(lang.to_owned());
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        if id.parse::<u32>().map_or(true, |n| n == 0) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("bad token id {id:?}"),
            });
        }
        if cols[1].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty FORM".into(),
            });
        }
        let labels = parse_feats(cols[5]).map_err(|message| Error::Parse { line: line_no, message })?;
        tokens.push(Token::new(cols[1], cols[2], labels));
    }
    flush(&mut out, &mut tokens, &mut sent_lang, &file_lang);
    Ok(out)
}
