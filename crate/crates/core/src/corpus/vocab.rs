use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::spec::MiniLanguageSpec;
use crate::error::{invalid, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word pieces: stems and whole words, plus `##`-prefixed suffix pieces
/// shared by every language that uses the same string.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

/// Token ids padded to a fixed length; `mask` is true on non-PAD positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = crate::Error;

    fn try_from(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < RESERVED.len() || pieces.iter().zip(RESERVED).any(|(p, r)| p != r) {
            return Err(invalid("vocabulary must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(invalid(format!("duplicate vocabulary entry {p:?}")));
            }
        }
        Ok(Self { pieces, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.pieces
    }
}

impl Vocabulary {
    pub fn from_pieces(pieces: impl IntoIterator<Item = String>) -> Self {
        let extra: BTreeSet<String> = pieces.into_iter().filter(|p| !RESERVED.contains(&p.as_str())).collect();
        let all: Vec<String> = RESERVED.iter().map(|r| (*r).to_owned()).chain(extra).collect();
        Self::try_from(all).expect("deduplicated")
    }

    pub fn from_specs(specs: &[MiniLanguageSpec]) -> Self {
        Self::from_pieces(specs.iter().flat_map(MiniLanguageSpec::morphemes))
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn is_suffix(&self, id: u32) -> bool {
        self.piece(id).is_some_and(|p| p.starts_with("##"))
    }

    /// Longest-first segmentation into a stem and suffix pieces, with
    /// backtracking; `None` when no segmentation exists.
    pub fn segment(&self, word: &str) -> Option<Vec<u32>> {
        fn rest(v: &Vocabulary, s: &str, out: &mut Vec<u32>) -> bool {
            if s.is_empty() {
                return true;
            }
            let mut ends: Vec<usize> = s.char_indices().map(|(i, c)| i + c.len_utf8()).collect();
            ends.reverse();
            for end in ends {
                if let Some(id) = v.id(&format!("##{}", &s[..end])) {
                    out.push(id);
                    if rest(v, &s[end..], out) {
                        return true;
                    }
                    out.pop();
                }
            }
            false
        }
        if word.is_empty() || word.starts_with("##") {
            return None;
        }
        let mut ends: Vec<usize> = word.char_indices().map(|(i, c)| i + c.len_utf8()).collect();
        ends.reverse();
        for end in ends {
            if let Some(id) = self.id(&word[..end]).filter(|&id| id > UNK) {
                let mut out = vec![id];
                if rest(self, &word[end..], &mut out) {
                    return Some(out);
                }
            }
        }
        None
    }

    /// Pieces of one word, `[UNK]` when it cannot be segmented.
    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        self.segment(word).unwrap_or_else(|| vec![UNK])
    }

    /// BOS + pieces + EOS without padding.
    pub fn encode_unpadded<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        let mut ids = vec![BOS];
        for w in words {
            ids.extend(self.tokenize_word(w.as_ref()));
        }
        ids.push(EOS);
        ids
    }

    /// BOS + pieces + EOS, padded with PAD to `max_len`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> Result<Encoded> {
        let mut ids = self.encode_unpadded(words);
        if ids.len() > max_len {
            return Err(invalid(format!("sentence needs {} positions, max_len is {max_len}", ids.len())));
        }
        let mask = (0..max_len).map(|i| i < ids.len()).collect();
        ids.resize(max_len, PAD);
        Ok(Encoded { ids, mask })
    }

    /// Words from ids, joining suffix pieces onto the preceding word and
    /// dropping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            let piece = self.piece(id).unwrap_or(RESERVED[UNK as usize]);
            match (piece.strip_prefix("##"), words.last_mut()) {
                (Some(suffix), Some(last)) => last.push_str(suffix),
                (Some(suffix), None) => words.push(suffix.to_owned()),
                (None, _) => words.push(piece.to_owned()),
            }
        }
        words
    }
}
