//! `PLAC` activation cache: residual vectors at one layer for every sentence.
//!
//! Layout (little-endian): magic, version u32, d_model u32, language table
//! (count u16, then u16-length-prefixed UTF-8 codes), record count u64, then
//! per record: sentence id u64, language id u16, seq len u32, mask bits
//! (`ceil(len/8)` bytes, LSB first), `len × d_model` f32 payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use polylens_nn::Tensor;

use super::{Batch, LmParams};
use crate::corpus::{AnnotatedSentence, Vocabulary};
use crate::error::{invalid, Error, Result};

const MAGIC: &[u8; 4] = b"PLAC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ActRecord {
    pub id: u64,
    pub language: String,
    /// Real (non-pad) positions; only those are stored, so this is all true
    /// for extracted records.
    pub mask: Vec<bool>,
    /// `[len × d_model]`.
    pub acts: Tensor,
}

impl ActRecord {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.acts.row(i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    pub d_model: usize,
    pub layer: usize,
    pub records: Vec<ActRecord>,
}

fn rd<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

impl ActivationCache {
    pub fn num_tokens(&self) -> usize {
        self.records.iter().map(ActRecord::len).sum()
    }

    /// All stored residual vectors in record order, `[tokens × d_model]`.
    pub fn token_matrix(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.num_tokens() * self.d_model);
        for r in &self.records {
            data.extend_from_slice(r.acts.data());
        }
        Tensor::new([self.num_tokens(), self.d_model], data).expect("records match d_model")
    }

    pub fn languages(&self) -> Vec<String> {
        let mut l: Vec<String> = self.records.iter().map(|r| r.language.clone()).collect();
        l.sort();
        l.dedup();
        l
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let langs = self.languages();
        let index: BTreeMap<&str, u16> = langs.iter().enumerate().map(|(i, l)| (l.as_str(), i as u16)).collect();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.d_model as u32).to_le_bytes())?;
        w.write_all(&(self.layer as u32).to_le_bytes())?;
        w.write_all(&(langs.len() as u16).to_le_bytes())?;
        for l in &langs {
            w.write_all(&(l.len() as u16).to_le_bytes())?;
            w.write_all(l.as_bytes())?;
        }
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            if r.acts.shape() != [r.len(), self.d_model] {
                return Err(invalid(format!("record {} has shape {:?}", r.id, r.acts.shape())));
            }
            w.write_all(&r.id.to_le_bytes())?;
            w.write_all(&index[r.language.as_str()].to_le_bytes())?;
            w.write_all(&(r.len() as u32).to_le_bytes())?;
            let mut bits = vec![0u8; r.len().div_ceil(8)];
            for (i, &m) in r.mask.iter().enumerate() {
                if m {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            w.write_all(&bits)?;
            for v in r.acts.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        if &rd::<4>(&mut r)? != MAGIC {
            return Err(Error::Format("not an activation cache (bad magic)".into()));
        }
        let version = u32::from_le_bytes(rd(&mut r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported activation cache version {version}")));
        }
        let d_model = u32::from_le_bytes(rd(&mut r)?) as usize;
        let layer = u32::from_le_bytes(rd(&mut r)?) as usize;
        let n_langs = u16::from_le_bytes(rd(&mut r)?) as usize;
        let mut langs = Vec::with_capacity(n_langs);
        for _ in 0..n_langs {
            let len = u16::from_le_bytes(rd(&mut r)?) as usize;
            let mut b = vec![0u8; len];
            r.read_exact(&mut b)?;
            langs.push(String::from_utf8(b).map_err(|_| Error::Format("language code is not UTF-8".into()))?);
        }
        let n = u64::from_le_bytes(rd(&mut r)?) as usize;
        let mut records = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = u64::from_le_bytes(rd(&mut r)?);
            let lang = u16::from_le_bytes(rd(&mut r)?) as usize;
            let language = langs
                .get(lang)
                .ok_or_else(|| Error::Format(format!("language id {lang} outside table of {n_langs}")))?
                .clone();
            let len = u32::from_le_bytes(rd(&mut r)?) as usize;
            let mut bits = vec![0u8; len.div_ceil(8)];
            r.read_exact(&mut bits)?;
            let mask = (0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
            let mut payload = vec![0u8; len * d_model * 4];
            r.read_exact(&mut payload)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            records.push(ActRecord {
                id,
                language,
                mask,
                acts: Tensor::new([len, d_model], data)?,
            });
        }
        Ok(Self { d_model, layer, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Residual stream at the output of block `layer` for every sentence.
pub fn extract_activations(
    params: &LmParams,
    vocab: &Vocabulary,
    sentences: &[AnnotatedSentence],
    layer: usize,
    batch_size: usize,
) -> Result<ActivationCache> {
    if layer >= params.config.n_layers {
        return Err(invalid(format!("layer {layer} outside 0..{}", params.config.n_layers)));
    }
    let d = params.config.d_model;
    let mut records = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(batch_size.max(1)) {
        let seqs: Vec<Vec<u32>> = chunk.iter().map(|s| vocab.encode_unpadded(&s.forms())).collect();
        let batch = Batch::new(&seqs)?;
        let trace = params.forward_batch(&batch, None)?;
        for (b, s) in chunk.iter().enumerate() {
            let len = batch.lens[b];
            records.push(ActRecord {
                id: s.id,
                language: s.language.clone(),
                mask: vec![true; len],
                acts: Tensor::new([len, d], trace.rows(layer, b).to_vec())?,
            });
        }
    }
    Ok(ActivationCache {
        d_model: d,
        layer,
        records,
    })
}
