//! Pre-norm decoder-only transformer with learned positions and tied
//! input/output embeddings.

mod cache;
mod eval;
mod train;

use std::path::Path;
use std::rc::Rc;

use polylens_nn::rng::{normal_tensor, stream};
use polylens_nn::{checkpoint, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use cache::{extract_activations, ActRecord, ActivationCache};
pub use eval::{minimal_pair_accuracy, pair_outcomes, word_logprob, PairOutcome};
pub use train::{train_lm, LmTrainConfig, TrainReport};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Block whose output residual stream is exposed and hooked.
    pub hook_layer: usize,
}

impl TransformerConfig {
    pub fn new(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len,
            vocab_size,
            hook_layer: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.hook_layer >= self.n_layers {
            return Err(invalid(format!("hook_layer {} outside 0..{}", self.hook_layer, self.n_layers)));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.d_ff == 0 {
            return Err(invalid("empty vocabulary, context or feed-forward width"));
        }
        Ok(())
    }

    fn encode(&self) -> Tensor {
        let v = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
            self.vocab_size,
            self.hook_layer,
        ];
        Tensor::new([v.len()], v.iter().map(|&x| x as f32).collect()).expect("fixed length")
    }

    fn decode(t: &Tensor) -> Result<Self> {
        let v: Vec<usize> = t.data().iter().map(|&x| x as usize).collect();
        let [d_model, n_layers, n_heads, d_ff, max_seq_len, vocab_size, hook_layer] = v[..] else {
            return Err(Error::Format("config tensor has the wrong length".into()));
        };
        let c = Self {
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_seq_len,
            vocab_size,
            hook_layer,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Block {
    fn tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w_qkv", &self.w_qkv),
            ("b_qkv", &self.b_qkv),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub config: TransformerConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
}

/// Which residual vectors a hook rewrites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HookScope {
    All,
    /// The last non-pad position of each sequence.
    Last,
}

/// Rewrites residual vectors at the output of block `layer` before later
/// blocks read them. `transform` maps one d_model vector to another.
pub struct InterventionHook<'a> {
    pub layer: usize,
    pub scope: HookScope,
    pub transform: &'a dyn Fn(&[f32]) -> Vec<f32>,
}

/// Right-padded batch of token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub lens: Vec<usize>,
    pub seq: usize,
}

impl Batch {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(invalid("empty batch"));
        }
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seq == 0 {
            return Err(invalid("empty sequence"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(invalid("empty sequence"));
            }
            ids.extend_from_slice(s);
            ids.resize(ids.len() + seq - s.len(), crate::corpus::PAD);
            lens.push(s.len());
        }
        Ok(Self { ids, lens, seq })
    }

    pub fn size(&self) -> usize {
        self.lens.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.lens.iter().flat_map(|&l| (0..self.seq).map(move |i| i < l)).collect()
    }

    /// Next-token targets, `None` at the last real position and on padding.
    pub fn targets(&self) -> Rc<[Option<u32>]> {
        let mut out = Vec::with_capacity(self.ids.len());
        for (b, &len) in self.lens.iter().enumerate() {
            for i in 0..self.seq {
                out.push((i + 1 < len).then(|| self.ids[b * self.seq + i + 1]));
            }
        }
        out.into()
    }
}

/// Residual stream after every block and the final logits, row-major over
/// `batch × seq` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `[batch·seq × d_model]` per block.
    pub residuals: Vec<Tensor>,
    /// `[batch·seq × vocab]`.
    pub logits: Tensor,
    pub mask: Vec<bool>,
    pub lens: Vec<usize>,
    pub seq: usize,
}

impl ForwardTrace {
    /// Residual rows of sequence `b` at `layer`, non-pad positions only.
    pub fn rows(&self, layer: usize, b: usize) -> &[f32] {
        let d = self.residuals[layer].shape()[1];
        let start = b * self.seq * d;
        &self.residuals[layer].data()[start..start + self.lens[b] * d]
    }

    pub fn logits_at(&self, b: usize, pos: usize) -> &[f32] {
        let v = self.logits.shape()[1];
        let row = b * self.seq + pos;
        &self.logits.data()[row * v..(row + 1) * v]
    }
}

pub(crate) struct Vars<'t> {
    tok_emb: Var<'t>,
    pos_emb: Var<'t>,
    blocks: Vec<[Var<'t>; 12]>,
    lnf_g: Var<'t>,
    lnf_b: Var<'t>,
}

impl<'t> Vars<'t> {
    pub(crate) fn all(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.push(self.lnf_g);
        out.push(self.lnf_b);
        out
    }
}

fn head_maps(batch: usize, seq: usize, d: usize, heads: usize) -> (Rc<[u32]>, Rc<[u32]>, Rc<[u32]>, Rc<[u32]>) {
    let dh = d / heads;
    let n = batch * heads * seq * dh;
    let (mut q, mut k, mut v, mut merge) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), vec![0u32; n]);
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let base = (b * seq + i) * 3 * d + h * dh;
                for j in 0..dh {
                    q.push((base + j) as u32);
                    k.push((base + d + j) as u32);
                    v.push((base + 2 * d + j) as u32);
                    let src = ((b * heads + h) * seq + i) * dh + j;
                    merge[(b * seq + i) * d + h * dh + j] = src as u32;
                }
            }
        }
    }
    (q.into(), k.into(), v.into(), merge.into())
}

impl LmParams {
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "lm-init");
        let (d, f) = (config.d_model, config.d_ff);
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f32).sqrt();
        let ones = |n: usize| Tensor::full([n], 1.0);
        let zeros = |n: usize| Tensor::zeros([n]);
        let tok_emb = normal_tensor(&mut rng, [config.vocab_size, d], std);
        let pos_emb = normal_tensor(&mut rng, [config.max_seq_len, d], std);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                w_qkv: normal_tensor(&mut rng, [d, 3 * d], std),
                b_qkv: zeros(3 * d),
                w_o: normal_tensor(&mut rng, [d, d], proj_std),
                b_o: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w1: normal_tensor(&mut rng, [d, f], std),
                b1: zeros(f),
                w2: normal_tensor(&mut rng, [f, d], proj_std),
                b2: zeros(d),
            })
            .collect();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: ones(d),
            lnf_b: zeros(d),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_owned(), &self.tok_emb), ("pos_emb".to_owned(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("lnf_g".to_owned(), &self.lnf_g));
        out.push(("lnf_b".to_owned(), &self.lnf_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let config = self.config.encode();
        let named = self.named();
        let mut list: Vec<(&str, &Tensor)> = vec![("config", &config)];
        list.extend(named.iter().map(|(n, t)| (n.as_str(), *t)));
        checkpoint::save(path, &list)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut tensors = checkpoint::load(path)?;
        let config = TransformerConfig::decode(&checkpoint::take(&mut tensors, "config")?)?;
        let mut p = Self::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = p.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        for ((name, shape), slot) in expected.iter().zip(p.tensors_mut()) {
            let t = checkpoint::take(&mut tensors, name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            *slot = t;
        }
        Ok(p)
    }

    pub(crate) fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> Vars<'t> {
        let reg = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        Vars {
            tok_emb: reg(&self.tok_emb),
            pos_emb: reg(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let t = b.tensors();
                    std::array::from_fn(|i| reg(t[i].1))
                })
                .collect(),
            lnf_g: reg(&self.lnf_g),
            lnf_b: reg(&self.lnf_b),
        }
    }

    /// Records the forward pass; returns per-block residuals and logits.
    pub(crate) fn forward_vars<'t>(
        &self,
        tape: &'t Tape,
        vars: &Vars<'t>,
        batch: &Batch,
        hook: Option<&InterventionHook>,
    ) -> Result<(Vec<Var<'t>>, Var<'t>)> {
        let c = &self.config;
        let (bsz, seq, d, heads) = (batch.size(), batch.seq, c.d_model, c.n_heads);
        if seq > c.max_seq_len {
            return Err(invalid(format!("sequence length {seq} exceeds max_seq_len {}", c.max_seq_len)));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i as usize >= c.vocab_size) {
            return Err(invalid(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        if let Some(h) = hook {
            if h.layer >= c.n_layers {
                return Err(invalid(format!("hook layer {} outside 0..{}", h.layer, c.n_layers)));
            }
        }
        let rows = bsz * seq;
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        let mut x = vars.tok_emb.gather_rows(&ids)?.add(vars.pos_emb.gather_rows(&positions)?)?;
        let (qm, km, vm, merge) = head_maps(bsz, seq, d, heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut residuals = Vec::with_capacity(c.n_layers);
        for (layer, p) in vars.blocks.iter().enumerate() {
            let [ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w1, b1, w2, b2] = *p;
            let h = x.layer_norm(ln1_g, ln1_b, LN_EPS)?;
            let qkv = h.matmul(w_qkv)?.add_row(b_qkv)?;
            let shape = [bsz * heads, seq, dh];
            let q = qkv.gather(qm.clone(), shape)?;
            let k = qkv.gather(km.clone(), shape)?;
            let v = qkv.gather(vm.clone(), shape)?;
            let att = q.bmm_t(k)?.scale(scale).causal_softmax()?;
            let ctx = att.bmm(v)?.gather(merge.clone(), [rows, d])?;
            x = x.add(ctx.matmul(w_o)?.add_row(b_o)?)?;
            let h = x.layer_norm(ln2_g, ln2_b, LN_EPS)?;
            let m = h.matmul(w1)?.add_row(b1)?.relu().matmul(w2)?.add_row(b2)?;
            x = x.add(m)?;
            if let Some(hook) = hook.filter(|h| h.layer == layer) {
                x = apply_hook(tape, x, hook, batch)?;
            }
            residuals.push(x);
        }
        let h = x.layer_norm(vars.lnf_g, vars.lnf_b, LN_EPS)?;
        let logits = h.matmul_t(vars.tok_emb)?;
        Ok((residuals, logits))
    }

    /// Inference forward pass over a batch.
    pub fn forward_batch(&self, batch: &Batch, hook: Option<&InterventionHook>) -> Result<ForwardTrace> {
        let tape = Tape::new();
        let vars = self.register(&tape, false);
        let (residuals, logits) = self.forward_vars(&tape, &vars, batch, hook)?;
        Ok(ForwardTrace {
            residuals: residuals.iter().map(Var::to_tensor).collect(),
            logits: logits.to_tensor(),
            mask: batch.mask(),
            lens: batch.lens.clone(),
            seq: batch.seq,
        })
    }

    /// Forward pass for one sequence; positions where `mask` is false must
    /// form a suffix and are dropped.
    pub fn forward(&self, ids: &[u32], mask: &[bool], hook: Option<&InterventionHook>) -> Result<ForwardTrace> {
        if ids.len() != mask.len() {
            return Err(invalid("ids and mask lengths differ"));
        }
        let len = mask.iter().take_while(|&&m| m).count();
        if mask[len..].iter().any(|&m| m) {
            return Err(invalid("padding must be a suffix"));
        }
        self.forward_batch(&Batch::new(&[&ids[..len]])?, hook)
    }

    /// Mean next-token cross-entropy, optionally with a hook.
    pub fn loss(&self, seqs: &[Vec<u32>], batch_size: usize, hook: Option<&InterventionHook>) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in seqs.chunks(batch_size.max(1)) {
            let batch = Batch::new(chunk)?;
            let tape = Tape::new();
            let vars = self.register(&tape, false);
            let (_, logits) = self.forward_vars(&tape, &vars, &batch, hook)?;
            let targets = batch.targets();
            let n = targets.iter().flatten().count();
            let ce = logits.cross_entropy(targets)?.item() as f64;
            total += ce * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(invalid("no next-token targets"));
        }
        Ok(total / count as f64)
    }

    /// Greedy continuation of `prompt` for up to `max_steps` tokens, stopping
    /// after EOS. The hook, if any, is applied at every step.
    pub fn greedy(&self, prompt: &[u32], max_steps: usize, hook: Option<&InterventionHook>) -> Result<Vec<u32>> {
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_steps {
            if ids.len() >= self.config.max_seq_len {
                break;
            }
            let trace = self.forward_batch(&Batch::new(&[&ids])?, hook)?;
            let logits = trace.logits_at(0, ids.len() - 1);
            let next = argmax(logits) as u32;
            out.push(next);
            ids.push(next);
            if next == crate::corpus::EOS {
                break;
            }
        }
        Ok(out)
    }
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn apply_hook<'t>(tape: &'t Tape, x: Var<'t>, hook: &InterventionHook, batch: &Batch) -> Result<Var<'t>> {
    let shape = x.shape();
    let d = shape[1];
    let mut values = x.value();
    for (b, &len) in batch.lens.iter().enumerate() {
        let positions = match hook.scope {
            HookScope::All => 0..len,
            HookScope::Last => len - 1..len,
        };
        for i in positions {
            let row = (b * batch.seq + i) * d;
            let new = (hook.transform)(&values[row..row + d]);
            if new.len() != d {
                return Err(invalid(format!("hook returned {} values for a {d}-vector", new.len())));
            }
            values[row..row + d].copy_from_slice(&new);
        }
    }
    Ok(tape.values(shape, values, false)?)
}
