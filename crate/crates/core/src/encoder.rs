//! Toy post-LN transformer encoder that pools a sentence embedding after
//! every layer, so one forward pass yields all `(layer, dim)` sub-models.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Optional summary token. When a vocab contains it, every tokenized text
/// starts with it, which gives first-token pooling a dedicated slot.
pub const CLS_TOKEN: &str = "[cls]";

const LAYER_NORM_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    FirstToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 128,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= UNK_ID {
            return Err(Error::Config("vocab must hold the PAD and UNK ids".into()));
        }
        Ok(())
    }
}

/// Whitespace vocabulary. Line number in the vocab file is the token id;
/// ids 0 and 1 are PAD and UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    cls: Option<usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() <= UNK_ID {
            return Err(Error::InvalidArgument(
                "vocab needs at least the PAD and UNK entries".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocab token {tok:?}")));
            }
        }
        let cls = index.get(CLS_TOKEN).copied().filter(|&id| id > UNK_ID);
        Ok(Self { tokens, index, cls })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::read_text(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        Self::new(tokens).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn cls_id(&self) -> Option<usize> {
        self.cls
    }

    /// Lowercased whitespace tokens mapped through the vocab, truncated to
    /// `max_len` (including the leading CLS, if any). Unknown words map to
    /// UNK; text with no words becomes a single UNK.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        let room = max_len.saturating_sub(self.cls.is_some() as usize).max(1);
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .take(room)
            .map(|w| {
                let w = w.to_lowercase();
                match self.index.get(&w) {
                    Some(&id) if id != PAD_ID => id,
                    _ => UNK_ID,
                }
            })
            .collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        match self.cls {
            Some(cls) if max_len > 1 => std::iter::once(cls).chain(ids).collect(),
            _ => ids,
        }
    }
}

/// Padded token ids for a batch, flattened to `batch x seq`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    /// True at real tokens, false at padding.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty token batch".into()));
        }
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD_ID, seq - s.len()));
            mask.extend(std::iter::repeat_n(false, seq - s.len()));
        }
        Ok(Self {
            ids,
            mask,
            batch: seqs.len(),
            seq,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<P> {
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    pub attn_norm: Norm<P>,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
    pub ffn_norm: Norm<P>,
}

const LAYER_LEAVES: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "attn_norm.gamma", "attn_norm.beta", "w1", "b1",
    "w2", "b2", "ffn_norm.gamma", "ffn_norm.beta",
];

/// Encoder weights, generic over the leaf type so the same structure holds
/// stored tensors and graph-bound variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<P> {
    pub token_embedding: P,
    pub position_embedding: P,
    pub embedding_norm: Norm<P>,
    pub layers: Vec<Layer<P>>,
}

pub type EncoderParams<T> = Weights<Tensor<T>>;

impl<P> Weights<P> {
    /// Leaves in canonical order; matches [`Weights::names`] and
    /// [`Weights::from_leaves`].
    pub fn leaves(&self) -> Vec<&P> {
        let mut out = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.embedding_norm.gamma,
            &self.embedding_norm.beta,
        ];
        for l in &self.layers {
            out.extend([
                &l.wq,
                &l.bq,
                &l.wk,
                &l.bk,
                &l.wv,
                &l.bv,
                &l.wo,
                &l.bo,
                &l.attn_norm.gamma,
                &l.attn_norm.beta,
                &l.w1,
                &l.b1,
                &l.w2,
                &l.b2,
                &l.ffn_norm.gamma,
                &l.ffn_norm.beta,
            ]);
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.embedding_norm.gamma,
            &mut self.embedding_norm.beta,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.attn_norm.gamma,
                &mut l.attn_norm.beta,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
                &mut l.ffn_norm.gamma,
                &mut l.ffn_norm.beta,
            ]);
        }
        out
    }

    pub fn names(n_layers: usize) -> Vec<String> {
        let mut out: Vec<String> = [
            "token_embedding",
            "position_embedding",
            "embedding_norm.gamma",
            "embedding_norm.beta",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..n_layers {
            out.extend(LAYER_LEAVES.iter().map(|s| format!("layers.{i}.{s}")));
        }
        out
    }

    pub fn from_leaves(n_layers: usize, leaves: impl IntoIterator<Item = P>) -> Result<Self> {
        let mut it = leaves.into_iter();
        let mut next = || {
            it.next()
                .ok_or_else(|| Error::InvalidArgument("too few weight leaves".into()))
        };
        let token_embedding = next()?;
        let position_embedding = next()?;
        let embedding_norm = Norm {
            gamma: next()?,
            beta: next()?,
        };
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(Layer {
                wq: next()?,
                bq: next()?,
                wk: next()?,
                bk: next()?,
                wv: next()?,
                bv: next()?,
                wo: next()?,
                bo: next()?,
                attn_norm: Norm {
                    gamma: next()?,
                    beta: next()?,
                },
                w1: next()?,
                b1: next()?,
                w2: next()?,
                b2: next()?,
                ffn_norm: Norm {
                    gamma: next()?,
                    beta: next()?,
                },
            });
        }
        drop(next);
        if it.next().is_some() {
            return Err(Error::InvalidArgument("too many weight leaves".into()));
        }
        Ok(Self {
            token_embedding,
            position_embedding,
            embedding_norm,
            layers,
        })
    }

    pub fn try_map<Q>(&self, mut f: impl FnMut(&P) -> Result<Q>) -> Result<Weights<Q>> {
        let leaves = self.leaves().into_iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Weights::from_leaves(self.layers.len(), leaves)
    }
}

impl<T: Scalar> EncoderParams<T> {
    /// Normal(0, 0.02) weights and embeddings, zero biases, identity layer norms.
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut randn = |dims: &[usize]| -> Tensor<T> {
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
            Tensor::new(dims.to_vec(), data).expect("dims match data")
        };
        let d = cfg.d_model;
        let norm = || Norm {
            gamma: Tensor::filled(&[d], T::one()),
            beta: Tensor::zeros(&[d]),
        };
        let token_embedding = randn(&[cfg.vocab_size, d]);
        let position_embedding = randn(&[cfg.max_seq_len, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(Layer {
                wq: randn(&[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: randn(&[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: randn(&[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: randn(&[d, d]),
                bo: Tensor::zeros(&[d]),
                attn_norm: norm(),
                w1: randn(&[d, cfg.d_ff]),
                b1: Tensor::zeros(&[cfg.d_ff]),
                w2: randn(&[cfg.d_ff, d]),
                b2: Tensor::zeros(&[d]),
                ffn_norm: norm(),
            });
        }
        Ok(Self {
            token_embedding,
            position_embedding,
            embedding_norm: norm(),
            layers,
        })
    }

    /// Checks every tensor against the dims implied by `cfg`.
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let d = cfg.d_model;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "params hold {} layers, config says {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        let mut expected: Vec<Vec<usize>> = vec![
            vec![cfg.vocab_size, d],
            vec![cfg.max_seq_len, d],
            vec![d],
            vec![d],
        ];
        for _ in 0..cfg.n_layers {
            expected.extend([
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, cfg.d_ff],
                vec![cfg.d_ff],
                vec![cfg.d_ff, d],
                vec![d],
                vec![d],
                vec![d],
            ]);
        }
        let names = Self::names(cfg.n_layers);
        for ((t, want), name) in self.leaves().into_iter().zip(&expected).zip(&names) {
            if t.dims() != want.as_slice() {
                return Err(Error::Config(format!(
                    "{name} has dims {:?}, expected {want:?}",
                    t.dims()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite { op: "params" });
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Weights<Var>> {
        self.try_map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }
}

/// Pooled embeddings after each layer; `layers[i]` is layer `i + 1`, each of
/// dims `batch x d_model`.
#[derive(Clone, Debug)]
pub struct LayerEmbeddings {
    pub layers: Vec<Var>,
}

impl LayerEmbeddings {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer by 1-based index.
    pub fn layer(&self, i: usize) -> Var {
        self.layers[i - 1]
    }

    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }
}

/// Sentence embeddings from token states: masked mean or the first position.
pub fn pool<T: Scalar>(g: &mut Graph<T>, hidden: Var, batch: &TokenBatch, mode: Pooling) -> Result<Var> {
    match mode {
        Pooling::Mean => g.masked_mean(hidden, &batch.mask, batch.batch, batch.seq),
        Pooling::FirstToken => {
            let rows: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq).collect();
            g.gather_rows(hidden, &rows)
        }
    }
}

/// Runs the encoder once and pools after every layer.
pub fn encode_all_layers<T: Scalar>(
    g: &mut Graph<T>,
    w: &Weights<Var>,
    cfg: &EncoderConfig,
    batch: &TokenBatch,
) -> Result<LayerEmbeddings> {
    let (bsz, seq) = (batch.batch, batch.seq);
    if bsz == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if seq > cfg.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} >= vocab_size {}",
            cfg.vocab_size
        )));
    }
    let heads = cfg.n_heads;
    let dh = cfg.d_model / heads;
    let eps = T::of(LAYER_NORM_EPS);

    let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
    let tok = g.embedding(w.token_embedding, &batch.ids)?;
    let pos = g.embedding(w.position_embedding, &positions)?;
    let x = g.add(tok, pos)?;
    let mut x = g.layer_norm(x, w.embedding_norm.gamma, w.embedding_norm.beta, eps)?;

    // Additive key mask: padding keys get a large negative score.
    let mut mask = vec![T::zero(); bsz * heads * seq * seq];
    for b in 0..bsz {
        for h in 0..heads {
            for q in 0..seq {
                for k in 0..seq {
                    if !batch.mask[b * seq + k] {
                        mask[((b * heads + h) * seq + q) * seq + k] = T::of(MASK_FILL);
                    }
                }
            }
        }
    }
    let mask = g.constant(Tensor::new(vec![bsz * heads, seq, seq], mask)?)?;
    let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());

    let mut pooled = Vec::with_capacity(w.layers.len());
    for l in &w.layers {
        let q = g.matmul(x, l.wq)?;
        let q = g.add_row(q, l.bq)?;
        let k = g.matmul(x, l.wk)?;
        let k = g.add_row(k, l.bk)?;
        let v = g.matmul(x, l.wv)?;
        let v = g.add_row(v, l.bv)?;
        let qh = g.split_heads(q, bsz, seq, heads)?;
        let kh = g.split_heads(k, bsz, seq, heads)?;
        let vh = g.split_heads(v, bsz, seq, heads)?;
        let scores = g.batch_matmul(qh, kh, true)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let scores = g.add(scores, mask)?;
        let attn = g.softmax(scores)?;
        let ctx = g.batch_matmul(attn, vh, false)?;
        let ctx = g.merge_heads(ctx, bsz, seq, heads)?;
        let o = g.matmul(ctx, l.wo)?;
        let o = g.add_row(o, l.bo)?;
        let r = g.add(x, o)?;
        x = g.layer_norm(r, l.attn_norm.gamma, l.attn_norm.beta, eps)?;

        let h = g.matmul(x, l.w1)?;
        let h = g.add_row(h, l.b1)?;
        let h = g.gelu(h)?;
        let f = g.matmul(h, l.w2)?;
        let f = g.add_row(f, l.b2)?;
        let r = g.add(x, f)?;
        x = g.layer_norm(r, l.ffn_norm.gamma, l.ffn_norm.beta, eps)?;

        pooled.push(pool(g, x, batch, cfg.pooling)?);
    }
    Ok(LayerEmbeddings { layers: pooled })
}
