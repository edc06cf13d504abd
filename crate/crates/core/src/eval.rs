//! Sub-model extraction at `(layer, dim)` operating points, retrieval and
//! STS metrics, and the layer x dimension sweep.
//!
//! Similarity is always the dot product of L2-normalised embeddings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::{RunQrels, StsPair, TextRecord};
use crate::encoder::{encode_all_layers, EncoderConfig, EncoderParams, TokenBatch, Vocab};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_CUTOFF: usize = 10;
const ENCODE_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubModelSelector {
    /// 1-based layer.
    pub layer: usize,
    pub dim: usize,
}

impl SubModelSelector {
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.layer == 0 || self.layer > cfg.n_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {} outside 1..={}",
                self.layer, cfg.n_layers
            )));
        }
        if self.dim == 0 || self.dim > cfg.d_model {
            return Err(Error::InvalidArgument(format!(
                "dim {} outside 1..={}",
                self.dim, cfg.d_model
            )));
        }
        Ok(())
    }
}

/// Pooled, unnormalised embeddings of `texts` at every layer. Texts are
/// encoded in fixed-size chunks with no gradient tracking.
pub fn embed_all_layers(
    params: &EncoderParams<f32>,
    cfg: &EncoderConfig,
    vocab: &Vocab,
    texts: &[&str],
) -> Result<Vec<Tensor<f32>>> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument("nothing to embed".into()));
    }
    let mut per_layer: Vec<Vec<f32>> = vec![Vec::new(); cfg.n_layers];
    for chunk in texts.chunks(ENCODE_BATCH) {
        let seqs: Vec<Vec<usize>> = chunk
            .iter()
            .map(|t| vocab.tokenize(t, cfg.max_seq_len))
            .collect();
        let batch = TokenBatch::from_sequences(&seqs)?;
        let mut g = Graph::<f32>::new();
        let w = params.bind(&mut g, false)?;
        let layers = encode_all_layers(&mut g, &w, cfg, &batch)?;
        for (dst, &v) in per_layer.iter_mut().zip(&layers.layers) {
            dst.extend_from_slice(g.value(v).data());
        }
    }
    per_layer
        .into_iter()
        .map(|data| Tensor::new(vec![texts.len(), cfg.d_model], data))
        .collect()
}

/// First `k` columns of every row, each scaled to unit norm.
pub fn truncate_normalize<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let mut t = x.slice_last(0, k)?;
    for row in t.data_mut().chunks_mut(k) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n == T::zero() {
            return Err(Error::Degenerate("zero-norm embedding".into()));
        }
        row.iter_mut().for_each(|v| *v = *v / n);
    }
    Ok(t)
}

/// Embeddings at one operating point: layer `l`, first `k` dims, unit rows.
pub fn embed_at(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    selector: SubModelSelector,
    texts: &[&str],
) -> Result<Tensor<f32>> {
    selector.validate(&ckpt.encoder)?;
    let layers = embed_all_layers(&ckpt.params, &ckpt.encoder, vocab, texts)?;
    truncate_normalize(&layers[selector.layer - 1], selector.dim)
}

/// Top-`n` corpus rows by dot product, descending; equal scores are
/// ordered by ascending row index.
pub fn brute_force_topk<T: Scalar>(query: &[T], corpus: &Tensor<T>, n: usize) -> Result<Vec<(usize, T)>> {
    if corpus.is_empty() || corpus.dims().len() != 2 {
        return Err(Error::InvalidArgument("corpus must be a non-empty matrix".into()));
    }
    if corpus.dims()[1] != query.len() {
        return Err(Error::InvalidArgument(format!(
            "query width {} vs corpus width {}",
            query.len(),
            corpus.dims()[1]
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let n = n.min(corpus.rows());
    // Sorted buffer of the best n so far; rows arrive in ascending index
    // order, so inserting after equal scores keeps the tie rule.
    let mut best: Vec<(usize, T)> = Vec::with_capacity(n + 1);
    for (i, row) in corpus.data().chunks(query.len()).enumerate() {
        let s: T = row.iter().zip(query).map(|(&a, &b)| a * b).sum();
        if best.len() == n && s <= best[n - 1].1 {
            continue;
        }
        let pos = best.partition_point(|&(_, b)| b >= s);
        best.insert(pos, (i, s));
        best.truncate(n);
    }
    Ok(best)
}

/// Ranked document ids per query id.
pub type Rankings = BTreeMap<String, Vec<String>>;

/// Mean reciprocal rank of the first relevant document within the top `k`.
pub fn mrr_at_k(rankings: &Rankings, qrels: &RunQrels, k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (qid, ranked) in rankings {
        let Some(rel) = qrels.get(qid) else {
            log::warn!("query {qid} has no judgements; scored as zero");
            continue;
        };
        if let Some(pos) = ranked.iter().take(k).position(|d| rel.contains(d)) {
            total += 1.0 / (pos + 1) as f64;
        }
    }
    total / rankings.len() as f64
}

/// Binary-gain NDCG at cutoff `k`.
pub fn ndcg_at_k(rankings: &Rankings, qrels: &RunQrels, k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let mut total = 0.0;
    for (qid, ranked) in rankings {
        let rel = match qrels.get(qid) {
            Some(r) if !r.is_empty() => r,
            _ => {
                log::warn!("query {qid} has no relevant documents; scored as zero");
                continue;
            }
        };
        let dcg: f64 = ranked
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, d)| rel.contains(*d))
            .map(|(i, _)| discount(i + 1))
            .sum();
        let ideal: f64 = (1..=rel.len().min(k)).map(discount).sum();
        total += dcg / ideal;
    }
    total / rankings.len() as f64
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of tie-averaged ranks.
pub fn spearman(predicted: &[f64], gold: &[f64]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            predicted.len(),
            gold.len()
        )));
    }
    if predicted.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 pairs".into()));
    }
    if predicted.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    let (a, b) = (average_ranks(predicted), average_ranks(gold));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("zero variance in ranks".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sts,
    Retrieval,
}

#[derive(Clone, Debug)]
pub struct RetrievalSet {
    pub corpus: Vec<TextRecord>,
    pub queries: Vec<TextRecord>,
    pub qrels: RunQrels,
}

#[derive(Clone, Debug)]
pub enum EvalSet {
    Sts(Vec<StsPair>),
    Retrieval(RetrievalSet),
}

impl EvalSet {
    pub fn task(&self) -> Task {
        match self {
            EvalSet::Sts(_) => Task::Sts,
            EvalSet::Retrieval(_) => Task::Retrieval,
        }
    }
}

/// Per-layer embeddings of the query side and corpus of a retrieval set.
///
/// With `fix_doc` the corpus is encoded once, at the last layer and full
/// dimension, and normalised at that width; every cell scores its unit
/// `k`-dim queries against the first `k` coordinates of that same matrix.
pub struct RetrievalEncodings {
    queries: Vec<Tensor<f32>>,
    corpus: Vec<Tensor<f32>>,
    fix_doc: bool,
}

impl RetrievalEncodings {
    pub fn new(
        params: &EncoderParams<f32>,
        cfg: &EncoderConfig,
        vocab: &Vocab,
        set: &RetrievalSet,
        fix_doc: bool,
    ) -> Result<Self> {
        let qtexts: Vec<&str> = set.queries.iter().map(|r| r.text.as_str()).collect();
        let ctexts: Vec<&str> = set.corpus.iter().map(|r| r.text.as_str()).collect();
        let queries = embed_all_layers(params, cfg, vocab, &qtexts)?;
        let mut corpus = embed_all_layers(params, cfg, vocab, &ctexts)?;
        if fix_doc {
            let last = corpus.pop().expect("at least one layer");
            corpus = vec![truncate_normalize(&last, cfg.d_model)?];
        }
        Ok(Self {
            queries,
            corpus,
            fix_doc,
        })
    }

    pub fn fix_doc(&self) -> bool {
        self.fix_doc
    }

    /// Corpus matrix the cell scores against. Under `fix_doc` this is the
    /// same full-width matrix for every cell.
    pub fn cell_corpus(&self, sel: SubModelSelector) -> Result<Tensor<f32>> {
        if self.fix_doc {
            Ok(self.corpus[0].clone())
        } else {
            truncate_normalize(&self.corpus[sel.layer - 1], sel.dim)
        }
    }

    pub fn cell_queries(&self, sel: SubModelSelector) -> Result<Tensor<f32>> {
        truncate_normalize(&self.queries[sel.layer - 1], sel.dim)
    }

    pub fn rankings(&self, set: &RetrievalSet, sel: SubModelSelector, cutoff: usize) -> Result<Rankings> {
        let corpus = self.cell_corpus(sel)?;
        let queries = self.cell_queries(sel)?;
        let width = corpus.dims()[1];
        let mut padded = vec![0.0f32; width];
        let mut out = Rankings::new();
        for (rec, q) in set.queries.iter().zip(queries.data().chunks(sel.dim)) {
            padded[..sel.dim].copy_from_slice(q);
            let top = brute_force_topk(&padded, &corpus, cutoff)?;
            out.insert(
                rec.id.clone(),
                top.into_iter().map(|(i, _)| set.corpus[i].id.clone()).collect(),
            );
        }
        Ok(out)
    }
}

/// Per-layer embeddings of both sides of an STS pair file.
pub struct StsEncodings {
    first: Vec<Tensor<f32>>,
    second: Vec<Tensor<f32>>,
}

impl StsEncodings {
    pub fn new(params: &EncoderParams<f32>, cfg: &EncoderConfig, vocab: &Vocab, pairs: &[StsPair]) -> Result<Self> {
        let a: Vec<&str> = pairs.iter().map(|p| p.s1.as_str()).collect();
        let b: Vec<&str> = pairs.iter().map(|p| p.s2.as_str()).collect();
        Ok(Self {
            first: embed_all_layers(params, cfg, vocab, &a)?,
            second: embed_all_layers(params, cfg, vocab, &b)?,
        })
    }

    pub fn spearman(&self, pairs: &[StsPair], sel: SubModelSelector) -> Result<f64> {
        let a = truncate_normalize(&self.first[sel.layer - 1], sel.dim)?;
        let b = truncate_normalize(&self.second[sel.layer - 1], sel.dim)?;
        let sims: Vec<f64> = a
            .data()
            .chunks(sel.dim)
            .zip(b.data().chunks(sel.dim))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum())
            .collect();
        let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
        spearman(&sims, &gold)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub objective: String,
    pub layer: usize,
    pub dim: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const CSV_HEADER: &str = "objective,layer,dim,metric,value,seed";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.objective, r.layer, r.dim, r.metric, r.value, r.seed
            )
            .unwrap();
        }
        s
    }

    pub fn metrics(&self) -> Vec<String> {
        let mut m: Vec<String> = Vec::new();
        for r in &self.rows {
            if !m.contains(&r.metric) {
                m.push(r.metric.clone());
            }
        }
        m
    }

    pub fn value(&self, layer: usize, dim: usize, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.dim == dim && r.metric == metric)
            .map(|r| r.value)
    }

    /// One layer x dim table per metric.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        for metric in self.metrics() {
            let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.metric == metric).collect();
            let mut layers: Vec<usize> = rows.iter().map(|r| r.layer).collect();
            let mut dims: Vec<usize> = rows.iter().map(|r| r.dim).collect();
            layers.sort();
            layers.dedup();
            dims.sort();
            dims.dedup();
            writeln!(s, "### {metric}\n").unwrap();
            write!(s, "| layer \\ dim |").unwrap();
            for d in &dims {
                write!(s, " {d} |").unwrap();
            }
            s.push('\n');
            s.push_str("|---|");
            for _ in &dims {
                s.push_str("---|");
            }
            s.push('\n');
            for l in &layers {
                write!(s, "| {l} |").unwrap();
                for d in &dims {
                    match self.value(*l, *d, &metric) {
                        Some(v) => write!(s, " {v:.4} |").unwrap(),
                        None => s.push_str(" - |"),
                    }
                }
                s.push('\n');
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub layers: Vec<usize>,
    pub dims: Vec<usize>,
    pub fix_doc: bool,
    pub objective: String,
    pub seed: u64,
    pub cutoff: usize,
}

/// Metrics for every `(layer, dim)` cell, layers outer and dims inner.
/// Embeddings are computed once per layer and truncated per dim.
pub fn sweep(ckpt: &Checkpoint, vocab: &Vocab, set: &EvalSet, opts: &SweepOptions) -> Result<SweepResult> {
    if opts.layers.is_empty() || opts.dims.is_empty() {
        return Err(Error::InvalidArgument("sweep needs layers and dims".into()));
    }
    let cells: Vec<SubModelSelector> = opts
        .layers
        .iter()
        .flat_map(|&layer| opts.dims.iter().map(move |&dim| SubModelSelector { layer, dim }))
        .collect();
    for c in &cells {
        c.validate(&ckpt.encoder)?;
    }
    let row = |sel: SubModelSelector, metric: &str, value: f64| SweepRow {
        objective: opts.objective.clone(),
        layer: sel.layer,
        dim: sel.dim,
        metric: metric.to_owned(),
        value,
        seed: opts.seed,
    };
    let mut rows = Vec::new();
    match set {
        EvalSet::Retrieval(rs) => {
            let enc = RetrievalEncodings::new(&ckpt.params, &ckpt.encoder, vocab, rs, opts.fix_doc)?;
            for &sel in &cells {
                let ranks = enc.rankings(rs, sel, opts.cutoff)?;
                rows.push(row(sel, &format!("mrr@{}", opts.cutoff), mrr_at_k(&ranks, &rs.qrels, opts.cutoff)));
                rows.push(row(sel, &format!("ndcg@{}", opts.cutoff), ndcg_at_k(&ranks, &rs.qrels, opts.cutoff)));
            }
        }
        EvalSet::Sts(pairs) => {
            let enc = StsEncodings::new(&ckpt.params, &ckpt.encoder, vocab, pairs)?;
            for &sel in &cells {
                rows.push(row(sel, "spearman", enc.spearman(pairs, sel)?));
            }
        }
    }
    Ok(SweepResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qrels(pairs: &[(&str, &str)]) -> RunQrels {
        let mut q = RunQrels::default();
        for (a, b) in pairs {
            q.insert(a, b);
        }
        q
    }

    fn ranking(qid: &str, docs: &[&str]) -> Rankings {
        let mut r = Rankings::new();
        r.insert(qid.into(), docs.iter().map(|s| s.to_string()).collect());
        r
    }

    #[test]
    fn topk_basic() {
        let corpus = Tensor::<f64>::from_f64_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap();
        let top = brute_force_topk(&[1.0, 0.0], &corpus, 2).unwrap();
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 1]);
        let all = brute_force_topk(&[1.0, 0.0], &corpus, 10).unwrap();
        assert_eq!(all.len(), 2);
        let tied = Tensor::<f64>::from_f64_rows(&[vec![0., 1.], vec![1., 0.], vec![1., 0.]]).unwrap();
        let top = brute_force_topk(&[1.0, 0.0], &tied, 2).unwrap();
        assert_eq!(top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![1, 2]);
        assert!(brute_force_topk(&[1.0], &corpus, 1).is_err());
    }

    #[test]
    fn mrr_cases() {
        let q = qrels(&[("q", "c"), ("r", "a")]);
        let r = ranking("q", &["a", "b", "c"]);
        assert!((mrr_at_k(&r, &q, 10) - 1.0 / 3.0).abs() < 1e-12);
        let far: Vec<String> = (0..11).map(|i| format!("x{i}")).collect();
        let mut r = Rankings::new();
        r.insert("q".into(), far);
        assert_eq!(mrr_at_k(&r, &q, 10), 0.0);
        let mut r = ranking("q", &["c"]);
        r.insert("r".into(), vec!["x".into(), "y".into(), "z".into(), "a".into()]);
        assert!((mrr_at_k(&r, &q, 10) - 0.625).abs() < 1e-12);
        let r = ranking("missing", &["c"]);
        assert_eq!(mrr_at_k(&r, &q, 10), 0.0);
    }

    #[test]
    fn ndcg_cases() {
        let q = qrels(&[("q", "a")]);
        assert!((ndcg_at_k(&ranking("q", &["a", "b"]), &q, 10) - 1.0).abs() < 1e-12);
        let second = ndcg_at_k(&ranking("q", &["b", "a"]), &q, 10);
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((second - 0.630930).abs() < 1e-6);
        let q2 = qrels(&[("q", "a"), ("q", "b"), ("q", "c")]);
        assert!((ndcg_at_k(&ranking("q", &["c", "a", "b", "x"]), &q2, 10) - 1.0).abs() < 1e-12);
        assert!(ndcg_at_k(&ranking("q", &["x", "c", "a", "b"]), &q2, 10) < 1.0);
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1., 2., 3.], &[10., 20., 30.]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1., 2., 2.], &[1., 2., 3.]).unwrap() - 0.866025).abs() < 1e-6);
        assert!(spearman(&[1., 1., 1.], &[1., 2., 3.]).is_err());
        assert!(spearman(&[1.], &[1.]).is_err());
        assert!(spearman(&[1., 2.], &[1.]).is_err());
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[3., 1., 3., 2.]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
