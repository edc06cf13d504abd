//! Training losses: in-batch InfoNCE, the Matryoshka composite, both 2D
//! Matryoshka formulations, and the retrieval-oriented variants (score
//! alignment, full-dimension layer loss, multiple target dimensions and
//! fixed document tower).
//!
//! Every function records onto a [`Graph`] and returns the scalar node.
//! Query and document embeddings come in as [`LayerEmbeddings`] from the
//! same encoder; row `i` of the documents is the positive for query `i`
//! and every other row is an in-batch negative.
//!
//! In each KL term the more complete representation (last layer, full
//! dimension, or the PCA target) is the gradient-blocked teacher by default;
//! [`TeacherSide::Truncated`] flips that.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::LayerEmbeddings;
use crate::error::{shape_err, Error, Result};
use crate::pca;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// InfoNCE on the last layer at full dimension.
    Full,
    /// Matryoshka: InfoNCE summed over prefix dimensions of the last layer.
    Mse,
    /// Last layer + one sampled sub-layer + KL alignment between them.
    V1,
    /// Weighted all-layer loss + PCA dimension loss + last-layer loss.
    V2,
}

impl ObjectiveKind {
    pub fn label(self) -> &'static str {
        match self {
            ObjectiveKind::Full => "full",
            ObjectiveKind::Mse => "mse",
            ObjectiveKind::V1 => "v1",
            ObjectiveKind::V2 => "v2",
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "mse" => Ok(Self::Mse),
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherSide {
    /// Last-layer / full-dim / PCA side is the teacher.
    #[default]
    Complete,
    /// The sub-layer or truncated side is the teacher.
    Truncated,
}

/// How the V2 dimension loss builds its targets. Only one reading is
/// implemented; it is recorded so checkpoints say which one ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DimTarget {
    /// PCA fitted per batch and per layer on the gradient-blocked full-dim
    /// embeddings of that layer.
    #[default]
    PcaPerBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Variants {
    /// Replace the PCA dimension loss with score-distribution alignment.
    pub score: bool,
    /// Add a full-dimension InfoNCE term for every layer.
    pub full_dim: bool,
    /// Score queries against last-layer documents in every term.
    pub fix_doc: bool,
    /// Train V2 on every entry of `dims` instead of `target_dim` only.
    pub multi_dim: bool,
}

impl Variants {
    pub fn any(&self) -> bool {
        self.score || self.full_dim || self.fix_doc || self.multi_dim
    }

    pub fn labels(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.score {
            out.push("score");
        }
        if self.full_dim {
            out.push("full-dim");
        }
        if self.fix_doc {
            out.push("fix-doc");
        }
        if self.multi_dim {
            out.push("dims");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Ascending prefix dimensions for the Matryoshka terms.
    pub dims: Vec<usize>,
    /// Single V2 target dimension.
    pub target_dim: usize,
    /// Weight of the V1 KL term.
    pub lambda: f64,
    /// Weight of the V2 layer loss.
    pub alpha: f64,
    /// Weight of the V2 dimension (or score) loss.
    pub beta: f64,
    pub temperature: f64,
    pub variants: Variants,
    #[serde(default)]
    pub teacher: TeacherSide,
    #[serde(default)]
    pub dim_target: DimTarget,
    /// Seed for sub-layer sampling.
    pub seed: u64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Full,
            dims: vec![8, 16, 32, 64],
            target_dim: 16,
            lambda: 1.0,
            alpha: 1.0,
            beta: 1.0,
            temperature: 0.05,
            variants: Variants::default(),
            teacher: TeacherSide::Complete,
            dim_target: DimTarget::PcaPerBatch,
            seed: 0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("dims must be non-empty".into()));
        }
        if self.dims[0] == 0 {
            return Err(Error::Config("dims must be positive".into()));
        }
        if self.dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "dims must be strictly ascending, got {:?}",
                self.dims
            )));
        }
        if let Some(&big) = self.dims.iter().find(|&&k| k > d_model) {
            return Err(Error::Config(format!("dim {big} exceeds d_model {d_model}")));
        }
        if self.target_dim == 0 || self.target_dim > d_model {
            return Err(Error::Config(format!(
                "target dim {} outside 1..={d_model}",
                self.target_dim
            )));
        }
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.kind != ObjectiveKind::V2 && self.variants.any() {
            return Err(Error::Config(format!(
                "variants {:?} require the v2 objective",
                self.variants.labels()
            )));
        }
        Ok(())
    }

    /// Dimensions the V2 layer and dimension losses train.
    pub fn v2_dims(&self) -> Vec<usize> {
        if self.variants.multi_dim {
            self.dims.clone()
        } else {
            vec![self.target_dim]
        }
    }

    /// Short label such as `v2+full-dim`.
    pub fn label(&self) -> String {
        let mut s = self.kind.label().to_string();
        for v in self.variants.labels() {
            s.push('+');
            s.push_str(v);
        }
        s
    }
}

fn sum_all<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("no loss terms".into()))?;
    rest.iter().try_fold(first, |acc, &t| g.add(acc, t))
}

fn weighted<T: Scalar>(g: &mut Graph<T>, x: Var, w: f64) -> Result<Var> {
    if w == 1.0 {
        Ok(x)
    } else {
        g.scale(x, T::of(w))
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, q: Var, d: Var, op: &'static str) -> Result<usize> {
    let (qd, dd) = (g.dims(q), g.dims(d));
    if qd.len() != 2 || dd.len() != 2 || qd != dd {
        return Err(shape_err(op, format!("queries {qd:?} vs documents {dd:?}")));
    }
    if qd[0] < 1 {
        return Err(Error::InvalidArgument(format!("{op}: empty batch")));
    }
    Ok(qd[0])
}

/// First `k` columns of an embedding matrix.
pub fn truncate<T: Scalar>(g: &mut Graph<T>, x: Var, k: usize) -> Result<Var> {
    let d = g.value(x).last_dim();
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("truncation {k} outside 1..={d}")));
    }
    g.prefix(x, k)
}

/// Cosine similarity matrix between query and document rows, divided by `temperature`.
pub fn similarity_logits<T: Scalar>(g: &mut Graph<T>, q: Var, d: Var, temperature: f64) -> Result<Var> {
    let (qd, dd) = (g.dims(q), g.dims(d));
    if qd.len() != 2 || dd.len() != 2 || qd[1] != dd[1] {
        return Err(shape_err("similarity", format!("{qd:?} vs {dd:?}")));
    }
    let qn = g.l2_normalize(q)?;
    let dn = g.l2_normalize(d)?;
    let dt = g.transpose(dn)?;
    let s = g.matmul(qn, dt)?;
    g.scale(s, T::of(1.0 / temperature))
}

/// In-batch contrastive loss: mean cross-entropy of each query against all
/// documents, with its aligned document as the target.
pub fn info_nce<T: Scalar>(g: &mut Graph<T>, q: Var, d: Var, temperature: f64) -> Result<Var> {
    check_pair(g, q, d, "info_nce")?;
    let logits = similarity_logits(g, q, d, temperature)?;
    nce_from_logits(g, logits)
}

/// Mean cross-entropy of each row of a square logit matrix against its diagonal.
pub fn nce_from_logits<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let dims = g.dims(logits);
    if dims.len() != 2 || dims[0] != dims[1] || dims[0] == 0 {
        return Err(shape_err("nce", format!("{dims:?}")));
    }
    let b = dims[0];
    let logp = g.log_softmax(logits)?;
    let eye = g.constant(Tensor::identity(b))?;
    let diag = g.mul(logp, eye)?;
    let total = g.sum(diag)?;
    g.scale(total, T::of(-1.0 / b as f64))
}

/// Row softmax of the scaled cosine-similarity matrix.
pub fn sim_distribution<T: Scalar>(g: &mut Graph<T>, q: Var, d: Var, temperature: f64) -> Result<Var> {
    let logits = similarity_logits(g, q, d, temperature)?;
    g.softmax(logits)
}

/// Mean over rows of `sum p * ln(p / q)` for row-stochastic `p` and `q`.
pub fn kld<T: Scalar>(g: &mut Graph<T>, p: Var, q: Var) -> Result<Var> {
    g.value(p).expect_same_dims(g.value(q), "kld")?;
    let rows = g.value(p).outer();
    let lp = g.ln(p)?;
    let lq = g.ln(q)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms)?;
    g.scale(total, T::of(1.0 / rows as f64))
}

/// [`kld`] computed from unnormalised logits in log space.
pub fn kld_from_logits<T: Scalar>(g: &mut Graph<T>, teacher: Var, student: Var) -> Result<Var> {
    g.value(teacher).expect_same_dims(g.value(student), "kld")?;
    let rows = g.value(teacher).outer();
    let p = g.softmax(teacher)?;
    let lp = g.log_softmax(teacher)?;
    let lq = g.log_softmax(student)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms)?;
    g.scale(total, T::of(1.0 / rows as f64))
}

/// KL between a complete and a partial similarity distribution with the
/// teacher side gradient-blocked.
fn distill<T: Scalar>(g: &mut Graph<T>, complete: Var, partial: Var, side: TeacherSide) -> Result<Var> {
    match side {
        TeacherSide::Complete => {
            let t = g.detach(complete)?;
            kld_from_logits(g, t, partial)
        }
        TeacherSide::Truncated => {
            let t = g.detach(partial)?;
            kld_from_logits(g, t, complete)
        }
    }
}

/// Sum of InfoNCE over every prefix dimension in `dims`.
pub fn matryoshka_loss<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    d: Var,
    dims: &[usize],
    temperature: f64,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(dims.len());
    for &k in dims {
        let qk = truncate(g, q, k)?;
        let dk = truncate(g, d, k)?;
        terms.push(info_nce(g, qk, dk, temperature)?);
    }
    sum_all(g, &terms)
}

/// Uniform draw from `1..n_layers`.
pub fn sample_sublayer(n_layers: usize, rng: &mut impl Rng) -> Result<usize> {
    if n_layers < 2 {
        return Err(Error::InvalidArgument(format!(
            "sub-layer sampling needs at least 2 layers, got {n_layers}"
        )));
    }
    Ok(rng.random_range(1..n_layers))
}

/// V1 objective with a freshly sampled sub-layer.
pub fn v1_loss<T: Scalar>(
    g: &mut Graph<T>,
    q: &LayerEmbeddings,
    d: &LayerEmbeddings,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let r = sample_sublayer(q.n_layers(), rng)?;
    v1_loss_at(g, q, d, cfg, r)
}

/// V1 objective for a given sub-layer `r` (1-based):
/// `L_last + L_random + lambda * KL(p(last) || p(r))`.
pub fn v1_loss_at<T: Scalar>(
    g: &mut Graph<T>,
    q: &LayerEmbeddings,
    d: &LayerEmbeddings,
    cfg: &ObjectiveConfig,
    r: usize,
) -> Result<Var> {
    let n = q.n_layers();
    if n < 2 {
        return Err(Error::InvalidArgument("v1 needs at least 2 layers".into()));
    }
    if r == 0 || r >= n {
        return Err(Error::InvalidArgument(format!("sub-layer {r} outside 1..{n}")));
    }
    let tau = cfg.temperature;
    let last = matryoshka_loss(g, q.last(), d.last(), &cfg.dims, tau)?;
    let random = matryoshka_loss(g, q.layer(r), d.layer(r), &cfg.dims, tau)?;
    let full = similarity_logits(g, q.last(), d.last(), tau)?;
    let sub = similarity_logits(g, q.layer(r), d.layer(r), tau)?;
    let kl = distill(g, full, sub, cfg.teacher)?;
    let kl = g.scale(kl, T::of(cfg.lambda))?;
    sum_all(g, &[last, random, kl])
}

/// `1 / (1 + ln i)` for `i < n_layers`, 1 for the last layer.
pub fn layer_weight(i: usize, n_layers: usize) -> Result<f64> {
    if i == 0 || i > n_layers {
        return Err(Error::InvalidArgument(format!("layer {i} outside 1..={n_layers}")));
    }
    Ok(if i == n_layers {
        1.0
    } else {
        1.0 / (1.0 + (i as f64).ln())
    })
}

/// Scaled similarities between the `k`-prefix of queries and documents.
///
/// Normally both sides are truncated then normalised. Under `fix_doc` the
/// document stays the full-width vector: it is normalised at full width and
/// only its first `k` coordinates meet the query (a zero-padded query).
pub fn prefix_logits<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    d: Var,
    k: usize,
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    let qk = truncate(g, q, k)?;
    if !cfg.variants.fix_doc {
        let dk = truncate(g, d, k)?;
        return similarity_logits(g, qk, dk, cfg.temperature);
    }
    let qn = g.l2_normalize(qk)?;
    let dn = g.l2_normalize(d)?;
    let dk = truncate(g, dn, k)?;
    let dt = g.transpose(dk)?;
    let s = g.matmul(qn, dt)?;
    g.scale(s, T::of(1.0 / cfg.temperature))
}

fn doc_for(d: &LayerEmbeddings, layer: usize, cfg: &ObjectiveConfig) -> Var {
    if cfg.variants.fix_doc {
        d.last()
    } else {
        d.layer(layer)
    }
}

/// `sum_i w_i * l(e_k^(i))` over layers and the V2 target dimensions.
pub fn v2_layer_loss<T: Scalar>(
    g: &mut Graph<T>,
    q: &LayerEmbeddings,
    d: &LayerEmbeddings,
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    let n = q.n_layers();
    let mut terms = Vec::new();
    for i in 1..=n {
        let doc = doc_for(d, i, cfg);
        let mut dim_terms = Vec::new();
        for k in cfg.v2_dims() {
            let logits = prefix_logits(g, q.layer(i), doc, k, cfg)?;
            dim_terms.push(nce_from_logits(g, logits)?);
        }
        let l = sum_all(g, &dim_terms)?;
        terms.push(weighted(g, l, layer_weight(i, n)?)?);
    }
    sum_all(g, &terms)
}

/// PCA of a gradient-blocked batch, as constants. Returns the fitted basis
/// and the projections of each part.
fn pca_fit_detached<T: Scalar>(g: &mut Graph<T>, parts: &[Var], k: usize) -> Result<(pca::PcaBasis, Vec<Var>)> {
    let detached = parts.iter().map(|&p| g.detach(p)).collect::<Result<Vec<_>>>()?;
    let values: Vec<&Tensor<T>> = detached.iter().map(|&v| g.value(v)).collect();
    let stacked = Tensor::concat_rows(&values)?;
    let basis = pca::fit(&stacked, k)?;
    let projected = detached
        .iter()
        .map(|&v| project_var(g, v, &basis))
        .collect::<Result<Vec<_>>>()?;
    Ok((basis, projected))
}

/// `(x - mean) @ components` recorded on the graph with a fixed basis.
fn project_var<T: Scalar>(g: &mut Graph<T>, x: Var, basis: &pca::PcaBasis) -> Result<Var> {
    let comps = g.constant(basis.components.cast())?;
    let k = basis.k();
    let offset: Vec<T> = (0..k)
        .map(|j| {
            let dot: f64 = (0..basis.dim())
                .map(|i| basis.mean[i] * basis.components.data()[i * k + j])
                .sum();
            T::of(-dot)
        })
        .collect();
    let offset = g.constant(Tensor::new(vec![k], offset)?)?;
    let xc = g.matmul(x, comps)?;
    g.add_row(xc, offset)
}

/// Per-layer PCA teacher embeddings: each layer's gradient-blocked
/// full-dim embeddings projected onto that layer's top-`k` axes.
pub fn pca_targets<T: Scalar>(g: &mut Graph<T>, e: &LayerEmbeddings, k: usize) -> Result<Vec<Var>> {
    e.layers
        .iter()
        .map(|&layer| Ok(pca_fit_detached(g, &[layer], k)?.1[0]))
        .collect()
}

fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// `sum_i w_i * (MSE(e_k^(i), y_k) + KL(p(y_k) || p(e_k^(i))))` where `y_k`
/// is the PCA projection of the same layer's detached full-dim embeddings.
/// The basis is fitted jointly on that layer's query and document rows.
///
/// Under `fix_doc` documents come from the last layer and the document-side
/// MSE is dropped for sub-layers.
pub fn v2_dim_loss<T: Scalar>(
    g: &mut Graph<T>,
    q: &LayerEmbeddings,
    d: &LayerEmbeddings,
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    let n = q.n_layers();
    let mut terms = Vec::new();
    for i in 1..=n {
        let (qi, di) = (q.layer(i), doc_for(d, i, cfg));
        let include_doc_mse = !cfg.variants.fix_doc || i == n;
        let mut layer_terms = Vec::new();
        for k in cfg.v2_dims() {
            let (basis, proj) = pca_fit_detached(g, &[qi, di], k)?;
            let (yq, yd) = (proj[0], proj[1]);
            let qs = truncate(g, qi, k)?;
            let ds = truncate(g, di, k)?;
            let m = if include_doc_mse {
                let student = g.concat_rows(&[qs, ds])?;
                let target = g.concat_rows(&[yq, yd])?;
                mse(g, student, target)?
            } else {
                mse(g, qs, yq)?
            };
            let kl = match cfg.teacher {
                TeacherSide::Complete => {
                    let t = similarity_logits(g, yq, yd, cfg.temperature)?;
                    let s = prefix_logits(g, qi, di, k, cfg)?;
                    kld_from_logits(g, t, s)?
                }
                TeacherSide::Truncated => {
                    let s = prefix_logits(g, qi, di, k, cfg)?;
                    let t = g.detach(s)?;
                    let pq = project_var(g, qi, &basis)?;
                    let pd = project_var(g, di, &basis)?;
                    let student = similarity_logits(g, pq, pd, cfg.temperature)?;
                    kld_from_logits(g, t, student)?
                }
            };
            layer_terms.push(g.add(m, kl)?);
        }
        let l = sum_all(g, &layer_terms)?;
        terms.push(weighted(g, l, layer_weight(i, n)?)?);
    }
    sum_all(g, &terms)
}

/// `sum_i w_i * KL(p(full last layer) || p(e_k^(i)))`: aligns each
/// truncated sub-model's in-batch score distribution with the full model's.
pub fn score_alignment_loss<T: Scalar>(
    g: &mut Graph<T>,
    q: &LayerEmbeddings,
    d: &LayerEmbeddings,
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    let n = q.n_layers();
    let full = similarity_logits(g, q.last(), d.last(), cfg.temperature)?;
    let mut terms = Vec::new();
    for i in 1..=n {
        let (qi, di) = (q.layer(i), doc_for(d, i, cfg));
        let mut layer_terms = Vec::new();
        for k in cfg.v2_dims() {
            let sub = prefix_logits(g, qi, di, k, cfg)?;
            layer_terms.push(distill(g, full, sub, cfg.teacher)?);
        }
        let l = sum_all(g, &layer_terms)?;
        terms.push(weighted(g, l, layer_weight(i, n)?)?);
    }
    sum_all(g, &terms)
}

/// `sum_i w_i * l(e^(i))` at full dimension.
pub fn full_dim_loss<T: Scalar>(
    g: &mut Graph<T>,
    q: &LayerEmbeddings,
    d: &LayerEmbeddings,
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    let n = q.n_layers();
    let mut terms = Vec::new();
    for i in 1..=n {
        let l = info_nce(g, q.layer(i), doc_for(d, i, cfg), cfg.temperature)?;
        terms.push(weighted(g, l, layer_weight(i, n)?)?);
    }
    sum_all(g, &terms)
}

/// `alpha * L_layer + beta * L_dim + l(e^(L))`, with the score variant
/// standing in for `L_dim` and the optional full-dimension term on top.
/// The `beta` term is skipped entirely when `beta == 0`.
pub fn v2_total_loss<T: Scalar>(
    g: &mut Graph<T>,
    q: &LayerEmbeddings,
    d: &LayerEmbeddings,
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    let layer = v2_layer_loss(g, q, d, cfg)?;
    let mut terms = vec![g.scale(layer, T::of(cfg.alpha))?];
    if cfg.beta != 0.0 {
        let dim = if cfg.variants.score {
            score_alignment_loss(g, q, d, cfg)?
        } else {
            v2_dim_loss(g, q, d, cfg)?
        };
        terms.push(g.scale(dim, T::of(cfg.beta))?);
    }
    terms.push(info_nce(g, q.last(), d.last(), cfg.temperature)?);
    if cfg.variants.full_dim {
        terms.push(full_dim_loss(g, q, d, cfg)?);
    }
    sum_all(g, &terms)
}

/// Dispatches on `cfg.kind`.
pub fn objective_loss<T: Scalar>(
    g: &mut Graph<T>,
    q: &LayerEmbeddings,
    d: &LayerEmbeddings,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    if q.n_layers() != d.n_layers() || q.n_layers() == 0 {
        return Err(Error::InvalidArgument(format!(
            "query and document towers disagree on depth: {} vs {}",
            q.n_layers(),
            d.n_layers()
        )));
    }
    match cfg.kind {
        ObjectiveKind::Full => info_nce(g, q.last(), d.last(), cfg.temperature),
        ObjectiveKind::Mse => matryoshka_loss(g, q.last(), d.last(), &cfg.dims, cfg.temperature),
        ObjectiveKind::V1 => v1_loss(g, q, d, cfg, rng),
        ObjectiveKind::V2 => v2_total_loss(g, q, d, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(g: &mut Graph<f64>, rows: &[Vec<f64>]) -> Var {
        g.constant(Tensor::from_f64_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn truncate_prefix() {
        let mut g = Graph::new();
        let x = c(&mut g, &[vec![1., 2., 3., 4.]]);
        let t = truncate(&mut g, x, 2).unwrap();
        assert_eq!(g.value(t).data(), &[1., 2.]);
        let same = truncate(&mut g, x, 4).unwrap();
        assert_eq!(g.value(same), g.value(x));
        let t8 = c(&mut g, &[(0..8).map(f64::from).collect()]);
        let a = truncate(&mut g, t8, 8).unwrap();
        let a = truncate(&mut g, a, 4).unwrap();
        let b = truncate(&mut g, t8, 4).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(truncate(&mut g, x, 0).is_err());
        assert!(truncate(&mut g, x, 5).is_err());
    }

    #[test]
    fn info_nce_hand_values() {
        let mut g = Graph::new();
        let q = c(&mut g, &[vec![0.6, 0.8]]);
        let single = info_nce(&mut g, q, q, 1.0).unwrap();
        assert!(g.value(single).item().abs() < 1e-12);

        let q = c(&mut g, &[vec![1., 0.], vec![0., 1.]]);
        let l = info_nce(&mut g, q, q, 1.0).unwrap();
        let expected = (1f64.exp() + 1.0).ln() - 1.0;
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn sim_distribution_cases() {
        let mut g = Graph::new();
        let q = c(&mut g, &[vec![1., 2.]]);
        let p = sim_distribution(&mut g, q, q, 0.05).unwrap();
        assert_eq!(g.value(p).data(), &[1.0]);
        let q = c(&mut g, &[vec![1., 0.]]);
        let d = c(&mut g, &[vec![0., 1.], vec![0., -1.], vec![0., 2.], vec![0., -3.]]);
        let p = sim_distribution(&mut g, q, d, 0.05).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn kld_hand_values() {
        let mut g = Graph::new();
        let p = c(&mut g, &[vec![0.5, 0.5]]);
        let q = c(&mut g, &[vec![0.9, 0.1]]);
        let k = kld(&mut g, p, q).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((g.value(k).item() - expected).abs() < 1e-12);
        assert!((expected - 0.510826).abs() < 1e-6);
        let same = kld(&mut g, p, p).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let wide = c(&mut g, &[vec![0.2, 0.3, 0.5]]);
        assert!(kld(&mut g, p, wide).is_err());
    }

    #[test]
    fn layer_weights() {
        assert_eq!(layer_weight(12, 12).unwrap(), 1.0);
        assert_eq!(layer_weight(1, 12).unwrap(), 1.0);
        assert!((layer_weight(2, 12).unwrap() - 0.590616).abs() < 1e-6);
        assert!(layer_weight(0, 12).is_err());
        assert!(layer_weight(13, 12).is_err());
    }

    #[test]
    fn sublayer_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..100).all(|_| sample_sublayer(2, &mut rng).unwrap() == 1));
        assert!(sample_sublayer(1, &mut rng).is_err());
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_sublayer(6, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn config_validation() {
        let base = ObjectiveConfig::default();
        base.validate(64).unwrap();
        let bad = ObjectiveConfig {
            dims: vec![32, 8],
            ..base.clone()
        };
        assert!(bad.validate(64).is_err());
        let bad = ObjectiveConfig {
            dims: vec![8, 128],
            ..base.clone()
        };
        assert!(bad.validate(64).is_err());
        let bad = ObjectiveConfig {
            variants: Variants {
                score: true,
                ..Variants::default()
            },
            ..base.clone()
        };
        assert!(bad.validate(64).is_err());
        let bad = ObjectiveConfig {
            temperature: 0.0,
            ..base
        };
        assert!(bad.validate(64).is_err());
    }
}
