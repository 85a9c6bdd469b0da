//! Translation-based transition model.
//!
//! A transition pair `head -> tail` is encoded as
//! `sigmoid(W [e_head ; e_tail] + b)`, the encodings of a support set are
//! averaged into a single translation vector `tr`, and a pair is scored by
//! the squared distance `|e_head + tr - e_tail|^2`. Training minimises a
//! margin ranking loss over `(head, tail, negative)` triples.
//!
//! Every forward operation is generic over [`ParamView`] so that adapted
//! parameters (a sparse overlay on the shared initialisation) and full
//! [`Params`] share one code path.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ItemId;

/// Pre-activations are clamped here so the sigmoid output stays strictly
/// inside (0, 1) in f64.
const PREACT_CLAMP: f64 = 36.0;

/// Read access to a full parameter set.
pub trait ParamView {
    fn dim(&self) -> usize;
    fn n_items(&self) -> usize;
    fn embedding(&self, item: ItemId) -> Result<&[f64]>;
    /// Row-major `dim x 2*dim`.
    fn transform(&self) -> &[f64];
    fn bias(&self) -> &[f64];
}

/// Shared model parameters: item embedding table, transform matrix and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    dim: usize,
    n_items: usize,
    embeddings: Vec<f64>,
    transform: Vec<f64>,
    bias: Vec<f64>,
}

impl Params {
    pub fn zeros(n_items: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim must be positive"));
        }
        Ok(Params {
            dim,
            n_items,
            embeddings: vec![0.0; n_items * dim],
            transform: vec![0.0; 2 * dim * dim],
            bias: vec![0.0; dim],
        })
    }

    /// Seeded initialisation. Embeddings are uniform in `±6/sqrt(dim)`, the
    /// transform is Glorot-uniform and the bias starts at zero.
    pub fn init<R: Rng + ?Sized>(n_items: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let mut params = Params::zeros(n_items, dim)?;
        let emb_bound = 6.0 / (dim as f64).sqrt();
        for v in params.embeddings.iter_mut() {
            *v = rng.random_range(-emb_bound..=emb_bound);
        }
        let w_bound = (6.0 / (3 * dim) as f64).sqrt();
        for v in params.transform.iter_mut() {
            *v = rng.random_range(-w_bound..=w_bound);
        }
        Ok(params)
    }

    pub fn from_parts(
        dim: usize,
        n_items: usize,
        embeddings: Vec<f64>,
        transform: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim must be positive"));
        }
        if embeddings.len() != n_items * dim {
            return Err(Error::invalid(format!(
                "embedding table has {} entries, expected {n_items} x {dim}",
                embeddings.len()
            )));
        }
        if transform.len() != 2 * dim * dim {
            return Err(Error::invalid(format!(
                "transform has {} entries, expected {dim} x {}",
                transform.len(),
                2 * dim
            )));
        }
        if bias.len() != dim {
            return Err(Error::invalid(format!(
                "bias has {} entries, expected {dim}",
                bias.len()
            )));
        }
        let params = Params {
            dim,
            n_items,
            embeddings,
            transform,
            bias,
        };
        if !params.is_finite() {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(params)
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut [f64] {
        &mut self.embeddings
    }

    pub fn transform_mut(&mut self) -> &mut [f64] {
        &mut self.transform
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn embedding_mut(&mut self, item: ItemId) -> Result<&mut [f64]> {
        let i = item.index();
        if i >= self.n_items {
            return Err(Error::UnknownItem(item));
        }
        Ok(&mut self.embeddings[i * self.dim..(i + 1) * self.dim])
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings
            .iter()
            .chain(&self.transform)
            .chain(&self.bias)
            .all(|v| v.is_finite())
    }

    /// `theta <- theta - lr * grads`, touching only embedding rows present in
    /// the gradient.
    pub fn apply_gradient(&mut self, grads: &Grads, lr: f64) -> Result<()> {
        check_grad_dim(self.dim, grads)?;
        for (&item, g) in &grads.d_embeddings {
            let row = self.embedding_mut(item)?;
            sgd(row, g, lr);
        }
        sgd(&mut self.transform, &grads.d_transform, lr);
        sgd(&mut self.bias, &grads.d_bias, lr);
        Ok(())
    }

    /// Hash over the exact bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.dim.hash(&mut h);
        self.n_items.hash(&mut h);
        for v in self
            .embeddings
            .iter()
            .chain(&self.transform)
            .chain(&self.bias)
        {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

impl ParamView for Params {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_items(&self) -> usize {
        self.n_items
    }

    fn embedding(&self, item: ItemId) -> Result<&[f64]> {
        let i = item.index();
        if i >= self.n_items {
            return Err(Error::UnknownItem(item));
        }
        Ok(&self.embeddings[i * self.dim..(i + 1) * self.dim])
    }

    fn transform(&self) -> &[f64] {
        &self.transform
    }

    fn bias(&self) -> &[f64] {
        &self.bias
    }
}

/// Task-specific parameters: a copy-on-write overlay over shared parameters.
///
/// Embedding rows are copied from the base only when a gradient step touches
/// them, so adapting to a task costs O(|support| * dim + dim^2) regardless of
/// vocabulary size. The base is never modified.
#[derive(Debug, Clone)]
pub struct AdaptedParams<'a> {
    base: &'a Params,
    embeddings: BTreeMap<ItemId, Vec<f64>>,
    transform: Vec<f64>,
    bias: Vec<f64>,
}

impl<'a> AdaptedParams<'a> {
    pub fn new(base: &'a Params) -> Self {
        AdaptedParams {
            base,
            embeddings: BTreeMap::new(),
            transform: base.transform.clone(),
            bias: base.bias.clone(),
        }
    }

    pub fn base(&self) -> &'a Params {
        self.base
    }

    /// Items whose embeddings differ from (or were copied out of) the base.
    pub fn touched_items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.embeddings.keys().copied()
    }

    pub fn apply_gradient(&mut self, grads: &Grads, lr: f64) -> Result<()> {
        check_grad_dim(self.base.dim, grads)?;
        for (&item, g) in &grads.d_embeddings {
            let base_row = self.base.embedding(item)?;
            let row = self
                .embeddings
                .entry(item)
                .or_insert_with(|| base_row.to_vec());
            sgd(row, g, lr);
        }
        sgd(&mut self.transform, &grads.d_transform, lr);
        sgd(&mut self.bias, &grads.d_bias, lr);
        Ok(())
    }

    /// Materialise a full, owned parameter set.
    pub fn to_params(&self) -> Params {
        let mut out = self.base.clone();
        for (item, row) in &self.embeddings {
            let i = item.index();
            out.embeddings[i * out.dim..(i + 1) * out.dim].copy_from_slice(row);
        }
        out.transform.copy_from_slice(&self.transform);
        out.bias.copy_from_slice(&self.bias);
        out
    }
}

impl ParamView for AdaptedParams<'_> {
    fn dim(&self) -> usize {
        self.base.dim
    }

    fn n_items(&self) -> usize {
        self.base.n_items
    }

    fn embedding(&self, item: ItemId) -> Result<&[f64]> {
        match self.embeddings.get(&item) {
            Some(row) => Ok(row),
            None => self.base.embedding(item),
        }
    }

    fn transform(&self) -> &[f64] {
        &self.transform
    }

    fn bias(&self) -> &[f64] {
        &self.bias
    }
}

fn sgd(dst: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in dst.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

fn check_grad_dim(dim: usize, grads: &Grads) -> Result<()> {
    if grads.dim != dim {
        return Err(Error::invalid(format!(
            "gradient dim {} does not match parameter dim {dim}",
            grads.dim
        )));
    }
    Ok(())
}

/// Output of the transition encoder, or the mean over a support set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRep(Vec<f64>);

impl TransitionRep {
    pub fn new(values: Vec<f64>) -> Self {
        TransitionRep(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// One term of the margin loss: `head -> tail` should outscore `head -> negative`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: ItemId,
    pub tail: ItemId,
    pub negative: ItemId,
}

impl Triple {
    pub fn new(head: ItemId, tail: ItemId, negative: ItemId) -> Self {
        Triple {
            head,
            tail,
            negative,
        }
    }

    pub fn pair(&self) -> (ItemId, ItemId) {
        (self.head, self.tail)
    }
}

/// Gradient of a loss with respect to every parameter. Embedding gradients
/// are sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub dim: usize,
    pub d_embeddings: BTreeMap<ItemId, Vec<f64>>,
    pub d_transform: Vec<f64>,
    pub d_bias: Vec<f64>,
}

impl Grads {
    pub fn zeros(dim: usize) -> Self {
        Grads {
            dim,
            d_embeddings: BTreeMap::new(),
            d_transform: vec![0.0; 2 * dim * dim],
            d_bias: vec![0.0; dim],
        }
    }

    pub fn embedding_entry(&mut self, item: ItemId) -> &mut Vec<f64> {
        let dim = self.dim;
        self.d_embeddings
            .entry(item)
            .or_insert_with(|| vec![0.0; dim])
    }

    pub fn add_assign(&mut self, other: &Grads) {
        debug_assert_eq!(self.dim, other.dim);
        for (&item, g) in &other.d_embeddings {
            for (a, b) in self.embedding_entry(item).iter_mut().zip(g) {
                *a += b;
            }
        }
        for (a, b) in self.d_transform.iter_mut().zip(&other.d_transform) {
            *a += b;
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            *a += b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.d_embeddings
            .values()
            .flatten()
            .chain(&self.d_transform)
            .chain(&self.d_bias)
            .copied()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-PREACT_CLAMP, PREACT_CLAMP)).exp())
}

/// Encode one transition pair: `sigmoid(W [e_head ; e_tail] + b)`.
pub fn transition_rep<P: ParamView + ?Sized>(
    params: &P,
    head: ItemId,
    tail: ItemId,
) -> Result<TransitionRep> {
    let dim = params.dim();
    let eh = params.embedding(head)?;
    let et = params.embedding(tail)?;
    let w = params.transform();
    let b = params.bias();
    let values = (0..dim)
        .map(|r| {
            let row = &w[r * 2 * dim..(r + 1) * 2 * dim];
            let mut z = b[r];
            for (wj, xj) in row[..dim].iter().zip(eh) {
                z += wj * xj;
            }
            for (wj, xj) in row[dim..].iter().zip(et) {
                z += wj * xj;
            }
            sigmoid(z)
        })
        .collect();
    Ok(TransitionRep(values))
}

/// Componentwise mean.
pub fn aggregate(reps: &[TransitionRep]) -> Result<TransitionRep> {
    let first = reps
        .first()
        .ok_or_else(|| Error::invalid("cannot aggregate an empty list of transition reps"))?;
    let dim = first.dim();
    let mut sum = vec![0.0; dim];
    for rep in reps {
        if rep.dim() != dim {
            return Err(Error::invalid(format!(
                "transition rep length {} differs from {dim}",
                rep.dim()
            )));
        }
        for (s, v) in sum.iter_mut().zip(rep.values()) {
            *s += v;
        }
    }
    let n = reps.len() as f64;
    Ok(TransitionRep(sum.into_iter().map(|s| s / n).collect()))
}

/// Encode and average a set of `(head, tail)` pairs.
pub fn support_rep<P: ParamView + ?Sized>(
    params: &P,
    pairs: &[(ItemId, ItemId)],
) -> Result<TransitionRep> {
    let reps = pairs
        .iter()
        .map(|&(h, t)| transition_rep(params, h, t))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&reps)
}

/// Translation distance `|e_head + tr - e_tail|^2`. Lower means a more
/// plausible transition.
pub fn score<P: ParamView + ?Sized>(
    params: &P,
    tr: &TransitionRep,
    head: ItemId,
    tail: ItemId,
) -> Result<f64> {
    let eh = params.embedding(head)?;
    let et = params.embedding(tail)?;
    check_rep_dim(params.dim(), tr)?;
    Ok(eh
        .iter()
        .zip(tr.values())
        .zip(et)
        .map(|((h, r), t)| {
            let d = h + r - t;
            d * d
        })
        .sum())
}

fn check_rep_dim(dim: usize, tr: &TransitionRep) -> Result<()> {
    if tr.dim() != dim {
        return Err(Error::invalid(format!(
            "transition rep has length {}, model dim is {dim}",
            tr.dim()
        )));
    }
    Ok(())
}

fn hinge_arg(margin: f64, pos: f64, neg: f64) -> f64 {
    margin + pos - neg
}

/// Sum of `max(0, margin + s(head->tail) - s(head->negative))`.
pub fn margin_loss<P: ParamView + ?Sized>(
    params: &P,
    margin: f64,
    tr: &TransitionRep,
    triples: &[Triple],
) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::invalid("margin loss needs at least one triple"));
    }
    let mut total = 0.0;
    for t in triples {
        let pos = score(params, tr, t.head, t.tail)?;
        let neg = score(params, tr, t.head, t.negative)?;
        total += hinge_arg(margin, pos, neg).max(0.0);
    }
    Ok(total)
}

/// Support-set loss and its exact gradient. The translation vector is
/// derived from the triples' own `(head, tail)` pairs.
pub fn loss_and_grad<P: ParamView + ?Sized>(
    params: &P,
    margin: f64,
    support: &[Triple],
) -> Result<(f64, Grads)> {
    let context: Vec<_> = support.iter().map(Triple::pair).collect();
    episode_loss_and_grad(params, margin, &context, support)
}

/// Loss over `scored` triples with the translation vector taken from the
/// `context` pairs, and the exact gradient through both paths.
///
/// With `context` equal to the support pairs and `scored` equal to the query
/// triples this is the query loss of a task.
pub fn episode_loss_and_grad<P: ParamView + ?Sized>(
    params: &P,
    margin: f64,
    context: &[(ItemId, ItemId)],
    scored: &[Triple],
) -> Result<(f64, Grads)> {
    if context.is_empty() {
        return Err(Error::invalid("transition context is empty"));
    }
    if scored.is_empty() {
        return Err(Error::invalid("margin loss needs at least one triple"));
    }
    let dim = params.dim();
    let reps = context
        .iter()
        .map(|&(h, t)| transition_rep(params, h, t))
        .collect::<Result<Vec<_>>>()?;
    let tr = aggregate(&reps)?;

    let mut grads = Grads::zeros(dim);
    // d loss / d tr
    let mut g_tr = vec![0.0; dim];
    let mut loss = 0.0;
    for t in scored {
        let pos = score(params, &tr, t.head, t.tail)?;
        let neg = score(params, &tr, t.head, t.negative)?;
        let arg = hinge_arg(margin, pos, neg);
        loss += arg.max(0.0);
        if arg <= 0.0 {
            continue;
        }
        let eh = params.embedding(t.head)?;
        let et = params.embedding(t.tail)?;
        let en = params.embedding(t.negative)?;
        let mut g_head = vec![0.0; dim];
        let mut g_tail = vec![0.0; dim];
        let mut g_neg = vec![0.0; dim];
        for k in 0..dim {
            let u = eh[k] + tr.values()[k] - et[k];
            let v = eh[k] + tr.values()[k] - en[k];
            g_head[k] = 2.0 * (u - v);
            g_tail[k] = -2.0 * u;
            g_neg[k] = 2.0 * v;
            g_tr[k] += 2.0 * (u - v);
        }
        for (item, g) in [(t.head, g_head), (t.tail, g_tail), (t.negative, g_neg)] {
            for (a, b) in grads.embedding_entry(item).iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    if g_tr.iter().any(|&g| g != 0.0) {
        let inv_n = 1.0 / context.len() as f64;
        for (&(h, t), rep) in context.iter().zip(&reps) {
            // delta = dL/dz for this pair's pre-activation
            let delta: Vec<f64> = rep
                .values()
                .iter()
                .zip(&g_tr)
                .map(|(s, g)| g * inv_n * s * (1.0 - s))
                .collect();
            let eh = params.embedding(h)?;
            let et = params.embedding(t)?;
            let w = params.transform();
            let mut g_head = vec![0.0; dim];
            let mut g_tail = vec![0.0; dim];
            for (r, &dr) in delta.iter().enumerate() {
                let row = r * 2 * dim;
                for c in 0..dim {
                    grads.d_transform[row + c] += dr * eh[c];
                    grads.d_transform[row + dim + c] += dr * et[c];
                    g_head[c] += w[row + c] * dr;
                    g_tail[c] += w[row + dim + c] * dr;
                }
                grads.d_bias[r] += dr;
            }
            for (item, g) in [(h, g_head), (t, g_tail)] {
                for (a, b) in grads.embedding_entry(item).iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
    Ok((loss, grads))
}
