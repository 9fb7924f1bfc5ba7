//! Contrastive losses over cosine similarities and their analytic gradients.
//!
//! Every loss here is a weighted sum of softmax cross-entropy terms of the
//! form
//!
//! ```text
//! -sim[i][j] / tau + log sum_{k in K(i)} exp(sim[i][k] * mask[i][k])
//! ```
//!
//! that differ only in the positive set, the denominator set `K(i)` and the
//! mask. The derivative w.r.t. each similarity entry is collected in a
//! `2N x 2N` matrix and pulled back through the row normalization to the raw
//! embeddings.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{parent_of, paired_view, positive_set, AugmentedBatch};
use crate::error::{MclError, Result};
use crate::masking::{build_ccm, build_ccm_aux, MaskMatrix, MclConfig};
use crate::rng::{stream_rng, Stream};

/// `2N x d` latent vectors, one view per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(pub DMatrix<f64>);

impl EmbeddingMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(MclError::ShapeMismatch("ragged embedding rows".into()));
        }
        Ok(Self(DMatrix::from_fn(n, d, |i, j| rows[i][j])))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|i| self.0.row(i).iter().copied().collect())
            .collect()
    }
}

/// Pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(pub DMatrix<f64>);

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

/// A loss value and its parts. `total = ccm + lambda * spa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    /// Pairwise contrastive part (NT-Xent, CCM or SupCLR).
    pub ccm: f64,
    /// Stochastic positive attraction part (0 for losses without one).
    pub spa: f64,
    pub lambda: f64,
    /// Contribution of each query view to `total`.
    pub per_view: Vec<f64>,
}

impl LossValue {
    fn single(parts: Contribution) -> Self {
        Self {
            total: parts.value,
            ccm: parts.value,
            spa: 0.0,
            lambda: 0.0,
            per_view: parts.per_view,
        }
    }

    fn combined(ccm: Contribution, spa: Contribution, lambda: f64) -> Self {
        let per_view = ccm
            .per_view
            .iter()
            .zip(&spa.per_view)
            .map(|(c, s)| c + lambda * s)
            .collect();
        Self {
            total: ccm.value + lambda * spa.value,
            ccm: ccm.value,
            spa: spa.value,
            lambda,
            per_view,
        }
    }
}

/// How the SPA expectation over the positive batch is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpaMode {
    /// Average over every view of the positive batch (deterministic).
    #[default]
    Expectation,
    /// One uniformly drawn positive per query.
    SingleSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    NtXent,
    Ccm,
    Mcl,
    SupClr,
}

/// Selects a loss and its options for [`loss_and_gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Use the aux-extended mask (and composite labels for SPA).
    pub aux: bool,
    pub spa_mode: SpaMode,
    pub seed: u64,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            aux: false,
            spa_mode: SpaMode::Expectation,
            seed: 0,
        }
    }

    pub fn with_aux(mut self, aux: bool) -> Self {
        self.aux = aux;
        self
    }
}

/// Cosine similarities `z_i . z_j / (|z_i| |z_j|)`.
pub fn cosine_similarity(z: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    let (unit, _) = normalize_rows(&z.0)?;
    Ok(similarity_of_unit(&unit))
}

fn normalize_rows(z: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut unit = z.clone();
    let mut norms = Vec::with_capacity(z.nrows());
    for i in 0..z.nrows() {
        let norm = z.row(i).norm();
        if !norm.is_finite() {
            return Err(MclError::NonFinite(format!("embedding row {i}")));
        }
        if norm == 0.0 {
            return Err(MclError::ZeroNormRow(i));
        }
        unit.row_mut(i).unscale_mut(norm);
        norms.push(norm);
    }
    Ok((unit, norms))
}

fn similarity_of_unit(unit: &DMatrix<f64>) -> SimilarityMatrix {
    let mut s = unit * unit.transpose();
    for i in 0..s.nrows() {
        s[(i, i)] = 1.0;
        for j in 0..i {
            // enforce exact symmetry and range
            let v = s[(i, j)].clamp(-1.0, 1.0);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    SimilarityMatrix(s)
}

/// Loss value plus `dL/dsim` (row-query convention: entry `(i, k)` is the
/// derivative w.r.t. `sim[i][k]` as it appears in query `i`'s terms).
struct Contribution {
    value: f64,
    per_view: Vec<f64>,
    dsim: DMatrix<f64>,
}

impl Contribution {
    fn zeros(n: usize) -> Self {
        Self {
            value: 0.0,
            per_view: vec![0.0; n],
            dsim: DMatrix::zeros(n, n),
        }
    }
}

/// Adds `scale * sum_j w_j * (-sim_ij/tau + logsumexp_k sim_ik * mask_ik)`
/// for one query to `acc`. `in_denominator(k)` selects `K(i)`.
fn add_query_terms(
    acc: &mut Contribution,
    s: &SimilarityMatrix,
    mask: &MaskMatrix,
    tau: f64,
    i: usize,
    positives: &[(usize, f64)],
    in_denominator: impl Fn(usize) -> bool,
    scale: f64,
) {
    if positives.is_empty() {
        return;
    }
    let n = s.size();
    let row_mask = mask.row(i);
    let logits: Vec<Option<f64>> = (0..n)
        .map(|k| in_denominator(k).then(|| s.get(i, k) * row_mask[k]))
        .collect();
    let max = logits
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let sum: f64 = logits.iter().flatten().map(|&b| (b - max).exp()).sum();
    let lse = max + sum.ln();

    let inv_tau = 1.0 / tau;
    let weight_total: f64 = positives.iter().map(|&(_, w)| w).sum();
    let mut value = 0.0;
    for &(j, w) in positives {
        value += w * (lse - s.get(i, j) * inv_tau);
        acc.dsim[(i, j)] -= scale * w / tau;
    }
    for (k, b) in logits.iter().enumerate() {
        if let Some(b) = b {
            let soft = (b - max).exp() / sum;
            acc.dsim[(i, k)] += scale * weight_total * row_mask[k] * soft;
        }
    }
    acc.value += scale * value;
    acc.per_view[i] += scale * value;
}

fn check_square(s: &SimilarityMatrix, mask: &MaskMatrix) -> Result<usize> {
    let n = s.size();
    if s.0.ncols() != n {
        return Err(MclError::ShapeMismatch("similarity matrix is not square".into()));
    }
    if n == 0 || n % 2 != 0 {
        return Err(MclError::ShapeMismatch(format!(
            "similarity matrix of size {n}; expected an even, nonzero number of views"
        )));
    }
    if mask.size() != n {
        return Err(MclError::ShapeMismatch(format!(
            "mask of size {} for {n} views",
            mask.size()
        )));
    }
    Ok(n)
}

/// Pair loss with a mask in the denominator over `k != i`.
fn pair_contribution(s: &SimilarityMatrix, mask: &MaskMatrix, tau: f64) -> Result<Contribution> {
    let n = check_square(s, mask)?;
    let mut acc = Contribution::zeros(n);
    let scale = 1.0 / n as f64;
    for i in 0..n {
        add_query_terms(&mut acc, s, mask, tau, i, &[(paired_view(i), 1.0)], |k| k != i, scale);
    }
    Ok(acc)
}

fn spa_contribution<L: PartialEq>(
    s: &SimilarityMatrix,
    mask: &MaskMatrix,
    labels: &[L],
    tau: f64,
    mode: SpaMode,
    seed: u64,
) -> Result<Contribution> {
    let n = check_square(s, mask)?;
    if labels.len() != n {
        return Err(MclError::ShapeMismatch(format!(
            "{} labels for {n} views",
            labels.len()
        )));
    }
    let mut acc = Contribution::zeros(n);
    let scale = 1.0 / n as f64;
    let mut rng = stream_rng(seed, Stream::SpaSampling);
    for i in 0..n {
        let pos = positive_set(labels, i)?;
        if pos.is_empty() {
            continue;
        }
        let positives: Vec<(usize, f64)> = match mode {
            SpaMode::Expectation => {
                let w = 1.0 / pos.len() as f64;
                pos.iter().map(|&j| (j, w)).collect()
            }
            SpaMode::SingleSample => vec![(pos[rng.random_range(0..pos.len())], 1.0)],
        };
        let p = parent_of(i);
        add_query_terms(&mut acc, s, mask, tau, i, &positives, |k| parent_of(k) != p, scale);
    }
    Ok(acc)
}

fn supclr_contribution(s: &SimilarityMatrix, labels: &[usize], tau: f64) -> Result<Contribution> {
    let mask = MaskMatrix::constant(s.size(), 1.0 / tau);
    let n = check_square(s, &mask)?;
    if labels.len() != n {
        return Err(MclError::ShapeMismatch(format!(
            "{} labels for {n} views",
            labels.len()
        )));
    }
    let mut acc = Contribution::zeros(n);
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&k| k != i && labels[k] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let w = 1.0 / pos.len() as f64;
        let positives: Vec<(usize, f64)> = pos.iter().map(|&j| (j, w)).collect();
        add_query_terms(&mut acc, s, &mask, tau, i, &positives, |k| k != i, scale);
    }
    Ok(acc)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(MclError::InvalidConfig(format!("tau must be positive, got {tau}")))
    }
}

/// NT-Xent averaged over both orderings of every positive pair.
pub fn nt_xent_loss(s: &SimilarityMatrix, tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    let mask = MaskMatrix::constant(s.size(), 1.0 / tau);
    Ok(LossValue::single(pair_contribution(s, &mask, tau)?))
}

/// NT-Xent with the mask applied to the denominator similarities.
pub fn ccm_loss(s: &SimilarityMatrix, mask: &MaskMatrix, tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    Ok(LossValue::single(pair_contribution(s, mask, tau)?))
}

/// Stochastic positive attraction. Positives match on the composite
/// `(main, aux)` label when the batch carries aux labels, on the main label
/// otherwise. The reported value sits in `spa` with `lambda = 1`.
pub fn spa_loss(
    s: &SimilarityMatrix,
    mask: &MaskMatrix,
    batch: &AugmentedBatch,
    tau: f64,
    mode: SpaMode,
    seed: u64,
) -> Result<LossValue> {
    check_tau(tau)?;
    let spa = spa_contribution(s, mask, &batch.composite_labels(), tau, mode, seed)?;
    Ok(LossValue {
        total: spa.value,
        ccm: 0.0,
        spa: spa.value,
        lambda: 1.0,
        per_view: spa.per_view,
    })
}

/// `dL_spa / dsim` with SPA in expectation mode. For a positive pair `(q, r)`
/// the entry equals `(1/2N) (alpha * w_qr - 1/(tau |B+_q|))`, where `w_qr` is
/// the softmax weight of `r` in `q`'s denominator.
pub fn spa_similarity_gradient(
    s: &SimilarityMatrix,
    mask: &MaskMatrix,
    batch: &AugmentedBatch,
    tau: f64,
) -> Result<DMatrix<f64>> {
    check_tau(tau)?;
    let spa = spa_contribution(s, mask, &batch.composite_labels(), tau, SpaMode::Expectation, 0)?;
    Ok(spa.dsim)
}

/// `L_ccm + lambda * L_spa`; with `aux` the hierarchical mask and composite
/// positives are used.
pub fn mcl_loss(
    z: &EmbeddingMatrix,
    batch: &AugmentedBatch,
    cfg: &MclConfig,
    aux: bool,
) -> Result<LossValue> {
    loss_and_gradient(z, batch, cfg, &LossSpec::new(LossKind::Mcl).with_aux(aux)).map(|(v, _)| v)
}

/// Supervised contrastive loss: each query attracts every other view with
/// the same main label, including its paired view.
pub fn supclr_loss(z: &EmbeddingMatrix, batch: &AugmentedBatch, tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    let s = cosine_similarity(z)?;
    Ok(LossValue::single(supclr_contribution(&s, &batch.main_labels, tau)?))
}

/// `ce + lambda * simclr.total`.
pub fn joint_loss(ce: f64, simclr: &LossValue, lambda: f64) -> f64 {
    ce + lambda * simclr.total
}

/// `dL/dZ` for the selected loss.
pub fn loss_gradient(
    z: &EmbeddingMatrix,
    batch: &AugmentedBatch,
    cfg: &MclConfig,
    spec: &LossSpec,
) -> Result<DMatrix<f64>> {
    loss_and_gradient(z, batch, cfg, spec).map(|(_, g)| g)
}

/// Computes a loss and its gradient w.r.t. the raw embeddings in one pass.
pub fn loss_and_gradient(
    z: &EmbeddingMatrix,
    batch: &AugmentedBatch,
    cfg: &MclConfig,
    spec: &LossSpec,
) -> Result<(LossValue, DMatrix<f64>)> {
    if z.rows() != batch.len() {
        return Err(MclError::ShapeMismatch(format!(
            "{} embeddings for {} views",
            z.rows(),
            batch.len()
        )));
    }
    check_tau(cfg.tau)?;
    let (unit, norms) = normalize_rows(&z.0)?;
    let s = similarity_of_unit(&unit);
    let tau = cfg.tau;
    let n = batch.len();

    let mask_for = |aux: bool| -> Result<MaskMatrix> {
        if aux {
            build_ccm_aux(batch, cfg)
        } else {
            build_ccm(batch, cfg)
        }
    };

    let (value, dsim) = match spec.kind {
        LossKind::NtXent => {
            let c = pair_contribution(&s, &MaskMatrix::constant(n, 1.0 / tau), tau)?;
            let dsim = c.dsim.clone();
            (LossValue::single(c), dsim)
        }
        LossKind::Ccm => {
            let c = pair_contribution(&s, &mask_for(spec.aux)?, tau)?;
            let dsim = c.dsim.clone();
            (LossValue::single(c), dsim)
        }
        LossKind::Mcl => {
            let mask = mask_for(spec.aux)?;
            let ccm = pair_contribution(&s, &mask, tau)?;
            let spa = if spec.aux {
                spa_contribution(&s, &mask, &batch.composite_labels(), tau, spec.spa_mode, spec.seed)?
            } else {
                spa_contribution(&s, &mask, &batch.main_labels, tau, spec.spa_mode, spec.seed)?
            };
            let dsim = &ccm.dsim + &spa.dsim * cfg.lambda;
            (LossValue::combined(ccm, spa, cfg.lambda), dsim)
        }
        LossKind::SupClr => {
            let c = supclr_contribution(&s, &batch.main_labels, tau)?;
            let dsim = c.dsim.clone();
            (LossValue::single(c), dsim)
        }
    };
    if !value.total.is_finite() {
        return Err(MclError::NonFinite("loss value".into()));
    }
    Ok((value, pull_back(&unit, &norms, &dsim)))
}

/// Maps `dL/dsim` to `dL/dz` through `sim = u_i . u_j`, `u = z / |z|`.
fn pull_back(unit: &DMatrix<f64>, norms: &[f64], dsim: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = dsim + dsim.transpose();
    let mut grad = &sym * unit;
    for i in 0..grad.nrows() {
        let u = unit.row(i);
        let radial = u.dot(&grad.row(i));
        let mut row = grad.row_mut(i);
        row -= u * radial;
        row.unscale_mut(norms[i]);
    }
    grad
}
