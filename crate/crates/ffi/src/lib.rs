//! C ABI over `mclkit`.
//!
//! Every function returns an [`MclStatus`]. On failure a message is kept per
//! thread and can be read with [`mcl_last_error_message`]. Matrices are
//! row-major `f64` buffers. Gaussian banks are opaque handles released with
//! [`mcl_bank_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mclkit::batching::AugmentedBatch;
use mclkit::losses::{loss_and_gradient, EmbeddingMatrix, LossKind, LossSpec, SpaMode};
use mclkit::masking::{validate_hparams, MclConfig};
use mclkit::metrics::{MetricReport, ScoredSample};
use mclkit::scoring::{
    aggregate_scores, fit_gaussians, score_vector, Aggregation, ClassGaussianBank, CovarianceEstimator, FitOptions,
    LabeledEmbedding, RidgePolicy, WeightSign,
};
use mclkit::MclError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Numerical = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MclLossKind {
    NtXent = 0,
    Ccm = 1,
    Mcl = 2,
    SupClr = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MclAggregation {
    Avg = 0,
    Max = 1,
    WAvg = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MclLossConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Nonzero: use aux labels in the masks and the positive sets.
    pub aux: u8,
    /// Nonzero: one sampled positive per query instead of the expectation.
    pub spa_single_sample: u8,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MclValidity {
    pub attraction_bound: f64,
    pub convergence_bound: f64,
    pub attraction_ok: u8,
    pub convergence_ok: u8,
    pub overall_ok: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MclMetrics {
    pub auroc: f64,
    pub fpr_at_95: f64,
    pub aupr_ind: f64,
    pub aupr_ood: f64,
}

/// Opaque class-conditional Gaussian bank.
pub struct MclBank {
    bank: ClassGaussianBank,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &MclError) -> MclStatus {
    match e {
        MclError::InvalidConfig(_) | MclError::Toml(_) => MclStatus::InvalidConfig,
        MclError::NonFinite(_)
        | MclError::ZeroNormRow(_)
        | MclError::NotPositiveDefinite { .. }
        | MclError::NumericalAbort { .. } => MclStatus::Numerical,
        _ => MclStatus::InvalidArgument,
    }
}

struct Failure(MclStatus, String);

impl From<MclError> for Failure {
    fn from(e: MclError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MclStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MclStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MclStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn mcl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Checks `alpha` against the attraction and convergence bounds. A
/// non-positive `expected_positives` selects the default `2N/C`.
///
/// # Safety
/// `out` must point to writable memory for one `MclValidity`.
#[no_mangle]
pub unsafe extern "C" fn mcl_validate_hparams(
    cfg: MclLossConfig,
    batch_size: usize,
    c_main: usize,
    c_aux: usize,
    expected_positives: f64,
    out: *mut MclValidity,
) -> MclStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let mcl = MclConfig {
            tau: cfg.tau,
            alpha: cfg.alpha,
            beta: cfg.beta,
            lambda: cfg.lambda,
            batch_size,
            c_main,
            c_aux,
        };
        let aux = cfg.aux != 0;
        mcl.validate(aux)?;
        let expected = if expected_positives > 0.0 {
            expected_positives
        } else {
            mcl.default_expected_positives(aux)
        };
        let r = validate_hparams(&mcl, expected);
        *out = MclValidity {
            attraction_bound: r.attraction_bound,
            convergence_bound: r.convergence_bound,
            attraction_ok: r.attraction_ok as u8,
            convergence_ok: r.convergence_ok as u8,
            overall_ok: r.overall_ok as u8,
        };
        Ok(())
    })
}

/// Loss value and `dL/dZ` for `n_views` interleaved views (views `2k` and
/// `2k+1` share a parent). `aux_labels` may be null; `grad_out` may be null
/// or hold `n_views * dim` values.
///
/// # Safety
/// Every non-null pointer must reference a buffer of the stated length.
#[no_mangle]
pub unsafe extern "C" fn mcl_loss_and_gradient(
    kind: MclLossKind,
    embeddings: *const f64,
    n_views: usize,
    dim: usize,
    main_labels: *const usize,
    aux_labels: *const usize,
    cfg: MclLossConfig,
    loss_out: *mut f64,
    grad_out: *mut f64,
) -> MclStatus {
    guard(|| {
        let loss_out = out_ref(loss_out, "loss_out")?;
        let z = slice(embeddings, n_views * dim, "embeddings")?;
        let main = slice(main_labels, n_views, "main_labels")?.to_vec();
        let aux = if aux_labels.is_null() {
            None
        } else {
            Some(slice(aux_labels, n_views, "aux_labels")?.to_vec())
        };
        let c_main = main.iter().max().map_or(1, |m| m + 1);
        let c_aux = aux.as_ref().and_then(|a| a.iter().max()).map_or(1, |m| m + 1);
        let batch = AugmentedBatch::from_labels(main, aux)?;
        let mcl = MclConfig {
            tau: cfg.tau,
            alpha: cfg.alpha,
            beta: cfg.beta,
            lambda: cfg.lambda,
            batch_size: n_views / 2,
            c_main,
            c_aux,
        };
        let spec = LossSpec {
            kind: match kind {
                MclLossKind::NtXent => LossKind::NtXent,
                MclLossKind::Ccm => LossKind::Ccm,
                MclLossKind::Mcl => LossKind::Mcl,
                MclLossKind::SupClr => LossKind::SupClr,
            },
            aux: cfg.aux != 0,
            spa_mode: if cfg.spa_single_sample != 0 {
                SpaMode::SingleSample
            } else {
                SpaMode::Expectation
            },
            seed: cfg.seed,
        };
        let rows: Vec<Vec<f64>> = (0..n_views).map(|i| z[i * dim..(i + 1) * dim].to_vec()).collect();
        let zm = EmbeddingMatrix::from_rows(&rows)?;
        let (value, grad) = loss_and_gradient(&zm, &batch, &mcl, &spec)?;
        *loss_out = value.total;
        if !grad_out.is_null() {
            let out = std::slice::from_raw_parts_mut(grad_out, n_views * dim);
            for i in 0..n_views {
                for j in 0..dim {
                    out[i * dim + j] = grad[(i, j)];
                }
            }
        }
        Ok(())
    })
}

/// AUROC, FPR at 95% TPR and both AUPR variants. `is_ind[k]` nonzero marks
/// sample `k` as in-distribution; higher confidence means more IND.
///
/// # Safety
/// `confidence` and `is_ind` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mcl_metrics(
    confidence: *const f64,
    is_ind: *const u8,
    n: usize,
    out: *mut MclMetrics,
) -> MclStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let c = slice(confidence, n, "confidence")?;
        let f = slice(is_ind, n, "is_ind")?;
        let samples: Vec<ScoredSample> = c
            .iter()
            .zip(f)
            .map(|(&confidence, &flag)| ScoredSample {
                confidence,
                is_ind: flag != 0,
            })
            .collect();
        let r = MetricReport::compute(&samples)?;
        *out = MclMetrics {
            auroc: r.auroc,
            fpr_at_95: r.fpr_at_95,
            aupr_ind: r.aupr_ind,
            aupr_ood: r.aupr_ood,
        };
        Ok(())
    })
}

/// Fits one Gaussian per (main, aux) label pair from `n` embeddings of
/// dimension `dim`. `aux_labels` may be null (single aux cell). A
/// non-positive `ridge` selects the trace-scaled default.
///
/// # Safety
/// Buffers must hold the stated number of values; `bank_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mcl_bank_fit(
    embeddings: *const f64,
    n: usize,
    dim: usize,
    main_labels: *const usize,
    aux_labels: *const usize,
    ridge: f64,
    bank_out: *mut *mut MclBank,
) -> MclStatus {
    guard(|| {
        let bank_out = out_ref(bank_out, "bank_out")?;
        let z = slice(embeddings, n * dim, "embeddings")?;
        let main = slice(main_labels, n, "main_labels")?;
        let aux = if aux_labels.is_null() {
            None
        } else {
            Some(slice(aux_labels, n, "aux_labels")?)
        };
        let samples: Vec<LabeledEmbedding> = (0..n)
            .map(|k| LabeledEmbedding {
                z: z[k * dim..(k + 1) * dim].to_vec(),
                main: main[k],
                aux: aux.map_or(0, |a| a[k]),
            })
            .collect();
        let opts = FitOptions {
            ridge: if ridge > 0.0 {
                RidgePolicy::Fixed { value: ridge }
            } else {
                RidgePolicy::default()
            },
            estimator: CovarianceEstimator::Biased,
        };
        let bank = fit_gaussians(&samples, &opts)?;
        *bank_out = Box::into_raw(Box::new(MclBank { bank }));
        Ok(())
    })
}

/// Releases a bank. Null is ignored.
///
/// # Safety
/// `bank` must come from [`mcl_bank_fit`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mcl_bank_free(bank: *mut MclBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Writes the class counts and embedding dimension of a bank.
///
/// # Safety
/// `bank` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mcl_bank_shape(
    bank: *const MclBank,
    c_main: *mut usize,
    c_aux: *mut usize,
    dim: *mut usize,
) -> MclStatus {
    guard(|| {
        let b = &bank.as_ref().ok_or_else(|| null("bank"))?.bank;
        *out_ref(c_main, "c_main")? = b.c_main;
        *out_ref(c_aux, "c_aux")? = b.c_aux;
        *out_ref(dim, "dim")? = b.d;
        Ok(())
    })
}

/// Scores `z` against every main class under aux cell `aux`; writes
/// `c_main` values (negative squared Mahalanobis distances).
///
/// # Safety
/// `bank` must be a live handle; `z` holds `dim` values and `scores_out`
/// room for `c_main`.
#[no_mangle]
pub unsafe extern "C" fn mcl_bank_score(
    bank: *const MclBank,
    z: *const f64,
    dim: usize,
    aux: usize,
    scores_out: *mut f64,
    c_main: usize,
) -> MclStatus {
    guard(|| {
        let b = &bank.as_ref().ok_or_else(|| null("bank"))?.bank;
        if c_main != b.c_main {
            return Err(Failure(
                MclStatus::InvalidArgument,
                format!("output has room for {c_main} scores, bank has {} classes", b.c_main),
            ));
        }
        let s = score_vector(slice(z, dim, "z")?, b, aux)?;
        if scores_out.is_null() {
            return Err(null("scores_out"));
        }
        std::slice::from_raw_parts_mut(scores_out, c_main).copy_from_slice(&s);
        Ok(())
    })
}

/// Aggregates `n_aux` score vectors of length `c` (row-major) and writes the
/// winning label and its aggregated score.
///
/// # Safety
/// `scores` holds `n_aux * c` values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mcl_sei_aggregate(
    scores: *const f64,
    n_aux: usize,
    c: usize,
    agg: MclAggregation,
    label_out: *mut usize,
    confidence_out: *mut f64,
) -> MclStatus {
    guard(|| {
        let s = slice(scores, n_aux * c, "scores")?;
        let per_aux: Vec<Vec<f64>> = (0..n_aux).map(|m| s[m * c..(m + 1) * c].to_vec()).collect();
        let agg = match agg {
            MclAggregation::Avg => Aggregation::Avg,
            MclAggregation::Max => Aggregation::Max,
            MclAggregation::WAvg => Aggregation::WAvg,
        };
        let out = aggregate_scores(&per_aux, agg, WeightSign::Literal)?;
        *out_ref(label_out, "label_out")? = out.label;
        *out_ref(confidence_out, "confidence_out")? = out.confidence;
        Ok(())
    })
}
