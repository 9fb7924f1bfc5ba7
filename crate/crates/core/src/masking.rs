//! Class-conditional masks and the hyperparameter validity windows.

use serde::{Deserialize, Serialize};

use crate::batching::AugmentedBatch;
use crate::error::{MclError, Result};

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MclConfig {
    /// Temperature.
    pub tau: f64,
    /// Mask value for same-label pairs.
    pub alpha: f64,
    /// Mask value for same-main, different-aux pairs.
    pub beta: f64,
    /// Weight of the stochastic positive attraction term.
    pub lambda: f64,
    /// Number of parent items per batch (`N`; the batch has `2N` views).
    pub batch_size: usize,
    pub c_main: usize,
    pub c_aux: usize,
}

impl Default for MclConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            alpha: 0.05,
            beta: 2.5,
            lambda: 1.0,
            batch_size: 1024,
            c_main: 10,
            c_aux: 4,
        }
    }
}

impl MclConfig {
    pub fn inv_tau(&self) -> f64 {
        1.0 / self.tau
    }

    /// Checks `0 < alpha <= 1/tau`, and `alpha <= beta <= 1/tau` when the
    /// aux-extended mask is used.
    pub fn validate(&self, aux: bool) -> Result<()> {
        let bad = |msg: String| Err(MclError::InvalidConfig(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        let inv_tau = self.inv_tau();
        // alpha == 1/tau is the SimCLR-equivalent limit and is accepted.
        if !(self.alpha > 0.0 && self.alpha <= inv_tau) {
            return bad(format!(
                "alpha must satisfy 0 < alpha <= 1/tau = {inv_tau}, got {}",
                self.alpha
            ));
        }
        if aux && !(self.beta >= self.alpha && self.beta <= inv_tau) {
            return bad(format!(
                "beta must satisfy alpha <= beta <= 1/tau, got alpha={} beta={} 1/tau={inv_tau}",
                self.alpha, self.beta
            ));
        }
        Ok(())
    }

    /// `2N / C`, with `C = C_main * C_aux` when the aux task is on.
    pub fn default_expected_positives(&self, aux: bool) -> f64 {
        let classes = if aux {
            self.c_main * self.c_aux.max(1)
        } else {
            self.c_main
        };
        2.0 * self.batch_size as f64 / classes.max(1) as f64
    }
}

/// Dense symmetric `2N x 2N` mask. The diagonal is stored but excluded from
/// every sum.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    n: usize,
    values: Vec<f64>,
}

impl MaskMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(f(i, j));
            }
        }
        Self { n, values }
    }

    /// Mask with every entry equal to `value`.
    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            n,
            values: vec![value; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    #[inline]
    pub fn is_excluded(&self, i: usize, j: usize) -> bool {
        i == j
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// `alpha` for same-label pairs, `1/tau` otherwise.
pub fn build_ccm(batch: &AugmentedBatch, cfg: &MclConfig) -> Result<MaskMatrix> {
    cfg.validate(false)?;
    let labels = &batch.main_labels;
    let inv_tau = cfg.inv_tau();
    Ok(MaskMatrix::from_fn(batch.len(), |i, j| {
        if labels[i] == labels[j] {
            cfg.alpha
        } else {
            inv_tau
        }
    }))
}

/// Hierarchical mask: `alpha` when main and aux labels both match, `beta`
/// when only the main label matches, `1/tau` otherwise.
pub fn build_ccm_aux(batch: &AugmentedBatch, cfg: &MclConfig) -> Result<MaskMatrix> {
    let aux = batch.aux_labels.as_ref().ok_or(MclError::MissingAuxLabels)?;
    cfg.validate(true)?;
    let main = &batch.main_labels;
    let inv_tau = cfg.inv_tau();
    Ok(MaskMatrix::from_fn(batch.len(), |i, j| {
        if main[i] != main[j] {
            inv_tau
        } else if aux[i] == aux[j] {
            cfg.alpha
        } else {
            cfg.beta
        }
    }))
}

/// Where `alpha` sits relative to the attraction and convergence bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub attraction_bound: f64,
    pub convergence_bound: f64,
    pub attraction_ok: bool,
    pub convergence_ok: bool,
    pub overall_ok: bool,
}

/// Attraction bound `1/(tau * expected_pos)` (alpha must stay below it) and
/// convergence bound `lambda / (tau (1 + lambda) (2N - 2))` (alpha must not
/// fall below it). Reports only; never rejects.
pub fn validate_hparams(cfg: &MclConfig, expected_pos: f64) -> ValidityReport {
    let attraction_bound = 1.0 / (cfg.tau * expected_pos);
    let convergence_bound = convergence_bound(cfg);
    let attraction_ok = cfg.alpha < attraction_bound;
    let convergence_ok = cfg.alpha >= convergence_bound;
    ValidityReport {
        attraction_bound,
        convergence_bound,
        attraction_ok,
        convergence_ok,
        overall_ok: attraction_ok && convergence_ok,
    }
}

pub fn convergence_bound(cfg: &MclConfig) -> f64 {
    let two_n_minus_two = 2.0 * cfg.batch_size as f64 - 2.0;
    cfg.lambda / (cfg.tau * (1.0 + cfg.lambda) * two_n_minus_two)
}

/// Upper bound on the combined loss gradient w.r.t. a positive-pair
/// similarity: `(1 + lambda)/(2N) * (alpha - convergence_bound)`. Negative
/// means every point is pulled towards its cluster centroid.
pub fn combined_gradient_upper_bound(cfg: &MclConfig) -> f64 {
    let two_n = 2.0 * cfg.batch_size as f64;
    (1.0 + cfg.lambda) / two_n * (cfg.alpha - convergence_bound(cfg))
}
