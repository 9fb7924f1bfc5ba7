//! Class-conditional Gaussians, Mahalanobis scores and self-ensemble
//! inference.
//!
//! Scores are the negated squared Mahalanobis form `-(z - mu)^T P (z - mu)`,
//! computed as `-|L^{-1}(z - mu)|^2` with `L` the Cholesky factor of the
//! ridged covariance, so every score is `<= 0` and equals 0 only at the mean.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::batching::AuxTransform;
use crate::error::{MclError, Result};

/// How the diagonal ridge added before inversion is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RidgePolicy {
    /// `max(scale * trace(cov) / d, floor)`.
    TraceScaled { scale: f64, floor: f64 },
    Fixed { value: f64 },
}

impl Default for RidgePolicy {
    fn default() -> Self {
        RidgePolicy::TraceScaled {
            scale: 1e-6,
            floor: 1e-9,
        }
    }
}

impl RidgePolicy {
    fn ridge_for(&self, cov: &DMatrix<f64>) -> f64 {
        match *self {
            RidgePolicy::TraceScaled { scale, floor } => {
                (scale * cov.trace() / cov.nrows() as f64).max(floor)
            }
            RidgePolicy::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceEstimator {
    /// Divide by `n`.
    #[default]
    Biased,
    /// Divide by `n - 1`.
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FitOptions {
    pub ridge: RidgePolicy,
    pub estimator: CovarianceEstimator,
}

#[derive(Debug, Clone)]
pub struct ClassGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Inverse of `covariance + ridge * I`.
    pub precision: DMatrix<f64>,
    pub ridge: f64,
    factor: Cholesky<f64, Dyn>,
}

impl PartialEq for ClassGaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean
            && self.covariance == other.covariance
            && self.precision == other.precision
            && self.ridge == other.ridge
    }
}

impl ClassGaussian {
    /// Builds a Gaussian from a mean, covariance and ridge, factorizing
    /// `covariance + ridge * I`.
    pub fn new(
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        ridge: f64,
        cell: (usize, usize),
    ) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(MclError::ShapeMismatch(format!(
                "covariance {}x{} for mean of length {d}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let ridged = &covariance + DMatrix::identity(d, d) * ridge;
        let factor = Cholesky::new(ridged).ok_or(MclError::NotPositiveDefinite {
            main: cell.0,
            aux: cell.1,
            ridge,
        })?;
        let mut precision = factor.inverse();
        symmetrize(&mut precision);
        Ok(Self {
            mean,
            covariance,
            precision,
            ridge,
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `-(z - mu)^T P (z - mu)`.
    pub fn score(&self, z: &[f64]) -> f64 {
        let diff = DVector::from_iterator(z.len(), z.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let white = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a nonzero diagonal");
        -white.norm_squared()
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Gaussians for every `(main, aux)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussianBank {
    pub d: usize,
    pub c_main: usize,
    pub c_aux: usize,
    /// Row-major over `(main, aux)`.
    cells: Vec<ClassGaussian>,
}

/// One training embedding with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub z: Vec<f64>,
    pub main: usize,
    pub aux: usize,
}

impl ClassGaussianBank {
    pub fn from_cells(c_main: usize, c_aux: usize, cells: Vec<ClassGaussian>) -> Result<Self> {
        if cells.len() != c_main * c_aux || cells.is_empty() {
            return Err(MclError::ShapeMismatch(format!(
                "{} cells for {c_main} x {c_aux} labels",
                cells.len()
            )));
        }
        let d = cells[0].dim();
        if cells.iter().any(|c| c.dim() != d) {
            return Err(MclError::ShapeMismatch("cells of differing dimension".into()));
        }
        Ok(Self {
            d,
            c_main,
            c_aux,
            cells,
        })
    }

    pub fn cell(&self, main: usize, aux: usize) -> &ClassGaussian {
        &self.cells[main * self.c_aux + aux]
    }

    pub fn cells(&self) -> &[ClassGaussian] {
        &self.cells
    }
}

/// Sample mean and covariance per `(main, aux)` cell. Label counts are taken
/// as `max label + 1`.
pub fn fit_gaussians(samples: &[LabeledEmbedding], opts: &FitOptions) -> Result<ClassGaussianBank> {
    if samples.is_empty() {
        return Err(MclError::InvalidInput("no embeddings to fit".into()));
    }
    let d = samples[0].z.len();
    if d == 0 {
        return Err(MclError::InvalidInput("zero-dimensional embeddings".into()));
    }
    for s in samples {
        if s.z.len() != d {
            return Err(MclError::ShapeMismatch("embeddings of differing dimension".into()));
        }
        if s.z.iter().any(|v| !v.is_finite()) {
            return Err(MclError::NonFinite("training embedding".into()));
        }
    }
    let c_main = samples.iter().map(|s| s.main).max().unwrap() + 1;
    let c_aux = samples.iter().map(|s| s.aux).max().unwrap() + 1;

    let mut cells = Vec::with_capacity(c_main * c_aux);
    for main in 0..c_main {
        for aux in 0..c_aux {
            let members: Vec<&[f64]> = samples
                .iter()
                .filter(|s| s.main == main && s.aux == aux)
                .map(|s| s.z.as_slice())
                .collect();
            let count = members.len();
            if count < 2 {
                return Err(MclError::InsufficientSamples { main, aux, count });
            }
            let mut mean = DVector::zeros(d);
            for z in &members {
                for (m, v) in mean.iter_mut().zip(z.iter()) {
                    *m += v;
                }
            }
            mean /= count as f64;
            let mut cov = DMatrix::zeros(d, d);
            for z in &members {
                let diff = DVector::from_iterator(d, z.iter().zip(mean.iter()).map(|(a, b)| a - b));
                cov += &diff * diff.transpose();
            }
            let denom = match opts.estimator {
                CovarianceEstimator::Biased => count as f64,
                CovarianceEstimator::Unbiased => (count - 1) as f64,
            };
            cov /= denom;
            symmetrize(&mut cov);
            let ridge = opts.ridge.ridge_for(&cov);
            cells.push(ClassGaussian::new(mean, cov, ridge, (main, aux))?);
        }
    }
    ClassGaussianBank::from_cells(c_main, c_aux, cells)
}

/// Scores of `z` against every main class under aux label `aux`.
pub fn score_vector(z: &[f64], bank: &ClassGaussianBank, aux: usize) -> Result<Vec<f64>> {
    if aux >= bank.c_aux {
        return Err(MclError::UnknownAuxLabel(aux));
    }
    if z.len() != bank.d {
        return Err(MclError::ShapeMismatch(format!(
            "embedding of length {} for a bank of dimension {}",
            z.len(),
            bank.d
        )));
    }
    Ok((0..bank.c_main).map(|i| bank.cell(i, aux).score(z)).collect())
}

/// Index of the largest entry, earliest on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// `(argmax S, max S)` using the aux-0 Gaussians.
pub fn predict(z: &[f64], bank: &ClassGaussianBank) -> Result<(usize, f64)> {
    let s = score_vector(z, bank, 0)?;
    let i = argmax(&s);
    Ok((i, s[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Ind,
    Ood,
}

/// IND iff `confidence >= delta`.
pub fn decide(confidence: f64, delta: f64) -> Decision {
    if confidence >= delta {
        Decision::Ind
    } else {
        Decision::Ood
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Avg,
    Max,
    WAvg,
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::Avg => "avg",
            Aggregation::Max => "max",
            Aggregation::WAvg => "w_avg",
        }
    }
}

/// Sign convention for the harmonic-mean weights of `w_avg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightSign {
    /// `W = (sum_n 1/S_n)^{-1}` over the signed (negative) scores.
    #[default]
    Literal,
    /// Same formula over score magnitudes, giving positive weights.
    Magnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeiOutcome {
    pub label: usize,
    pub confidence: f64,
    pub aggregated: Vec<f64>,
    /// Number of zero scores nudged to `-1e-12` before taking reciprocals.
    pub perturbed: usize,
}

const ZERO_NUDGE: f64 = -1e-12;

/// Combines per-aux score vectors into one vector and picks the label.
///
/// Means are accumulated incrementally (`m += w/W (s - m)`), so a set of
/// identical vectors aggregates to exactly that vector.
pub fn aggregate_scores(
    per_aux: &[Vec<f64>],
    agg: Aggregation,
    sign: WeightSign,
) -> Result<SeiOutcome> {
    let first = per_aux
        .first()
        .ok_or_else(|| MclError::InvalidInput("no score vectors to aggregate".into()))?;
    let c = first.len();
    if c == 0 || per_aux.iter().any(|s| s.len() != c) {
        return Err(MclError::ShapeMismatch("score vectors of differing length".into()));
    }
    let mut perturbed = 0;
    let aggregated = match agg {
        Aggregation::Avg => {
            let mut mean = vec![0.0; c];
            for (m, s) in per_aux.iter().enumerate() {
                let step = 1.0 / (m + 1) as f64;
                for (acc, &v) in mean.iter_mut().zip(s) {
                    *acc += step * (v - *acc);
                }
            }
            mean
        }
        Aggregation::Max => (0..c)
            .map(|i| per_aux.iter().map(|s| s[i]).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        Aggregation::WAvg => {
            let mut mean = vec![0.0; c];
            let mut weight_sum = 0.0;
            for s in per_aux {
                let mut recip = 0.0;
                for &v in s {
                    let v = if v == 0.0 {
                        perturbed += 1;
                        ZERO_NUDGE
                    } else {
                        v
                    };
                    recip += match sign {
                        WeightSign::Literal => 1.0 / v,
                        WeightSign::Magnitude => 1.0 / v.abs(),
                    };
                }
                let w = 1.0 / recip;
                weight_sum += w;
                let step = w / weight_sum;
                for (acc, &v) in mean.iter_mut().zip(s) {
                    *acc += step * (v - *acc);
                }
            }
            mean
        }
    };
    let label = argmax(&aggregated);
    Ok(SeiOutcome {
        label,
        confidence: aggregated[label],
        aggregated,
        perturbed,
    })
}

/// Embeds `T_m(x)` for every aux transform `m`, scores each against the
/// `aux = m` Gaussians only, and aggregates.
pub fn sei_predict<E>(
    x: &[f64],
    bank: &ClassGaussianBank,
    transforms: &[AuxTransform],
    agg: Aggregation,
    sign: WeightSign,
    encoder: E,
) -> Result<SeiOutcome>
where
    E: Fn(&[f64]) -> Vec<f64>,
{
    if transforms.len() != bank.c_aux {
        return Err(MclError::ShapeMismatch(format!(
            "{} aux transforms for a bank with {} aux labels",
            transforms.len(),
            bank.c_aux
        )));
    }
    let per_aux = transforms
        .iter()
        .enumerate()
        .map(|(m, t)| score_vector(&encoder(&t.apply(x)), bank, m))
        .collect::<Result<Vec<_>>>()?;
    aggregate_scores(&per_aux, agg, sign)
}

/// JSON form of a bank: `{d, C_main, C_aux, cells: [{i, j, mean, covariance, ridge}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankFile {
    pub d: usize,
    #[serde(rename = "C_main")]
    pub c_main: usize,
    #[serde(rename = "C_aux")]
    pub c_aux: usize,
    pub cells: Vec<CellFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFile {
    pub i: usize,
    pub j: usize,
    pub mean: Vec<f64>,
    /// Row-major rows.
    pub covariance: Vec<Vec<f64>>,
    pub ridge: f64,
}

impl From<&ClassGaussianBank> for BankFile {
    fn from(bank: &ClassGaussianBank) -> Self {
        let mut cells = Vec::with_capacity(bank.cells.len());
        for i in 0..bank.c_main {
            for j in 0..bank.c_aux {
                let g = bank.cell(i, j);
                cells.push(CellFile {
                    i,
                    j,
                    mean: g.mean.iter().copied().collect(),
                    covariance: (0..bank.d)
                        .map(|r| g.covariance.row(r).iter().copied().collect())
                        .collect(),
                    ridge: g.ridge,
                });
            }
        }
        BankFile {
            d: bank.d,
            c_main: bank.c_main,
            c_aux: bank.c_aux,
            cells,
        }
    }
}

impl BankFile {
    pub fn into_bank(self) -> Result<ClassGaussianBank> {
        let mut slots: Vec<Option<ClassGaussian>> = vec![None; self.c_main * self.c_aux];
        for c in self.cells {
            if c.i >= self.c_main || c.j >= self.c_aux {
                return Err(MclError::InvalidInput(format!("cell ({}, {}) out of range", c.i, c.j)));
            }
            if c.mean.len() != self.d || c.covariance.iter().any(|r| r.len() != self.d) {
                return Err(MclError::ShapeMismatch(format!("cell ({}, {})", c.i, c.j)));
            }
            let cov = DMatrix::from_fn(self.d, self.d, |r, k| c.covariance[r][k]);
            let g = ClassGaussian::new(DVector::from_vec(c.mean), cov, c.ridge, (c.i, c.j))?;
            slots[c.i * self.c_aux + c.j] = Some(g);
        }
        let cells = slots
            .into_iter()
            .enumerate()
            .map(|(k, g)| {
                g.ok_or_else(|| {
                    MclError::InvalidInput(format!(
                        "missing cell ({}, {})",
                        k / self.c_aux,
                        k % self.c_aux
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ClassGaussianBank::from_cells(self.c_main, self.c_aux, cells)
    }
}
