#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mclkit::batching::AugmentedBatch;
use mclkit::losses::{loss_and_gradient, EmbeddingMatrix, LossKind, LossSpec};
use mclkit::masking::MclConfig;
use mclkit::rng::{stream_rng, Stream};

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, Stream::Data)
}

pub fn random_rows<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

pub fn random_batch<R: Rng>(rng: &mut R, parents: usize, c_main: usize, c_aux: Option<usize>) -> AugmentedBatch {
    let parent_labels: Vec<usize> = (0..parents).map(|_| rng.random_range(0..c_main)).collect();
    let main: Vec<usize> = parent_labels.iter().flat_map(|&l| [l, l]).collect();
    let aux = c_aux.map(|c| (0..2 * parents).map(|_| rng.random_range(0..c)).collect());
    AugmentedBatch::from_labels(main, aux).unwrap()
}

pub struct Instance {
    pub z: EmbeddingMatrix,
    pub batch: AugmentedBatch,
    pub cfg: MclConfig,
    pub spec: LossSpec,
}

/// Random embeddings, labels and hyperparameters for `kind`.
pub fn random_instance<R: Rng>(rng: &mut R, kind: LossKind) -> Instance {
    let parents = rng.random_range(2..=6);
    let d = rng.random_range(2..=6);
    let c_main = rng.random_range(1..=3);
    let aux = matches!(kind, LossKind::Ccm | LossKind::Mcl) && rng.random_bool(0.5);
    let c_aux = rng.random_range(1..=4);
    let tau: f64 = rng.random_range(0.1..1.0);
    let alpha = rng.random_range(0.0..1.0) / tau;
    let beta = rng.random_range(alpha..=1.0 / tau);
    let cfg = MclConfig {
        tau,
        alpha,
        beta,
        lambda: rng.random_range(0.0..2.0),
        batch_size: parents,
        c_main,
        c_aux,
    };
    Instance {
        z: EmbeddingMatrix::from_rows(&random_rows(rng, 2 * parents, d)).unwrap(),
        batch: random_batch(rng, parents, c_main, aux.then_some(c_aux)),
        cfg,
        spec: LossSpec::new(kind).with_aux(aux),
    }
}

pub fn loss_at(inst: &Instance, z: &EmbeddingMatrix) -> f64 {
    loss_and_gradient(z, &inst.batch, &inst.cfg, &inst.spec).unwrap().0.total
}

/// Norm-wise relative error `|g - fd| / max(|g|, |fd|)` between the analytic
/// gradient and central differences with step `h`.
pub fn fd_relative_error(inst: &Instance, h: f64) -> f64 {
    let (_, g) = loss_and_gradient(&inst.z, &inst.batch, &inst.cfg, &inst.spec).unwrap();
    let mut diff = 0.0;
    let mut fd_norm = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let mut p = inst.z.clone();
            p.0[(i, j)] += h;
            let mut m = inst.z.clone();
            m.0[(i, j)] -= h;
            let fd = (loss_at(inst, &p) - loss_at(inst, &m)) / (2.0 * h);
            diff += (fd - g[(i, j)]).powi(2);
            fd_norm += fd * fd;
        }
    }
    let scale = g.norm().max(fd_norm.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

pub const KINDS: [LossKind; 4] = [LossKind::NtXent, LossKind::Ccm, LossKind::Mcl, LossKind::SupClr];
