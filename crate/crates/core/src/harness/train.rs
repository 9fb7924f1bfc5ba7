//! Minibatch SGD training of the MLP encoder on the selected loss.

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::encoder::{softmax_cross_entropy, stack_rows, EncoderSpec, Mlp, MlpGrads};
use super::evaluate::EvalSection;
use crate::batching::{augment_batch, AugmentationFamily, AugmentedBatch, AuxMode, AuxTransform, LabeledItem};
use crate::error::{MclError, Result};
use crate::losses::{loss_and_gradient, EmbeddingMatrix, LossKind, LossSpec, SpaMode};
use crate::masking::{validate_hparams, MclConfig, ValidityReport};
use crate::rng::{derive_seed, stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossSelector {
    #[default]
    Mcl,
    Ntxent,
    Supclr,
    Crossentropy,
    /// Cross-entropy plus a weighted NT-Xent term.
    Joint,
}

impl LossSelector {
    pub fn name(&self) -> &'static str {
        match self {
            LossSelector::Mcl => "mcl",
            LossSelector::Ntxent => "ntxent",
            LossSelector::Supclr => "supclr",
            LossSelector::Crossentropy => "crossentropy",
            LossSelector::Joint => "joint",
        }
    }

    pub fn uses_classifier(&self) -> bool {
        matches!(self, LossSelector::Crossentropy | LossSelector::Joint)
    }
}

/// Which aux transform set is used for training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AuxSet {
    #[default]
    Rot4,
    Rot8,
}

impl AuxSet {
    pub fn transforms(&self) -> Vec<AuxTransform> {
        match self {
            AuxSet::Rot4 => AugmentationFamily::rotations4(),
            AuxSet::Rot8 => AugmentationFamily::rotations_flips8(),
        }
    }
}

/// Optional cross-entropy fine-tuning after contrastive pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Add `joint_lambda * NT-Xent` to the fine-tuning loss.
    pub joint: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            joint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Parent items per batch `N`.
    pub batch_size: usize,
    /// Learning rate is `lr_base * N / 256` unless `learning_rate` is set.
    pub lr_base: f64,
    pub learning_rate: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub seed: u64,
    /// `batch_size`, `c_main` and `c_aux` are filled in from the data and
    /// the aux mode at training time.
    pub mcl: MclConfig,
    pub aux_mode: AuxMode,
    pub aux_set: AuxSet,
    pub loss: LossSelector,
    pub spa_mode: SpaMode,
    pub joint_lambda: f64,
    pub noise_scale: f64,
    pub dropout_rate: f64,
    pub encoder: EncoderSpec,
    pub finetune: Option<FinetuneConfig>,
    /// Train even when the hyperparameter report is not `overall_ok`.
    pub allow_invalid_hparams: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr_base: 0.1,
            learning_rate: None,
            momentum: 0.9,
            weight_decay: 1e-6,
            cosine: true,
            seed: 0,
            mcl: MclConfig {
                batch_size: 64,
                ..MclConfig::default()
            },
            aux_mode: AuxMode::None,
            aux_set: AuxSet::Rot4,
            loss: LossSelector::Mcl,
            spa_mode: SpaMode::Expectation,
            joint_lambda: 0.1,
            noise_scale: 0.3,
            dropout_rate: 0.1,
            encoder: EncoderSpec::default(),
            finetune: None,
            allow_invalid_hparams: false,
        }
    }
}

impl TrainConfig {
    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or(self.lr_base * self.batch_size as f64 / 256.0)
    }

    pub fn family(&self) -> AugmentationFamily {
        AugmentationFamily::new(self.noise_scale, self.dropout_rate, self.aux_set.transforms())
    }

    fn aux_labeled(&self) -> bool {
        self.aux_mode == AuxMode::Labeled
    }

    /// The loss configuration with batch size and class counts filled in.
    pub fn resolved_mcl(&self, c_main: usize) -> MclConfig {
        MclConfig {
            batch_size: self.batch_size,
            c_main,
            c_aux: if self.aux_labeled() {
                self.aux_set.transforms().len()
            } else {
                1
            },
            ..self.mcl
        }
    }
}

/// A trained encoder plus what is needed to evaluate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub mlp: Mlp,
    pub loss: LossSelector,
    pub aux_mode: AuxMode,
    pub aux_set: AuxSet,
    pub c_main: usize,
    /// The classifier head was trained (cross-entropy, joint or fine-tuned).
    pub classifier_trained: bool,
}

impl TrainedModel {
    pub fn embed_projection(&self, x: &[f64]) -> Vec<f64> {
        self.mlp.embed_projection(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub loss_curve: Vec<f64>,
    pub finetune_curve: Vec<f64>,
    pub validity: Option<ValidityReport>,
    pub warnings: Vec<String>,
    pub evaluations: Vec<EvalSection>,
}

/// SGD with momentum and decoupled-from-nothing (L2) weight decay:
/// `v = mu v + (g + wd w)`, `w -= lr v`.
struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<DMatrix<f64>>,
}

impl Sgd {
    fn new(model: &mut Mlp, momentum: f64, weight_decay: f64) -> Self {
        let velocity = model
            .params_mut()
            .into_iter()
            .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
            .collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    fn step(&mut self, model: &mut Mlp, grads: &MlpGrads, lr: f64) {
        for ((p, g), v) in model
            .params_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.velocity.iter_mut())
        {
            *v *= self.momentum;
            *v += g;
            *v += &*p * self.weight_decay;
            *p -= &*v * lr;
        }
    }
}

fn cosine_lr(base: f64, step: usize, total: usize, cosine: bool) -> f64 {
    if !cosine || total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

fn grads_finite(g: &MlpGrads) -> bool {
    g.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
}

#[derive(Serialize)]
struct AbortSnapshot<'a> {
    epoch: usize,
    step: usize,
    config: &'a TrainConfig,
    batch: &'a AugmentedBatch,
}

/// Loss and gradients for one augmented batch.
fn batch_objective(
    model: &Mlp,
    batch: &AugmentedBatch,
    loss: LossSelector,
    mcl: &MclConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, MlpGrads)> {
    let x = stack_rows(&batch.views);
    let cache = model.forward(&x);
    let contrastive = |kind: LossKind, aux: bool| -> Result<(f64, DMatrix<f64>)> {
        let spec = LossSpec {
            kind,
            aux,
            spa_mode: cfg.spa_mode,
            seed,
        };
        let z = EmbeddingMatrix(cache.projection.clone());
        let (value, grad) = loss_and_gradient(&z, batch, mcl, &spec)?;
        Ok((value.total, grad))
    };
    let (value, grads) = match loss {
        LossSelector::Mcl => {
            let (v, dz) = contrastive(LossKind::Mcl, batch.has_aux())?;
            (v, model.backward(&cache, Some(&dz), None))
        }
        LossSelector::Ntxent => {
            let (v, dz) = contrastive(LossKind::NtXent, false)?;
            (v, model.backward(&cache, Some(&dz), None))
        }
        LossSelector::Supclr => {
            let (v, dz) = contrastive(LossKind::SupClr, false)?;
            (v, model.backward(&cache, Some(&dz), None))
        }
        LossSelector::Crossentropy => {
            let logits = cache
                .logits
                .as_ref()
                .ok_or_else(|| MclError::InvalidConfig("model has no classifier head".into()))?;
            let (v, dl) = softmax_cross_entropy(logits, &batch.main_labels);
            (v, model.backward(&cache, None, Some(&dl)))
        }
        LossSelector::Joint => {
            let logits = cache
                .logits
                .as_ref()
                .ok_or_else(|| MclError::InvalidConfig("model has no classifier head".into()))?;
            let (ce, dl) = softmax_cross_entropy(logits, &batch.main_labels);
            let (nt, mut dz) = contrastive(LossKind::NtXent, false)?;
            dz *= cfg.joint_lambda;
            (ce + cfg.joint_lambda * nt, model.backward(&cache, Some(&dz), Some(&dl)))
        }
    };
    Ok((value, grads))
}

struct Phase<'a> {
    loss: LossSelector,
    epochs: usize,
    lr: f64,
    seed_tag: u64,
    train: &'a [LabeledItem],
}

fn run_phase(
    model: &mut Mlp,
    phase: &Phase<'_>,
    mcl: &MclConfig,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let family = cfg.family();
    let n = cfg.batch_size;
    let steps = phase.train.len() / n;
    if steps == 0 {
        return Err(MclError::InvalidConfig(format!(
            "batch size {n} exceeds the {} training items",
            phase.train.len()
        )));
    }
    let total = steps * phase.epochs;
    let aux_mode = if phase.loss.uses_classifier() && cfg.aux_mode == AuxMode::Labeled {
        // the classifier only predicts main labels; rotations stay augmentation
        AuxMode::Unlabeled
    } else {
        cfg.aux_mode
    };
    let mut sgd = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..phase.train.len()).collect();
    let mut curve = Vec::with_capacity(phase.epochs);
    for epoch in 0..phase.epochs {
        let mut shuffle = stream_rng(derive_seed(cfg.seed, &[phase.seed_tag, epoch as u64]), Stream::Shuffle);
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        for step in 0..steps {
            let items: Vec<LabeledItem> = order[step * n..(step + 1) * n]
                .iter()
                .map(|&k| phase.train[k].clone())
                .collect();
            let batch_seed = derive_seed(cfg.seed, &[phase.seed_tag, epoch as u64, step as u64]);
            let batch = augment_batch(&items, &family, batch_seed, aux_mode)?;
            let abort = |reason: String| {
                let snapshot = serde_json::to_string(&AbortSnapshot {
                    epoch,
                    step,
                    config: cfg,
                    batch: &batch,
                })
                .unwrap_or_default();
                MclError::NumericalAbort {
                    epoch,
                    step,
                    reason,
                    snapshot,
                }
            };
            let (value, grads) = match batch_objective(model, &batch, phase.loss, mcl, cfg, batch_seed) {
                Ok(r) => r,
                Err(e @ (MclError::NonFinite(_) | MclError::ZeroNormRow(_))) => {
                    return Err(abort(e.to_string()))
                }
                Err(e) => return Err(e),
            };
            if !value.is_finite() || !grads_finite(&grads) {
                return Err(abort(format!("non-finite loss or gradient (loss = {value})")));
            }
            let lr = cosine_lr(phase.lr, epoch * steps + step, total, cfg.cosine);
            sgd.step(model, &grads, lr);
            sum += value;
        }
        let mean = sum / steps as f64;
        debug!("{} epoch {epoch}: loss {mean:.6}", phase.loss.name());
        curve.push(mean);
    }
    Ok(curve)
}

/// Trains a fresh model from `cfg.seed`. Returns the model and a report with
/// no evaluation sections yet.
pub fn train(cfg: &TrainConfig, train_set: &[LabeledItem]) -> Result<(TrainedModel, RunReport)> {
    if train_set.is_empty() {
        return Err(MclError::EmptyBatch);
    }
    let c_main = train_set.iter().map(|it| it.main_label).max().unwrap() + 1;
    let input_dim = train_set[0].features.len();
    let mcl = cfg.resolved_mcl(c_main);
    let aux = cfg.aux_mode == AuxMode::Labeled;

    let mut warnings = Vec::new();
    let mut validity = None;
    if cfg.loss == LossSelector::Mcl {
        mcl.validate(aux)?;
        let report = validate_hparams(&mcl, mcl.default_expected_positives(aux));
        if !report.overall_ok {
            let msg = format!(
                "alpha = {} outside the valid window (attraction bound {:.6}, convergence bound {:.6})",
                mcl.alpha, report.attraction_bound, report.convergence_bound
            );
            if !cfg.allow_invalid_hparams {
                return Err(MclError::InvalidConfig(msg));
            }
            warn!("{msg}");
            warnings.push(msg);
        }
        validity = Some(report);
    }

    let needs_classifier = cfg.loss.uses_classifier() || cfg.finetune.is_some();
    let mut init = stream_rng(cfg.seed, Stream::Init);
    let mut mlp = Mlp::new(&cfg.encoder, input_dim, needs_classifier.then_some(c_main), &mut init)?;

    let loss_curve = run_phase(
        &mut mlp,
        &Phase {
            loss: cfg.loss,
            epochs: cfg.epochs,
            lr: cfg.effective_learning_rate(),
            seed_tag: 0,
            train: train_set,
        },
        &mcl,
        cfg,
    )?;

    let mut finetune_curve = Vec::new();
    if let Some(ft) = &cfg.finetune {
        finetune_curve = run_phase(
            &mut mlp,
            &Phase {
                loss: if ft.joint {
                    LossSelector::Joint
                } else {
                    LossSelector::Crossentropy
                },
                epochs: ft.epochs,
                lr: ft.learning_rate,
                seed_tag: 1,
                train: train_set,
            },
            &mcl,
            cfg,
        )?;
    }

    let model = TrainedModel {
        mlp,
        loss: cfg.loss,
        aux_mode: cfg.aux_mode,
        aux_set: cfg.aux_set,
        c_main,
        classifier_trained: needs_classifier,
    };
    let report = RunReport {
        seed: cfg.seed,
        config: cfg.clone(),
        loss_curve,
        finetune_curve,
        validity,
        warnings,
        evaluations: Vec::new(),
    };
    Ok((model, report))
}
