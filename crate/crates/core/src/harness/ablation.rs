//! Three-arm aux ablation (no aux, unlabeled rotations, labeled rotations),
//! each with and without self-ensemble inference, plus a cross-entropy
//! baseline, repeated over several seeds.

use std::io::Write;

use log::info;
use serde::{Deserialize, Serialize};

use super::data::{generate_synthetic, SyntheticSpec};
use super::evaluate::{evaluate, EvalConfig, EvalMode, EvalSection};
use super::train::{train, LossSelector, TrainConfig};
use crate::batching::AuxMode;
use crate::error::{MclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    NoAux,
    /// Rotations used as augmentation only.
    Da,
    Aux,
    CrossEntropy,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::NoAux, Arm::Da, Arm::Aux, Arm::CrossEntropy];

    pub fn name(&self) -> &'static str {
        match self {
            Arm::NoAux => "no_aux",
            Arm::Da => "da",
            Arm::Aux => "aux",
            Arm::CrossEntropy => "cross_entropy",
        }
    }

    fn train_config(&self, template: &TrainConfig, seed: u64) -> TrainConfig {
        let (loss, aux_mode) = match self {
            Arm::NoAux => (LossSelector::Mcl, AuxMode::None),
            Arm::Da => (LossSelector::Mcl, AuxMode::Unlabeled),
            Arm::Aux => (LossSelector::Mcl, AuxMode::Labeled),
            Arm::CrossEntropy => (LossSelector::Crossentropy, AuxMode::None),
        };
        TrainConfig {
            loss,
            aux_mode,
            seed,
            finetune: None,
            ..template.clone()
        }
    }

    fn eval_modes(&self, sei: EvalMode) -> Vec<EvalMode> {
        match self {
            Arm::CrossEntropy => vec![EvalMode::Plain],
            _ => vec![EvalMode::Plain, sei],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Run `i` uses seed `base_seed + i` for both data and training.
    pub base_seed: u64,
    pub seeds: usize,
    pub arms: Vec<Arm>,
    pub sei_mode: EvalMode,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Minimum accuracy loss (absolute fraction) expected from SEI on the
    /// aux-free arm.
    pub min_aux_free_drop: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            base_seed: 0,
            seeds: 5,
            arms: Arm::ALL.to_vec(),
            sei_mode: EvalMode::Sei4,
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            min_aux_free_drop: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub warnings: Vec<String>,
    pub evaluations: Vec<EvalSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub mode: EvalMode,
    pub runs: usize,
    pub accuracy: f64,
    pub auroc: f64,
    pub fpr_at_95: f64,
    pub aupr_ind: f64,
    pub aupr_ood: f64,
}

/// Directional comparisons on the seed means. `None` when an arm needed for
/// the comparison was not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalChecks {
    pub aux_sei_auroc_gain: Option<f64>,
    pub aux_sei_accuracy_gain: Option<f64>,
    pub no_aux_sei_accuracy_drop: Option<f64>,
    pub aux_sei_vs_ce_auroc: Option<f64>,
    pub aux_sei_auroc_ge_plain: Option<bool>,
    pub no_aux_sei_degrades: Option<bool>,
    pub aux_sei_auroc_ge_ce: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub runs: Vec<ArmRun>,
    pub summary: Vec<ArmSummary>,
    pub checks: DirectionalChecks,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(MclError::InvalidConfig("ablation needs at least one seed".into()));
        }
        if self.arms.is_empty() {
            return Err(MclError::InvalidConfig("ablation needs at least one arm".into()));
        }
        if self.sei_mode == EvalMode::Plain {
            return Err(MclError::InvalidConfig("sei_mode must be sei4 or sei8".into()));
        }
        Ok(())
    }
}

pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let mut arms = cfg.arms.clone();
    arms.sort_unstable();
    arms.dedup();
    let mut train_template = cfg.train.clone();
    if cfg.sei_mode == EvalMode::Sei8 {
        train_template.aux_set = super::train::AuxSet::Rot8;
    }

    let mut runs = Vec::new();
    for k in 0..cfg.seeds {
        let seed = cfg.base_seed + k as u64;
        let data = generate_synthetic(&SyntheticSpec {
            seed,
            ..cfg.data.clone()
        })?;
        for &arm in &arms {
            let tc = arm.train_config(&train_template, seed);
            let (model, report) = train(&tc, &data.train)?;
            let mut evaluations = Vec::new();
            for mode in arm.eval_modes(cfg.sei_mode) {
                let ec = EvalConfig {
                    mode,
                    allow_aux_free: true,
                    ..cfg.eval.clone()
                };
                let (section, _) = evaluate(&model, &data, &ec)?;
                info!(
                    "seed {seed} {} {}: acc {:.4} auroc {:.4}",
                    arm.name(),
                    mode.name(),
                    section.accuracy,
                    section.metrics.auroc
                );
                evaluations.push(section);
            }
            runs.push(ArmRun {
                arm,
                seed,
                loss_curve: report.loss_curve,
                warnings: report.warnings,
                evaluations,
            });
        }
    }
    let summary = summarize(&runs, &arms, cfg.sei_mode);
    let checks = directional_checks(&summary, cfg.sei_mode, cfg.min_aux_free_drop);
    Ok(AblationReport {
        config: cfg.clone(),
        runs,
        summary,
        checks,
    })
}

fn summarize(runs: &[ArmRun], arms: &[Arm], sei: EvalMode) -> Vec<ArmSummary> {
    let mut out = Vec::new();
    for &arm in arms {
        for mode in arm.eval_modes(sei) {
            let sections: Vec<&EvalSection> = runs
                .iter()
                .filter(|r| r.arm == arm)
                .flat_map(|r| r.evaluations.iter().filter(|e| e.mode == mode))
                .collect();
            let n = sections.len();
            if n == 0 {
                continue;
            }
            let mean = |f: &dyn Fn(&EvalSection) -> f64| sections.iter().map(|s| f(s)).sum::<f64>() / n as f64;
            out.push(ArmSummary {
                arm,
                mode,
                runs: n,
                accuracy: mean(&|s| s.accuracy),
                auroc: mean(&|s| s.metrics.auroc),
                fpr_at_95: mean(&|s| s.metrics.fpr_at_95),
                aupr_ind: mean(&|s| s.metrics.aupr_ind),
                aupr_ood: mean(&|s| s.metrics.aupr_ood),
            });
        }
    }
    out
}

fn directional_checks(summary: &[ArmSummary], sei: EvalMode, min_drop: f64) -> DirectionalChecks {
    let get = |arm: Arm, mode: EvalMode| summary.iter().find(|s| s.arm == arm && s.mode == mode);
    let aux_plain = get(Arm::Aux, EvalMode::Plain);
    let aux_sei = get(Arm::Aux, sei);
    let free_plain = get(Arm::NoAux, EvalMode::Plain);
    let free_sei = get(Arm::NoAux, sei);
    let ce = get(Arm::CrossEntropy, EvalMode::Plain);
    let diff = |a: Option<&ArmSummary>, b: Option<&ArmSummary>, f: fn(&ArmSummary) -> f64| {
        a.zip(b).map(|(a, b)| f(a) - f(b))
    };
    let aux_sei_auroc_gain = diff(aux_sei, aux_plain, |s| s.auroc);
    let no_aux_sei_accuracy_drop = diff(free_plain, free_sei, |s| s.accuracy);
    let aux_sei_vs_ce_auroc = diff(aux_sei, ce, |s| s.auroc);
    DirectionalChecks {
        aux_sei_auroc_gain,
        aux_sei_accuracy_gain: diff(aux_sei, aux_plain, |s| s.accuracy),
        no_aux_sei_accuracy_drop,
        aux_sei_vs_ce_auroc,
        aux_sei_auroc_ge_plain: aux_sei_auroc_gain.map(|g| g >= 0.0),
        no_aux_sei_degrades: no_aux_sei_accuracy_drop.map(|d| d >= min_drop),
        aux_sei_auroc_ge_ce: aux_sei_vs_ce_auroc.map(|g| g >= 0.0),
    }
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per (arm, seed, evaluation).
    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "arm", "seed", "mode", "agg", "accuracy", "auroc", "fpr_at_95", "aupr_ind", "aupr_ood",
        ])?;
        for run in &self.runs {
            for e in &run.evaluations {
                let agg = if e.n_aux == 1 { "none" } else { e.agg.name() };
                w.write_record([
                    run.arm.name().to_string(),
                    run.seed.to_string(),
                    e.mode.name().to_string(),
                    agg.to_string(),
                    e.accuracy.to_string(),
                    e.metrics.auroc.to_string(),
                    e.metrics.fpr_at_95.to_string(),
                    e.metrics.aupr_ind.to_string(),
                    e.metrics.aupr_ood.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
