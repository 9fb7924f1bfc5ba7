//! Gaussian-bank (or softmax) evaluation of a trained model on the IND and
//! OOD test sets, and the embedding table that makes it reproducible offline.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::data::SplitData;
use super::encoder::{softmax_probabilities, stack_rows};
use super::train::TrainedModel;
use crate::batching::{AugmentationFamily, AuxMode, AuxTransform, LabeledItem};
use crate::error::{MclError, Result};
use crate::metrics::{MetricReport, ScoredSample};
use crate::scoring::{
    aggregate_scores, argmax, fit_gaussians, score_vector, Aggregation, ClassGaussianBank, FitOptions,
    LabeledEmbedding, WeightSign,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Plain,
    Sei4,
    Sei8,
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Plain => "plain",
            EvalMode::Sei4 => "sei4",
            EvalMode::Sei8 => "sei8",
        }
    }

    pub fn default_transforms(&self) -> Vec<AuxTransform> {
        match self {
            EvalMode::Plain => vec![AuxTransform::IDENTITY],
            EvalMode::Sei4 => AugmentationFamily::rotations4(),
            EvalMode::Sei8 => AugmentationFamily::rotations_flips8(),
        }
    }
}

/// Where scoring embeddings are taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    /// Projection head output.
    #[default]
    Projection,
    /// Encoder features before the projection head.
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    /// Softmax for cross-entropy and joint models, Gaussian otherwise.
    #[default]
    Auto,
    Gaussian,
    /// Maximum softmax probability of the classifier head.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub agg: Aggregation,
    pub weight_sign: WeightSign,
    pub embedding: EmbeddingSource,
    pub score: ScoreSource,
    pub fit: FitOptions,
    /// Permit SEI on a model trained without aux labels. The bank then has a
    /// single aux cell shared by every transformed view.
    pub allow_aux_free: bool,
    /// Replaces the transform set implied by `mode`.
    pub transforms: Option<Vec<AuxTransform>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Plain,
            agg: Aggregation::WAvg,
            weight_sign: WeightSign::Literal,
            embedding: EmbeddingSource::Projection,
            score: ScoreSource::Auto,
            fit: FitOptions::default(),
            allow_aux_free: false,
            transforms: None,
        }
    }
}

impl EvalConfig {
    pub fn transforms(&self) -> Vec<AuxTransform> {
        match (&self.transforms, self.mode) {
            (_, EvalMode::Plain) => vec![AuxTransform::IDENTITY],
            (Some(t), _) => t.clone(),
            (None, m) => m.default_transforms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub mode: EvalMode,
    pub agg: Aggregation,
    pub score: ScoreSource,
    pub embedding: EmbeddingSource,
    pub n_aux: usize,
    pub accuracy: f64,
    pub metrics: MetricReport,
    /// Zero scores nudged during weighted averaging.
    pub perturbed: usize,
}

/// One line of `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub item_id: usize,
    pub split: Split,
    pub agg: String,
    pub pred_label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IndTest,
    OodTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub split: Split,
    pub item_id: usize,
    pub label: usize,
    /// Index of the transform the item was passed through.
    pub aux: usize,
    pub z: Vec<f64>,
}

/// Embeddings of every split under every transform used by an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// The bank has one aux cell per transform; otherwise a single shared cell.
    pub aux_labeled: bool,
    pub rows: Vec<EmbeddingRow>,
}

fn resolve_score(model: &TrainedModel, cfg: &EvalConfig) -> Result<ScoreSource> {
    match cfg.score {
        ScoreSource::Auto if model.loss.uses_classifier() => Ok(ScoreSource::Softmax),
        ScoreSource::Auto => Ok(ScoreSource::Gaussian),
        ScoreSource::Softmax if model.mlp.classifier.is_none() => {
            Err(MclError::InvalidConfig("softmax scoring needs a classifier head".into()))
        }
        s => Ok(s),
    }
}

fn check_mode(model: &TrainedModel, cfg: &EvalConfig) -> Result<()> {
    if cfg.mode == EvalMode::Plain {
        return Ok(());
    }
    if model.aux_mode != AuxMode::Labeled && !cfg.allow_aux_free {
        return Err(MclError::InvalidConfig(format!(
            "{} requested for a model trained without aux labels",
            cfg.mode.name()
        )));
    }
    if cfg.transforms().is_empty() {
        return Err(MclError::NoAuxTransforms);
    }
    Ok(())
}

fn embed_many(model: &TrainedModel, inputs: &[Vec<f64>], source: EmbeddingSource) -> Vec<Vec<f64>> {
    if inputs.is_empty() {
        return Vec::new();
    }
    let cache = model.mlp.forward(&stack_rows(inputs));
    let out = match source {
        EmbeddingSource::Projection => &cache.projection,
        EmbeddingSource::Encoder => cache.features(),
    };
    rows_of(out)
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Embeds the splits: training items under every bank transform, test items
/// under every inference transform.
pub fn build_embedding_table(model: &TrainedModel, data: &SplitData, cfg: &EvalConfig) -> Result<EmbeddingTable> {
    check_mode(model, cfg)?;
    let aux_labeled = model.aux_mode == AuxMode::Labeled;
    let test_transforms = cfg.transforms();
    let bank_transforms = if !aux_labeled {
        vec![AuxTransform::IDENTITY]
    } else if cfg.mode == EvalMode::Plain {
        cfg.transforms
            .clone()
            .unwrap_or_else(|| model.aux_set.transforms())
    } else {
        test_transforms.clone()
    };

    let mut rows = Vec::new();
    let mut push = |split: Split, items: &[LabeledItem], transforms: &[AuxTransform]| {
        for (m, t) in transforms.iter().enumerate() {
            let inputs: Vec<Vec<f64>> = items.iter().map(|it| t.apply(&it.features)).collect();
            for (k, z) in embed_many(model, &inputs, cfg.embedding).into_iter().enumerate() {
                rows.push(EmbeddingRow {
                    split,
                    item_id: k,
                    label: items[k].main_label,
                    aux: m,
                    z,
                });
            }
        }
    };
    push(Split::Train, &data.train, &bank_transforms);
    push(Split::IndTest, &data.ind_test, &test_transforms);
    push(Split::OodTest, &data.ood_test, &test_transforms);
    Ok(EmbeddingTable { aux_labeled, rows })
}

struct Prediction {
    label: usize,
    confidence: f64,
    perturbed: usize,
}

fn combine(per_aux: &[Vec<f64>], agg: Aggregation, sign: WeightSign) -> Result<Prediction> {
    if per_aux.len() == 1 {
        let label = argmax(&per_aux[0]);
        return Ok(Prediction {
            label,
            confidence: per_aux[0][label],
            perturbed: 0,
        });
    }
    let out = aggregate_scores(per_aux, agg, sign)?;
    Ok(Prediction {
        label: out.label,
        confidence: out.confidence,
        perturbed: out.perturbed,
    })
}

/// Per-aux score vectors of one test item, in transform order.
type ItemScores = (Split, usize, usize, Vec<Vec<f64>>);

fn finish(
    cfg: &EvalConfig,
    score: ScoreSource,
    n_aux: usize,
    items: Vec<ItemScores>,
) -> Result<(EvalSection, Vec<ScoreRow>)> {
    let mut samples = Vec::with_capacity(items.len());
    let mut rows = Vec::with_capacity(items.len());
    let (mut correct, mut n_ind, mut perturbed) = (0usize, 0usize, 0usize);
    for (split, item_id, label, per_aux) in items {
        let p = combine(&per_aux, cfg.agg, cfg.weight_sign)?;
        perturbed += p.perturbed;
        let is_ind = split == Split::IndTest;
        if is_ind {
            n_ind += 1;
            correct += (p.label == label) as usize;
        }
        samples.push(ScoredSample {
            confidence: p.confidence,
            is_ind,
        });
        rows.push(ScoreRow {
            item_id,
            split,
            agg: if n_aux == 1 { "none".into() } else { cfg.agg.name().into() },
            pred_label: p.label,
            confidence: p.confidence,
        });
    }
    if n_ind == 0 {
        return Err(MclError::InvalidInput("no IND test items".into()));
    }
    let section = EvalSection {
        mode: cfg.mode,
        agg: cfg.agg,
        score,
        embedding: cfg.embedding,
        n_aux,
        accuracy: correct as f64 / n_ind as f64,
        metrics: MetricReport::compute(&samples)?,
        perturbed,
    };
    Ok((section, rows))
}

/// Fits the bank from the table's training rows and scores its test rows.
pub fn evaluate_embeddings(table: &EmbeddingTable, cfg: &EvalConfig) -> Result<(EvalSection, Vec<ScoreRow>)> {
    let bank = fit_bank(table, &cfg.fit)?;
    let mut tests: Vec<&EmbeddingRow> = table.rows.iter().filter(|r| r.split != Split::Train).collect();
    tests.sort_by_key(|r| (r.split, r.item_id, r.aux));
    let mut items: Vec<ItemScores> = Vec::new();
    let mut n_aux = 0;
    for r in tests {
        let cell = if table.aux_labeled { r.aux } else { 0 };
        let s = score_vector(&r.z, &bank, cell)?;
        match items.last_mut() {
            Some(last) if last.0 == r.split && last.1 == r.item_id => last.3.push(s),
            _ => items.push((r.split, r.item_id, r.label, vec![s])),
        }
    }
    for it in &items {
        if n_aux == 0 {
            n_aux = it.3.len();
        } else if it.3.len() != n_aux {
            return Err(MclError::ShapeMismatch("test items with differing transform counts".into()));
        }
    }
    finish(cfg, ScoreSource::Gaussian, n_aux, items)
}

pub fn fit_bank(table: &EmbeddingTable, fit: &FitOptions) -> Result<ClassGaussianBank> {
    let samples: Vec<LabeledEmbedding> = table
        .rows
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| LabeledEmbedding {
            z: r.z.clone(),
            main: r.label,
            aux: if table.aux_labeled { r.aux } else { 0 },
        })
        .collect();
    fit_gaussians(&samples, fit)
}

fn evaluate_softmax(model: &TrainedModel, data: &SplitData, cfg: &EvalConfig) -> Result<(EvalSection, Vec<ScoreRow>)> {
    let transforms = cfg.transforms();
    if model.mlp.classifier.is_none() {
        return Err(MclError::InvalidConfig("softmax scoring needs a classifier head".into()));
    }
    let mut items: Vec<ItemScores> = Vec::new();
    for (split, set) in [(Split::IndTest, &data.ind_test), (Split::OodTest, &data.ood_test)] {
        let mut per_item: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(transforms.len()); set.len()];
        for t in &transforms {
            let inputs: Vec<Vec<f64>> = set.iter().map(|it| t.apply(&it.features)).collect();
            if inputs.is_empty() {
                continue;
            }
            let cache = model.mlp.forward(&stack_rows(&inputs));
            let logits = cache.logits.as_ref().expect("classifier present");
            for (k, row) in rows_of(logits).into_iter().enumerate() {
                per_item[k].push(softmax_probabilities(&row));
            }
        }
        for (k, per_aux) in per_item.into_iter().enumerate() {
            items.push((split, k, set[k].main_label, per_aux));
        }
    }
    finish(cfg, ScoreSource::Softmax, transforms.len(), items)
}

/// Evaluates `model` on the test splits of `data`.
pub fn evaluate(model: &TrainedModel, data: &SplitData, cfg: &EvalConfig) -> Result<(EvalSection, Vec<ScoreRow>)> {
    check_mode(model, cfg)?;
    match resolve_score(model, cfg)? {
        ScoreSource::Softmax => evaluate_softmax(model, data, cfg),
        _ => evaluate_embeddings(&build_embedding_table(model, data, cfg)?, cfg),
    }
}

const SPLIT_NAMES: [(Split, &str); 3] = [
    (Split::Train, "train"),
    (Split::IndTest, "ind_test"),
    (Split::OodTest, "ood_test"),
];

fn split_name(s: Split) -> &'static str {
    SPLIT_NAMES.iter().find(|(k, _)| *k == s).unwrap().1
}

fn parse_split(s: &str) -> Result<Split> {
    SPLIT_NAMES
        .iter()
        .find(|(_, n)| *n == s)
        .map(|(k, _)| *k)
        .ok_or_else(|| MclError::InvalidInput(format!("unknown split `{s}`")))
}

impl EmbeddingTable {
    /// Writes `split,item_id,label,aux,z0..z{d-1}`, preceded by a
    /// `# aux_labeled=<bool>` line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# aux_labeled={}", self.aux_labeled)?;
        let mut w = csv::Writer::from_writer(out);
        let d = self.rows.first().map_or(0, |r| r.z.len());
        let mut header: Vec<String> = ["split", "item_id", "label", "aux"].iter().map(|s| s.to_string()).collect();
        header.extend((0..d).map(|j| format!("z{j}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                split_name(r.split).to_string(),
                r.item_id.to_string(),
                r.label.to_string(),
                r.aux.to_string(),
            ];
            rec.extend(r.z.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let (first, body) = text
            .split_once('\n')
            .ok_or_else(|| MclError::InvalidInput("empty embeddings file".into()))?;
        let aux_labeled = match first.trim() {
            "# aux_labeled=true" => true,
            "# aux_labeled=false" => false,
            other => return Err(MclError::InvalidInput(format!("bad embeddings preamble `{other}`"))),
        };
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let bad = |what: &str, v: &str| MclError::InvalidInput(format!("bad {what} `{v}`"));
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() < 4 {
                return Err(MclError::InvalidInput("embedding row too short".into()));
            }
            let int = |k: usize, what: &str| rec[k].parse::<usize>().map_err(|_| bad(what, &rec[k]));
            let z = rec
                .iter()
                .skip(4)
                .map(|s| s.parse::<f64>().map_err(|_| bad("value", s)))
                .collect::<Result<Vec<_>>>()?;
            rows.push(EmbeddingRow {
                split: parse_split(&rec[0])?,
                item_id: int(1, "item id")?,
                label: int(2, "label")?,
                aux: int(3, "aux")?,
                z,
            });
        }
        Ok(Self { aux_labeled, rows })
    }
}

pub fn write_scores_csv<W: Write>(rows: &[ScoreRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["item_id", "split", "agg", "pred_label", "confidence"])?;
    for r in rows {
        w.write_record([
            r.item_id.to_string(),
            split_name(r.split).to_string(),
            r.agg.clone(),
            r.pred_label.to_string(),
            r.confidence.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
