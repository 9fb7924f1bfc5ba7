//! Synthetic Gaussian-cluster benchmark and the dataset CSV format.
//!
//! Class information lives on the even coordinates only; odd coordinates
//! carry class-independent nuisance noise. A quarter-turn rotation of the
//! coordinate pairs therefore moves the class signal onto the nuisance
//! coordinates, which is what makes the rotation task informative.

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batching::LabeledItem;
use crate::error::{MclError, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Total classes, including the held-out anomaly classes.
    pub n_classes: usize,
    pub samples_per_class: usize,
    /// IND test samples per training class.
    pub test_per_class: usize,
    pub d_in: usize,
    /// Within-class standard deviation on the informative coordinates.
    pub spread: f64,
    /// Standard deviation of the class centers.
    pub center_scale: f64,
    /// Standard deviation of the nuisance coordinates.
    pub nuisance_scale: f64,
    /// Class ids (in `0..n_classes`) held out as OOD.
    pub anomaly_classes: Vec<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            samples_per_class: 200,
            test_per_class: 100,
            d_in: 16,
            spread: 1.0,
            center_scale: 1.5,
            nuisance_scale: 1.0,
            anomaly_classes: vec![8, 9],
            seed: 0,
        }
    }
}

/// Training set, IND test set and OOD test set. IND labels are remapped to
/// `0..C_main`; OOD items keep their original class id.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub train: Vec<LabeledItem>,
    pub ind_test: Vec<LabeledItem>,
    pub ood_test: Vec<LabeledItem>,
}

impl SplitData {
    pub fn num_classes(&self) -> usize {
        self.train.iter().map(|it| it.main_label).max().map_or(0, |m| m + 1)
    }

    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(0, |it| it.features.len())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&self.train, std::fs::File::create(dir.join("train.csv"))?)?;
        write_csv(&self.ind_test, std::fs::File::create(dir.join("ind_test.csv"))?)?;
        write_csv(&self.ood_test, std::fs::File::create(dir.join("ood_test.csv"))?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: read_csv(std::fs::File::open(dir.join("train.csv"))?)?,
            ind_test: read_csv(std::fs::File::open(dir.join("ind_test.csv"))?)?,
            ood_test: read_csv(std::fs::File::open(dir.join("ood_test.csv"))?)?,
        })
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MclError::InvalidConfig(m));
        if self.anomaly_classes.iter().any(|&c| c >= self.n_classes) {
            return bad("anomaly class id out of range".into());
        }
        let mut held = self.anomaly_classes.clone();
        held.sort_unstable();
        held.dedup();
        if self.n_classes.saturating_sub(held.len()) < 2 {
            return bad("at least 2 training classes are required".into());
        }
        if !(self.spread > 0.0) {
            return bad(format!("spread must be positive, got {}", self.spread));
        }
        if self.d_in < 2 {
            return bad("d_in must be at least 2".into());
        }
        if self.samples_per_class < 2 {
            return bad("need at least 2 samples per class".into());
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SplitData> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Data);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let centers: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.d_in)
                .map(|j| {
                    if j % 2 == 0 {
                        spec.center_scale * unit.sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let draw = |class: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        centers[class]
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let s = if j % 2 == 0 {
                    spec.spread
                } else {
                    spec.nuisance_scale
                };
                c + s * unit.sample(rng)
            })
            .collect()
    };

    let mut train = Vec::new();
    let mut ind_test = Vec::new();
    let mut ood_test = Vec::new();
    let mut next_label = 0;
    for class in 0..spec.n_classes {
        if spec.anomaly_classes.contains(&class) {
            for _ in 0..spec.samples_per_class {
                ood_test.push(LabeledItem::new(draw(class, &mut rng), class));
            }
            continue;
        }
        let label = next_label;
        next_label += 1;
        for _ in 0..spec.samples_per_class {
            train.push(LabeledItem::new(draw(class, &mut rng), label));
        }
        for _ in 0..spec.test_per_class {
            ind_test.push(LabeledItem::new(draw(class, &mut rng), label));
        }
    }
    Ok(SplitData {
        train,
        ind_test,
        ood_test,
    })
}

/// Writes `f0,...,f{d-1},label`.
pub fn write_csv<W: Write>(items: &[LabeledItem], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = items.first().map_or(0, |it| it.features.len());
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for it in items {
        let mut rec: Vec<String> = it.features.iter().map(|v| v.to_string()).collect();
        rec.push(it.main_label.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<LabeledItem>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let d = headers.len().checked_sub(1).ok_or_else(|| MclError::InvalidInput("empty header".into()))?;
    if headers.get(d) != Some("label") {
        return Err(MclError::InvalidInput("last column must be `label`".into()));
    }
    for (j, h) in headers.iter().take(d).enumerate() {
        if h != format!("f{j}") {
            return Err(MclError::InvalidInput(format!("unexpected column `{h}`")));
        }
    }
    let mut items = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| MclError::InvalidInput(format!("bad feature `{s}`: {e}")))
        };
        let features = rec.iter().take(d).map(parse).collect::<Result<Vec<_>>>()?;
        let label = rec[d]
            .parse::<usize>()
            .map_err(|e| MclError::InvalidInput(format!("bad label `{}`: {e}", &rec[d])))?;
        items.push(LabeledItem::new(features, label));
    }
    Ok(items)
}
