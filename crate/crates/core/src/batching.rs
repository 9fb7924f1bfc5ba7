//! Labeled batches, two-view augmentation and positive-batch construction.
//!
//! Views are stored interleaved: the two views of parent `k` sit at storage
//! positions `2k` and `2k + 1`. In 1-based formula notation these are views
//! `2k - 1` and `2k`, and the parent of view `i` is `(i - 1) \ 2`. All public
//! indices in this crate are 0-based storage indices; the 1-based convention
//! never leaves this module.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MclError, Result};
use crate::rng::{stream_rng, Stream};

/// A single labeled example. Labels are 0-based class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub features: Vec<f64>,
    pub main_label: usize,
}

impl LabeledItem {
    pub fn new(features: Vec<f64>, main_label: usize) -> Self {
        Self {
            features,
            main_label,
        }
    }
}

/// Parent image of a view (0-based). Equals `(i - 1) \ 2` for 1-based `i`.
#[inline]
pub fn parent_of(view: usize) -> usize {
    view / 2
}

/// The other view produced from the same parent.
#[inline]
pub fn paired_view(view: usize) -> usize {
    view ^ 1
}

/// Converts a 1-based formula index into a storage index.
#[inline]
pub fn from_one_based(i: usize) -> usize {
    debug_assert!(i >= 1);
    i - 1
}

/// `2N` augmented views with their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedBatch {
    pub views: Vec<Vec<f64>>,
    pub main_labels: Vec<usize>,
    pub aux_labels: Option<Vec<usize>>,
    pub parent_index: Vec<usize>,
}

impl AugmentedBatch {
    /// Builds a batch from interleaved views, checking the pairing invariants.
    pub fn new(
        views: Vec<Vec<f64>>,
        main_labels: Vec<usize>,
        aux_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let len = main_labels.len();
        if len == 0 {
            return Err(MclError::EmptyBatch);
        }
        if len % 2 != 0 {
            return Err(MclError::ShapeMismatch(format!(
                "{len} views; an augmented batch has an even number of views"
            )));
        }
        if views.len() != len {
            return Err(MclError::ShapeMismatch(format!(
                "{} views but {} main labels",
                views.len(),
                len
            )));
        }
        if let Some(aux) = &aux_labels {
            if aux.len() != len {
                return Err(MclError::ShapeMismatch(format!(
                    "{} aux labels for {} views",
                    aux.len(),
                    len
                )));
            }
        }
        for k in 0..len / 2 {
            if main_labels[2 * k] != main_labels[2 * k + 1] {
                return Err(MclError::InvalidInput(format!(
                    "views of parent {k} carry different main labels"
                )));
            }
        }
        let parent_index = (0..len).map(parent_of).collect();
        Ok(Self {
            views,
            main_labels,
            aux_labels,
            parent_index,
        })
    }

    /// A batch carrying labels only (empty feature vectors). Handy when the
    /// embeddings are supplied separately.
    pub fn from_labels(main_labels: Vec<usize>, aux_labels: Option<Vec<usize>>) -> Result<Self> {
        let views = vec![Vec::new(); main_labels.len()];
        Self::new(views, main_labels, aux_labels)
    }

    /// One main label per parent; both views receive it.
    pub fn from_parent_labels(parent_labels: &[usize]) -> Result<Self> {
        let labels = parent_labels.iter().flat_map(|&y| [y, y]).collect();
        Self::from_labels(labels, None)
    }

    pub fn len(&self) -> usize {
        self.main_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main_labels.is_empty()
    }

    /// Number of parent items `N`.
    pub fn num_parents(&self) -> usize {
        self.len() / 2
    }

    pub fn has_aux(&self) -> bool {
        self.aux_labels.is_some()
    }

    /// `(main, aux)` label pairs; aux is 0 when the batch has no aux labels.
    pub fn composite_labels(&self) -> Vec<(usize, usize)> {
        match &self.aux_labels {
            Some(aux) => self.main_labels.iter().copied().zip(aux.iter().copied()).collect(),
            None => self.main_labels.iter().map(|&m| (m, 0)).collect(),
        }
    }

    /// Same-main-label views of `i` that come from a different parent.
    pub fn positive_batch(&self, i: usize) -> Result<Vec<usize>> {
        positive_set(&self.main_labels, i)
    }

    /// Like [`positive_batch`](Self::positive_batch) but matching on the
    /// composite `(main, aux)` label.
    pub fn positive_batch_composite(&self, i: usize) -> Result<Vec<usize>> {
        positive_set(&self.composite_labels(), i)
    }
}

/// `{ k : labels[k] == labels[i] and parent(k) != parent(i) }`.
pub fn positive_set<L: PartialEq>(labels: &[L], i: usize) -> Result<Vec<usize>> {
    if i >= labels.len() {
        return Err(MclError::IndexOutOfRange {
            index: i,
            len: labels.len(),
        });
    }
    let p = parent_of(i);
    Ok(labels
        .iter()
        .enumerate()
        .filter(|&(k, y)| *y == labels[i] && parent_of(k) != p)
        .map(|(k, _)| k)
        .collect())
}

/// Deterministic planar transform used as the auxiliary task: optional sign
/// flip of the first coordinate, then rotation of every coordinate pair
/// `(2p, 2p+1)` by `quarter_turns * 90` degrees. A trailing odd coordinate is
/// left alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxTransform {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl AuxTransform {
    pub const IDENTITY: AuxTransform = AuxTransform {
        quarter_turns: 0,
        flip: false,
    };

    pub fn rotation(quarter_turns: u8) -> Self {
        Self {
            quarter_turns: quarter_turns % 4,
            flip: false,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        if self.flip {
            if let Some(first) = out.first_mut() {
                *first = -*first;
            }
        }
        for pair in out.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            let (ra, rb) = match self.quarter_turns % 4 {
                0 => (a, b),
                1 => (-b, a),
                2 => (-a, -b),
                _ => (b, -a),
            };
            pair[0] = ra;
            pair[1] = rb;
        }
        out
    }
}

/// How auxiliary transforms participate when augmenting a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AuxMode {
    #[default]
    None,
    /// Apply an aux transform per view and attach its label.
    Labeled,
    /// Apply aux transforms as plain data augmentation, no label.
    Unlabeled,
}

/// Stochastic view transforms plus the finite labeled set of aux transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationFamily {
    /// Standard deviation of additive Gaussian noise.
    pub noise_scale: f64,
    /// Probability that a coordinate is zeroed.
    pub dropout_rate: f64,
    /// Aux transforms; the index into this list is the aux label.
    pub aux: Vec<AuxTransform>,
}

impl AugmentationFamily {
    pub fn new(noise_scale: f64, dropout_rate: f64, aux: Vec<AuxTransform>) -> Self {
        Self {
            noise_scale,
            dropout_rate,
            aux,
        }
    }

    /// 0, 90, 180 and 270 degree rotations.
    pub fn rotations4() -> Vec<AuxTransform> {
        (0..4).map(AuxTransform::rotation).collect()
    }

    /// The four rotations followed by the four rotations of the flipped input.
    pub fn rotations_flips8() -> Vec<AuxTransform> {
        [false, true]
            .into_iter()
            .flat_map(|flip| (0..4).map(move |q| AuxTransform { quarter_turns: q, flip }))
            .collect()
    }

    /// `n` identity aux transforms.
    pub fn identities(n: usize) -> Vec<AuxTransform> {
        vec![AuxTransform::IDENTITY; n]
    }

    pub fn num_aux(&self) -> usize {
        self.aux.len()
    }

    fn stochastic_view<R: Rng>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let noise = Normal::new(0.0, self.noise_scale.max(0.0)).expect("finite noise scale");
        x.iter()
            .map(|&v| {
                let noisy = if self.noise_scale > 0.0 {
                    v + noise.sample(rng)
                } else {
                    v
                };
                if self.dropout_rate > 0.0 && rng.random::<f64>() < self.dropout_rate {
                    0.0
                } else {
                    noisy
                }
            })
            .collect()
    }
}

/// Produces two stochastic views per item, interleaved, with labels copied
/// from the parent. In `Labeled` and `Unlabeled` mode each view independently
/// draws one aux transform before the stochastic part is applied.
pub fn augment_batch(
    batch: &[LabeledItem],
    family: &AugmentationFamily,
    seed: u64,
    aux_mode: AuxMode,
) -> Result<AugmentedBatch> {
    if batch.is_empty() {
        return Err(MclError::EmptyBatch);
    }
    if aux_mode != AuxMode::None && family.aux.is_empty() {
        return Err(MclError::NoAuxTransforms);
    }
    let dim = batch[0].features.len();
    if batch.iter().any(|it| it.features.len() != dim) {
        return Err(MclError::ShapeMismatch("items of differing feature dimension".into()));
    }

    let mut rng = stream_rng(seed, Stream::Augmentation);
    let n_views = 2 * batch.len();
    let mut views = Vec::with_capacity(n_views);
    let mut main_labels = Vec::with_capacity(n_views);
    let mut aux_labels = Vec::with_capacity(n_views);
    for item in batch {
        for _ in 0..2 {
            let base = if aux_mode == AuxMode::None {
                item.features.clone()
            } else {
                let m = rng.random_range(0..family.aux.len());
                aux_labels.push(m);
                family.aux[m].apply(&item.features)
            };
            views.push(family.stochastic_view(&base, &mut rng));
            main_labels.push(item.main_label);
        }
    }
    let aux = (aux_mode == AuxMode::Labeled).then_some(aux_labels);
    AugmentedBatch::new(views, main_labels, aux)
}
