//! Small multilayer perceptron encoder with a projection head and an optional
//! classifier head, with hand-written backpropagation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Widths of the encoder hidden layers and the projection output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Projection head output dimension `d`.
    pub out_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            out_dim: 16,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(MclError::InvalidConfig(
                "encoder needs at least one nonempty hidden layer".into(),
            ));
        }
        if self.out_dim < 2 {
            return Err(MclError::InvalidConfig("projection dimension must be >= 2".into()));
        }
        Ok(())
    }
}

/// Dense layer `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out x in`
    pub w: DMatrix<f64>,
    /// `1 x out`
    pub b: DMatrix<f64>,
}

impl Linear {
    fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        // He initialization
        let std = (2.0 / input as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            w: DMatrix::from_fn(output, input, |_, _| normal.sample(rng)),
            b: DMatrix::zeros(1, output),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: DMatrix::zeros(self.w.nrows(), self.w.ncols()),
            b: DMatrix::zeros(1, self.b.ncols()),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * self.w.transpose();
        for mut row in y.row_iter_mut() {
            row += &self.b;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: &DMatrix<f64>, dy: &DMatrix<f64>, grad: &mut Linear) -> DMatrix<f64> {
        grad.w += dy.transpose() * x;
        for row in dy.row_iter() {
            grad.b += row;
        }
        dy * &self.w
    }
}

/// Encoder `f`, projection head `g` and an optional linear classifier on the
/// encoder features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: EncoderSpec,
    pub input_dim: usize,
    pub encoder: Vec<Linear>,
    pub projection: Linear,
    pub classifier: Option<Linear>,
}

/// Activations kept from a forward pass.
pub struct ForwardCache {
    /// Input followed by every hidden activation.
    layers: Vec<DMatrix<f64>>,
    pub projection: DMatrix<f64>,
    pub logits: Option<DMatrix<f64>>,
}

impl ForwardCache {
    /// Encoder output (last hidden activation).
    pub fn features(&self) -> &DMatrix<f64> {
        self.layers.last().expect("at least the input")
    }
}

/// Parameter gradients with the same layout as [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub encoder: Vec<Linear>,
    pub projection: Linear,
    pub classifier: Option<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(spec: &EncoderSpec, input_dim: usize, classes: Option<usize>, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut encoder = Vec::with_capacity(spec.hidden.len());
        let mut width = input_dim;
        for &h in &spec.hidden {
            encoder.push(Linear::init(width, h, rng));
            width = h;
        }
        let projection = Linear::init(width, spec.out_dim, rng);
        let classifier = classes.map(|c| Linear::init(width, c, rng));
        Ok(Self {
            spec: spec.clone(),
            input_dim,
            encoder,
            projection,
            classifier,
        })
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> ForwardCache {
        let mut layers = Vec::with_capacity(self.encoder.len() + 1);
        layers.push(x.clone());
        for layer in &self.encoder {
            let mut h = layer.forward(layers.last().unwrap());
            h.apply(|v| *v = self.spec.activation.apply(*v));
            layers.push(h);
        }
        let feats = layers.last().unwrap();
        let projection = self.projection.forward(feats);
        let logits = self.classifier.as_ref().map(|c| c.forward(feats));
        ForwardCache {
            layers,
            projection,
            logits,
        }
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            encoder: self.encoder.iter().map(Linear::zeros_like).collect(),
            projection: self.projection.zeros_like(),
            classifier: self.classifier.as_ref().map(Linear::zeros_like),
        }
    }

    /// Backpropagates upstream gradients w.r.t. the projection output and/or
    /// the classifier logits.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_projection: Option<&DMatrix<f64>>,
        d_logits: Option<&DMatrix<f64>>,
    ) -> MlpGrads {
        let mut grads = self.zero_grads();
        let feats = cache.features();
        let mut d_feats = DMatrix::zeros(feats.nrows(), feats.ncols());
        if let Some(dz) = d_projection {
            d_feats += self.projection.backward(feats, dz, &mut grads.projection);
        }
        if let (Some(dl), Some(cls), Some(gc)) =
            (d_logits, self.classifier.as_ref(), grads.classifier.as_mut())
        {
            d_feats += cls.backward(feats, dl, gc);
        }
        let mut upstream = d_feats;
        for (k, layer) in self.encoder.iter().enumerate().rev() {
            let out = &cache.layers[k + 1];
            upstream.zip_apply(out, |g, y| *g *= self.spec.activation.derivative_from_output(y));
            upstream = layer.backward(&cache.layers[k], &upstream, &mut grads.encoder[k]);
        }
        grads
    }

    /// Every parameter tensor, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = Vec::new();
        for l in self.encoder.iter_mut() {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.projection.w);
        out.push(&mut self.projection.b);
        if let Some(c) = self.classifier.as_mut() {
            out.push(&mut c.w);
            out.push(&mut c.b);
        }
        out
    }

    pub fn embed_projection(&self, x: &[f64]) -> Vec<f64> {
        let cache = self.forward(&DMatrix::from_row_slice(1, x.len(), x));
        cache.projection.iter().copied().collect()
    }

    pub fn embed_features(&self, x: &[f64]) -> Vec<f64> {
        let cache = self.forward(&DMatrix::from_row_slice(1, x.len(), x));
        cache.features().iter().copied().collect()
    }
}

impl MlpGrads {
    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.projection.w);
        out.push(&self.projection.b);
        if let Some(c) = &self.classifier {
            out.push(&c.w);
            out.push(&c.b);
        }
        out
    }
}

/// Rows of `items` stacked into a matrix.
pub fn stack_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = logits.nrows();
    let mut grad = DMatrix::zeros(n, logits.ncols());
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.max();
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[labels[i]];
        for j in 0..logits.ncols() {
            grad[(i, j)] = (row[j] - lse).exp() / n as f64;
        }
        grad[(i, labels[i])] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad)
}

pub fn softmax_probabilities(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    logits.iter().map(|v| (v - max).exp() / sum).collect()
}

/// Argmax and maximum softmax probability.
pub fn softmax_confidence(logits: &[f64]) -> (usize, f64) {
    let p = softmax_probabilities(logits);
    let label = crate::scoring::argmax(&p);
    (label, p[label])
}
