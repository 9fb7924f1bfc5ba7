use nalgebra::DMatrix;

use mclkit::batching::{AugmentationFamily, AuxMode};
use mclkit::harness::data::{generate_synthetic, SyntheticSpec};
use mclkit::harness::encoder::{softmax_cross_entropy, Activation, EncoderSpec, Mlp};
use mclkit::harness::evaluate::{evaluate, EvalConfig, EvalMode};
use mclkit::harness::train::{train, LossSelector, TrainConfig};
use mclkit::losses::{loss_and_gradient, EmbeddingMatrix, LossKind, LossSpec};
use mclkit::masking::MclConfig;
use mclkit::rng::{stream_rng, Stream};
use mclkit::scoring::Aggregation;

fn toy_loss(model: &Mlp, x: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let cache = model.forward(x);
    let batch = mclkit::batching::AugmentedBatch::from_labels(labels.to_vec(), None).unwrap();
    let cfg = MclConfig {
        alpha: 0.5,
        batch_size: labels.len() / 2,
        c_main: 2,
        c_aux: 1,
        ..MclConfig::default()
    };
    let (v, dz) = loss_and_gradient(
        &EmbeddingMatrix(cache.projection.clone()),
        &batch,
        &cfg,
        &LossSpec::new(LossKind::Mcl),
    )
    .unwrap();
    let (ce, dl) = softmax_cross_entropy(cache.logits.as_ref().unwrap(), labels);
    (v.total + ce, dz, dl)
}

#[test]
fn encoder_backprop_matches_differences() {
    let spec = EncoderSpec {
        hidden: vec![5],
        activation: Activation::Tanh,
        out_dim: 3,
    };
    let mut init = stream_rng(9, Stream::Init);
    let mut model = Mlp::new(&spec, 4, Some(2), &mut init).unwrap();
    let x = DMatrix::from_fn(6, 4, |i, j| ((i * 5 + j * 3) % 7) as f64 / 3.0 - 1.0);
    let labels = [0, 0, 1, 1, 0, 0];

    let (_, dz, dl) = toy_loss(&model, &x, &labels);
    let cache = model.forward(&x);
    let grads = model.backward(&cache, Some(&dz), Some(&dl));
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();

    let h = 1e-6;
    let mut numeric = Vec::new();
    let n_tensors = model.params_mut().len();
    for t in 0..n_tensors {
        let len = model.params_mut()[t].len();
        for k in 0..len {
            model.params_mut()[t][k] += h;
            let plus = toy_loss(&model, &x, &labels).0;
            model.params_mut()[t][k] -= 2.0 * h;
            let minus = toy_loss(&model, &x, &labels).0;
            model.params_mut()[t][k] += h;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    assert_eq!(numeric.len(), analytic.len());
    let diff: f64 = numeric.iter().zip(&analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
}

fn blobs() -> mclkit::harness::data::SplitData {
    generate_synthetic(&SyntheticSpec {
        n_classes: 4,
        anomaly_classes: vec![3],
        samples_per_class: 64,
        test_per_class: 8,
        d_in: 4,
        spread: 0.3,
        center_scale: 3.0,
        nuisance_scale: 0.3,
        seed: 4,
    })
    .unwrap()
}

fn desk_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 32,
        encoder: EncoderSpec {
            hidden: vec![32, 32],
            out_dim: 8,
            ..EncoderSpec::default()
        },
        mcl: MclConfig {
            alpha: 0.1,
            ..MclConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn mcl_training_lowers_the_loss() {
    let data = blobs();
    let (_, report) = train(&desk_cfg(), &data.train).unwrap();
    assert_eq!(report.loss_curve.len(), 50);
    assert!(report.loss_curve.last().unwrap() < report.loss_curve.first().unwrap());
}

#[test]
fn same_seed_gives_identical_report_bytes() {
    let data = blobs();
    let cfg = TrainConfig {
        epochs: 5,
        aux_mode: AuxMode::Labeled,
        ..desk_cfg()
    };
    let run = || {
        let (model, mut report) = train(&cfg, &data.train).unwrap();
        let ec = EvalConfig {
            mode: EvalMode::Sei4,
            agg: Aggregation::WAvg,
            ..EvalConfig::default()
        };
        report.evaluations.push(evaluate(&model, &data, &ec).unwrap().0);
        serde_json::to_string(&report).unwrap()
    };
    assert_eq!(run(), run());
    let other = TrainConfig { seed: 1, ..cfg.clone() };
    let (_, r) = train(&other, &data.train).unwrap();
    let (_, base) = train(&cfg, &data.train).unwrap();
    assert_ne!(r.loss_curve, base.loss_curve);
}

#[test]
fn overriding_failed_attraction_bound_warns() {
    let data = blobs();
    let cfg = TrainConfig {
        epochs: 1,
        allow_invalid_hparams: true,
        mcl: MclConfig {
            alpha: 4.0,
            ..MclConfig::default()
        },
        ..desk_cfg()
    };
    let (_, report) = train(&cfg, &data.train).unwrap();
    assert!(!report.validity.unwrap().attraction_ok);
    assert!(report.warnings.iter().any(|w| w.contains("alpha")));
}

#[test]
fn sei8_runs_on_an_eight_way_aux_model() {
    let data = blobs();
    let cfg = TrainConfig {
        epochs: 3,
        aux_mode: AuxMode::Labeled,
        aux_set: mclkit::harness::train::AuxSet::Rot8,
        ..desk_cfg()
    };
    let (model, _) = train(&cfg, &data.train).unwrap();
    let ec = EvalConfig {
        mode: EvalMode::Sei8,
        ..EvalConfig::default()
    };
    let (section, _) = evaluate(&model, &data, &ec).unwrap();
    assert_eq!(section.n_aux, 8);
    assert!((0.0..=1.0).contains(&section.accuracy));
    // degenerate eight-way family reproduces plain evaluation
    let ident = EvalConfig {
        transforms: Some(AugmentationFamily::identities(8)),
        ..ec
    };
    let plain = EvalConfig {
        transforms: Some(AugmentationFamily::identities(8)),
        ..EvalConfig::default()
    };
    assert_eq!(
        evaluate(&model, &data, &ident).unwrap().0.metrics,
        evaluate(&model, &data, &plain).unwrap().0.metrics
    );
}

#[test]
fn joint_and_finetuned_models_train() {
    let data = blobs();
    let joint = TrainConfig {
        epochs: 3,
        loss: LossSelector::Joint,
        ..desk_cfg()
    };
    let (model, report) = train(&joint, &data.train).unwrap();
    assert!(report.loss_curve.iter().all(|v| v.is_finite()));
    let (s, _) = evaluate(&model, &data, &EvalConfig::default()).unwrap();
    assert!(s.accuracy > 0.5);
}
