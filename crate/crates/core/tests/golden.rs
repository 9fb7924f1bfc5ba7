//! Loss values and gradients against fixtures produced by an independent
//! autodiff implementation (tools/gen_fixtures.py).

use serde::Deserialize;

use mclkit::batching::AugmentedBatch;
use mclkit::losses::{loss_and_gradient, EmbeddingMatrix, LossKind, LossSpec};
use mclkit::masking::MclConfig;

#[derive(Deserialize)]
struct Case {
    name: String,
    kind: String,
    aux: bool,
    tau: f64,
    alpha: f64,
    beta: f64,
    lambda: f64,
    main_labels: Vec<usize>,
    aux_labels: Option<Vec<usize>>,
    z: Vec<Vec<f64>>,
    expected_loss: f64,
    expected_gradient: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct Fixtures {
    cases: Vec<Case>,
}

const TOL: f64 = 1e-10;

#[test]
fn losses_and_gradients_match_fixtures() {
    let text = include_str!("fixtures/losses.json");
    let fixtures: Fixtures = serde_json::from_str(text).unwrap();
    assert!(fixtures.cases.len() >= 10);
    for case in &fixtures.cases {
        let kind = match case.kind.as_str() {
            "ntxent" => LossKind::NtXent,
            "ccm" => LossKind::Ccm,
            "mcl" => LossKind::Mcl,
            "supclr" => LossKind::SupClr,
            other => panic!("unknown kind {other}"),
        };
        let batch = AugmentedBatch::from_labels(case.main_labels.clone(), case.aux_labels.clone()).unwrap();
        let cfg = MclConfig {
            tau: case.tau,
            alpha: case.alpha,
            beta: case.beta,
            lambda: case.lambda,
            batch_size: case.z.len() / 2,
            c_main: case.main_labels.iter().max().unwrap() + 1,
            c_aux: case.aux_labels.as_ref().map_or(1, |a| a.iter().max().unwrap() + 1),
        };
        let z = EmbeddingMatrix::from_rows(&case.z).unwrap();
        let (value, grad) = loss_and_gradient(&z, &batch, &cfg, &LossSpec::new(kind).with_aux(case.aux)).unwrap();
        assert!(
            (value.total - case.expected_loss).abs() < TOL,
            "{}: loss {} vs {}",
            case.name,
            value.total,
            case.expected_loss
        );
        for (i, row) in case.expected_gradient.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                assert!(
                    (grad[(i, j)] - g).abs() < TOL,
                    "{}: grad[{i}][{j}] {} vs {g}",
                    case.name,
                    grad[(i, j)]
                );
            }
        }
    }
}
