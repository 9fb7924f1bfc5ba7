use std::ffi::CStr;
use std::ptr;

use mclkit::batching::AugmentedBatch;
use mclkit::losses::{loss_and_gradient, EmbeddingMatrix, LossKind, LossSpec};
use mclkit::masking::MclConfig;
use mclkit_ffi::*;

fn paper_cfg() -> MclLossConfig {
    MclLossConfig {
        tau: 0.2,
        alpha: 0.05,
        beta: 2.5,
        lambda: 1.0,
        aux: 1,
        spa_single_sample: 0,
        seed: 0,
    }
}

fn last_error() -> String {
    let p = mcl_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn validator_reports_bounds() {
    let mut out = MclValidity::default();
    let st = unsafe { mcl_validate_hparams(paper_cfg(), 1024, 10, 4, 0.0, &mut out) };
    assert_eq!(st, MclStatus::Ok);
    assert!((out.attraction_bound - 0.09765625).abs() < 1e-12);
    assert_eq!(out.overall_ok, 1);
    assert!(mcl_last_error_message().is_null());

    let bad = MclLossConfig { tau: -1.0, ..paper_cfg() };
    let st = unsafe { mcl_validate_hparams(bad, 1024, 10, 4, 0.0, &mut out) };
    assert_eq!(st, MclStatus::InvalidConfig);
    assert!(!last_error().is_empty());
}

#[test]
fn loss_matches_core() {
    let z: Vec<f64> = (0..8 * 3).map(|k| ((k * 7919) % 23) as f64 / 7.0 - 1.3).collect();
    let main = [0usize, 0, 1, 1, 0, 0, 2, 2];
    let aux = [0usize, 1, 2, 0, 1, 1, 3, 0];
    let cfg = paper_cfg();
    let mut loss = 0.0;
    let mut grad = vec![0.0; z.len()];
    let st = unsafe {
        mcl_loss_and_gradient(
            MclLossKind::Mcl,
            z.as_ptr(),
            8,
            3,
            main.as_ptr(),
            aux.as_ptr(),
            cfg,
            &mut loss,
            grad.as_mut_ptr(),
        )
    };
    assert_eq!(st, MclStatus::Ok);

    let rows: Vec<Vec<f64>> = z.chunks(3).map(<[f64]>::to_vec).collect();
    let batch = AugmentedBatch::from_labels(main.to_vec(), Some(aux.to_vec())).unwrap();
    let core = MclConfig {
        batch_size: 4,
        c_main: 3,
        c_aux: 4,
        ..MclConfig::default()
    };
    let spec = LossSpec::new(LossKind::Mcl).with_aux(true);
    let (v, g) = loss_and_gradient(&EmbeddingMatrix::from_rows(&rows).unwrap(), &batch, &core, &spec).unwrap();
    assert_eq!(loss, v.total);
    for i in 0..8 {
        for j in 0..3 {
            assert_eq!(grad[i * 3 + j], g[(i, j)]);
        }
    }

    // gradient output is optional
    let st = unsafe {
        mcl_loss_and_gradient(
            MclLossKind::NtXent,
            z.as_ptr(),
            8,
            3,
            main.as_ptr(),
            ptr::null(),
            cfg,
            &mut loss,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, MclStatus::Ok);
    assert!(loss.is_finite());
}

#[test]
fn loss_rejects_bad_input() {
    let z = [0.0; 4];
    let main = [0usize, 0];
    let mut loss = 0.0;
    let st = unsafe {
        mcl_loss_and_gradient(
            MclLossKind::NtXent,
            z.as_ptr(),
            2,
            2,
            main.as_ptr(),
            ptr::null(),
            paper_cfg(),
            &mut loss,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, MclStatus::Numerical);
    assert!(last_error().contains("zero norm"));

    let st = unsafe {
        mcl_loss_and_gradient(
            MclLossKind::NtXent,
            ptr::null(),
            2,
            2,
            main.as_ptr(),
            ptr::null(),
            paper_cfg(),
            &mut loss,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, MclStatus::NullPointer);
}

#[test]
fn metrics_through_abi() {
    let conf = [0.9, 0.8, 0.1, 0.85];
    let ind = [1u8, 1, 0, 0];
    let mut out = MclMetrics::default();
    assert_eq!(unsafe { mcl_metrics(conf.as_ptr(), ind.as_ptr(), 4, &mut out) }, MclStatus::Ok);
    assert_eq!(out.auroc, 0.75);
    let one_class = [1u8; 4];
    assert_eq!(
        unsafe { mcl_metrics(conf.as_ptr(), one_class.as_ptr(), 4, &mut out) },
        MclStatus::InvalidArgument
    );
}

#[test]
fn bank_lifecycle() {
    // two classes, two aux cells, three points each
    let mut z = Vec::new();
    let mut main = Vec::new();
    let mut aux = Vec::new();
    for c in 0..2usize {
        for a in 0..2usize {
            for k in 0..3 {
                z.push(c as f64 * 5.0 + k as f64 * 0.1);
                z.push(a as f64 * 5.0 - k as f64 * 0.2);
                main.push(c);
                aux.push(a);
            }
        }
    }
    let mut bank: *mut MclBank = ptr::null_mut();
    let st = unsafe { mcl_bank_fit(z.as_ptr(), main.len(), 2, main.as_ptr(), aux.as_ptr(), 0.0, &mut bank) };
    assert_eq!(st, MclStatus::Ok);
    assert!(!bank.is_null());

    let (mut cm, mut ca, mut d) = (0, 0, 0);
    assert_eq!(unsafe { mcl_bank_shape(bank, &mut cm, &mut ca, &mut d) }, MclStatus::Ok);
    assert_eq!((cm, ca, d), (2, 2, 2));

    let mut scores = [0.0; 2];
    let probe = [5.1, 4.8];
    assert_eq!(unsafe { mcl_bank_score(bank, probe.as_ptr(), 2, 1, scores.as_mut_ptr(), 2) }, MclStatus::Ok);
    assert!(scores[1] > scores[0]);
    assert!(scores.iter().all(|s| *s <= 0.0));
    assert_eq!(
        unsafe { mcl_bank_score(bank, probe.as_ptr(), 2, 7, scores.as_mut_ptr(), 2) },
        MclStatus::InvalidArgument
    );

    let per_aux = [scores[0], scores[1], scores[0], scores[1]];
    let (mut label, mut conf) = (9usize, 0.0);
    for agg in [MclAggregation::Avg, MclAggregation::Max, MclAggregation::WAvg] {
        assert_eq!(
            unsafe { mcl_sei_aggregate(per_aux.as_ptr(), 2, 2, agg, &mut label, &mut conf) },
            MclStatus::Ok
        );
        assert_eq!((label, conf), (1, scores[1]));
    }
    unsafe {
        mcl_bank_free(bank);
        mcl_bank_free(ptr::null_mut());
    }
}
