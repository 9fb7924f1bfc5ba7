//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;

use common::*;
use mclkit::batching::{AugmentationFamily, AugmentedBatch};
use mclkit::harness::ablation::{run_ablation, AblationConfig};
use mclkit::losses::{
    cosine_similarity, mcl_loss, nt_xent_loss, spa_similarity_gradient, supclr_loss, EmbeddingMatrix,
};
use mclkit::masking::{build_ccm, build_ccm_aux, validate_hparams, MclConfig};
use mclkit::metrics::{aupr, auroc, fpr_at_tpr, Positive, ScoredSample};
use mclkit::scoring::{
    aggregate_scores, fit_gaussians, predict, score_vector, sei_predict, Aggregation, FitOptions, LabeledEmbedding,
    WeightSign,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// 1
fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1001);
    let per_kind = 30;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for kind in KINDS {
        for _ in 0..per_kind {
            let inst = random_instance(&mut r, kind);
            worst = worst.max(fd_relative_error(&inst, 1e-5));
            count += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        count >= 100 && worst < 1e-5 && secs < 60.0,
        format!("{count} instances, worst relative error {worst:.2e} (< 1e-5), {secs:.2}s (< 60s)"),
    )
}

// 2
fn reduction_to_nt_xent() -> Outcome {
    let mut r = rng(1002);
    let mut worst: f64 = 0.0;
    let trials = 200;
    for _ in 0..trials {
        let parents = r.random_range(1..=8);
        let d = r.random_range(2..=8);
        let c_main = r.random_range(1..=4);
        let batch = random_batch(&mut r, parents, c_main, None);
        let z = EmbeddingMatrix::from_rows(&random_rows(&mut r, 2 * parents, d)).unwrap();
        let tau: f64 = r.random_range(0.05..2.0);
        let cfg = MclConfig {
            tau,
            alpha: 1.0 / tau,
            beta: 1.0 / tau,
            lambda: 0.0,
            batch_size: parents,
            ..MclConfig::default()
        };
        let m = mcl_loss(&z, &batch, &cfg, false).unwrap().total;
        let n = nt_xent_loss(&cosine_similarity(&z).unwrap(), tau).unwrap().total;
        worst = worst.max(rel(m, n));
    }
    outcome(worst <= 1e-12, format!("{trials} instances, worst relative gap {worst:.2e} (<= 1e-12)"))
}

/// Views 0/1 and 2/3 share a label; 4..8 carry another. View 2 coincides
/// with view 0 and everything of the other label points away.
fn attraction_counterexample() -> (f64, f64, f64) {
    let tau = 0.2;
    let batch = AugmentedBatch::from_labels(vec![0, 0, 0, 0, 1, 1, 1, 1], None).unwrap();
    let (c, s) = (0.3f64, (1.0f64 - 0.09).sqrt());
    let rows = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![c, s, 0.0],
        vec![-1.0, 0.0, 0.0],
        vec![-1.0, 0.0, 0.0],
        vec![-1.0, 0.0, 0.0],
        vec![-1.0, 0.0, 0.0],
    ];
    let z = EmbeddingMatrix::from_rows(&rows).unwrap();
    let sim = cosine_similarity(&z).unwrap();
    let cfg = MclConfig {
        tau,
        alpha: 1.0 / tau,
        batch_size: 4,
        ..MclConfig::default()
    };
    let mask = build_ccm(&batch, &cfg).unwrap();
    let g = spa_similarity_gradient(&sim, &mask, &batch, tau).unwrap();
    // positives of view 0 are {2, 3}: bound 1/(tau * 2)
    let bound = 1.0 / (tau * 2.0);
    (cfg.alpha, bound, g[(0, 2)])
}

// 3
fn attraction_property() -> Outcome {
    let mut r = rng(1003);
    let trials = 200;
    let mut checked = 0usize;
    let mut violations = 0usize;
    for t in 0..trials {
        let parents = r.random_range(2..=8);
        let aux = t % 2 == 1;
        let c_main = r.random_range(1..=3);
        let c_aux = r.random_range(1..=3);
        let batch = random_batch(&mut r, parents, c_main, aux.then_some(c_aux));
        let d = r.random_range(2..=6);
        let z = EmbeddingMatrix::from_rows(&random_rows(&mut r, 2 * parents, d)).unwrap();
        let sim = cosine_similarity(&z).unwrap();
        let tau: f64 = r.random_range(0.1..1.0);
        let sizes: Vec<usize> = (0..batch.len())
            .map(|q| batch.positive_batch_composite(q).unwrap().len())
            .collect();
        let largest = sizes.iter().copied().max().unwrap();
        if largest == 0 {
            continue;
        }
        let alpha = r.random_range(0.01..0.99) / (tau * largest as f64);
        let cfg = MclConfig {
            tau,
            alpha,
            beta: r.random_range(alpha..=1.0 / tau),
            ..MclConfig::default()
        };
        let mask = if aux {
            build_ccm_aux(&batch, &cfg).unwrap()
        } else {
            build_ccm(&batch, &cfg).unwrap()
        };
        let g = spa_similarity_gradient(&sim, &mask, &batch, tau).unwrap();
        for q in 0..batch.len() {
            for rr in batch.positive_batch_composite(q).unwrap() {
                checked += 1;
                if !(g[(q, rr)] < 0.0) {
                    violations += 1;
                }
            }
        }
    }
    let (alpha, bound, value) = attraction_counterexample();
    outcome(
        violations == 0 && checked > 0 && value > 0.0 && alpha > bound,
        format!(
            "{checked} positive pairs over {trials} instances, {violations} non-negative terms; \
             alpha {alpha} above bound {bound} gives term {value:.4e} > 0"
        ),
    )
}

// 4
fn validator_bound() -> Outcome {
    let cfg = MclConfig::default();
    let n = cfg.batch_size as f64;
    let c = (cfg.c_main * cfg.c_aux) as f64;
    let report = validate_hparams(&cfg, 2.0 * n / c);
    let in_range = (0.0976..=0.0977).contains(&report.attraction_bound);
    outcome(
        in_range && report.overall_ok && c == 40.0,
        format!(
            "tau={}, N={}, C={c}: attraction bound {:.8} in [0.0976, 0.0977], overall_ok={}",
            cfg.tau, cfg.batch_size, report.attraction_bound, report.overall_ok
        ),
    )
}

fn brute_auroc(s: &[ScoredSample]) -> f64 {
    let mut doubled = 0u64;
    let n_ind = s.iter().filter(|x| x.is_ind).count() as u64;
    let n_ood = s.len() as u64 - n_ind;
    for a in s.iter().filter(|x| x.is_ind) {
        for b in s.iter().filter(|x| !x.is_ind) {
            doubled += if a.confidence > b.confidence {
                2
            } else if a.confidence == b.confidence {
                1
            } else {
                0
            };
        }
    }
    doubled as f64 / (2 * n_ind * n_ood) as f64
}

fn distinct_thresholds(s: &[ScoredSample], descending: bool) -> Vec<f64> {
    let mut t: Vec<f64> = s.iter().map(|x| x.confidence).collect();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup();
    if descending {
        t.reverse();
    }
    t
}

fn brute_fpr95(s: &[ScoredSample]) -> f64 {
    let n_ind = s.iter().filter(|x| x.is_ind).count();
    let n_ood = s.len() - n_ind;
    for t in distinct_thresholds(s, true) {
        let tp = s.iter().filter(|x| x.is_ind && x.confidence >= t).count();
        if tp as f64 / n_ind as f64 >= 0.95 {
            let fp = s.iter().filter(|x| !x.is_ind && x.confidence >= t).count();
            return fp as f64 / n_ood as f64;
        }
    }
    unreachable!()
}

fn brute_aupr(s: &[ScoredSample], positive: Positive) -> f64 {
    let is_pos = |x: &ScoredSample| x.is_ind == (positive == Positive::Ind);
    let selected = |x: &ScoredSample, t: f64| match positive {
        Positive::Ind => x.confidence >= t,
        Positive::Ood => x.confidence <= t,
    };
    let n_pos = s.iter().filter(|x| is_pos(x)).count();
    let mut prev_tp = 0usize;
    let mut ap = 0.0;
    for t in distinct_thresholds(s, positive == Positive::Ind) {
        let tp = s.iter().filter(|x| is_pos(x) && selected(x, t)).count();
        let fp = s.iter().filter(|x| !is_pos(x) && selected(x, t)).count();
        if tp > prev_tp {
            ap += ((tp - prev_tp) as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    ap
}

// 5
fn metric_oracles() -> Outcome {
    let mut r = rng(1005);
    let trials = 1000;
    let mut mismatches = 0;
    for _ in 0..trials {
        let n = r.random_range(2..=50);
        let levels = r.random_range(1..=12);
        let mut s: Vec<ScoredSample> = (0..n)
            .map(|_| ScoredSample {
                confidence: r.random_range(0..levels) as f64 / 4.0 - 1.0,
                is_ind: r.random_bool(0.6),
            })
            .collect();
        s[0].is_ind = true;
        s[1].is_ind = false;
        let ok = auroc(&s).unwrap() == brute_auroc(&s)
            && fpr_at_tpr(&s, 0.95).unwrap() == brute_fpr95(&s)
            && aupr(&s, Positive::Ind).unwrap() == brute_aupr(&s, Positive::Ind)
            && aupr(&s, Positive::Ood).unwrap() == brute_aupr(&s, Positive::Ood);
        if !ok {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{trials} random inputs (<= 50 samples, with ties), {mismatches} mismatches"),
    )
}

// 6
fn sei_degeneracy() -> Outcome {
    let mut r = rng(1006);
    let banks = 150;
    let mut failures = 0;
    for _ in 0..banks {
        let d = r.random_range(2..=5);
        let c_main = r.random_range(2..=5);
        let n_aux = if r.random_bool(0.5) { 4 } else { 8 };
        let mut base = Vec::new();
        for c in 0..c_main {
            for _ in 0..(d + 3) {
                let z: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0) + c as f64).collect();
                base.push((z, c));
            }
        }
        // identical samples under every aux label give identical cells
        let samples: Vec<LabeledEmbedding> = (0..n_aux)
            .flat_map(|m| {
                base.iter().map(move |(z, c)| LabeledEmbedding {
                    z: z.clone(),
                    main: *c,
                    aux: m,
                })
            })
            .collect();
        let bank = fit_gaussians(&samples, &FitOptions::default()).unwrap();
        let plain_bank = fit_gaussians(
            &base
                .iter()
                .map(|(z, c)| LabeledEmbedding {
                    z: z.clone(),
                    main: *c,
                    aux: 0,
                })
                .collect::<Vec<_>>(),
            &FitOptions::default(),
        )
        .unwrap();
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let (label, confidence) = predict(&x, &plain_bank).unwrap();
        let plain_scores = score_vector(&x, &plain_bank, 0).unwrap();
        let per_aux = vec![plain_scores.clone(); n_aux];
        let transforms = AugmentationFamily::identities(n_aux);
        for agg in [Aggregation::Avg, Aggregation::Max, Aggregation::WAvg] {
            for sign in [WeightSign::Literal, WeightSign::Magnitude] {
                let a = aggregate_scores(&per_aux, agg, sign).unwrap();
                let b = sei_predict(&x, &bank, &transforms, agg, sign, |v| v.to_vec()).unwrap();
                let exact = |o: &mclkit::scoring::SeiOutcome| {
                    o.label == label && o.confidence.to_bits() == confidence.to_bits() && o.aggregated == plain_scores
                };
                if !exact(&a) || !exact(&b) {
                    failures += 1;
                }
            }
        }
    }
    outcome(
        failures == 0,
        format!("{banks} random banks x 3 aggregations x 2 weight signs, {failures} non-identical"),
    )
}

// 7
fn ablation_directionality() -> Outcome {
    let start = Instant::now();
    let cfg = AblationConfig::default();
    let report = match run_ablation(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let c = &report.checks;
    let a = c.aux_sei_auroc_ge_plain == Some(true);
    let b = c.no_aux_sei_degrades == Some(true);
    let cc = c.aux_sei_auroc_ge_ce == Some(true);
    outcome(
        a && b && cc && secs < 600.0 && cfg.seeds >= 5,
        format!(
            "{} seeds, {}s: (a) aux SEI AUROC gain {:+.4}; (b) aux-free SEI accuracy drop {:.4} (>= 0.05); \
             (c) aux SEI vs cross-entropy AUROC {:+.4}",
            cfg.seeds,
            secs.round(),
            c.aux_sei_auroc_gain.unwrap_or(f64::NAN),
            c.no_aux_sei_accuracy_drop.unwrap_or(f64::NAN),
            c.aux_sei_vs_ce_auroc.unwrap_or(f64::NAN)
        ),
    )
}

// 8
fn ablate_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "seed = 3\n[train]\nepochs = 10\n[ablation]\nseeds = 2\n").unwrap();
    let run = |name: &str| -> Option<Vec<u8>> {
        let out = dir.path().join(name);
        let st = Command::new(env!("CARGO_BIN_EXE_mclkit"))
            .env_remove("MCLKIT_SEED")
            .env("RUST_LOG", "error")
            .args(["ablate", "-c"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .ok()?;
        st.status.success().then(|| std::fs::read(out.join("report.json")).ok())?
    };
    match (run("a"), run("b")) {
        (Some(a), Some(b)) => outcome(a == b, format!("two `ablate` runs, report.json {} bytes, identical={}", a.len(), a == b)),
        _ => outcome(false, "ablate did not complete".into()),
    }
}

// 9
fn supclr_cross_check() -> Outcome {
    let mut r = rng(1009);
    let trials = 200;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let parents = r.random_range(1..=8);
        let labels: Vec<usize> = (0..parents).collect();
        let batch = AugmentedBatch::from_parent_labels(&labels).unwrap();
        let d = r.random_range(2..=8);
        let z = EmbeddingMatrix::from_rows(&random_rows(&mut r, 2 * parents, d)).unwrap();
        let tau: f64 = r.random_range(0.05..2.0);
        let a = supclr_loss(&z, &batch, tau).unwrap().total;
        let b = nt_xent_loss(&cosine_similarity(&z).unwrap(), tau).unwrap().total;
        worst = worst.max(rel(a, b));
    }
    outcome(worst <= 1e-12, format!("{trials} instances, worst relative gap {worst:.2e} (<= 1e-12)"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient oracle", gradient_oracle),
        ("reduction to NT-Xent", reduction_to_nt_xent),
        ("attraction property", attraction_property),
        ("validator bound", validator_bound),
        ("metric oracles", metric_oracles),
        ("SEI degeneracy", sei_degeneracy),
        ("aux ablation directionality", ablation_directionality),
        ("ablate determinism", ablate_determinism),
        ("SupCLR cross-check", supclr_cross_check),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        println!("criterion {} [{}] {name}: {}", k + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += (!o.pass) as usize;
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
