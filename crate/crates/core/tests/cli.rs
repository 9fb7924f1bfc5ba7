use std::path::Path;
use std::process::Command;

fn mclkit() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mclkit"));
    c.env_remove("MCLKIT_SEED").env("RUST_LOG", "error");
    c
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"
[data]
n_classes = 4
anomaly_classes = [3]
samples_per_class = 40
test_per_class = 10
d_in = 6
[train]
epochs = 2
batch_size = 20
aux_mode = "labeled"
[train.mcl]
alpha = 0.1
[train.encoder]
hidden = [16, 16]
out_dim = 5
[eval]
mode = "sei4"
[ablation]
seeds = 1
"#;

#[test]
fn validate_hparams_exit_codes() {
    assert_eq!(mclkit().arg("validate-hparams").status().unwrap().code(), Some(0));
    let out = mclkit().args(["validate-hparams", "--alpha", "0.2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"attraction_ok\": false"));
}

#[test]
fn train_evaluate_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    let st = mclkit().args(["train", "-c"]).arg(&cfg).arg("--out").arg(&run).status().unwrap();
    assert_eq!(st.code(), Some(0));
    for f in ["model.json", "report.json", "metrics.csv", "scores.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let emb = dir.path().join("emb.csv");
    let st = mclkit()
        .args(["export-embeddings", "-c"])
        .arg(&cfg)
        .arg("--model")
        .arg(run.join("model.json"))
        .arg("--out")
        .arg(&emb)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let ev = dir.path().join("ev");
    let st = mclkit()
        .args(["evaluate", "-c"])
        .arg(&cfg)
        .arg("--embeddings")
        .arg(&emb)
        .arg("--out")
        .arg(&ev)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert_eq!(
        std::fs::read(ev.join("scores.csv")).unwrap(),
        std::fs::read(run.join("scores.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(ev.join("metrics.csv")).unwrap(),
        std::fs::read(run.join("metrics.csv")).unwrap()
    );
}

#[test]
fn invalid_hparams_stop_training_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("alpha = 0.1", "alpha = 2.0"));
    let out = dir.path().join("run");
    let st = mclkit().args(["train", "-c"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = mclkit()
        .args(["train", "--allow-invalid-hparams", "-c"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let report = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("outside the valid window"));
}

#[test]
fn non_finite_data_aborts_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    assert_eq!(
        mclkit().args(["gen-data", "-c"]).arg(&cfg).arg("--out").arg(&data).status().unwrap().code(),
        Some(0)
    );
    let train_csv = data.join("train.csv");
    let text = std::fs::read_to_string(&train_csv).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let first = lines[1].split_once(',').unwrap().1.to_string();
    lines[1] = format!("NaN,{first}");
    std::fs::write(&train_csv, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("run");
    let st = mclkit()
        .args(["train", "-c"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
    assert!(out.join("abort_snapshot.json").exists());
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let gen = |seed: Option<&str>, out: &Path| {
        let mut c = mclkit();
        if let Some(s) = seed {
            c.env("MCLKIT_SEED", s);
        }
        c.args(["gen-data", "-c"]).arg(&cfg).arg("--out").arg(out).status().unwrap()
    };
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(gen(None, &a).success());
    assert!(gen(Some("0"), &b).success());
    assert!(gen(Some("17"), &c).success());
    let read = |p: &Path| std::fs::read(p.join("train.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(gen(Some("x"), &c).code(), Some(2));
}

#[test]
fn sei_on_aux_free_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("aux_mode = \"labeled\"", "aux_mode = \"none\""));
    let out = dir.path().join("run");
    let st = mclkit().args(["train", "-c"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(2));
}
