use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde::Serialize;

use mclkit::batching::AuxMode;
use mclkit::harness::ablation::run_ablation;
use mclkit::harness::config::ExperimentConfig;
use mclkit::harness::data::{generate_synthetic, SplitData};
use mclkit::harness::evaluate::{
    build_embedding_table, evaluate, evaluate_embeddings, write_scores_csv, EmbeddingTable, EvalMode, EvalSection,
};
use mclkit::harness::train::{train, TrainedModel};
use mclkit::masking::{validate_hparams, MclConfig};
use mclkit::scoring::Aggregation;
use mclkit::{MclError, Result};

#[derive(Parser)]
#[command(name = "mclkit", version, about = "Masked contrastive learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration. Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArg {
    /// Directory with train.csv, ind_test.csv and ood_test.csv. Synthetic
    /// data from the config is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark as CSV files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the loss hyperparameters against the gradient bounds.
    ValidateHparams {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        c_main: Option<usize>,
        #[arg(long)]
        c_aux: Option<usize>,
        /// Expected positives per query; defaults to 2N/C.
        #[arg(long)]
        expected_positives: Option<f64>,
        /// Count aux classes into C. Defaults to on without a config file
        /// and to `aux_mode = "labeled"` with one.
        #[arg(long)]
        aux: Option<bool>,
    },
    /// Train a model, evaluate it and write model.json, report.json,
    /// metrics.csv and scores.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Train even if the hyperparameters fail validation.
        #[arg(long)]
        allow_invalid_hparams: bool,
    },
    /// Evaluate a saved model or an exported embedding table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, required_unless_present = "embeddings")]
        model: Option<PathBuf>,
        /// Evaluate from an embeddings.csv instead of a model.
        #[arg(long, conflicts_with = "model")]
        embeddings: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EvalMode>,
        #[arg(long, value_parser = parse_agg)]
        agg: Option<Aggregation>,
        #[arg(long)]
        allow_aux_free: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the aux ablation suite and write report.json and metrics.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the embedding table used by an evaluation.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EvalMode>,
        #[arg(long)]
        allow_aux_free: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown mode `{s}`"))
}

fn parse_agg(s: &str) -> std::result::Result<Aggregation, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown aggregation `{s}`"))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.resolve()
}

fn load_data(cfg: &ExperimentConfig, arg: &DataArg) -> Result<SplitData> {
    match &arg.data {
        Some(dir) => SplitData::load(dir),
        None => generate_synthetic(&cfg.data),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

fn write_sections(out: &Path, sections: &[EvalSection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(out.join("metrics.csv"))?);
    w.write_record(["mode", "agg", "score", "accuracy", "auroc", "fpr_at_95", "aupr_ind", "aupr_ood"])?;
    for e in sections {
        let agg = if e.n_aux == 1 { "none" } else { e.agg.name() };
        w.write_record([
            e.mode.name().to_string(),
            agg.to_string(),
            serde_json::to_value(e.score)?.as_str().unwrap_or_default().to_string(),
            e.accuracy.to_string(),
            e.metrics.auroc.to_string(),
            e.metrics.fpr_at_95.to_string(),
            e.metrics.aupr_ind.to_string(),
            e.metrics.aupr_ood.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let data = generate_synthetic(&cfg.data)?;
            data.save(&out)?;
            info!(
                "wrote {} train, {} IND test, {} OOD test items to {}",
                data.train.len(),
                data.ind_test.len(),
                data.ood_test.len(),
                out.display()
            );
        }
        Command::ValidateHparams {
            common,
            tau,
            alpha,
            beta,
            lambda,
            batch_size,
            c_main,
            c_aux,
            expected_positives,
            aux,
        } => {
            let (base, aux) = match &common.config {
                Some(_) => {
                    let cfg = load_config(&common)?;
                    let c_main = cfg.data.n_classes - cfg.data.anomaly_classes.len();
                    let labeled = cfg.train.aux_mode == AuxMode::Labeled;
                    (cfg.train.resolved_mcl(c_main), aux.unwrap_or(labeled))
                }
                None => (MclConfig::default(), aux.unwrap_or(true)),
            };
            let mcl = MclConfig {
                tau: tau.unwrap_or(base.tau),
                alpha: alpha.unwrap_or(base.alpha),
                beta: beta.unwrap_or(base.beta),
                lambda: lambda.unwrap_or(base.lambda),
                batch_size: batch_size.unwrap_or(base.batch_size),
                c_main: c_main.unwrap_or(base.c_main),
                c_aux: c_aux.unwrap_or(base.c_aux),
            };
            mcl.validate(aux)?;
            let report = validate_hparams(&mcl, expected_positives.unwrap_or(mcl.default_expected_positives(aux)));
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.overall_ok {
                return Err(MclError::InvalidConfig("hyperparameters fail validation".into()));
            }
        }
        Command::Train {
            common,
            data,
            out,
            allow_invalid_hparams,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.train.allow_invalid_hparams |= allow_invalid_hparams;
            let split = load_data(&cfg, &data)?;
            std::fs::create_dir_all(&out)?;
            let (model, mut report) = match train(&cfg.train, &split.train) {
                Err(e @ MclError::NumericalAbort { .. }) => {
                    if let MclError::NumericalAbort { snapshot, .. } = &e {
                        std::fs::write(out.join("abort_snapshot.json"), snapshot)?;
                    }
                    return Err(e);
                }
                r => r?,
            };
            let (section, scores) = evaluate(&model, &split, &cfg.eval)?;
            report.evaluations.push(section);
            write_json(&out.join("model.json"), &model)?;
            write_json(&out.join("report.json"), &report)?;
            write_sections(&out, &report.evaluations)?;
            write_scores_csv(&scores, BufWriter::new(File::create(out.join("scores.csv"))?))?;
            info!("model and report written to {}", out.display());
        }
        Command::Evaluate {
            common,
            data,
            model,
            embeddings,
            mode,
            agg,
            allow_aux_free,
            out,
        } => {
            let cfg = load_config(&common)?;
            let mut ec = cfg.eval.clone();
            ec.mode = mode.unwrap_or(ec.mode);
            ec.agg = agg.unwrap_or(ec.agg);
            ec.allow_aux_free |= allow_aux_free;
            let (section, scores) = match (model, embeddings) {
                (_, Some(path)) => {
                    let table = EmbeddingTable::read_csv(File::open(path)?)?;
                    evaluate_embeddings(&table, &ec)?
                }
                (Some(path), None) => {
                    let model = load_model(&path)?;
                    evaluate(&model, &load_data(&cfg, &data)?, &ec)?
                }
                (None, None) => unreachable!("clap requires one of the sources"),
            };
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("report.json"), &vec![section.clone()])?;
            write_sections(&out, &[section])?;
            write_scores_csv(&scores, BufWriter::new(File::create(out.join("scores.csv"))?))?;
        }
        Command::Ablate { common, out } => {
            let cfg = load_config(&common)?;
            let report = run_ablation(&cfg.ablation_config())?;
            std::fs::create_dir_all(&out)?;
            let mut text = report.to_json()?;
            text.push('\n');
            std::fs::write(out.join("report.json"), text)?;
            report.write_metrics_csv(File::create(out.join("metrics.csv"))?)?;
            println!("{}", serde_json::to_string_pretty(&report.checks)?);
        }
        Command::ExportEmbeddings {
            common,
            data,
            model,
            mode,
            allow_aux_free,
            out,
        } => {
            let cfg = load_config(&common)?;
            let mut ec = cfg.eval.clone();
            ec.mode = mode.unwrap_or(ec.mode);
            ec.allow_aux_free |= allow_aux_free;
            let model = load_model(&model)?;
            let table = build_embedding_table(&model, &load_data(&cfg, &data)?, &ec)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            table.write_csv(BufWriter::new(File::create(&out)?))?;
        }
    }
    Ok(())
}

fn exit_code(e: &MclError) -> u8 {
    match e {
        MclError::InvalidConfig(_) | MclError::Toml(_) => 2,
        MclError::NumericalAbort { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                MclError::NumericalAbort { epoch, step, reason, .. } => {
                    error!("numerical abort at epoch {epoch}, step {step}: {reason}")
                }
                other => error!("{other}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
