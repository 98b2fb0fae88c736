use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdrisk::checkpoint::{load_checkpoint_for, save_checkpoint};
use cdrisk::error::{Error, Result};
use cdrisk::explain::{top_k, write_importance_csv, ImportanceOptions, DEFAULT_BUDGET};
use cdrisk::ingest::{clean_dataset, cohort_prevalence, read_clean_csv, split_dataset, write_clean_csv, CleanRecord};
use cdrisk::model::ModelConfig;
use cdrisk::schema::{load_codebook, FeatureSchema};
use cdrisk::server::{parse_answers, serve};
use cdrisk::service::{
    checkpoint_path, importance_path, model_importance, Engine, RequestError, DEFAULT_CLUSTERS, DEFAULT_EXPLAIN_BUDGET,
};
use cdrisk::synth::{generate, load_plants};
use cdrisk::trainer::{evaluate, train, Design, TrainConfig};

#[derive(Parser)]
#[command(name = "cdrisk", version, about = "Chronic-disease risk models from survey answers")]
struct Cli {
    /// Codebook JSON; defaults to the built-in BRFSS 2023 codebook.
    #[arg(long, global = true)]
    codebook: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean a raw survey CSV into model-ready records.
    Clean {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON row counts by rejection reason and field.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train one disease model (or every disease with `--disease all`).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        disease: String,
        /// Checkpoint path, or a directory when training all diseases.
        #[arg(long)]
        out: PathBuf,
        /// Training report JSON (defaults to <out>.report.json).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 3)]
        blocks: usize,
        /// Train with unit class weights.
        #[arg(long)]
        unweighted: bool,
    },
    /// Accuracy and recall of a checkpoint on the held-out split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split seed; use the training seed to recover the held-out rows.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score every record instead of the held-out split.
        #[arg(long)]
        all: bool,
    },
    /// Local attribution for one answer sheet (JSON object of raw answers).
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        record: PathBuf,
        /// Clean CSV to build the k-means background from; defaults to the training mean.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CLUSTERS)]
        clusters: usize,
        #[arg(long, default_value_t = DEFAULT_EXPLAIN_BUDGET)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank features by mean |SHAP| over a sample of held-out records.
    Importance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 500)]
        sample: usize,
        /// Split, clustering and sampling seed; use the training seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_CLUSTERS)]
        clusters: usize,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        /// Ranked CSV (defaults to <DISEASE>.importance.csv next to the model).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic clean records with planted effects.
    Generate {
        #[arg(long)]
        n: usize,
        /// JSON array of plant specs.
        #[arg(long)]
        plants: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Risk scores for one answer sheet from every checkpoint in a directory.
    Predict {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        record: PathBuf,
        /// Also write `{"risks": {...}}` at full precision.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Disease prevalence within each group of a categorical feature.
    Prevalence {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        group: String,
        #[arg(long)]
        disease: String,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CLUSTERS)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_internal() { 2 } else { 1 }, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn user(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn request_failure(e: RequestError) -> Failure {
    match e {
        RequestError::Rejected(r) => {
            let fields: Vec<String> = r.iter().map(|x| format!("{} ({})", x.feature_id, x.reason)).collect();
            user(format!("record failed cleaning: {}", fields.join(", ")))
        }
        RequestError::UnknownDisease(d) => user(format!("no model for {d}")),
        RequestError::Invalid(m) => user(m),
        RequestError::Internal(e) => e.into(),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn read_records(path: &Path, schema: &FeatureSchema) -> Result<Vec<CleanRecord>> {
    read_clean_csv(BufReader::new(File::open(path)?), schema)
}

fn read_answers(path: &Path) -> std::result::Result<cdrisk::ingest::RawRecord, Failure> {
    let bytes = std::fs::read(path).map_err(|e| user(format!("{}: {e}", path.display())))?;
    parse_answers(&bytes).map_err(|m| user(format!("{}: {m}", path.display())))
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let schema = match &cli.codebook {
        Some(p) => load_codebook(p)?,
        None => FeatureSchema::builtin(),
    };
    match cli.command {
        Command::Clean { input, out, report } => {
            let (records, rep) = clean_dataset(BufReader::new(File::open(&input)?), &schema)?;
            write_clean_csv(BufWriter::new(File::create(&out)?), &schema, &records)?;
            if let Some(path) = report {
                write_json(&path, &rep)?;
            }
            println!("{} rows in, {} accepted, {} rejected", rep.total_in, rep.accepted, rep.rejected_total());
            for (reason, n) in &rep.rejected {
                println!("  {reason}: {n}");
            }
        }
        Command::Train { data, disease, out, report, seed, epochs, batch_size, lr, hidden, blocks, unweighted } => {
            let records = read_records(&data, &schema)?;
            let model_cfg = ModelConfig { hidden_dim: hidden, n_blocks: blocks, seed, ..Default::default() };
            let train_cfg =
                TrainConfig { epochs, batch_size, lr0: lr, seed, class_weighting: !unweighted, ..Default::default() };
            let targets: Vec<String> = if disease == "all" {
                std::fs::create_dir_all(&out)?;
                schema.label_ids().into_iter().map(String::from).collect()
            } else {
                schema.require_label(&disease)?;
                vec![disease]
            };
            for d in &targets {
                let path = if targets.len() > 1 { checkpoint_path(&out, d) } else { out.clone() };
                let (model, rep) = train(&records, &schema, d, &model_cfg, &train_cfg)?;
                save_checkpoint(&model, &path)?;
                let report_path = match (&report, targets.len()) {
                    (Some(p), 1) => p.clone(),
                    _ => path.with_extension("report.json"),
                };
                write_json(&report_path, &rep)?;
                println!(
                    "{d}: best epoch {} (test loss {:.4}), accuracy {:.2}%, recall {} -> {}",
                    rep.best_epoch + 1,
                    rep.best_test_loss,
                    100.0 * rep.test_metrics.accuracy,
                    rep.test_metrics.recall_display(),
                    path.display()
                );
            }
        }
        Command::Evaluate { model, data, seed, all } => {
            let model = load_checkpoint_for(&model, &schema)?;
            let records = read_records(&data, &schema)?;
            let label = schema.require_label(&model.disease)?;
            let idx: Vec<usize> = if all {
                (0..records.len()).collect()
            } else {
                let labels: Vec<u8> = records.iter().map(|r| r.y[label]).collect();
                split_dataset(records.len(), &labels, seed)?.test
            };
            let design = Design::new(&records, label, &model.norm);
            let m = evaluate(&model, &design, &idx)?;
            println!("{}", serde_json::to_string_pretty(&m).map_err(Error::from)?);
        }
        Command::Explain { model, record, data, clusters, budget, seed, out } => {
            let model = load_checkpoint_for(&model, &schema)?;
            let bg = match &data {
                Some(p) => Some(Engine::background_from_csv(p, &schema, clusters, seed)?),
                None => None,
            };
            let disease = model.disease.clone();
            let engine = Engine::new(schema, vec![model], bg.as_ref())?;
            let raw = read_answers(&record)?;
            let ex = engine.explain(&raw, &disease, budget).map_err(request_failure)?;
            match out {
                Some(p) => write_json(&p, &ex)?,
                None => println!("{}", serde_json::to_string_pretty(&ex).map_err(Error::from)?),
            }
        }
        Command::Importance { model: model_path, data, sample, seed, exclude, k, clusters, budget, out } => {
            let model = load_checkpoint_for(&model_path, &schema)?;
            let records = read_records(&data, &schema)?;
            let opts = ImportanceOptions { sample_size: sample, seed, budget };
            let gi = model_importance(&model, &records, &schema, clusters, &opts)?;
            let exclude: Vec<&str> = exclude.iter().map(String::as_str).collect();
            let top = top_k(&gi, k, &exclude)?;
            let dir = model_path.parent().unwrap_or(Path::new("."));
            let out = out.unwrap_or_else(|| importance_path(dir, &model.disease));
            write_importance_csv(BufWriter::new(File::create(&out)?), &gi, &exclude)?;
            println!("{} top {k}: {}", model.disease, top.join(", "));
            println!("ranking written to {}", out.display());
        }
        Command::Generate { n, plants, seed, out } => {
            let plants = match plants {
                Some(p) => load_plants(p)?,
                None => Vec::new(),
            };
            let records = generate(&schema, n, &plants, seed)?;
            write_clean_csv(BufWriter::new(File::create(&out)?), &schema, &records)?;
            println!("{n} records written to {}", out.display());
        }
        Command::Predict { models, record, out } => {
            let engine = Engine::load_dir(&models, schema, None)?;
            let raw = read_answers(&record)?;
            let risks = engine.predict(&raw).map_err(request_failure)?;
            for (d, r) in &risks {
                println!("{d}\t{r:.6}");
            }
            if let Some(p) = out {
                let map: serde_json::Map<String, serde_json::Value> = risks.into_iter().map(|(d, r)| (d, r.into())).collect();
                write_json(&p, &serde_json::json!({ "risks": map }))?;
            }
        }
        Command::Prevalence { data, group, disease } => {
            let records = read_records(&data, &schema)?;
            for row in cohort_prevalence(&records, &schema, &group, &disease)? {
                let label = row.group_label.unwrap_or_default();
                println!("{}\t{label}\t{}/{}\t{:.2}%", row.group, row.positives, row.members, row.percent);
            }
        }
        Command::Serve { models, data, clusters, seed, host, port } => {
            let addr: SocketAddr =
                format!("{host}:{port}").parse().map_err(|e| user(format!("bad address {host}:{port}: {e}")))?;
            let bg = match &data {
                Some(p) => Some(Engine::background_from_csv(p, &schema, clusters, seed)?),
                None => None,
            };
            let engine = Engine::load_dir(&models, schema, bg.as_ref())?;
            println!("serving {} models on http://{addr}/api/v1", engine.diseases().len());
            let rt = tokio::runtime::Runtime::new().map_err(Error::from)?;
            rt.block_on(serve(addr, engine))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
