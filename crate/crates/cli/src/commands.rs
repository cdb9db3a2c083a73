use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use acl_core::affinity::AffinityModel;
use acl_core::data::{generate_synthetic, load_dataset, split_dataset, write_dataset, GenConfig, SkeletonDataset};
use acl_core::gradcheck::{run_grad_checks, TOLERANCE};
use acl_core::trainer::{
    embed_dataset, evaluate, load_checkpoint, read_metrics_jsonl, train_to_writer, write_checkpoint, Checkpoint,
    TrainConfig,
};
use acl_core::{AclError, ErrorKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::plot;
use crate::Split;

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }
}

impl From<AclError> for CliError {
    fn from(e: AclError) -> Self {
        let code = match e.kind() {
            ErrorKind::Validation => EXIT_VALIDATION,
            ErrorKind::Numerical => EXIT_NUMERICAL,
            ErrorKind::Io => EXIT_IO,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        AclError::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        AclError::from(e).into()
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Prints a line, treating a closed pipe (`acl eval ... | head`) as success.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError {
        code: EXIT_VALIDATION,
        message: format!("{}: {e}", path.display()),
    })
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg: GenConfig = read_config(config)?;
    let ds = generate_synthetic(&cfg)?;
    write_dataset(&ds, out)?;
    emit(&format!(
        "wrote {} samples of {} classes to {}",
        ds.len(),
        ds.class_count(),
        out.display()
    ))
}

/// Eval-split embeddings, consumed by `plot`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub labels: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
}

fn splits(ckpt: &Checkpoint, ds: &SkeletonDataset) -> Result<(SkeletonDataset, SkeletonDataset)> {
    Ok(split_dataset(ds, ckpt.config.train_fraction, ckpt.config.seed)?)
}

pub fn train(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: TrainConfig = read_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let ds = load_dataset(data)?;
    fs::create_dir_all(out)?;

    let mut sink = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let outcome = train_to_writer(&cfg, &ds, &mut sink)?;
    sink.flush()?;
    write_checkpoint(&outcome.checkpoint, &out.join("checkpoint"))?;

    let (_, eval_set) = splits(&outcome.checkpoint, &ds)?;
    let dump = EmbeddingDump {
        labels: eval_set.labels(),
        embeddings: embed_dataset(&outcome.checkpoint.params, &eval_set.graph, &eval_set)?,
    };
    write_pretty(&out.join("eval_embeddings.json"), &dump)?;

    if let Some(last) = outcome.history.last() {
        let eval = last.eval_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        emit(&format!(
            "epoch {}: total {:.4}, train acc {:.4}, eval acc {eval}, {} families",
            last.epoch, last.total, last.train_accuracy, last.family_count
        ))?;
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, split: Split) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    ckpt.check_compatible(&ds)?;
    let (train_set, eval_set) = splits(&ckpt, &ds)?;
    let part = match split {
        Split::Train => &train_set,
        Split::Eval => &eval_set,
    };
    let report = evaluate(&ckpt, part)?;
    emit(&serde_json::to_string_pretty(&report)?)
}

#[derive(Serialize)]
struct FamilyEntry {
    class: usize,
    members: Vec<usize>,
    size: usize,
    temperature: f64,
}

#[derive(Serialize)]
struct AffinityReport {
    k: usize,
    n_a: usize,
    threshold: f64,
    /// Family size N_w counts members only, never the anchor class.
    family_size_includes_anchor: bool,
    total_samples: u64,
    confusion: Vec<Vec<u64>>,
    neighbor_sets: Vec<Vec<usize>>,
    w: Vec<Vec<f64>>,
    families: Vec<FamilyEntry>,
}

fn affinity_report_of(ckpt: &Checkpoint, model: &AffinityModel) -> AffinityReport {
    let c = model.class_count();
    let dense = model.affinity().to_dense();
    AffinityReport {
        k: model.k(),
        n_a: model.n_a(),
        threshold: model.n_a() as f64 / model.k() as f64,
        family_size_includes_anchor: false,
        total_samples: ckpt.confusion.total_samples(),
        confusion: (0..c).map(|i| ckpt.confusion.row(i).to_vec()).collect(),
        neighbor_sets: model.neighbor_sets().to_vec(),
        w: dense.chunks_exact(c).map(<[f64]>::to_vec).collect(),
        families: (0..c)
            .map(|i| {
                let members = model.families().of(i).to_vec();
                FamilyEntry {
                    class: i,
                    size: members.len(),
                    members,
                    temperature: model.family_temperature(i),
                }
            })
            .collect(),
    }
}

pub fn affinity_report(checkpoint: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.affinity_model()?;
    let report = affinity_report_of(&ckpt, &model);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_pretty(out, &report)?;
    emit(&format!(
        "{} of {} classes have a motion family; report written to {}",
        model.families().non_empty_count(),
        model.class_count(),
        out.display()
    ))
}

pub fn grad_check(trials: usize, step: f64, seed: u64) -> Result<()> {
    let report = run_grad_checks(trials, step, seed)?;
    emit(&serde_json::to_string_pretty(&report)?)?;
    if !report.passes() {
        return Err(CliError::numerical(format!(
            "max relative error {:.3e} exceeds {TOLERANCE:e}",
            report.worst()
        )));
    }
    Ok(())
}

pub fn plot(metrics: &Path, out: &Path, embeddings: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let history = read_metrics_jsonl(&fs::read_to_string(metrics)?)?;
    if history.is_empty() {
        return Err(AclError::Invalid(format!("{} holds no metrics", metrics.display())).into());
    }
    fs::create_dir_all(out)?;
    let base = metrics.parent().unwrap_or(Path::new("."));
    let mut written = vec![];

    fs::write(out.join("loss.svg"), plot::loss_curves(&history))?;
    written.push("loss.svg");
    fs::write(out.join("accuracy.svg"), plot::accuracy_curves(&history))?;
    written.push("accuracy.svg");

    let emb_path = embeddings.map_or_else(|| base.join("eval_embeddings.json"), Path::to_path_buf);
    if embeddings.is_some() || emb_path.exists() {
        let dump: EmbeddingDump = read_config(&emb_path)?;
        fs::write(
            out.join("embeddings_pca.svg"),
            plot::pca_scatter(&dump.embeddings, &dump.labels)?,
        )?;
        written.push("embeddings_pca.svg");
    }

    let ckpt_path = checkpoint.map_or_else(|| base.join("checkpoint"), Path::to_path_buf);
    if checkpoint.is_some() || ckpt_path.exists() {
        let model = load_checkpoint(&ckpt_path)?.affinity_model()?;
        fs::write(out.join("affinity_heatmap.svg"), plot::affinity_heatmap(&model))?;
        written.push("affinity_heatmap.svg");
    }
    emit(&format!("wrote {} to {}", written.join(", "), out.display()))
}
