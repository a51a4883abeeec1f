//! The iterative pseudo-labeling loop.
//!
//! Iteration q trains a fresh encoder on (augmented segment, pseudo-label)
//! pairs, picks the best-validation epoch, embeds every unaltered
//! utterance with the retained checkpoint and re-clusters the embeddings
//! into the labels for iteration q+1. The first labels come from
//! length-normalized i-vectors (or an existing encoder checkpoint).
//!
//! Workspace layout: `iter_{q}/` holds `labels.tsv` (inputs to iteration
//! q), `encoder.enc1`, `embeddings.iva1` and `record.json`; the i-vector
//! baseline lands in `baseline.json`; `curves.csv` and `summary.csv`
//! mirror the per-iteration trends and the final comparison row. Writes
//! are atomic, and a killed run resumes from the last completed
//! iteration.

use crate::augment::Augmenter;
use crate::cluster::{self, ClusterAssignment, ClusterMethod};
use crate::config::{ClusteringKind, InitialModel, RunConfig};
use crate::error::{Error, Result};
use crate::eval::TrialList;
use crate::pipeline;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Everything recorded about one completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// EER percent per named test trial list.
    pub eer: BTreeMap<String, f64>,
    /// Pseudo-label purity against ground truth (diagnostic only).
    pub purity: Option<f64>,
    pub nmi: Option<f64>,
    pub best_epoch: usize,
    pub num_clusters: usize,
    pub encoder_path: PathBuf,
    pub labels_path: PathBuf,
}

/// The i-vector (or initial-encoder) cosine baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub eer: BTreeMap<String, f64>,
    pub purity: Option<f64>,
    pub nmi: Option<f64>,
    pub num_clusters: usize,
}

/// Result of a full IPL run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub baseline: BaselineRecord,
    pub records: Vec<IterationRecord>,
}

impl RunOutcome {
    /// Lowest EER over iterations for one trial list.
    pub fn best_eer(&self, list: &str) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.eer.get(list).copied())
            .min_by(f64::total_cmp)
    }
}

fn iter_dir(workspace: &Path, q: usize) -> PathBuf {
    workspace.join(format!("iter_{q}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::numerical(format!("serialization failed: {e}")))?;
    crate::binio::atomic_write(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!(
        "corrupted workspace state in {}: {e}; delete the file (or the whole iter_* directory) to recompute it",
        path.display()
    )))
}

/// Clustering diagnostics against ground truth, when the corpus has it.
fn diagnostics(
    assignment: &ClusterAssignment,
    truth: &Option<BTreeMap<String, u32>>,
) -> (Option<f64>, Option<f64>) {
    match truth {
        Some(t) => match cluster::cluster_metrics(&assignment.labels, t) {
            Ok((p, n)) => (Some(p), Some(n)),
            Err(_) => (None, None),
        },
        None => (None, None),
    }
}

/// Produces the bootstrap pseudo-labels (iteration 1 inputs) plus the
/// baseline record, writing `ivectors.iva1` (or initial-encoder
/// embeddings), `iter_1/labels.tsv` and `baseline.json`.
pub fn bootstrap_labels(cfg: &RunConfig) -> Result<(ClusterAssignment, BaselineRecord)> {
    let workspace = cfg.workspace_dir();
    std::fs::create_dir_all(&workspace)?;
    let archive = match &cfg.ipl.initial_model {
        InitialModel::Ivector => {
            let out = workspace.join("ivectors.iva1");
            pipeline::stage_extract_ivectors(cfg, &out, true)?;
            out
        }
        InitialModel::Encoder(ckpt) => {
            let out = workspace.join("initial_embeddings.iva1");
            pipeline::stage_embed(cfg, &cfg.resolve(ckpt), &out)?;
            out
        }
    };
    let labels_path = iter_dir(&workspace, 1).join("labels.tsv");
    let assignment = pipeline::stage_cluster(cfg, &archive, 0, &labels_path)?;

    let manifest = crate::corpus::UtteranceManifest::load(&cfg.corpus_manifest())?;
    let truth = manifest.label_map();
    let (purity, nmi) = diagnostics(&assignment, &truth);
    let mut eer = BTreeMap::new();
    for (name, trials) in cfg.test_trials_paths() {
        let (e, _) = pipeline::stage_evaluate(&archive, &trials, None)?;
        eer.insert(name, e);
    }
    let baseline = BaselineRecord {
        eer,
        purity,
        nmi,
        num_clusters: assignment.num_clusters,
    };
    write_json(&workspace.join("baseline.json"), &baseline)?;
    Ok((assignment, baseline))
}

/// Runs one IPL iteration from the labels stored on disk: train a fresh
/// encoder, keep the best-validation epoch, embed the unaltered corpus
/// with the saved checkpoint, cluster for the next iteration, persist the
/// record.
pub fn run_iteration(
    cfg: &RunConfig,
    q: usize,
    augmenter: Option<&Augmenter>,
) -> Result<IterationRecord> {
    let workspace = cfg.workspace_dir();
    let dir = iter_dir(&workspace, q);
    let labels_path = dir.join("labels.tsv");
    if !labels_path.exists() {
        return Err(Error::MissingArtifact {
            what: format!("pseudo-labels {}", labels_path.display()),
            hint: "ipl-run (bootstrap)".into(),
        });
    }
    let method = match cfg.cluster.method {
        ClusteringKind::TwoStage => ClusterMethod::KmeansAhc,
        ClusteringKind::KmeansOnly => ClusterMethod::Kmeans,
    };
    let assignment = ClusterAssignment::load(&labels_path, method)?;
    let (manifest, frames) = pipeline::load_encoder_frames(cfg)?;
    let val_trials = TrialList::load(&cfg.val_trials_path())?;

    let encoder_path = dir.join("encoder.enc1");
    let outcome = pipeline::stage_train_encoder(
        cfg,
        &pipeline::EncoderTraining {
            manifest: &manifest,
            frames: &frames,
            assignment: &assignment,
            val_trials: &val_trials,
            augmenter,
            iteration: q,
        },
        &encoder_path,
    )?;

    // embed with the saved checkpoint so a stage-composed pipeline is
    // bit-identical, then produce the next iteration's labels
    let embeddings_path = dir.join("embeddings.iva1");
    pipeline::stage_embed(cfg, &encoder_path, &embeddings_path)?;
    let next_labels = iter_dir(&workspace, q + 1).join("labels.tsv");
    pipeline::stage_cluster(cfg, &embeddings_path, q, &next_labels)?;

    let mut eer = BTreeMap::new();
    for (name, trials) in cfg.test_trials_paths() {
        let (e, _) = pipeline::stage_evaluate(&embeddings_path, &trials, None)?;
        eer.insert(name, e);
    }
    let truth = crate::corpus::UtteranceManifest::load(&cfg.corpus_manifest())?.label_map();
    let (purity, nmi) = diagnostics(&assignment, &truth);
    for (name, e) in &eer {
        if *e > 50.0 {
            log::warn!("iteration {q}: EER {e:.2}% on {name} exceeds 50% (inverted scores)");
        }
    }
    // paths are stored relative to the workspace so identical runs in
    // different roots produce identical artifacts
    let record = IterationRecord {
        iteration: q,
        eer,
        purity,
        nmi,
        best_epoch: outcome.best_epoch,
        num_clusters: assignment.num_clusters,
        encoder_path: PathBuf::from(format!("iter_{q}/encoder.enc1")),
        labels_path: PathBuf::from(format!("iter_{q}/labels.tsv")),
    };
    write_json(&dir.join("record.json"), &record)?;
    Ok(record)
}

/// Runs (or resumes) the configured number of IPL iterations and writes
/// the trend curves and the summary row.
pub fn run_ipl(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let workspace = cfg.workspace_dir();
    std::fs::create_dir_all(&workspace)?;

    // bootstrap unless iteration 1 labels already exist
    let baseline_path = workspace.join("baseline.json");
    let first_labels = iter_dir(&workspace, 1).join("labels.tsv");
    let baseline: BaselineRecord = if first_labels.exists() && baseline_path.exists() {
        read_json(&baseline_path)?
    } else {
        bootstrap_labels(cfg)?.1
    };

    let augmenter = if cfg.ipl.augment_enabled {
        let mut acfg = cfg.augment.clone();
        acfg.noise_dir = acfg.noise_dir.map(|p| cfg.resolve(&p));
        acfg.rir_dir = acfg.rir_dir.map(|p| cfg.resolve(&p));
        Some(Augmenter::new(acfg)?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(cfg.ipl.num_iterations);
    for q in 1..=cfg.ipl.num_iterations {
        let record_path = iter_dir(&workspace, q).join("record.json");
        if record_path.exists() {
            let record: IterationRecord = read_json(&record_path)?;
            let next_labels = iter_dir(&workspace, q + 1).join("labels.tsv");
            if !next_labels.exists() {
                return Err(Error::Validation(format!(
                    "corrupted workspace: {} exists but {} is missing; delete iter_{q} and re-run",
                    record_path.display(),
                    next_labels.display()
                )));
            }
            log::info!("iteration {q} already complete; resuming past it");
            records.push(record);
            continue;
        }
        log::info!("starting iteration {q}");
        records.push(run_iteration(cfg, q, augmenter.as_ref())?);
    }
    let outcome = RunOutcome { baseline, records };
    write_curves(cfg, &workspace, &outcome)?;
    write_summary(cfg, &workspace, &outcome)?;
    Ok(outcome)
}

fn list_names(cfg: &RunConfig) -> Vec<String> {
    cfg.test_trials_paths().into_iter().map(|(n, _)| n).collect()
}

/// Per-iteration EER curves, iteration 0 being the baseline.
fn write_curves(cfg: &RunConfig, workspace: &Path, outcome: &RunOutcome) -> Result<()> {
    let mut out = String::from("iteration,list,eer_percent\n");
    for name in list_names(cfg) {
        if let Some(e) = outcome.baseline.eer.get(&name) {
            writeln!(out, "0,{name},{e}").expect("string write");
        }
        for r in &outcome.records {
            if let Some(e) = r.eer.get(&name) {
                writeln!(out, "{},{name},{e}", r.iteration).expect("string write");
            }
        }
    }
    crate::binio::atomic_write(&workspace.join("curves.csv"), out.as_bytes())
}

pub(crate) fn summary_header(cfg: &RunConfig) -> String {
    let mut header = String::from("setup,init_model,encoder,clustering,aug,num_clusters");
    for name in list_names(cfg) {
        write!(header, ",eer_{name}").expect("string write");
    }
    header.push_str(",best_iteration\n");
    header
}

pub(crate) fn summary_row(cfg: &RunConfig, setup: &str, outcome: &RunOutcome) -> String {
    let names = list_names(cfg);
    let primary = names.first().cloned().unwrap_or_default();
    let best_iter = outcome
        .records
        .iter()
        .min_by(|a, b| {
            let ea = a.eer.get(&primary).copied().unwrap_or(f64::INFINITY);
            let eb = b.eer.get(&primary).copied().unwrap_or(f64::INFINITY);
            ea.total_cmp(&eb)
        })
        .map_or(0, |r| r.iteration);
    let mut row = format!(
        "{setup},{},conv{}x{},{},{},{}",
        cfg.ipl.initial_model,
        cfg.encoder.hidden_channels,
        cfg.encoder.dilations.len(),
        cfg.cluster.method,
        if cfg.ipl.augment_enabled { "on" } else { "off" },
        cfg.cluster.k_final
    );
    for name in &names {
        let best = outcome.best_eer(name).unwrap_or(f64::NAN);
        write!(row, ",{best}").expect("string write");
    }
    writeln!(row, ",{best_iter}").expect("string write");
    row
}

/// One-row summary table with the best-EER of the run.
fn write_summary(cfg: &RunConfig, workspace: &Path, outcome: &RunOutcome) -> Result<()> {
    let mut out = summary_header(cfg);
    out.push_str(&summary_row(cfg, "base", outcome));
    crate::binio::atomic_write(&workspace.join("summary.csv"), out.as_bytes())
}

/// A single ablation axis with the values to sweep.
#[derive(Debug, Clone)]
pub enum AblationAxis {
    /// Final cluster counts (k_coarse rescales to keep the ratio).
    Clusters(Vec<usize>),
    Augment(Vec<bool>),
    Clustering(Vec<ClusteringKind>),
    /// Encoder hidden channel widths.
    EncoderSize(Vec<usize>),
    InitialModel(Vec<InitialModel>),
}

/// One configured cell of the ablation matrix.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub name: String,
    pub cfg: RunConfig,
}

/// Expands the cross-product of the axes over a base config. Each cell
/// gets its own workspace subdirectory.
pub fn ablation_cells(base: &RunConfig, axes: &[AblationAxis]) -> Vec<AblationCell> {
    let mut cells = vec![AblationCell {
        name: String::new(),
        cfg: base.clone(),
    }];
    for axis in axes {
        let mut next = Vec::new();
        for cell in &cells {
            match axis {
                AblationAxis::Clusters(values) => {
                    for &k in values {
                        let mut cfg = cell.cfg.clone();
                        let ratio =
                            base.cluster.k_coarse as f64 / base.cluster.k_final as f64;
                        cfg.cluster.k_final = k.max(1);
                        cfg.cluster.k_coarse = ((k as f64 * ratio).round() as usize).max(k);
                        next.push(AblationCell {
                            name: join_name(&cell.name, &format!("k{k}")),
                            cfg,
                        });
                    }
                }
                AblationAxis::Augment(values) => {
                    for &on in values {
                        let mut cfg = cell.cfg.clone();
                        cfg.ipl.augment_enabled = on;
                        let tag = if on { "aug-on" } else { "aug-off" };
                        next.push(AblationCell {
                            name: join_name(&cell.name, tag),
                            cfg,
                        });
                    }
                }
                AblationAxis::Clustering(values) => {
                    for &method in values {
                        let mut cfg = cell.cfg.clone();
                        cfg.cluster.method = method;
                        let tag = match method {
                            ClusteringKind::TwoStage => "two-stage",
                            ClusteringKind::KmeansOnly => "kmeans",
                        };
                        next.push(AblationCell {
                            name: join_name(&cell.name, tag),
                            cfg,
                        });
                    }
                }
                AblationAxis::EncoderSize(values) => {
                    for &h in values {
                        let mut cfg = cell.cfg.clone();
                        cfg.encoder.hidden_channels = h.max(1);
                        next.push(AblationCell {
                            name: join_name(&cell.name, &format!("enc{h}")),
                            cfg,
                        });
                    }
                }
                AblationAxis::InitialModel(values) => {
                    for init in values {
                        let mut cfg = cell.cfg.clone();
                        cfg.ipl.initial_model = init.clone();
                        let tag = match init {
                            InitialModel::Ivector => "init-ivector".to_string(),
                            InitialModel::Encoder(_) => "init-encoder".to_string(),
                        };
                        next.push(AblationCell {
                            name: join_name(&cell.name, &tag),
                            cfg,
                        });
                    }
                }
            }
        }
        cells = next;
    }
    for (i, cell) in cells.iter_mut().enumerate() {
        if cell.name.is_empty() {
            cell.name = "base".to_string();
        }
        cell.name = format!("a{:02}_{}", i + 1, cell.name);
        cell.cfg.paths.workspace_dir = base
            .paths
            .workspace_dir
            .join("ablate")
            .join(&cell.name);
    }
    cells
}

fn join_name(prefix: &str, tag: &str) -> String {
    if prefix.is_empty() {
        tag.to_string()
    } else {
        format!("{prefix}_{tag}")
    }
}

/// Runs every cell sequentially and writes the combined `matrix.csv`.
/// A failed cell is recorded and skipped; it does not abort the matrix.
pub fn ablation_matrix(base: &RunConfig, axes: &[AblationAxis]) -> Result<Vec<(String, Result<RunOutcome>)>> {
    let cells = ablation_cells(base, axes);
    let mut results = Vec::with_capacity(cells.len());
    let mut table = summary_header(base);
    for cell in cells {
        log::info!("ablation cell {}", cell.name);
        let outcome = run_ipl(&cell.cfg);
        match &outcome {
            Ok(o) => table.push_str(&summary_row(&cell.cfg, &cell.name, o)),
            Err(e) => {
                log::warn!("cell {} failed: {e}", cell.name);
                table.push_str(&format!("{},failed: {e}\n", cell.name));
            }
        }
        results.push((cell.name, outcome));
    }
    let workspace = base.workspace_dir();
    std::fs::create_dir_all(&workspace)?;
    crate::binio::atomic_write(&workspace.join("matrix.csv"), table.as_bytes())?;
    Ok(results)
}
