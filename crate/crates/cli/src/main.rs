//! Command-line surface over the pipeline: every stage individually plus
//! the full iterative pseudo-labeling run and the ablation matrix.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 runtime
//! error. `--json` emits machine-readable metrics on stdout.

use clap::{Parser, Subcommand};
use ipl_core::config::{ClusteringKind, InitialModel, RunConfig};
use ipl_core::error::{Error, Result};
use ipl_core::ipl::{self, AblationAxis};
use ipl_core::pipeline;
use serde_json::json;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "ipl",
    version,
    about = "Unsupervised speaker representation learning: i-vector bootstrap, clustering, encoder training, iterative pseudo-labeling"
)]
struct Cli {
    /// Run configuration file
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,

    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel stages (0 = all cores); results do
    /// not depend on this
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Emit machine-readable JSON metrics to stdout
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus, its manifest and trial lists
    SynthGen,
    /// Extract UBM-path and encoder-path features (waveform corpora)
    Features,
    /// Train the universal background model by EM
    TrainUbm,
    /// Train the total-variability model on Baum-Welch statistics
    TrainTv,
    /// Extract i-vectors for every utterance into an archive
    ExtractIvectors {
        /// Archive to write [default: <models_dir>/ivectors.iva1]
        #[arg(long)]
        output: Option<PathBuf>,
        /// Keep raw posterior means instead of length-normalizing
        #[arg(long, default_value_t = false)]
        raw: bool,
    },
    /// Cluster an embedding archive into pseudo-labels
    Cluster {
        /// Embedding archive [default: <models_dir>/ivectors.iva1]
        #[arg(long)]
        input: Option<PathBuf>,
        /// Iteration index for seed derivation (0 = bootstrap)
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        /// Assignment file to write [default: <workspace>/iter_<i+1>/labels.tsv]
        #[arg(long)]
        output: Option<PathBuf>,
        /// Override the final cluster count
        #[arg(long)]
        k_final: Option<usize>,
    },
    /// Train a speaker encoder on pseudo-labels with best-epoch selection
    TrainEncoder {
        /// Pseudo-label file [default: <workspace>/iter_<iteration>/labels.tsv]
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Iteration index for seed derivation
        #[arg(long, default_value_t = 1)]
        iteration: usize,
        /// Checkpoint to write [default: <workspace>/iter_<iteration>/encoder.enc1]
        #[arg(long)]
        output: Option<PathBuf>,
        /// Disable augmentation for this training run
        #[arg(long, default_value_t = false)]
        no_augment: bool,
    },
    /// Embed every unaltered utterance with a trained encoder
    Embed {
        /// Encoder checkpoint [default: <workspace>/iter_1/encoder.enc1]
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Archive to write [default: <workspace>/embeddings.iva1]
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score an embedding archive against a trial list and report EER
    Evaluate {
        /// Embedding archive [default: <models_dir>/ivectors.iva1]
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Trial list [default: the configured validation list]
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Dump per-trial scores to this file
        #[arg(long)]
        scores_out: Option<PathBuf>,
    },
    /// Run (or resume) the full iterative pseudo-labeling loop
    IplRun {
        /// Override the number of iterations
        #[arg(long)]
        iterations: Option<usize>,
        /// Override the final cluster count
        #[arg(long)]
        k_final: Option<usize>,
        /// Disable augmentation
        #[arg(long, default_value_t = false)]
        no_augment: bool,
    },
    /// Run an ablation matrix over configuration axes
    Ablate {
        /// Axis spec, repeatable: clusters=0.5x,1.25x,2x | augment=on,off
        /// | clustering=two_stage,kmeans_only | encoder=16,32 |
        /// init=ivector,encoder:<path>
        #[arg(long = "axis")]
        axes: Vec<String>,
        /// Override the number of iterations per cell
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn parse_axis(spec: &str, base: &RunConfig) -> Result<AblationAxis> {
    let (name, rest) = spec
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("axis spec `{spec}` needs name=v1,v2,...")))?;
    let values: Vec<&str> = rest.split(',').filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::validation(format!("axis `{name}` has no values")));
    }
    match name {
        "clusters" => {
            let ks = values
                .iter()
                .map(|v| {
                    if let Some(mult) = v.strip_suffix('x') {
                        let m: f64 = mult.parse().map_err(|_| {
                            Error::validation(format!("bad cluster multiplier `{v}`"))
                        })?;
                        Ok(((base.cluster.k_final as f64 * m).round() as usize).max(1))
                    } else {
                        v.parse::<usize>()
                            .map_err(|_| Error::validation(format!("bad cluster count `{v}`")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationAxis::Clusters(ks))
        }
        "augment" => {
            let bs = values
                .iter()
                .map(|v| match *v {
                    "on" | "true" => Ok(true),
                    "off" | "false" => Ok(false),
                    other => Err(Error::validation(format!("bad augment value `{other}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationAxis::Augment(bs))
        }
        "clustering" => {
            let ms = values
                .iter()
                .map(|v| match *v {
                    "two_stage" | "ahc" => Ok(ClusteringKind::TwoStage),
                    "kmeans_only" | "kmeans" => Ok(ClusteringKind::KmeansOnly),
                    other => Err(Error::validation(format!("bad clustering value `{other}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationAxis::Clustering(ms))
        }
        "encoder" => {
            let hs = values
                .iter()
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| Error::validation(format!("bad encoder width `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationAxis::EncoderSize(hs))
        }
        "init" => {
            let is = values
                .iter()
                .map(|v| {
                    if *v == "ivector" {
                        Ok(InitialModel::Ivector)
                    } else if let Some(path) = v.strip_prefix("encoder:") {
                        Ok(InitialModel::Encoder(PathBuf::from(path)))
                    } else {
                        Err(Error::validation(format!("bad init value `{v}`")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationAxis::InitialModel(is))
        }
        other => Err(Error::validation(format!(
            "unknown axis `{other}` (expected clusters|augment|clustering|encoder|init)"
        ))),
    }
}

fn raise_k_final(cfg: &mut RunConfig, k: usize) {
    cfg.cluster.k_final = k;
    if cfg.cluster.k_coarse < k {
        cfg.cluster.k_coarse = k;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match cli.command {
        Command::SynthGen => {
            let manifest = pipeline::stage_synth(&cfg)?;
            if cli.json {
                println!("{}", json!({ "utterances": manifest.len() }));
            } else {
                println!(
                    "generated {} utterances under {}",
                    manifest.len(),
                    cfg.corpus_dir().display()
                );
            }
        }
        Command::Features => {
            pipeline::stage_features(&cfg)?;
            if cli.json {
                println!("{}", json!({ "status": "ok" }));
            } else {
                println!("features written under {}", cfg.corpus_dir().display());
            }
        }
        Command::TrainUbm => {
            let trace = pipeline::stage_train_ubm(&cfg)?;
            if cli.json {
                println!("{}", json!({ "avg_loglik_trace": trace, "output": cfg.ubm_path() }));
            } else {
                println!("UBM written to {}", cfg.ubm_path().display());
            }
        }
        Command::TrainTv => {
            let trace = pipeline::stage_train_tv(&cfg)?;
            if cli.json {
                println!("{}", json!({ "auxiliary_trace": trace, "output": cfg.tv_path() }));
            } else {
                println!("TV model written to {}", cfg.tv_path().display());
            }
        }
        Command::ExtractIvectors { output, raw } => {
            let out = output.unwrap_or_else(|| cfg.ivectors_path());
            let count = pipeline::stage_extract_ivectors(&cfg, &out, !raw)?;
            if cli.json {
                println!("{}", json!({ "count": count, "output": out }));
            } else {
                println!("{count} i-vectors written to {}", out.display());
            }
        }
        Command::Cluster {
            input,
            iteration,
            output,
            k_final,
        } => {
            if let Some(k) = k_final {
                raise_k_final(&mut cfg, k);
            }
            let input = input.unwrap_or_else(|| cfg.ivectors_path());
            let output = output.unwrap_or_else(|| {
                cfg.workspace_dir()
                    .join(format!("iter_{}", iteration + 1))
                    .join("labels.tsv")
            });
            let assignment = pipeline::stage_cluster(&cfg, &input, iteration, &output)?;
            if cli.json {
                println!(
                    "{}",
                    json!({ "num_clusters": assignment.num_clusters, "output": output })
                );
            } else {
                println!(
                    "{} clusters over {} utterances written to {}",
                    assignment.num_clusters,
                    assignment.labels.len(),
                    output.display()
                );
            }
        }
        Command::TrainEncoder {
            labels,
            iteration,
            output,
            no_augment,
        } => {
            if no_augment {
                cfg.ipl.augment_enabled = false;
            }
            let dir = cfg.workspace_dir().join(format!("iter_{iteration}"));
            let labels_path = labels.unwrap_or_else(|| dir.join("labels.tsv"));
            let out = output.unwrap_or_else(|| dir.join("encoder.enc1"));
            let method = match cfg.cluster.method {
                ClusteringKind::TwoStage => ipl_core::cluster::ClusterMethod::KmeansAhc,
                ClusteringKind::KmeansOnly => ipl_core::cluster::ClusterMethod::Kmeans,
            };
            let assignment = ipl_core::cluster::ClusterAssignment::load(&labels_path, method)?;
            let (manifest, frames) = pipeline::load_encoder_frames(&cfg)?;
            let val_trials = ipl_core::eval::TrialList::load(&cfg.val_trials_path())?;
            let augmenter = if cfg.ipl.augment_enabled {
                Some(ipl_core::augment::Augmenter::new(cfg.augment.clone())?)
            } else {
                None
            };
            let outcome = pipeline::stage_train_encoder(
                &cfg,
                &pipeline::EncoderTraining {
                    manifest: &manifest,
                    frames: &frames,
                    assignment: &assignment,
                    val_trials: &val_trials,
                    augmenter: augmenter.as_ref(),
                    iteration,
                },
                &out,
            )?;
            if cli.json {
                println!(
                    "{}",
                    json!({
                        "best_epoch": outcome.best_epoch,
                        "val_eers": outcome.val_eers,
                        "epoch_losses": outcome.epoch_losses,
                        "output": out,
                    })
                );
            } else {
                println!(
                    "encoder written to {} (best epoch {})",
                    out.display(),
                    outcome.best_epoch
                );
            }
        }
        Command::Embed { encoder, output } => {
            let encoder =
                encoder.unwrap_or_else(|| cfg.workspace_dir().join("iter_1").join("encoder.enc1"));
            let out = output.unwrap_or_else(|| cfg.workspace_dir().join("embeddings.iva1"));
            let count = pipeline::stage_embed(&cfg, &encoder, &out)?;
            if cli.json {
                println!("{}", json!({ "count": count, "output": out }));
            } else {
                println!("{count} embeddings written to {}", out.display());
            }
        }
        Command::Evaluate {
            embeddings,
            trials,
            scores_out,
        } => {
            let embeddings = embeddings.unwrap_or_else(|| cfg.ivectors_path());
            let trials = trials.unwrap_or_else(|| cfg.val_trials_path());
            let (eer, threshold) =
                pipeline::stage_evaluate(&embeddings, &trials, scores_out.as_deref())?;
            if cli.json {
                println!("{}", json!({ "eer_percent": eer, "threshold": threshold }));
            } else {
                println!("EER {eer:.2}% (threshold {threshold:.4})");
            }
        }
        Command::IplRun {
            iterations,
            k_final,
            no_augment,
        } => {
            if let Some(n) = iterations {
                cfg.ipl.num_iterations = n;
            }
            if let Some(k) = k_final {
                raise_k_final(&mut cfg, k);
            }
            if no_augment {
                cfg.ipl.augment_enabled = false;
            }
            let outcome = ipl::run_ipl(&cfg)?;
            if cli.json {
                println!(
                    "{}",
                    json!({ "baseline": outcome.baseline, "iterations": outcome.records })
                );
            } else {
                for (name, eer) in &outcome.baseline.eer {
                    println!("baseline ({name}): EER {eer:.2}%");
                }
                for r in &outcome.records {
                    let eers: Vec<String> = r
                        .eer
                        .iter()
                        .map(|(n, e)| format!("{n} {e:.2}%"))
                        .collect();
                    println!(
                        "iteration {}: {} (best epoch {})",
                        r.iteration,
                        eers.join(", "),
                        r.best_epoch
                    );
                }
            }
        }
        Command::Ablate { axes, iterations } => {
            if let Some(n) = iterations {
                cfg.ipl.num_iterations = n;
            }
            let parsed = axes
                .iter()
                .map(|a| parse_axis(a, &cfg))
                .collect::<Result<Vec<_>>>()?;
            let results = ipl::ablation_matrix(&cfg, &parsed)?;
            if cli.json {
                let cells: Vec<_> = results
                    .iter()
                    .map(|(name, r)| match r {
                        Ok(o) => json!({
                            "cell": name,
                            "status": "ok",
                            "baseline": o.baseline,
                            "iterations": o.records,
                        }),
                        Err(e) => json!({ "cell": name, "status": format!("failed: {e}") }),
                    })
                    .collect();
                println!("{}", json!({ "cells": cells }));
            } else {
                for (name, r) in &results {
                    match r {
                        Ok(o) => {
                            let best: Vec<String> = o
                                .baseline
                                .eer
                                .keys()
                                .map(|list| {
                                    format!(
                                        "{list} {:.2}%",
                                        o.best_eer(list).unwrap_or(f64::NAN)
                                    )
                                })
                                .collect();
                            println!("{name}: best EER {}", best.join(", "));
                        }
                        Err(e) => println!("{name}: FAILED ({e})"),
                    }
                }
                println!(
                    "matrix written to {}",
                    cfg.workspace_dir().join("matrix.csv").display()
                );
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
