//! Pipeline stages driven by the run configuration.
//!
//! Each stage reads and writes only the documented artifact formats, and
//! every random choice derives its seed from the config seed plus a fixed
//! stage tag. A pipeline composed of individual stage commands therefore
//! produces bit-identical artifacts to the same steps run inside the IPL
//! loop.

use crate::augment::Augmenter;
use crate::cluster::{self, ClusterAssignment};
use crate::config::{ClusteringKind, CorpusMode, RunConfig};
use crate::corpus::{self, UtteranceManifest};
use crate::encoder::{self, EncoderModel, FitOutcome};
use crate::error::{Error, Result};
use crate::eval::{self, TrialList};
use crate::features::{featurize, FrameMatrix, Wave};
use crate::gmm::{BaumWelchStats, EmOptions, Gmm};
use crate::ivector::{self, IVector, TvModel};
use crate::seed;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Generates the synthetic corpus, its manifest and the default
/// validation/test trial lists.
pub fn stage_synth(cfg: &RunConfig) -> Result<UtteranceManifest> {
    let dir = cfg.corpus_dir();
    let manifest = match cfg.corpus.mode {
        CorpusMode::Features => {
            let mut spec = cfg.corpus.synth.clone();
            spec.seed = seed::derive(cfg.seed, "synth", spec.seed);
            corpus::synth_generate(&spec, &dir)?
        }
        CorpusMode::Waves => {
            let mut spec = cfg.corpus.wave_synth.clone();
            spec.seed = seed::derive(cfg.seed, "synth", spec.seed);
            corpus::synth_generate_waves(&spec, &dir)?
        }
    };
    manifest.save(&cfg.corpus_manifest())?;
    let val = eval::make_synthetic_trials(
        &manifest,
        cfg.eval.val_targets,
        cfg.eval.val_nontargets,
        seed::derive(cfg.seed, "trials-val", 0),
    )?;
    val.save(&cfg.val_trials_path())?;
    let test = eval::make_synthetic_trials(
        &manifest,
        cfg.eval.test_targets,
        cfg.eval.test_nontargets,
        seed::derive(cfg.seed, "trials-test", 0),
    )?;
    for (_, path) in cfg.test_trials_paths() {
        test.save(&path)?;
    }
    Ok(manifest)
}

/// Extracts UBM-path and encoder-path features for a waveform corpus.
/// A feature-space corpus needs no extraction.
pub fn stage_features(cfg: &RunConfig) -> Result<()> {
    if cfg.corpus.mode == CorpusMode::Features {
        log::info!("feature-space corpus: frames already serve both model paths");
        return Ok(());
    }
    let manifest = load_manifest(&cfg.corpus_manifest(), "synth-gen")?;
    for (sub, feat_cfg) in [
        ("feats_ubm", &cfg.features.ubm),
        ("feats_enc", &cfg.features.encoder),
    ] {
        let out_dir = cfg.corpus_dir().join(sub);
        std::fs::create_dir_all(&out_dir)?;
        let entries: Vec<corpus::ManifestEntry> = manifest
            .entries()
            .par_iter()
            .map(|e| {
                let wave = Wave::load(&manifest.resolve(e))?;
                let mut frames = featurize(&wave, feat_cfg)?;
                frames.source_id = e.utterance_id.clone();
                let source = PathBuf::from(format!("{}.fmx", e.utterance_id));
                frames.save(&out_dir.join(&source))?;
                Ok(corpus::ManifestEntry {
                    utterance_id: e.utterance_id.clone(),
                    source,
                    num_samples: frames.num_frames() as u64,
                    speaker_label: e.speaker_label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        UtteranceManifest::new(entries, out_dir.clone())?.save(&out_dir.join("manifest.tsv"))?;
    }
    Ok(())
}

fn load_manifest(path: &Path, producer: &str) -> Result<UtteranceManifest> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: format!("manifest {}", path.display()),
            hint: producer.to_string(),
        });
    }
    UtteranceManifest::load(path)
}

/// UBM-path frames (MFCC recipe in waveform mode).
pub fn load_ubm_frames(cfg: &RunConfig) -> Result<(UtteranceManifest, Vec<FrameMatrix>)> {
    let producer = match cfg.corpus.mode {
        CorpusMode::Features => "synth-gen",
        CorpusMode::Waves => "features",
    };
    let manifest = load_manifest(&cfg.ubm_feature_manifest(), producer)?;
    let frames = corpus::load_all_frames(&manifest)?;
    Ok((manifest, frames))
}

/// Encoder-path frames (log-Mel recipe in waveform mode).
pub fn load_encoder_frames(cfg: &RunConfig) -> Result<(UtteranceManifest, Vec<FrameMatrix>)> {
    let producer = match cfg.corpus.mode {
        CorpusMode::Features => "synth-gen",
        CorpusMode::Waves => "features",
    };
    let manifest = load_manifest(&cfg.encoder_feature_manifest(), producer)?;
    let frames = corpus::load_all_frames(&manifest)?;
    Ok((manifest, frames))
}

/// Trains the UBM by EM on a pooled frame subsample and writes `ubm.gmm1`.
/// Returns the log-likelihood trace.
pub fn stage_train_ubm(cfg: &RunConfig) -> Result<Vec<f64>> {
    let (_, frames) = load_ubm_frames(cfg)?;
    let pooled = crate::gmm::pool_frames(&frames, cfg.ubm.max_frames, seed::derive(cfg.seed, "ubm-pool", 0));
    let init = Gmm::init_kmeans(
        &pooled,
        cfg.ubm.components,
        cfg.ubm.covariance,
        seed::derive(cfg.seed, "ubm-init", 0),
    )?;
    let train_data = [FrameMatrix::from_rows(
        &pooled.iter().cloned().collect::<Vec<_>>(),
    )];
    let (model, trace) = init.train_em(&train_data, cfg.ubm.em_iterations, &EmOptions::default())?;
    model.save(&cfg.ubm_path())?;
    log::info!(
        "UBM trained: C={} avg ll {:.4} -> {:.4}",
        cfg.ubm.components,
        trace.first().unwrap_or(&f64::NAN),
        trace.last().unwrap_or(&f64::NAN)
    );
    Ok(trace)
}

fn accumulate_all_stats(
    ubm: &Gmm,
    manifest: &UtteranceManifest,
    frames: &[FrameMatrix],
) -> Result<Vec<(String, BaumWelchStats)>> {
    manifest
        .entries()
        .par_iter()
        .zip(frames.par_iter())
        .map(|(e, m)| Ok((e.utterance_id.clone(), ubm.accumulate_stats(m)?)))
        .collect()
}

/// Trains the total-variability matrix on Baum-Welch statistics of the
/// longest utterances and writes `tv.tvm1`. Returns the auxiliary trace.
pub fn stage_train_tv(cfg: &RunConfig) -> Result<Vec<f64>> {
    let ubm_path = cfg.ubm_path();
    if !ubm_path.exists() {
        return Err(Error::MissingArtifact {
            what: format!("UBM checkpoint {}", ubm_path.display()),
            hint: "train-ubm".into(),
        });
    }
    let ubm = Arc::new(Gmm::load(&ubm_path)?);
    let (manifest, frames) = load_ubm_frames(cfg)?;
    let selected = manifest.longest(cfg.tv.longest);
    let index: BTreeMap<&str, usize> = manifest
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.utterance_id.as_str(), i))
        .collect();
    let sel_frames: Vec<FrameMatrix> = selected
        .entries()
        .iter()
        .map(|e| frames[index[e.utterance_id.as_str()]].clone())
        .collect();
    let stats = accumulate_all_stats(&ubm, &selected, &sel_frames)?;
    let bare: Vec<BaumWelchStats> = stats.into_iter().map(|(_, s)| s).collect();
    let init = TvModel::init_random(Arc::clone(&ubm), cfg.tv.rank, seed::derive(cfg.seed, "tv", 0))?;
    let (model, trace) = init.train_em(&bare, cfg.tv.em_iterations)?;
    let tv_path = cfg.tv_path();
    model.save(&tv_path, &relative_ref(&tv_path, &ubm_path))?;
    log::info!(
        "TV trained: R={} auxiliary {:.4} -> {:.4}",
        cfg.tv.rank,
        trace.first().unwrap_or(&f64::NAN),
        trace.last().unwrap_or(&f64::NAN)
    );
    Ok(trace)
}

/// Reference to `target` suitable for a sidecar next to `from`: the bare
/// file name when both live in one directory, otherwise the absolute path.
fn relative_ref(from: &Path, target: &Path) -> String {
    if from.parent() == target.parent() {
        target
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| target.display().to_string())
    } else {
        target.display().to_string()
    }
}

/// Extracts i-vectors for every utterance into an `IVA1` archive.
pub fn stage_extract_ivectors(cfg: &RunConfig, out: &Path, normalize: bool) -> Result<usize> {
    let tv_path = cfg.tv_path();
    if !tv_path.exists() {
        return Err(Error::MissingArtifact {
            what: format!("TV checkpoint {}", tv_path.display()),
            hint: "train-tv".into(),
        });
    }
    let tv = TvModel::load(&tv_path)?;
    let (manifest, frames) = load_ubm_frames(cfg)?;
    let stats = accumulate_all_stats(tv.ubm(), &manifest, &frames)?;
    let mut vectors = tv.extract_all(&stats)?;
    if normalize {
        vectors = vectors
            .iter()
            .map(ivector::length_normalize)
            .collect::<Result<Vec<_>>>()?;
    }
    ivector::save_archive(out, &vectors)?;
    Ok(vectors.len())
}

/// Clusters an embedding archive into pseudo-labels. `iteration` feeds
/// the seed derivation (0 is the i-vector bootstrap).
pub fn stage_cluster(
    cfg: &RunConfig,
    archive: &Path,
    iteration: usize,
    out: &Path,
) -> Result<ClusterAssignment> {
    if !archive.exists() {
        return Err(Error::MissingArtifact {
            what: format!("embedding archive {}", archive.display()),
            hint: "extract-ivectors (or embed)".into(),
        });
    }
    let vectors = ivector::load_archive(archive)?;
    let ids: Vec<String> = vectors.iter().map(|v| v.utterance_id.clone()).collect();
    let data: Vec<Vec<f64>> = vectors.into_iter().map(|v| v.w).collect();
    let seed_value = seed::derive(cfg.seed, "cluster", iteration as u64);
    let assignment = match cfg.cluster.method {
        ClusteringKind::TwoStage => {
            let (assignment, dendrogram) = cluster::two_stage_cluster(
                &ids,
                &data,
                cfg.cluster.k_coarse,
                cfg.cluster.k_final,
                seed_value,
            )?;
            let mut dpath = out.to_path_buf();
            dpath.set_extension("dendrogram.tsv");
            dendrogram.save(&dpath)?;
            assignment
        }
        ClusteringKind::KmeansOnly => {
            cluster::kmeans_cluster(&ids, &data, cfg.cluster.k_final, seed_value)?
        }
    };
    assignment.save(out)?;
    Ok(assignment)
}

/// Everything [`stage_train_encoder`] needs beyond the config.
pub struct EncoderTraining<'a> {
    pub manifest: &'a UtteranceManifest,
    pub frames: &'a [FrameMatrix],
    pub assignment: &'a ClusterAssignment,
    pub val_trials: &'a TrialList,
    pub augmenter: Option<&'a Augmenter>,
    /// Feeds seed derivation; iteration q trains encoder g^q.
    pub iteration: usize,
}

/// Trains a fresh encoder on pseudo-labels with per-epoch validation EER
/// and best-epoch selection, and writes the checkpoint.
pub fn stage_train_encoder(
    cfg: &RunConfig,
    inputs: &EncoderTraining<'_>,
    out: &Path,
) -> Result<FitOutcome> {
    let manifest = inputs.manifest;
    let frames = inputs.frames;
    if manifest.is_empty() {
        return Err(Error::validation("empty corpus"));
    }
    let missing: Vec<&str> = manifest
        .entries()
        .iter()
        .filter(|e| !inputs.assignment.labels.contains_key(&e.utterance_id))
        .map(|e| e.utterance_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "pseudo-labels missing for: {}",
            missing.join(", ")
        )));
    }
    let labels: Vec<usize> = manifest
        .entries()
        .iter()
        .map(|e| inputs.assignment.labels[&e.utterance_id] as usize)
        .collect();
    let num_classes = labels.iter().max().expect("nonempty") + 1;

    let mut arch = cfg.encoder.clone();
    arch.input_dim = frames[0].dim();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed::derive(cfg.seed, "train", inputs.iteration as u64);

    let augmenter = inputs.augmenter;
    // waveform corpora augment the cropped waveform before feature
    // extraction; feature-space corpora augment the frames directly
    let waves: Vec<Vec<f64>> = match cfg.corpus.mode {
        CorpusMode::Features => Vec::new(),
        CorpusMode::Waves => {
            let wave_manifest = load_manifest(&cfg.corpus_manifest(), "synth-gen")?;
            if wave_manifest.len() != manifest.len()
                || wave_manifest
                    .entries()
                    .iter()
                    .zip(manifest.entries())
                    .any(|(a, b)| a.utterance_id != b.utterance_id)
            {
                return Err(Error::validation(
                    "waveform and feature manifests disagree; re-run the features stage",
                ));
            }
            wave_manifest
                .entries()
                .iter()
                .map(|e| Ok(Wave::load(&wave_manifest.resolve(e))?.to_f64()))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let feat_cfg = cfg.features.encoder.clone();
    let shift_ms = f64::from(frames[0].frame_shift_ms);
    let crop_frames_len = ((train_cfg.segment_seconds * 1000.0 / shift_ms).round() as usize)
        .max(arch.receptive_field());
    // enough samples that the crop still covers the receptive field
    let crop_samples_len = ((train_cfg.segment_seconds * f64::from(feat_cfg.sample_rate_hz))
        .round() as usize)
        .max(feat_cfg.window_samples() + (arch.receptive_field() - 1) * feat_cfg.hop_samples());
    let mode = cfg.corpus.mode;
    let sample_fn = move |idx: usize, rng: &mut ChaCha8Rng| -> Result<FrameMatrix> {
        match mode {
            CorpusMode::Features => {
                let segment = crate::augment::crop_frames(&frames[idx], crop_frames_len, rng);
                match augmenter {
                    Some(aug) => aug.augment_frames(&segment, rng),
                    None => Ok(segment),
                }
            }
            CorpusMode::Waves => {
                let segment = crate::augment::crop_wave(&waves[idx], crop_samples_len, rng);
                let segment = match augmenter {
                    Some(aug) => aug.augment_wave(&segment, rng)?,
                    None => segment,
                };
                crate::features::featurize_samples(&segment, &feat_cfg)
            }
        }
    };

    // validation needs embeddings only for the utterances in the trials
    let val_ids: std::collections::BTreeSet<&str> = inputs
        .val_trials
        .trials
        .iter()
        .flat_map(|t| [t.enroll_id.as_str(), t.test_id.as_str()])
        .collect();
    let val_items: Vec<(String, FrameMatrix)> = manifest
        .entries()
        .iter()
        .zip(frames)
        .filter(|(e, _)| val_ids.contains(e.utterance_id.as_str()))
        .map(|(e, m)| (e.utterance_id.clone(), m.clone()))
        .collect();
    let val_trials = inputs.val_trials;
    let val_fn = move |model: &EncoderModel| -> Result<f64> {
        let embeddings = encoder::embed_all(model, &val_items)?;
        let scores = eval::score_trials(&embeddings, val_trials)?;
        Ok(eval::compute_eer(&scores)?.0)
    };

    let outcome = encoder::fit(&arch, &train_cfg, num_classes, &labels, &sample_fn, &val_fn)?;
    outcome.model.save(out, Some(&outcome.opt_state))?;
    Ok(outcome)
}

/// Embeds every (unaltered, full-length) utterance with a trained encoder
/// checkpoint into an `IVA1` archive.
pub fn stage_embed(cfg: &RunConfig, encoder_path: &Path, out: &Path) -> Result<usize> {
    if !encoder_path.exists() {
        return Err(Error::MissingArtifact {
            what: format!("encoder checkpoint {}", encoder_path.display()),
            hint: "train-encoder".into(),
        });
    }
    let (model, _) = EncoderModel::load(encoder_path)?;
    let (manifest, frames) = load_encoder_frames(cfg)?;
    let items: Vec<(String, FrameMatrix)> = manifest
        .entries()
        .iter()
        .zip(frames)
        .map(|(e, m)| (e.utterance_id.clone(), m))
        .collect();
    let embeddings = encoder::embed_all(&model, &items)?;
    let vectors: Vec<IVector> = items
        .iter()
        .map(|(id, _)| IVector {
            w: embeddings[id].clone(),
            utterance_id: id.clone(),
            normalized: false,
        })
        .collect();
    ivector::save_archive(out, &vectors)?;
    Ok(vectors.len())
}

/// Scores an embedding archive against a trial list; returns
/// (EER percent, threshold).
pub fn stage_evaluate(
    archive: &Path,
    trials_path: &Path,
    scores_out: Option<&Path>,
) -> Result<(f64, f64)> {
    if !archive.exists() {
        return Err(Error::MissingArtifact {
            what: format!("embedding archive {}", archive.display()),
            hint: "embed (or extract-ivectors)".into(),
        });
    }
    let vectors = ivector::load_archive(archive)?;
    let embeddings: BTreeMap<String, Vec<f64>> = vectors
        .into_iter()
        .map(|v| (v.utterance_id, v.w))
        .collect();
    let trials = TrialList::load(trials_path)?;
    let scores = eval::score_trials(&embeddings, &trials)?;
    if let Some(p) = scores_out {
        scores.save(p)?;
    }
    eval::compute_eer(&scores)
}
