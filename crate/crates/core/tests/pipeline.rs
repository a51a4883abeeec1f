//! End-to-end pipeline behaviour: stage composition, determinism, resume,
//! waveform mode, and the label-hygiene contracts.

mod common;

use common::{assert_trees_equal, prepare_models, tiny_feature_config, tiny_wave_config};
use ipl_core::augment::Augmenter;
use ipl_core::cluster::{ClusterAssignment, ClusterMethod};
use ipl_core::corpus::UtteranceManifest;
use ipl_core::error::Error;
use ipl_core::eval::TrialList;
use ipl_core::ipl::{self, AblationAxis};
use ipl_core::pipeline;

#[test]
fn feature_mode_ipl_runs_and_improves_over_random() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_feature_config(dir.path(), 11);
    prepare_models(&cfg);
    let outcome = ipl::run_ipl(&cfg).unwrap();
    assert_eq!(outcome.records.len(), 2);
    for r in &outcome.records {
        assert!(r.eer["test"] >= 0.0 && r.eer["test"] <= 50.0);
        assert!(cfg.workspace_dir().join(&r.encoder_path).exists());
        assert!(cfg.workspace_dir().join(&r.labels_path).exists());
        assert!(r.purity.unwrap() > 0.0);
    }
    // artifacts exist per the documented layout
    let ws = cfg.workspace_dir();
    for q in 1..=2 {
        for file in ["labels.tsv", "encoder.enc1", "embeddings.iva1", "record.json"] {
            assert!(ws.join(format!("iter_{q}")).join(file).exists(), "{file} missing");
        }
    }
    assert!(ws.join("baseline.json").exists());
    assert!(ws.join("curves.csv").exists());
    assert!(ws.join("summary.csv").exists());
}

#[test]
fn wave_mode_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_wave_config(dir.path(), 3);
    prepare_models(&cfg);
    let outcome = ipl::run_ipl(&cfg).unwrap();
    assert_eq!(outcome.records.len(), 1);
    let eer = outcome.records[0].eer["test"];
    assert!((0.0..=50.0).contains(&eer), "wave-mode EER {eer}");
    // waveform corpora separate the two feature recipes
    assert!(cfg.corpus_dir().join("feats_ubm/manifest.tsv").exists());
    assert!(cfg.corpus_dir().join("feats_enc/manifest.tsv").exists());
}

/// Ground-truth labels feed only trial lists and diagnostics: the whole
/// training pipeline runs on a manifest with every label stripped.
#[test]
fn pipeline_runs_with_ground_truth_stripped() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_feature_config(dir.path(), 29);
    // trial lists need the labels, so build them before stripping
    pipeline::stage_synth(&cfg).unwrap();
    let manifest = UtteranceManifest::load(&cfg.corpus_manifest()).unwrap();
    manifest.stripped().save(&cfg.corpus_manifest()).unwrap();
    let reloaded = UtteranceManifest::load(&cfg.corpus_manifest()).unwrap();
    assert!(reloaded.entries().iter().all(|e| e.speaker_label.is_none()));

    pipeline::stage_train_ubm(&cfg).unwrap();
    pipeline::stage_train_tv(&cfg).unwrap();
    let outcome = ipl::run_ipl(&cfg).unwrap();
    // diagnostics are absent without ground truth; EERs still computed
    assert!(outcome.baseline.purity.is_none());
    for r in &outcome.records {
        assert!(r.purity.is_none());
        assert!(r.eer.contains_key("test"));
    }
}

/// The embedding-extraction path cannot invoke augmentation: training
/// increments the augmenter's counter, embedding leaves it untouched.
#[test]
fn embedding_extraction_bypasses_augmentation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_feature_config(dir.path(), 5);
    prepare_models(&cfg);
    let ws = cfg.workspace_dir();
    let (assignment, _) = ipl::bootstrap_labels(&cfg).unwrap();
    let (manifest, frames) = pipeline::load_encoder_frames(&cfg).unwrap();
    let val_trials = TrialList::load(&cfg.val_trials_path()).unwrap();
    let augmenter = Augmenter::new(cfg.augment.clone()).unwrap();

    let encoder_path = ws.join("iter_1/encoder.enc1");
    pipeline::stage_train_encoder(
        &cfg,
        &pipeline::EncoderTraining {
            manifest: &manifest,
            frames: &frames,
            assignment: &assignment,
            val_trials: &val_trials,
            augmenter: Some(&augmenter),
            iteration: 1,
        },
        &encoder_path,
    )
    .unwrap();
    let after_training = augmenter.times_applied();
    assert!(after_training > 0, "training never augmented");

    pipeline::stage_embed(&cfg, &encoder_path, &ws.join("iter_1/embeddings.iva1")).unwrap();
    assert_eq!(
        augmenter.times_applied(),
        after_training,
        "embedding extraction must not augment"
    );
}

/// Individually composed stage commands produce bit-identical artifacts
/// to the same steps inside `run_ipl`.
#[test]
fn stage_composition_matches_ipl_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_feature_config(dir.path(), 17);
    cfg.ipl.num_iterations = 1;
    prepare_models(&cfg);
    ipl::run_ipl(&cfg).unwrap();
    let ws_a = cfg.workspace_dir();

    // composed run into a second workspace
    let mut cfg_b = cfg.clone();
    cfg_b.paths.workspace_dir = "workspace_b".into();
    let ws_b = cfg_b.workspace_dir();
    std::fs::create_dir_all(&ws_b).unwrap();

    let archive_b = ws_b.join("ivectors.iva1");
    pipeline::stage_extract_ivectors(&cfg_b, &archive_b, true).unwrap();
    assert_eq!(
        std::fs::read(ws_a.join("ivectors.iva1")).unwrap(),
        std::fs::read(&archive_b).unwrap(),
        "i-vector archives differ"
    );

    let labels_b = ws_b.join("iter_1/labels.tsv");
    pipeline::stage_cluster(&cfg_b, &archive_b, 0, &labels_b).unwrap();
    assert_eq!(
        std::fs::read(ws_a.join("iter_1/labels.tsv")).unwrap(),
        std::fs::read(&labels_b).unwrap(),
        "bootstrap labels differ"
    );

    let assignment = ClusterAssignment::load(&labels_b, ClusterMethod::KmeansAhc).unwrap();
    let (manifest, frames) = pipeline::load_encoder_frames(&cfg_b).unwrap();
    let val_trials = TrialList::load(&cfg_b.val_trials_path()).unwrap();
    let augmenter = Augmenter::new(cfg_b.augment.clone()).unwrap();
    let encoder_b = ws_b.join("iter_1/encoder.enc1");
    pipeline::stage_train_encoder(
        &cfg_b,
        &pipeline::EncoderTraining {
            manifest: &manifest,
            frames: &frames,
            assignment: &assignment,
            val_trials: &val_trials,
            augmenter: Some(&augmenter),
            iteration: 1,
        },
        &encoder_b,
    )
    .unwrap();
    assert_eq!(
        std::fs::read(ws_a.join("iter_1/encoder.enc1")).unwrap(),
        std::fs::read(&encoder_b).unwrap(),
        "encoder checkpoints differ"
    );

    let embeddings_b = ws_b.join("iter_1/embeddings.iva1");
    pipeline::stage_embed(&cfg_b, &encoder_b, &embeddings_b).unwrap();
    assert_eq!(
        std::fs::read(ws_a.join("iter_1/embeddings.iva1")).unwrap(),
        std::fs::read(&embeddings_b).unwrap(),
        "embedding archives differ"
    );
}

#[test]
fn missing_artifacts_name_the_prerequisite_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_feature_config(dir.path(), 2);
    // corpus exists but no models
    pipeline::stage_synth(&cfg).unwrap();
    match ipl::run_ipl(&cfg) {
        Err(Error::MissingArtifact { hint, .. }) => assert!(hint.contains("train-tv")),
        other => panic!("expected missing-artifact error, got {other:?}"),
    }
    match pipeline::stage_train_tv(&cfg) {
        Err(Error::MissingArtifact { hint, .. }) => assert!(hint.contains("train-ubm")),
        other => panic!("expected missing-artifact error, got {other:?}"),
    }
}

#[test]
fn corrupted_workspace_refuses_resume_with_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_feature_config(dir.path(), 23);
    cfg.ipl.num_iterations = 1;
    prepare_models(&cfg);
    ipl::run_ipl(&cfg).unwrap();
    let record = cfg.workspace_dir().join("iter_1/record.json");
    std::fs::write(&record, "{ broken").unwrap();
    match ipl::run_ipl(&cfg) {
        Err(Error::Validation(msg)) => {
            assert!(msg.contains("corrupted workspace"), "{msg}");
            assert!(msg.contains("delete"), "{msg}");
        }
        other => panic!("expected corruption error, got {other:?}"),
    }
}

#[test]
fn ablation_matrix_writes_row_per_cell_and_survives_cell_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_feature_config(dir.path(), 31);
    cfg.ipl.num_iterations = 1;
    cfg.train.epochs = 2;
    prepare_models(&cfg);
    // k = 1000 exceeds the corpus size and must fail as a cell, not abort
    let results = ipl::ablation_matrix(&cfg, &[AblationAxis::Clusters(vec![6, 10, 1000])]).unwrap();
    assert_eq!(results.len(), 3);
    assert!(results[0].1.is_ok());
    assert!(results[1].1.is_ok());
    assert!(results[2].1.is_err());
    let matrix = std::fs::read_to_string(cfg.workspace_dir().join("matrix.csv")).unwrap();
    // header + 3 cells
    assert_eq!(matrix.lines().count(), 4, "{matrix}");
    assert!(matrix.contains("failed"));
}
