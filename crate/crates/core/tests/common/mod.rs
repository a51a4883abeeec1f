//! Shared helpers for the integration and acceptance suites.

use ipl_core::config::{CorpusMode, RunConfig};
use ipl_core::corpus::{SynthSpec, WaveSynthSpec};
use ipl_core::features::FeatureConfig;
use ipl_core::gmm::CovarianceMode;
use ipl_core::pipeline;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// A small feature-space run configuration rooted at `root`.
pub fn tiny_feature_config(root: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.root = root.to_path_buf();
    cfg.seed = seed;
    cfg.corpus.synth = SynthSpec {
        num_speakers: 8,
        utterances_per_speaker: 6,
        min_frames: 40,
        max_frames: 60,
        feature_dim: 8,
        speaker_spread: 1.0,
        session_spread: 1.0,
        session_dims: 4,
        frame_noise: 1.0,
        seed: 0,
    };
    cfg.ubm.components = 8;
    cfg.ubm.covariance = CovarianceMode::Diagonal;
    cfg.ubm.em_iterations = 4;
    cfg.ubm.max_frames = 0;
    cfg.tv.rank = 8;
    cfg.tv.em_iterations = 3;
    cfg.cluster.k_coarse = 24;
    cfg.cluster.k_final = 10;
    cfg.encoder.input_dim = 8;
    cfg.encoder.hidden_channels = 12;
    cfg.encoder.embed_dim = 8;
    cfg.train.batch_size = 16;
    cfg.train.epochs = 4;
    cfg.train.warmup_steps = 20;
    cfg.train.segment_seconds = 0.4;
    cfg.eval.val_targets = 60;
    cfg.eval.val_nontargets = 60;
    cfg.eval.test_targets = 80;
    cfg.eval.test_nontargets = 80;
    cfg.ipl.num_iterations = 2;
    cfg
}

/// A small waveform-mode run configuration rooted at `root`.
pub fn tiny_wave_config(root: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.root = root.to_path_buf();
    cfg.seed = seed;
    cfg.corpus.mode = CorpusMode::Waves;
    cfg.corpus.wave_synth = WaveSynthSpec {
        num_speakers: 4,
        utterances_per_speaker: 5,
        sample_rate_hz: 8_000,
        min_seconds: 0.6,
        max_seconds: 0.9,
        tones_per_speaker: 3,
        min_freq_hz: 200.0,
        max_freq_hz: 3_000.0,
        noise_level: 0.02,
        seed: 0,
    };
    // stationary tone corpora carry speaker identity in the spectral
    // mean, which per-utterance CMVN would erase
    cfg.features.ubm = FeatureConfig {
        sample_rate_hz: 8_000,
        num_mel_filters: 20,
        num_cepstra: 13,
        use_log_mel: false,
        delta_order: 1,
        apply_cmvn: false,
        ..FeatureConfig::default()
    };
    cfg.features.encoder = FeatureConfig {
        sample_rate_hz: 8_000,
        num_mel_filters: 16,
        num_cepstra: 16,
        use_log_mel: true,
        delta_order: 0,
        apply_cmvn: false,
        ..FeatureConfig::default()
    };
    cfg.ubm.components = 4;
    cfg.ubm.covariance = CovarianceMode::Diagonal;
    cfg.ubm.em_iterations = 3;
    cfg.ubm.max_frames = 0;
    cfg.tv.rank = 6;
    cfg.tv.em_iterations = 3;
    cfg.cluster.k_coarse = 10;
    cfg.cluster.k_final = 4;
    cfg.encoder.input_dim = 16;
    cfg.encoder.hidden_channels = 12;
    cfg.encoder.embed_dim = 8;
    cfg.train.batch_size = 8;
    cfg.train.epochs = 6;
    cfg.train.warmup_steps = 10;
    cfg.train.segment_seconds = 0.3;
    cfg.eval.val_targets = 15;
    cfg.eval.val_nontargets = 15;
    cfg.eval.test_targets = 20;
    cfg.eval.test_nontargets = 20;
    cfg.ipl.num_iterations = 1;
    cfg
}

/// Runs corpus generation, feature extraction (waveform mode), UBM and TV
/// training.
pub fn prepare_models(cfg: &RunConfig) {
    pipeline::stage_synth(cfg).expect("synth");
    pipeline::stage_features(cfg).expect("features");
    pipeline::stage_train_ubm(cfg).expect("ubm");
    pipeline::stage_train_tv(cfg).expect("tv");
}

/// Recursively reads every file under `dir` into (relative path, bytes).
pub fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("read_dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("prefix").to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("read"));
            }
        }
    }
    out
}

/// Asserts two directory trees are byte-identical.
pub fn assert_trees_equal(a: &Path, b: &Path) {
    let ta = read_tree(a);
    let tb = read_tree(b);
    let ka: Vec<_> = ta.keys().collect();
    let kb: Vec<_> = tb.keys().collect();
    assert_eq!(ka, kb, "file sets differ between {a:?} and {b:?}");
    for (path, bytes) in &ta {
        assert_eq!(
            bytes,
            &tb[path],
            "file {} differs between {a:?} and {b:?}",
            path.display()
        );
    }
}
