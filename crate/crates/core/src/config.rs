//! The single TOML run configuration shared by every CLI stage.
//!
//! Relative paths inside the file resolve against the config file's
//! directory. Unknown keys are rejected so typos fail fast, and the whole
//! tree is validated before any stage runs.

use crate::augment::AugmentConfig;
use crate::corpus::{SynthSpec, WaveSynthSpec};
use crate::encoder::{EncoderConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::gmm::CovarianceMode;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Which synthetic generator builds the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusMode {
    /// Frames emitted directly in feature space.
    Features,
    /// Waveforms (sinusoid chords), exercising feature extraction and
    /// waveform augmentation.
    Waves,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub mode: CorpusMode,
    pub synth: SynthSpec,
    pub wave_synth: WaveSynthSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            mode: CorpusMode::Features,
            synth: SynthSpec::default(),
            wave_synth: WaveSynthSpec::default(),
        }
    }
}

/// Feature recipes for the two model paths (only used in waveform mode;
/// a feature-space corpus feeds both paths directly).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesConfig {
    /// MFCC recipe for the UBM / i-vector path.
    pub ubm: FeatureConfig,
    /// Log-Mel recipe for the encoder path.
    pub encoder: FeatureConfig,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            ubm: FeatureConfig {
                num_mel_filters: 24,
                num_cepstra: 24,
                use_log_mel: false,
                delta_order: 2,
                ..FeatureConfig::default()
            },
            encoder: FeatureConfig {
                num_mel_filters: 40,
                num_cepstra: 40,
                use_log_mel: true,
                delta_order: 0,
                ..FeatureConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UbmConfig {
    pub components: usize,
    pub covariance: CovarianceMode,
    pub em_iterations: usize,
    /// Frame subsample size for UBM training; 0 keeps everything.
    pub max_frames: usize,
}

impl Default for UbmConfig {
    fn default() -> Self {
        UbmConfig {
            components: 64,
            covariance: CovarianceMode::Full,
            em_iterations: 10,
            max_frames: 50_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvConfig {
    pub rank: usize,
    pub em_iterations: usize,
    /// Train on the longest N utterances; 0 keeps everything.
    pub longest: usize,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            rank: 32,
            em_iterations: 10,
            longest: 0,
        }
    }
}

/// Clustering algorithm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringKind {
    TwoStage,
    KmeansOnly,
}

impl std::fmt::Display for ClusteringKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClusteringKind::TwoStage => write!(f, "kmeans+ahc"),
            ClusteringKind::KmeansOnly => write!(f, "kmeans"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k_coarse: usize,
    pub k_final: usize,
    pub method: ClusteringKind,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        // ~3.3:1 coarse-to-final ratio, k_final ~1.25x the default
        // 50-speaker corpus
        ClusterConfig {
            k_coarse: 150,
            k_final: 45,
            method: ClusteringKind::TwoStage,
        }
    }
}

/// Where the first pseudo-labels come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialModel {
    Ivector,
    /// An existing encoder checkpoint (path relative to the config root).
    Encoder(PathBuf),
}

impl std::fmt::Display for InitialModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitialModel::Ivector => write!(f, "ivector"),
            InitialModel::Encoder(p) => write!(f, "encoder:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IplOptions {
    pub num_iterations: usize,
    pub augment_enabled: bool,
    pub initial_model: InitialModel,
}

impl Default for IplOptions {
    fn default() -> Self {
        IplOptions {
            num_iterations: 5,
            augment_enabled: true,
            initial_model: InitialModel::Ivector,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub val_targets: usize,
    pub val_nontargets: usize,
    pub test_targets: usize,
    pub test_nontargets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            val_targets: 200,
            val_nontargets: 200,
            test_targets: 500,
            test_nontargets: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus_dir: PathBuf,
    pub models_dir: PathBuf,
    pub workspace_dir: PathBuf,
    /// Named test trial lists; EERs are reported per name.
    pub test_trials: BTreeMap<String, PathBuf>,
    pub val_trials: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus_dir: PathBuf::from("corpus"),
            models_dir: PathBuf::from("models"),
            workspace_dir: PathBuf::from("workspace"),
            test_trials: [("test".to_string(), PathBuf::from("corpus/trials_test.txt"))].into(),
            val_trials: PathBuf::from("corpus/trials_val.txt"),
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub features: FeaturesConfig,
    pub ubm: UbmConfig,
    pub tv: TvConfig,
    pub cluster: ClusterConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub ipl: IplOptions,
    pub eval: EvalConfig,
    /// Directory relative paths resolve against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl RunConfig {
    pub fn from_str_with_root(text: &str, root: &Path) -> Result<RunConfig> {
        let mut cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::validation(format!("config parse error: {e}")))?;
        cfg.root = root.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::from_str_with_root(&text, &root)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.synth.validate()?;
        self.corpus.wave_synth.validate()?;
        self.features.ubm.validate()?;
        self.features.encoder.validate()?;
        if self.ubm.components == 0 || self.ubm.em_iterations == 0 {
            return Err(Error::validation("ubm.components/em_iterations must be >= 1"));
        }
        if self.tv.rank == 0 || self.tv.em_iterations == 0 {
            return Err(Error::validation("tv.rank/em_iterations must be >= 1"));
        }
        if self.cluster.k_final == 0 || self.cluster.k_coarse < self.cluster.k_final {
            return Err(Error::validation("need cluster.k_coarse >= k_final >= 1"));
        }
        self.encoder.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.ipl.num_iterations == 0 {
            return Err(Error::validation("ipl.num_iterations must be >= 1"));
        }
        if self.eval.val_targets == 0
            || self.eval.val_nontargets == 0
            || self.eval.test_targets == 0
            || self.eval.test_nontargets == 0
        {
            return Err(Error::validation("eval trial counts must be >= 1"));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.resolve(&self.paths.corpus_dir)
    }

    pub fn models_dir(&self) -> PathBuf {
        self.resolve(&self.paths.models_dir)
    }

    pub fn workspace_dir(&self) -> PathBuf {
        self.resolve(&self.paths.workspace_dir)
    }

    pub fn corpus_manifest(&self) -> PathBuf {
        self.corpus_dir().join("manifest.tsv")
    }

    /// UBM-path feature manifest (waveform mode keeps extracted features
    /// in per-recipe subdirectories).
    pub fn ubm_feature_manifest(&self) -> PathBuf {
        match self.corpus.mode {
            CorpusMode::Features => self.corpus_manifest(),
            CorpusMode::Waves => self.corpus_dir().join("feats_ubm").join("manifest.tsv"),
        }
    }

    pub fn encoder_feature_manifest(&self) -> PathBuf {
        match self.corpus.mode {
            CorpusMode::Features => self.corpus_manifest(),
            CorpusMode::Waves => self.corpus_dir().join("feats_enc").join("manifest.tsv"),
        }
    }

    pub fn ubm_path(&self) -> PathBuf {
        self.models_dir().join("ubm.gmm1")
    }

    pub fn tv_path(&self) -> PathBuf {
        self.models_dir().join("tv.tvm1")
    }

    pub fn ivectors_path(&self) -> PathBuf {
        self.models_dir().join("ivectors.iva1")
    }

    pub fn val_trials_path(&self) -> PathBuf {
        self.resolve(&self.paths.val_trials)
    }

    pub fn test_trials_paths(&self) -> Vec<(String, PathBuf)> {
        self.paths
            .test_trials
            .iter()
            .map(|(name, p)| (name.clone(), self.resolve(p)))
            .collect()
    }
}
