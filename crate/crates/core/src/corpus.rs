//! Synthetic corpora and utterance manifests.
//!
//! Two generators exist: a feature-space generator that emits Gaussian
//! frame sequences directly (speaker mean + per-utterance session offset +
//! per-frame noise), and a waveform generator that emits sums of
//! speaker-specific sinusoids plus noise so the feature and augmentation
//! paths can be exercised end to end.

use crate::error::{Error, Result};
use crate::features::{FrameMatrix, Wave};
use crate::seed;
use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    /// Path relative to the manifest root.
    pub source: PathBuf,
    /// Frames for feature files, samples for waveform files.
    pub num_samples: u64,
    /// Ground-truth or pseudo speaker label; `None` when unlabeled.
    pub speaker_label: Option<u32>,
}

/// Corpus index binding utterance ids to stored samples and labels.
///
/// Immutable after load; training code treats whatever labels are present
/// as opaque class ids (pseudo-labels after [`relabel`]).
#[derive(Debug, Clone)]
pub struct UtteranceManifest {
    entries: Vec<ManifestEntry>,
    root: PathBuf,
}

impl PartialEq for UtteranceManifest {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl UtteranceManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: PathBuf) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.utterance_id.clone()) {
                return Err(Error::validation(format!(
                    "duplicate utterance id {}",
                    e.utterance_id
                )));
            }
        }
        Ok(UtteranceManifest { entries, root })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path of an entry's stored sample.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.source)
    }

    pub fn get(&self, utterance_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utterance_id == utterance_id)
    }

    /// True when every entry carries a label.
    pub fn fully_labeled(&self) -> bool {
        self.entries.iter().all(|e| e.speaker_label.is_some())
    }

    /// Ground-truth labels as a map, if every entry has one.
    pub fn label_map(&self) -> Option<BTreeMap<String, u32>> {
        if !self.fully_labeled() {
            return None;
        }
        Some(
            self.entries
                .iter()
                .map(|e| (e.utterance_id.clone(), e.speaker_label.unwrap()))
                .collect(),
        )
    }

    /// Subset keeping the `n` longest utterances (ties break on the id),
    /// original order preserved. `n == 0` keeps everything.
    pub fn longest(&self, n: usize) -> Self {
        if n == 0 || n >= self.entries.len() {
            return self.clone();
        }
        let mut ranked: Vec<&ManifestEntry> = self.entries.iter().collect();
        ranked.sort_by(|a, b| {
            b.num_samples
                .cmp(&a.num_samples)
                .then_with(|| a.utterance_id.cmp(&b.utterance_id))
        });
        let keep: BTreeSet<&str> = ranked[..n].iter().map(|e| e.utterance_id.as_str()).collect();
        let entries = self
            .entries
            .iter()
            .filter(|e| keep.contains(e.utterance_id.as_str()))
            .cloned()
            .collect();
        UtteranceManifest {
            entries,
            root: self.root.clone(),
        }
    }

    /// Copy with all labels removed (unsupervised view of the corpus).
    pub fn stripped(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| ManifestEntry {
                speaker_label: None,
                ..e.clone()
            })
            .collect();
        UtteranceManifest {
            entries,
            root: self.root.clone(),
        }
    }

    /// Saves the tab-separated manifest format; `-1` encodes "unlabeled".
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            let label = e.speaker_label.map_or(-1i64, i64::from);
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.utterance_id,
                e.source.display(),
                e.num_samples,
                label
            )
            .expect("string write");
        }
        crate::binio::atomic_write(path, out.as_bytes())
    }

    /// Loads a manifest; the parent directory of `path` becomes the root
    /// against which sources are resolved. Every source must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 4 {
                return Err(parse_err(line, format!("expected 4 fields, got {}", fields.len())));
            }
            let utterance_id = fields[0].to_string();
            if utterance_id.is_empty() {
                return Err(parse_err(line, "empty utterance id".into()));
            }
            if !seen.insert(utterance_id.clone()) {
                return Err(parse_err(line, format!("duplicate utterance id {utterance_id}")));
            }
            let source = PathBuf::from(fields[1]);
            let num_samples: u64 = fields[2]
                .parse()
                .map_err(|e| parse_err(line, format!("bad sample count: {e}")))?;
            let label_raw: i64 = fields[3]
                .parse()
                .map_err(|e| parse_err(line, format!("bad label: {e}")))?;
            let speaker_label = match label_raw {
                -1 => None,
                l if l >= 0 && l <= i64::from(u32::MAX) => Some(l as u32),
                l => return Err(parse_err(line, format!("negative label {l}"))),
            };
            if !root.join(&source).exists() {
                return Err(parse_err(
                    line,
                    format!("source file not found: {}", source.display()),
                ));
            }
            entries.push(ManifestEntry {
                utterance_id,
                source,
                num_samples,
                speaker_label,
            });
        }
        Ok(UtteranceManifest { entries, root })
    }
}

/// Replaces every label with the pseudo-label from `labels`; the map must
/// cover every entry.
pub fn relabel(
    manifest: &UtteranceManifest,
    labels: &BTreeMap<String, u32>,
) -> Result<UtteranceManifest> {
    let missing: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| !labels.contains_key(&e.utterance_id))
        .map(|e| e.utterance_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "labels missing for utterances: {}",
            missing.join(", ")
        )));
    }
    let entries = manifest
        .entries
        .iter()
        .map(|e| ManifestEntry {
            speaker_label: Some(labels[&e.utterance_id]),
            ..e.clone()
        })
        .collect();
    Ok(UtteranceManifest {
        entries,
        root: manifest.root.clone(),
    })
}

/// Feature-space synthetic corpus settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feature_dim: usize,
    /// Between-speaker standard deviation of the speaker means.
    pub speaker_spread: f64,
    /// Within-speaker per-utterance offset standard deviation.
    pub session_spread: f64,
    /// Number of trailing dimensions carrying the session offset;
    /// 0 spreads it isotropically over every dimension. Confining the
    /// nuisance to a subspace mimics channel variability that a trained
    /// encoder can learn to suppress.
    pub session_dims: usize,
    /// Per-frame noise standard deviation.
    pub frame_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_speakers: 4,
            utterances_per_speaker: 4,
            min_frames: 50,
            max_frames: 80,
            feature_dim: 8,
            speaker_spread: 3.0,
            session_spread: 0.5,
            session_dims: 0,
            frame_noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 || self.utterances_per_speaker == 0 {
            return Err(Error::validation("speaker/utterance counts must be >= 1"));
        }
        if self.min_frames == 0 || self.max_frames < self.min_frames {
            return Err(Error::validation("need 1 <= min_frames <= max_frames"));
        }
        if self.feature_dim == 0 {
            return Err(Error::validation("feature_dim must be >= 1"));
        }
        if self.speaker_spread < 0.0 || self.session_spread < 0.0 {
            return Err(Error::validation("spreads must be nonnegative"));
        }
        if self.session_dims > self.feature_dim {
            return Err(Error::validation("session_dims must be <= feature_dim"));
        }
        if self.frame_noise <= 0.0 {
            return Err(Error::validation("frame_noise must be positive"));
        }
        if self.speaker_spread <= self.session_spread {
            log::warn!(
                "speaker_spread {} <= session_spread {}: speakers will be hard to separate",
                self.speaker_spread,
                self.session_spread
            );
        }
        Ok(())
    }
}

fn normal_vec<R: Rng>(rng: &mut R, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Generates the feature-space corpus into `out_dir` and returns its
/// manifest (ground-truth labels included). Deterministic given the seed.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<UtteranceManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rng = seed::rng(spec.seed, "synth-feat", 0);
    let speaker_means: Vec<Vec<f64>> = (0..spec.num_speakers)
        .map(|_| normal_vec(&mut rng, spec.feature_dim, spec.speaker_spread))
        .collect();
    let session_start = if spec.session_dims == 0 {
        0
    } else {
        spec.feature_dim - spec.session_dims
    };
    let mut entries = Vec::new();
    for (spk, mean) in speaker_means.iter().enumerate() {
        for utt in 0..spec.utterances_per_speaker {
            let mut offset = normal_vec(&mut rng, spec.feature_dim, spec.session_spread);
            for v in &mut offset[..session_start] {
                *v = 0.0;
            }
            let num_frames = rng.random_range(spec.min_frames..=spec.max_frames);
            let rows: Vec<Vec<f64>> = (0..num_frames)
                .map(|_| {
                    (0..spec.feature_dim)
                        .map(|d| {
                            mean[d]
                                + offset[d]
                                + spec.frame_noise * rng.sample::<f64, _>(StandardNormal)
                        })
                        .collect()
                })
                .collect();
            let utterance_id = format!("s{spk:04}_u{utt:04}");
            let mut m = FrameMatrix::from_rows(&rows);
            m.source_id = utterance_id.clone();
            let source = PathBuf::from(format!("{utterance_id}.fmx"));
            m.save(&out_dir.join(&source))?;
            entries.push(ManifestEntry {
                utterance_id,
                source,
                num_samples: num_frames as u64,
                speaker_label: Some(spk as u32),
            });
        }
    }
    UtteranceManifest::new(entries, out_dir.to_path_buf())
}

/// Waveform synthetic corpus settings: each speaker is a fixed chord of
/// sinusoids; sessions jitter amplitude and phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveSynthSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub sample_rate_hz: u32,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub tones_per_speaker: usize,
    pub min_freq_hz: f64,
    pub max_freq_hz: f64,
    /// Waveform noise standard deviation.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for WaveSynthSpec {
    fn default() -> Self {
        WaveSynthSpec {
            num_speakers: 4,
            utterances_per_speaker: 4,
            sample_rate_hz: 8_000,
            min_seconds: 0.8,
            max_seconds: 1.2,
            tones_per_speaker: 3,
            min_freq_hz: 200.0,
            max_freq_hz: 3_200.0,
            noise_level: 0.02,
            seed: 0,
        }
    }
}

impl WaveSynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 || self.utterances_per_speaker == 0 || self.tones_per_speaker == 0
        {
            return Err(Error::validation("counts must be >= 1"));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::validation("sample rate must be positive"));
        }
        if !(self.min_seconds > 0.0 && self.max_seconds >= self.min_seconds) {
            return Err(Error::validation("need 0 < min_seconds <= max_seconds"));
        }
        if !(self.min_freq_hz > 0.0
            && self.max_freq_hz > self.min_freq_hz
            && self.max_freq_hz < f64::from(self.sample_rate_hz) / 2.0)
        {
            return Err(Error::validation(
                "need 0 < min_freq_hz < max_freq_hz < nyquist",
            ));
        }
        if self.noise_level < 0.0 {
            return Err(Error::validation("noise_level must be nonnegative"));
        }
        Ok(())
    }
}

/// Generates the waveform corpus into `out_dir`. Deterministic given the
/// seed.
pub fn synth_generate_waves(spec: &WaveSynthSpec, out_dir: &Path) -> Result<UtteranceManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rng = seed::rng(spec.seed, "synth-wave", 0);
    let sr = f64::from(spec.sample_rate_hz);
    struct Voice {
        freqs: Vec<f64>,
        amps: Vec<f64>,
    }
    let voices: Vec<Voice> = (0..spec.num_speakers)
        .map(|_| Voice {
            freqs: (0..spec.tones_per_speaker)
                .map(|_| rng.random_range(spec.min_freq_hz..spec.max_freq_hz))
                .collect(),
            amps: (0..spec.tones_per_speaker)
                .map(|_| rng.random_range(0.4..1.0))
                .collect(),
        })
        .collect();
    let mut entries = Vec::new();
    for (spk, voice) in voices.iter().enumerate() {
        for utt in 0..spec.utterances_per_speaker {
            let secs = rng.random_range(spec.min_seconds..=spec.max_seconds);
            let n = (secs * sr).round() as usize;
            let phases: Vec<f64> = (0..spec.tones_per_speaker)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            let session_gain = rng.random_range(0.6..1.0);
            let norm = session_gain / spec.tones_per_speaker as f64;
            let samples: Vec<f32> = (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let tone: f64 = voice
                        .freqs
                        .iter()
                        .zip(&voice.amps)
                        .zip(&phases)
                        .map(|((f, a), p)| a * (std::f64::consts::TAU * f * t + p).sin())
                        .sum();
                    let noise: f64 = spec.noise_level * rng.sample::<f64, _>(StandardNormal);
                    (norm * tone + noise) as f32
                })
                .collect();
            let utterance_id = format!("s{spk:04}_u{utt:04}");
            let source = PathBuf::from(format!("{utterance_id}.wav1"));
            Wave::new(samples).save(&out_dir.join(&source))?;
            entries.push(ManifestEntry {
                utterance_id,
                source,
                num_samples: n as u64,
                speaker_label: Some(spk as u32),
            });
        }
    }
    UtteranceManifest::new(entries, out_dir.to_path_buf())
}

/// Loads the frame matrix for one entry.
pub fn load_frames(manifest: &UtteranceManifest, entry: &ManifestEntry) -> Result<FrameMatrix> {
    let mut m = FrameMatrix::load(&manifest.resolve(entry))?;
    m.source_id = entry.utterance_id.clone();
    Ok(m)
}

/// Loads every frame matrix, preserving manifest order.
pub fn load_all_frames(manifest: &UtteranceManifest) -> Result<Vec<FrameMatrix>> {
    manifest
        .entries()
        .iter()
        .map(|e| load_frames(manifest, e))
        .collect()
}
