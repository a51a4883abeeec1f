//! Waveform-to-feature conversion.
//!
//! The chain is: pre-emphasis, framing with a Hamming window, power
//! spectrum, Mel filterbank energies, log (floored), optional DCT-II to
//! cepstra, optional delta/double-delta appendage, optional CMVN.
//!
//! Two recipes share this module: MFCC with deltas for the UBM/i-vector
//! path, and log-Mel energies for the encoder path.

use crate::binio;
use crate::error::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

/// Floor applied to filterbank energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// A mono waveform. Samples are stored as f32, matching the `WAV1` file
/// format; DSP runs in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Wave {
    pub samples: Vec<f32>,
}

impl Wave {
    pub fn new(samples: Vec<f32>) -> Self {
        Wave { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| f64::from(s)).collect()
    }

    /// Writes the `WAV1` format: magic, u32 sample count, f32 samples.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 4 * self.samples.len());
        binio::write_magic(&mut buf, b"WAV1")?;
        binio::write_u32(&mut buf, self.samples.len() as u32)?;
        for &s in &self.samples {
            binio::write_f32(&mut buf, s)?;
        }
        binio::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = bytes.as_slice();
        binio::expect_magic(&mut r, b"WAV1", path)?;
        let n = binio::read_u32(&mut r)? as usize;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            samples.push(binio::read_f32(&mut r)?);
        }
        Ok(Wave { samples })
    }
}

/// A sequence of feature frames, stored row-major (T rows of D dims).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    data: Vec<f64>,
    num_frames: usize,
    dim: usize,
    pub frame_shift_ms: f32,
    pub source_id: String,
}

impl FrameMatrix {
    pub fn zeros(num_frames: usize, dim: usize) -> Self {
        FrameMatrix {
            data: vec![0.0; num_frames * dim],
            num_frames,
            dim,
            frame_shift_ms: 10.0,
            source_id: String::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let num_frames = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(num_frames * dim);
        for r in rows {
            assert_eq!(r.len(), dim, "ragged frame rows");
            data.extend_from_slice(r);
        }
        FrameMatrix {
            data,
            num_frames,
            dim,
            frame_shift_ms: 10.0,
            source_id: String::new(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn at(&self, t: usize, d: usize) -> f64 {
        self.data[t * self.dim + d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Copies frames `[start, start+len)` into a new matrix.
    pub fn slice_frames(&self, start: usize, len: usize) -> FrameMatrix {
        assert!(start + len <= self.num_frames);
        FrameMatrix {
            data: self.data[start * self.dim..(start + len) * self.dim].to_vec(),
            num_frames: len,
            dim: self.dim,
            frame_shift_ms: self.frame_shift_ms,
            source_id: self.source_id.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the `FMX1` format: magic, u32 T, u32 D, f32 frame shift,
    /// then T*D little-endian f32 row-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.data.len());
        binio::write_magic(&mut buf, b"FMX1")?;
        binio::write_u32(&mut buf, self.num_frames as u32)?;
        binio::write_u32(&mut buf, self.dim as u32)?;
        binio::write_f32(&mut buf, self.frame_shift_ms)?;
        for &v in &self.data {
            binio::write_f32(&mut buf, v as f32)?;
        }
        binio::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = bytes.as_slice();
        binio::expect_magic(&mut r, b"FMX1", path)?;
        let num_frames = binio::read_u32(&mut r)? as usize;
        let dim = binio::read_u32(&mut r)? as usize;
        let frame_shift_ms = binio::read_f32(&mut r)?;
        let mut data = Vec::with_capacity(num_frames * dim);
        for _ in 0..num_frames * dim {
            data.push(f64::from(binio::read_f32(&mut r)?));
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail)? != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "trailing bytes after frame data".into(),
            });
        }
        let source_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(FrameMatrix {
            data,
            num_frames,
            dim,
            frame_shift_ms,
            source_id,
        })
    }
}

/// Feature extraction settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub num_mel_filters: usize,
    pub num_cepstra: usize,
    /// true: emit log-Mel filterbank energies; false: emit MFCCs.
    pub use_log_mel: bool,
    pub delta_order: usize,
    pub delta_window: usize,
    pub preemphasis: f64,
    pub apply_cmvn: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate_hz: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            num_mel_filters: 24,
            num_cepstra: 24,
            use_log_mel: false,
            delta_order: 2,
            delta_window: 2,
            preemphasis: 0.97,
            apply_cmvn: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return Err(Error::validation("sample_rate_hz must be positive"));
        }
        if !(self.window_ms > self.hop_ms && self.hop_ms > 0.0) {
            return Err(Error::validation("window_ms > hop_ms > 0 required"));
        }
        if self.num_mel_filters == 0 || self.num_cepstra == 0 {
            return Err(Error::validation("filter/cepstra counts must be >= 1"));
        }
        if self.num_cepstra > self.num_mel_filters {
            return Err(Error::validation("num_cepstra must be <= num_mel_filters"));
        }
        if self.delta_order > 2 {
            return Err(Error::validation("delta_order must be 0, 1 or 2"));
        }
        if self.delta_window == 0 {
            return Err(Error::validation("delta_window must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return Err(Error::validation("preemphasis must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * f64::from(self.sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * f64::from(self.sample_rate_hz) / 1000.0).round() as usize
    }

    /// Base feature dimension before deltas.
    pub fn base_dim(&self) -> usize {
        if self.use_log_mel {
            self.num_mel_filters
        } else {
            self.num_cepstra
        }
    }

    /// Final dimension including deltas.
    pub fn feature_dim(&self) -> usize {
        self.base_dim() * (1 + self.delta_order)
    }
}

/// Hz -> Mel (HTK convention).
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// Mel -> Hz.
pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p <<= 1;
    }
    p
}

/// Triangular Mel filterbank over the one-sided spectrum.
/// Returns `num_filters` rows of `nfft/2 + 1` weights.
fn mel_filterbank(num_filters: usize, nfft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let nyquist = sample_rate / 2.0;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(nyquist);
    let centers: Vec<f64> = (0..num_filters + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (num_filters + 1) as f64))
        .collect();
    let num_bins = nfft / 2 + 1;
    let bin_hz = sample_rate / nfft as f64;
    let mut bank = vec![vec![0.0; num_bins]; num_filters];
    for (m, row) in bank.iter_mut().enumerate() {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > lo && f < mid {
                *w = (f - lo) / (mid - lo);
            } else if (f - mid).abs() < 1e-12 {
                *w = 1.0;
            } else if f > mid && f < hi {
                *w = (hi - f) / (hi - mid);
            }
        }
    }
    bank
}

/// Cuts the pre-emphasized signal into Hamming-windowed frames.
///
/// Frame count is `floor((N - W) / H) + 1`. A wave shorter than one
/// window is an error.
pub fn frame_signal(wave: &[f64], cfg: &FeatureConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let w = cfg.window_samples();
    let h = cfg.hop_samples();
    if wave.len() < w {
        return Err(Error::validation(format!(
            "utterance too short: {} samples, window needs {}",
            wave.len(),
            w
        )));
    }
    // Pre-emphasis over the whole signal; x[-1] taken as 0.
    let mut pre = Vec::with_capacity(wave.len());
    let mut prev = 0.0;
    for &x in wave {
        pre.push(x - cfg.preemphasis * prev);
        prev = x;
    }
    let window: Vec<f64> = (0..w)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (w - 1) as f64).cos())
        .collect();
    let num_frames = (wave.len() - w) / h + 1;
    let mut frames = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let start = t * h;
        let frame: Vec<f64> = (0..w).map(|n| pre[start + n] * window[n]).collect();
        frames.push(frame);
    }
    Ok(frames)
}

/// Full feature extraction: power spectrum, Mel energies, log,
/// optional DCT-II, deltas per `cfg.delta_order`. CMVN is a separate step.
pub fn extract_features(wave: &Wave, cfg: &FeatureConfig) -> Result<FrameMatrix> {
    extract_features_from(&wave.to_f64(), cfg)
}

/// [`extract_features`] on raw f64 samples (augmented segments skip the
/// f32 round trip).
pub fn extract_features_from(samples: &[f64], cfg: &FeatureConfig) -> Result<FrameMatrix> {
    let frames = frame_signal(samples, cfg)?;
    let w = cfg.window_samples();
    let nfft = next_pow2(w);
    let bank = mel_filterbank(cfg.num_mel_filters, nfft, f64::from(cfg.sample_rate_hz));

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nfft);
    let mut rows = Vec::with_capacity(frames.len());
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for frame in &frames {
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(if i < w { frame[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..nfft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let log_energies: Vec<f64> = bank
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        let row = if cfg.use_log_mel {
            log_energies
        } else {
            dct2_orthonormal(&log_energies, cfg.num_cepstra)
        };
        rows.push(row);
    }
    let mut m = FrameMatrix::from_rows(&rows);
    m.frame_shift_ms = cfg.hop_ms as f32;
    if cfg.delta_order > 0 {
        m = add_deltas(&m, cfg.delta_order, cfg.delta_window)?;
    }
    if !m.is_finite() {
        return Err(Error::numerical(
            "non-finite feature output: filterbank misconfiguration",
        ));
    }
    Ok(m)
}

/// Extraction plus CMVN when the config asks for it.
pub fn featurize(wave: &Wave, cfg: &FeatureConfig) -> Result<FrameMatrix> {
    featurize_samples(&wave.to_f64(), cfg)
}

/// [`featurize`] on raw f64 samples.
pub fn featurize_samples(samples: &[f64], cfg: &FeatureConfig) -> Result<FrameMatrix> {
    let m = extract_features_from(samples, cfg)?;
    if cfg.apply_cmvn {
        cmvn(&m)
    } else {
        Ok(m)
    }
}

fn dct2_orthonormal(x: &[f64], keep: usize) -> Vec<f64> {
    let m = x.len();
    let mut out = Vec::with_capacity(keep);
    for j in 0..keep {
        let mut s = 0.0;
        for (i, &v) in x.iter().enumerate() {
            s += v * (std::f64::consts::PI * (2 * i + 1) as f64 * j as f64 / (2 * m) as f64).cos();
        }
        let scale = if j == 0 {
            (1.0 / m as f64).sqrt()
        } else {
            (2.0 / m as f64).sqrt()
        };
        out.push(scale * s);
    }
    out
}

/// Appends delta (and for `order == 2` double-delta) coefficients:
/// `d_t = sum_n n*(c_{t+n} - c_{t-n}) / (2 * sum_n n^2)` with boundary
/// frames replicated.
pub fn add_deltas(m: &FrameMatrix, order: usize, window: usize) -> Result<FrameMatrix> {
    if !(1..=2).contains(&order) {
        return Err(Error::validation("delta order must be 1 or 2"));
    }
    if m.num_frames() == 0 {
        return Err(Error::validation("empty frame matrix"));
    }
    let base_dim = m.dim();
    let t_len = m.num_frames();
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();

    let delta_of = |src: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let clamp = |t: isize| -> usize { t.clamp(0, (t_len - 1) as isize) as usize };
        (0..t_len)
            .map(|t| {
                (0..base_dim)
                    .map(|d| {
                        let mut acc = 0.0;
                        for n in 1..=window {
                            let fwd = src[clamp(t as isize + n as isize)][d];
                            let bwd = src[clamp(t as isize - n as isize)][d];
                            acc += n as f64 * (fwd - bwd);
                        }
                        acc / denom
                    })
                    .collect()
            })
            .collect()
    };

    let base: Vec<Vec<f64>> = m.rows().map(<[f64]>::to_vec).collect();
    let d1 = delta_of(&base);
    let d2 = if order == 2 { Some(delta_of(&d1)) } else { None };

    let rows: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            let mut row = base[t].clone();
            row.extend_from_slice(&d1[t]);
            if let Some(dd) = &d2 {
                row.extend_from_slice(&dd[t]);
            }
            row
        })
        .collect();
    let mut out = FrameMatrix::from_rows(&rows);
    out.frame_shift_ms = m.frame_shift_ms;
    out.source_id = m.source_id.clone();
    Ok(out)
}

/// Per-dimension mean/variance normalization over the utterance.
/// An exactly constant dimension is zeroed with a unit divisor.
pub fn cmvn(m: &FrameMatrix) -> Result<FrameMatrix> {
    let t_len = m.num_frames();
    if t_len < 2 {
        return Err(Error::validation("cmvn needs at least 2 frames"));
    }
    let d = m.dim();
    let mut out = m.clone();
    for j in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for t in 0..t_len {
            let v = m.at(t, j);
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        if lo == hi {
            for t in 0..t_len {
                out.row_mut(t)[j] = 0.0;
            }
            continue;
        }
        let mean = sum / t_len as f64;
        let var = (0..t_len).map(|t| (m.at(t, j) - mean).powi(2)).sum::<f64>() / t_len as f64;
        let inv_std = 1.0 / var.sqrt();
        for t in 0..t_len {
            out.row_mut(t)[j] = (m.at(t, j) - mean) * inv_std;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cfg_16k() -> FeatureConfig {
        FeatureConfig::default()
    }

    #[test]
    fn frame_count_formula() {
        let cfg = cfg_16k();
        let wave: Vec<f64> = vec![0.1; 16_000];
        assert_eq!(frame_signal(&wave, &cfg).unwrap().len(), 98);
        let one: Vec<f64> = vec![0.1; 400];
        assert_eq!(frame_signal(&one, &cfg).unwrap().len(), 1);
        let short: Vec<f64> = vec![0.1; 399];
        assert!(frame_signal(&short, &cfg).is_err());
    }

    #[test]
    fn mfcc_dim_with_double_deltas_is_72() {
        let cfg = FeatureConfig {
            num_mel_filters: 24,
            num_cepstra: 24,
            delta_order: 2,
            ..cfg_16k()
        };
        assert_eq!(cfg.feature_dim(), 72);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wave = Wave::new((0..4000).map(|_| rng.random_range(-0.5..0.5)).collect());
        let m = extract_features(&wave, &cfg).unwrap();
        assert_eq!(m.dim(), 72);
    }

    #[test]
    fn zero_wave_gives_constant_log_floor() {
        let cfg = FeatureConfig {
            use_log_mel: true,
            delta_order: 0,
            preemphasis: 0.0,
            ..cfg_16k()
        };
        let wave = Wave::new(vec![0.0; 1600]);
        let m = extract_features(&wave, &cfg).unwrap();
        let expect = LOG_FLOOR.ln();
        for row in m.rows() {
            for &v in row {
                assert_eq!(v, expect);
            }
        }
    }

    /// Oracle: locate the filter whose triangle contains 1 kHz by
    /// recomputing the Mel edge frequencies directly.
    #[test]
    fn pure_tone_energy_peaks_in_matching_mel_bin() {
        let cfg = FeatureConfig {
            use_log_mel: true,
            delta_order: 0,
            preemphasis: 0.0,
            ..cfg_16k()
        };
        let tone_hz = 1000.0;
        let sr = 16_000.0;
        let wave = Wave::new(
            (0..8000)
                .map(|n| (2.0 * std::f64::consts::PI * tone_hz * n as f64 / sr).sin() as f32)
                .collect(),
        );
        let m = extract_features(&wave, &cfg).unwrap();

        // Independent edge computation: filter m spans (center[m], center[m+2]);
        // the tone lands in the filter whose peak is nearest in Mel space.
        let mel_hi = 2595.0 * (1.0f64 + (sr / 2.0) / 700.0).log10();
        let tone_mel = 2595.0 * (1.0f64 + tone_hz / 700.0).log10();
        let nf = cfg.num_mel_filters as f64;
        let mut best = 0usize;
        let mut best_gap = f64::INFINITY;
        for fidx in 0..cfg.num_mel_filters {
            let peak_mel = mel_hi * (fidx as f64 + 1.0) / (nf + 1.0);
            let gap = (peak_mel - tone_mel).abs();
            if gap < best_gap {
                best_gap = gap;
                best = fidx;
            }
        }
        for row in m.rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, best, "tone should peak in mel filter {best}");
        }
    }

    #[test]
    fn deltas_constant_input_are_zero() {
        let m = FrameMatrix::from_rows(&vec![vec![3.5, -1.0]; 8]);
        let out = add_deltas(&m, 1, 2).unwrap();
        for row in out.rows() {
            assert_eq!(&row[..2], &[3.5, -1.0]);
            assert_eq!(&row[2..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn deltas_of_ramp_are_one_at_interior() {
        // hand evaluation with N=2: (1*2 + 2*4) / (2*(1+4)) = 1
        let rows: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64]).collect();
        let m = FrameMatrix::from_rows(&rows);
        let out = add_deltas(&m, 1, 2).unwrap();
        for t in 2..8 {
            assert!((out.at(t, 1) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn double_deltas_of_ramp_vanish_at_interior() {
        let rows: Vec<Vec<f64>> = (0..12).map(|t| vec![t as f64]).collect();
        let m = FrameMatrix::from_rows(&rows);
        let out = add_deltas(&m, 2, 2).unwrap();
        assert_eq!(out.dim(), 3);
        for t in 4..8 {
            assert!(out.at(t, 2).abs() < 1e-12);
        }
    }

    #[test]
    fn cmvn_two_frames() {
        let m = FrameMatrix::from_rows(&[vec![0.0], vec![2.0]]);
        let out = cmvn(&m).unwrap();
        assert!((out.at(0, 0) + 1.0).abs() < 1e-12);
        assert!((out.at(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cmvn_constant_dimension_zeroed() {
        let m = FrameMatrix::from_rows(&[vec![4.0, 1.0], vec![4.0, 3.0], vec![4.0, 5.0]]);
        let out = cmvn(&m).unwrap();
        for t in 0..3 {
            assert_eq!(out.at(t, 0), 0.0);
        }
        assert!(cmvn(&FrameMatrix::from_rows(&[vec![1.0]])).is_err());
    }

    /// Oracle: recompute column statistics from the normalized output.
    #[test]
    fn cmvn_random_matrix_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..5).map(|_| rng.random_range(-4.0..9.0)).collect())
            .collect();
        let out = cmvn(&FrameMatrix::from_rows(&rows)).unwrap();
        for j in 0..5 {
            let mean: f64 = (0..100).map(|t| out.at(t, j)).sum::<f64>() / 100.0;
            let var: f64 = (0..100).map(|t| (out.at(t, j) - mean).powi(2)).sum::<f64>() / 100.0;
            assert!(mean.abs() < 1e-10, "col {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "col {j} var {var}");
        }
    }

    #[test]
    fn fmx_round_trip_and_magic_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u1.fmx");
        let mut m = FrameMatrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]);
        m.frame_shift_ms = 10.0;
        m.save(&path).unwrap();
        let back = FrameMatrix::load(&path).unwrap();
        assert_eq!(back.num_frames(), 2);
        assert_eq!(back.dim(), 2);
        assert_eq!(back.data(), m.data());
        assert_eq!(back.source_id, "u1");

        let bad = dir.path().join("bad.fmx");
        std::fs::write(&bad, b"NOPE00000").unwrap();
        assert!(matches!(
            FrameMatrix::load(&bad),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn wave_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.wav1");
        let w = Wave::new(vec![0.5, -0.25, 0.0, 1.0]);
        w.save(&path).unwrap();
        assert_eq!(Wave::load(&path).unwrap(), w);
    }

    /// Scaling the waveform by a > 0 shifts every log-Mel energy by
    /// exactly 2*ln(a) (before CMVN).
    #[test]
    fn log_mel_scale_covariance() {
        let cfg = FeatureConfig {
            use_log_mel: true,
            delta_order: 0,
            ..cfg_16k()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<f32> = (0..3200).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        // power-of-two factors scale f32 samples exactly
        for alpha in [0.5f64, 2.0, 8.0] {
            let m0 = extract_features(&Wave::new(base.clone()), &cfg).unwrap();
            let scaled: Vec<f32> = base.iter().map(|&s| (f64::from(s) * alpha) as f32).collect();
            let m1 = extract_features(&Wave::new(scaled), &cfg).unwrap();
            let shift = 2.0 * alpha.ln();
            for t in 0..m0.num_frames() {
                for d in 0..m0.dim() {
                    let got = m1.at(t, d) - m0.at(t, d);
                    assert!((got - shift).abs() < 1e-9, "shift {got} vs {shift}");
                }
            }
        }
    }

    /// Deltas commute with per-dimension affine maps on the base
    /// coefficients: deltas(a*c + b) == a * deltas(c).
    #[test]
    fn deltas_affine_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (a, b) = (2.5, -0.7);
        let mapped: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| a * v + b).collect())
            .collect();
        let d0 = add_deltas(&FrameMatrix::from_rows(&rows), 1, 2).unwrap();
        let d1 = add_deltas(&FrameMatrix::from_rows(&mapped), 1, 2).unwrap();
        for t in 0..20 {
            for j in 3..6 {
                assert!((d1.at(t, j) - a * d0.at(t, j)).abs() < 1e-12);
            }
        }
    }
}
