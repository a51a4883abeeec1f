//! Training-time augmentation: random cropping, additive noise at a
//! sampled SNR, and reverberation.
//!
//! Waveform corpora get noise mixing and RIR convolution before feature
//! extraction. Feature-space corpora get the analogous treatment directly
//! on frames: additive Gaussian feature noise at a sampled SNR plus
//! channel dropout. The unaltered-sample embedding path never touches
//! this module; [`Augmenter::times_applied`] lets tests assert that.

use crate::error::{Error, Result};
use crate::features::{FrameMatrix, Wave};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

/// Standard deviation of the white noise shaped by the synthetic RIR tail.
pub const RIR_TAIL_STD: f64 = 0.3;

/// Augmentation settings. `noise_dir`/`rir_dir` switch the respective
/// source from synthetic generation to files sampled from a directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub snr_db_low: f64,
    pub snr_db_high: f64,
    pub apply_noise_prob: f64,
    pub apply_rir_prob: f64,
    pub noise_dir: Option<PathBuf>,
    pub rir_dir: Option<PathBuf>,
    /// Synthetic RIR length in samples.
    pub rir_length: usize,
    /// Synthetic RIR decay constant in samples.
    pub rir_decay: f64,
    /// Per-channel dropout probability in feature mode.
    pub channel_dropout: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            snr_db_low: 10.0,
            snr_db_high: 25.0,
            apply_noise_prob: 0.6,
            apply_rir_prob: 0.3,
            noise_dir: None,
            rir_dir: None,
            rir_length: 256,
            rir_decay: 40.0,
            channel_dropout: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db_low > self.snr_db_high {
            return Err(Error::validation("snr_db_low must be <= snr_db_high"));
        }
        for (name, p) in [
            ("apply_noise_prob", self.apply_noise_prob),
            ("apply_rir_prob", self.apply_rir_prob),
            ("channel_dropout", self.channel_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} must be in [0, 1]")));
            }
        }
        if self.rir_length == 0 || self.rir_decay <= 0.0 {
            return Err(Error::validation("rir_length and rir_decay must be positive"));
        }
        Ok(())
    }
}

/// Uniformly random contiguous crop of `len` frames. A matrix shorter
/// than `len` falls back to the full sample padded by repetition.
pub fn crop_frames(m: &FrameMatrix, len: usize, rng: &mut ChaCha8Rng) -> FrameMatrix {
    let t = m.num_frames();
    if t >= len {
        let offset = rng.random_range(0..=t - len);
        return m.slice_frames(offset, len);
    }
    log::debug!(
        "{}: {t} frames shorter than crop {len}; repetition-padding",
        m.source_id
    );
    let rows: Vec<Vec<f64>> = (0..len).map(|i| m.row(i % t).to_vec()).collect();
    let mut out = FrameMatrix::from_rows(&rows);
    out.frame_shift_ms = m.frame_shift_ms;
    out.source_id = m.source_id.clone();
    out
}

/// Waveform counterpart of [`crop_frames`].
pub fn crop_wave(samples: &[f64], len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = samples.len();
    if n >= len {
        let offset = rng.random_range(0..=n - len);
        return samples[offset..offset + len].to_vec();
    }
    log::debug!("wave of {n} samples shorter than crop {len}; repetition-padding");
    (0..len).map(|i| samples[i % n]).collect()
}

fn mean_square(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

fn fit_length(noise: &[f64], len: usize) -> Vec<f64> {
    (0..len).map(|i| noise[i % noise.len()]).collect()
}

/// Mixes `noise` into `signal` so the result has exactly the requested
/// SNR in the mean-square sense: the noise is scaled by
/// `sqrt(P_sig / (P_noise * 10^(snr/10)))`. Zero-power noise skips the
/// mix; a zero-power signal is an error.
pub fn mix_noise_at_snr(signal: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    if signal.is_empty() || noise.is_empty() {
        return Err(Error::validation("empty signal or noise"));
    }
    let p_sig = mean_square(signal);
    if p_sig == 0.0 {
        return Err(Error::numerical("zero-power signal cannot set an SNR"));
    }
    let fitted = fit_length(noise, signal.len());
    let p_noise = mean_square(&fitted);
    if p_noise == 0.0 {
        log::warn!("zero-power noise sample; skipping mix");
        return Ok(signal.to_vec());
    }
    let gain = (p_sig / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(signal
        .iter()
        .zip(&fitted)
        .map(|(s, n)| s + gain * n)
        .collect())
}

/// Full linear convolution with the RIR, truncated to the signal length
/// and peak-normalized back to the dry signal's peak.
pub fn convolve_rir(signal: &[f64], rir: &[f64]) -> Result<Vec<f64>> {
    if rir.is_empty() || rir.iter().all(|&h| h == 0.0) {
        return Err(Error::validation("RIR must contain nonzero taps"));
    }
    if signal.is_empty() {
        return Err(Error::validation("empty signal"));
    }
    let n = signal.len();
    let full = n + rir.len() - 1;
    let mut size = 1usize;
    while size < full {
        size <<= 1;
    }
    use rustfft::{num_complex::Complex, FftPlanner};
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = signal
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut b: Vec<Complex<f64>> = rir
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    fft.process(&mut a);
    fft.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    ifft.process(&mut a);
    let scale = 1.0 / size as f64;
    let mut out: Vec<f64> = a[..n].iter().map(|c| c.re * scale).collect();
    let peak_in = signal.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let peak_out = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak_out > 0.0 {
        let g = peak_in / peak_out;
        for v in &mut out {
            *v *= g;
        }
    }
    Ok(out)
}

/// Synthetic room impulse response: a unit direct path followed by
/// exponentially decaying white noise `exp(-t/decay) * n_t`.
pub fn synth_rir(rng: &mut ChaCha8Rng, length: usize, decay: f64) -> Vec<f64> {
    assert!(length >= 1 && decay > 0.0, "invalid RIR parameters");
    let mut h = Vec::with_capacity(length);
    h.push(1.0);
    for t in 1..length {
        let n: f64 = rng.sample(StandardNormal);
        h.push((-(t as f64) / decay).exp() * RIR_TAIL_STD * n);
    }
    h
}

enum SampleSource {
    Synthetic,
    Files(Vec<PathBuf>),
}

impl SampleSource {
    fn scan(dir: &Option<PathBuf>, what: &str) -> Result<Self> {
        match dir {
            None => Ok(SampleSource::Synthetic),
            Some(d) => {
                let mut files: Vec<PathBuf> = std::fs::read_dir(d)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| {
                        p.extension()
                            .is_some_and(|x| x == "wav1" || x == "fmx")
                    })
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(Error::validation(format!(
                        "{what} directory {} holds no .wav1/.fmx files",
                        d.display()
                    )));
                }
                Ok(SampleSource::Files(files))
            }
        }
    }
}

fn load_samples(path: &std::path::Path) -> Result<Vec<f64>> {
    if path.extension().is_some_and(|x| x == "fmx") {
        Ok(FrameMatrix::load(path)?.data().to_vec())
    } else {
        Ok(Wave::load(path)?.to_f64())
    }
}

/// Stateful augmentation front-end. Each call consumes randomness only
/// from the caller-provided per-sample RNG stream, so augmentation is
/// parallel-safe and reproducible.
pub struct Augmenter {
    cfg: AugmentConfig,
    noise: SampleSource,
    rir: SampleSource,
    applied: AtomicU64,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig) -> Result<Self> {
        cfg.validate()?;
        let noise = SampleSource::scan(&cfg.noise_dir, "noise")?;
        let rir = SampleSource::scan(&cfg.rir_dir, "rir")?;
        Ok(Augmenter {
            cfg,
            noise,
            rir,
            applied: AtomicU64::new(0),
        })
    }

    /// Number of augmentation calls made so far; the unaltered embedding
    /// path must leave this untouched.
    pub fn times_applied(&self) -> u64 {
        self.applied.load(Ordering::Relaxed)
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    /// Noise + reverberation on a waveform segment.
    pub fn augment_wave(&self, segment: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.applied.fetch_add(1, Ordering::Relaxed);
        let mut out = segment.to_vec();
        if rng.random_range(0.0..1.0) < self.cfg.apply_noise_prob {
            let snr = rng.random_range(self.cfg.snr_db_low..=self.cfg.snr_db_high);
            let noise = match &self.noise {
                SampleSource::Synthetic => {
                    (0..out.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
                }
                SampleSource::Files(files) => {
                    let pick = rng.random_range(0..files.len());
                    load_samples(&files[pick])?
                }
            };
            if mean_square(&out) > 0.0 {
                out = mix_noise_at_snr(&out, &noise, snr)?;
            }
        }
        if rng.random_range(0.0..1.0) < self.cfg.apply_rir_prob {
            let rir = match &self.rir {
                SampleSource::Synthetic => {
                    synth_rir(rng, self.cfg.rir_length, self.cfg.rir_decay)
                }
                SampleSource::Files(files) => {
                    let pick = rng.random_range(0..files.len());
                    load_samples(&files[pick])?
                }
            };
            out = convolve_rir(&out, &rir)?;
        }
        Ok(out)
    }

    /// Feature-space analog: Gaussian feature noise at a sampled SNR plus
    /// channel dropout.
    pub fn augment_frames(&self, segment: &FrameMatrix, rng: &mut ChaCha8Rng) -> Result<FrameMatrix> {
        self.applied.fetch_add(1, Ordering::Relaxed);
        let mut data = segment.data().to_vec();
        if rng.random_range(0.0..1.0) < self.cfg.apply_noise_prob && mean_square(&data) > 0.0 {
            let snr = rng.random_range(self.cfg.snr_db_low..=self.cfg.snr_db_high);
            let noise: Vec<f64> = (0..data.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            data = mix_noise_at_snr(&data, &noise, snr)?;
        }
        if rng.random_range(0.0..1.0) < self.cfg.apply_rir_prob {
            let dim = segment.dim();
            let dropped: Vec<bool> = (0..dim)
                .map(|_| rng.random_range(0.0..1.0) < self.cfg.channel_dropout)
                .collect();
            for (i, v) in data.iter_mut().enumerate() {
                if dropped[i % dim] {
                    *v = 0.0;
                }
            }
        }
        let rows: Vec<Vec<f64>> = data.chunks(segment.dim()).map(<[f64]>::to_vec).collect();
        let mut out = FrameMatrix::from_rows(&rows);
        out.frame_shift_ms = segment.frame_shift_ms;
        out.source_id = segment.source_id.clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn crop_full_length_is_identity() {
        let m = FrameMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let c = crop_frames(&m, 3, &mut rng(0));
        assert_eq!(c.data(), m.data());
    }

    #[test]
    fn crop_is_deterministic_and_pads_short_input() {
        let m = FrameMatrix::from_rows(&(0..30).map(|t| vec![t as f64]).collect::<Vec<_>>());
        let a = crop_frames(&m, 10, &mut rng(7));
        let b = crop_frames(&m, 10, &mut rng(7));
        assert_eq!(a.data(), b.data());

        let short = FrameMatrix::from_rows(&[vec![5.0], vec![6.0]]);
        let padded = crop_frames(&short, 5, &mut rng(1));
        assert_eq!(padded.num_frames(), 5);
        assert_eq!(padded.data(), &[5.0, 6.0, 5.0, 6.0, 5.0]);
    }

    /// Offsets of 1000 crops of length 10 from a length-100 signal land
    /// uniformly in [0, 90]: chi-square over the 91 cells stays under the
    /// 0.99 quantile of chi2(90) = 124.116.
    #[test]
    fn crop_offsets_uniform_by_chi_square() {
        let samples: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let mut counts = [0usize; 91];
        let mut r = rng(13);
        for _ in 0..1000 {
            let c = crop_wave(&samples, 10, &mut r);
            counts[c[0] as usize] += 1;
        }
        let expected = 1000.0 / 91.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 124.116, "chi2 = {chi2}");
    }

    #[test]
    fn snr_zero_db_unit_gain() {
        let signal = vec![1.0, -1.0, 1.0, -1.0];
        let noise = vec![1.0, 1.0, -1.0, -1.0];
        let mixed = mix_noise_at_snr(&signal, &noise, 0.0).unwrap();
        for ((m, s), n) in mixed.iter().zip(&signal).zip(&noise) {
            assert!((m - (s + n)).abs() < 1e-15);
        }
    }

    #[test]
    fn snr_ten_db_gain() {
        let signal = vec![1.0, -1.0, 1.0, -1.0];
        let noise = vec![1.0, 1.0, -1.0, -1.0];
        let mixed = mix_noise_at_snr(&signal, &noise, 10.0).unwrap();
        let g = mixed[0] - signal[0];
        assert!((g - 10f64.powf(-0.5)).abs() < 1e-12, "gain {g}");
    }

    /// Oracle: recompute the achieved SNR from the output.
    #[test]
    fn snr_exact_for_random_inputs() {
        let mut r = rng(3);
        for _ in 0..20 {
            let n = r.random_range(50..200);
            let signal: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let noise: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let snr = r.random_range(10.0..25.0);
            let mixed = mix_noise_at_snr(&signal, &noise, snr).unwrap();
            let scaled: Vec<f64> = mixed.iter().zip(&signal).map(|(m, s)| m - s).collect();
            let achieved = 10.0 * (mean_square(&signal) / mean_square(&scaled)).log10();
            assert!((achieved - snr).abs() < 1e-9, "requested {snr}, got {achieved}");
        }
    }

    #[test]
    fn snr_degenerate_inputs() {
        let signal = vec![0.5, -0.5];
        let silent = vec![0.0, 0.0];
        assert_eq!(mix_noise_at_snr(&signal, &silent, 10.0).unwrap(), signal);
        assert!(mix_noise_at_snr(&silent, &signal, 10.0).is_err());
    }

    #[test]
    fn convolve_identity_and_delay() {
        let signal: Vec<f64> = (0..50).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let out = convolve_rir(&signal, &[1.0]).unwrap();
        for (a, b) in out.iter().zip(&signal) {
            assert!((a - b).abs() < 1e-9);
        }

        let delayed = convolve_rir(&signal, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let peak_in = signal.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let peak_out = delayed.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!((peak_in - peak_out).abs() < 1e-9);
        // shifted content matches up to the common peak normalization
        let shifted_raw: Vec<f64> = (0..signal.len())
            .map(|i| if i >= 5 { signal[i - 5] } else { 0.0 })
            .collect();
        let raw_peak = shifted_raw.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let g = peak_in / raw_peak;
        for (a, b) in delayed.iter().zip(&shifted_raw) {
            assert!((a - g * b).abs() < 1e-9);
        }

        assert!(convolve_rir(&signal, &[0.0, 0.0]).is_err());
    }

    /// Oracle: direct O(N*L) convolution sum.
    #[test]
    fn convolve_matches_naive_oracle() {
        let mut r = rng(9);
        let signal: Vec<f64> = (0..300).map(|_| r.random_range(-1.0..1.0)).collect();
        let rir: Vec<f64> = (0..40).map(|_| r.random_range(-0.5..0.5)).collect();
        let out = convolve_rir(&signal, &rir).unwrap();

        let mut naive = vec![0.0; signal.len()];
        for (t, slot) in naive.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &h) in rir.iter().enumerate() {
                if t >= k {
                    acc += h * signal[t - k];
                }
            }
            *slot = acc;
        }
        let peak_in = signal.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let peak_naive = naive.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let g = peak_in / peak_naive;
        for (a, b) in out.iter().zip(&naive) {
            assert!((a - g * b).abs() < 1e-9);
        }
    }

    #[test]
    fn synth_rir_limits_and_energy() {
        // decay -> 0 collapses to the unit impulse
        let h = synth_rir(&mut rng(2), 64, 1e-3);
        assert_eq!(h[0], 1.0);
        assert!(h[1..].iter().all(|&v| v.abs() < 1e-10));

        let a = synth_rir(&mut rng(5), 64, 20.0);
        let b = synth_rir(&mut rng(5), 64, 20.0);
        assert_eq!(a, b);

        // Monte Carlo energy vs the closed-form geometric expectation
        let (length, decay) = (128usize, 15.0f64);
        let mut energies = Vec::new();
        for s in 0..100u64 {
            let h = synth_rir(&mut rng(1000 + s), length, decay);
            energies.push(h.iter().map(|v| v * v).sum::<f64>());
        }
        let mean: f64 = energies.iter().sum::<f64>() / 100.0;
        let tail: f64 = (1..length)
            .map(|t| (-2.0 * t as f64 / decay).exp())
            .sum::<f64>();
        let expected = 1.0 + RIR_TAIL_STD * RIR_TAIL_STD * tail;
        // var(n^2) = 2 sigma^4 per tap
        let var_energy: f64 = (1..length)
            .map(|t| 2.0 * (RIR_TAIL_STD.powi(4)) * (-4.0 * t as f64 / decay).exp())
            .sum::<f64>();
        let std_of_mean = (var_energy / 100.0).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * std_of_mean,
            "mean {mean}, expected {expected}, tol {}",
            3.0 * std_of_mean
        );
    }

    #[test]
    fn augmenter_counts_calls_and_is_deterministic() {
        let aug = Augmenter::new(AugmentConfig::default()).unwrap();
        assert_eq!(aug.times_applied(), 0);
        let m = FrameMatrix::from_rows(&(0..20).map(|t| vec![t as f64, 1.0]).collect::<Vec<_>>());
        let a = aug.augment_frames(&m, &mut rng(4)).unwrap();
        let b = aug.augment_frames(&m, &mut rng(4)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(aug.times_applied(), 2);

        let wave: Vec<f64> = (0..400).map(|i| (i as f64 * 0.05).sin()).collect();
        let w1 = aug.augment_wave(&wave, &mut rng(6)).unwrap();
        let w2 = aug.augment_wave(&wave, &mut rng(6)).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(aug.times_applied(), 4);
    }
}
