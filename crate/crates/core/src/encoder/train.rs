//! Adam with linear warm-up, the epoch loop, and best-epoch selection.

use super::{am_softmax_loss, EncoderConfig, EncoderModel, ForwardCache};
use crate::error::{Error, Result};
use crate::features::FrameMatrix;
use crate::seed;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub margin: f64,
    pub scale: f64,
    pub segment_seconds: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 0.008,
            weight_decay: 1e-8,
            warmup_steps: 2000,
            epochs: 20,
            margin: 0.2,
            scale: 30.0,
            segment_seconds: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.warmup_steps == 0 {
            return Err(Error::validation("batch_size/epochs/warmup_steps must be >= 1"));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::validation("learning_rate/weight_decay must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::validation("margin must be in [0, 1)"));
        }
        if self.scale <= 0.0 || self.segment_seconds <= 0.0 {
            return Err(Error::validation("scale and segment_seconds must be positive"));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates plus the global step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One Adam update with linear warm-up and decoupled weight decay:
    /// `lr_t = lr * min(1, step/warmup)`, `p *= 1 - lr_t * wd`, then the
    /// bias-corrected moment step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::validation("optimizer shape mismatch"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical("non-finite gradient: training diverged"));
        }
        self.step += 1;
        let t = self.step as f64;
        let lr_t = cfg.learning_rate * (t / cfg.warmup_steps as f64).min(1.0);
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        let decay = 1.0 - lr_t * cfg.weight_decay;
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grads[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] * decay - lr_t * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Produces the (cropped, augmented) frames for one corpus index using
/// the per-sample RNG stream.
pub type SampleFn<'a> = dyn Fn(usize, &mut ChaCha8Rng) -> Result<FrameMatrix> + Sync + 'a;

/// One pass over the corpus: deterministic shuffle, per-sample crop and
/// augmentation through `sample_fn`, forward/backward, one optimizer step
/// per batch, class rows renormalized after every step. Returns the mean
/// sample loss.
pub fn train_epoch(
    model: &mut EncoderModel,
    state: &mut AdamState,
    labels: &[usize],
    sample_fn: &SampleFn<'_>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    cfg.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::validation("empty training set"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.num_classes) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {} classes",
            model.num_classes
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = seed::rng(cfg.seed, "epoch-shuffle", epoch as u64);
        order.shuffle(&mut rng);
    }
    let mut loss_sum = 0.0;
    for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
        let base = batch_idx * cfg.batch_size;
        // forward pass, parallel over samples, order preserved
        let caches: Vec<(usize, ForwardCache)> = batch
            .par_iter()
            .enumerate()
            .map(|(j, &corpus_idx)| {
                let stream = (epoch * n + base + j) as u64;
                let mut rng = seed::rng(cfg.seed, "sample", stream);
                let frames = sample_fn(corpus_idx, &mut rng)?;
                let cache = model.forward_cache(&frames)?;
                Ok((corpus_idx, cache))
            })
            .collect::<Result<Vec<_>>>()?;
        let zs: Vec<Vec<f64>> = caches.iter().map(|(_, c)| c.projected.clone()).collect();
        let batch_labels: Vec<usize> = caches.iter().map(|(i, _)| labels[*i]).collect();
        let (loss, dzs, d_w) = am_softmax_loss(
            &zs,
            &batch_labels,
            model.class_weights(),
            model.num_classes,
            model.embed_dim(),
            model.margin,
            model.scale,
        )?;
        loss_sum += loss * batch.len() as f64;

        // backward pass over fixed chunks, partial gradients merged in
        // index order so results are worker-count independent
        let jobs: Vec<(&ForwardCache, &Vec<f64>)> =
            caches.iter().map(|(_, c)| c).zip(dzs.iter()).collect();
        let partials: Vec<Result<Vec<f64>>> = jobs
            .chunks(8)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|chunk| {
                let mut g = vec![0.0; model.num_params()];
                for (cache, dz) in *chunk {
                    model.backward(cache, dz, &mut g)?;
                }
                Ok(g)
            })
            .collect();
        let mut grads = vec![0.0; model.num_params()];
        for p in partials {
            let p = p?;
            for (a, b) in grads.iter_mut().zip(&p) {
                *a += b;
            }
        }
        let class_off = model.num_params() - d_w.len();
        for (i, g) in d_w.iter().enumerate() {
            grads[class_off + i] += g;
        }
        state.step(model.params_mut(), &grads, cfg)?;
        model.renormalize_class_rows();
    }
    Ok(loss_sum / n as f64)
}

/// Training outcome: the best-validation model, its optimizer state and
/// the per-epoch traces.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: EncoderModel,
    pub best_epoch: usize,
    pub epoch_losses: Vec<f64>,
    pub val_eers: Vec<f64>,
    pub opt_state: AdamState,
}

/// Trains a fresh encoder for `cfg.epochs` epochs and keeps the epoch
/// with the lowest validation EER (earliest on ties).
pub fn fit(
    arch: &EncoderConfig,
    cfg: &TrainConfig,
    num_classes: usize,
    labels: &[usize],
    sample_fn: &SampleFn<'_>,
    val_fn: &(dyn Fn(&EncoderModel) -> Result<f64> + Sync),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut model = EncoderModel::init(arch, num_classes, cfg.margin, cfg.scale, cfg.seed)?;
    let mut state = AdamState::zeros(model.num_params());
    let mut best: Option<(usize, f64, EncoderModel, AdamState)> = None;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut val_eers = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(&mut model, &mut state, labels, sample_fn, cfg, epoch)?;
        let eer = val_fn(&model)?;
        log::info!("epoch {epoch}: loss {loss:.4}, val EER {eer:.2}%");
        epoch_losses.push(loss);
        val_eers.push(eer);
        if best.as_ref().is_none_or(|(_, b, _, _)| eer < *b) {
            best = Some((epoch, eer, model.clone(), state.clone()));
        }
    }
    let (best_epoch, _, best_model, opt_state) = best.expect("at least one epoch");
    Ok(FitOutcome {
        model: best_model,
        best_epoch,
        epoch_losses,
        val_eers,
        opt_state,
    })
}

/// Embeds full (unaugmented) utterances in parallel.
pub fn embed_all(
    model: &EncoderModel,
    items: &[(String, FrameMatrix)],
) -> Result<BTreeMap<String, Vec<f64>>> {
    let pairs: Vec<(String, Vec<f64>)> = items
        .par_iter()
        .map(|(id, frames)| Ok((id.clone(), model.embed_frames(frames)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::crop_frames;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![1.0, -2.0, 0.5];
        let mut state = AdamState::zeros(3);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        state.step(&mut params, &[0.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn warmup_scales_first_step() {
        let cfg = TrainConfig {
            learning_rate: 0.008,
            weight_decay: 0.0,
            warmup_steps: 2000,
            ..TrainConfig::default()
        };
        let mut params = vec![0.0];
        let mut state = AdamState::zeros(1);
        state.step(&mut params, &[1.0], &cfg).unwrap();
        // with constant gradient the bias-corrected step is -lr_t * g/|g|
        let lr_t = 0.008 / 2000.0;
        assert!((params[0] + lr_t).abs() < 1e-12, "{}", params[0]);
    }

    /// Oracle: scalar Adam reference computation in the test itself.
    #[test]
    fn constant_gradient_matches_scalar_reference() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            weight_decay: 0.0,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let g = -0.37;
        let mut params = vec![0.2];
        let mut state = AdamState::zeros(1);
        let (mut m, mut v, mut p_ref) = (0.0f64, 0.0f64, 0.2f64);
        for t in 1..=50usize {
            state.step(&mut params, &[g], &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let lr_t = 0.01 * ((t as f64) / 10.0).min(1.0);
            let m_hat = m / (1.0 - 0.9f64.powi(t as i32));
            let v_hat = v / (1.0 - 0.999f64.powi(t as i32));
            p_ref -= lr_t * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((params[0] - p_ref).abs() < 1e-14, "step {t}");
            // bounded, sign-following step of magnitude ~ lr_t
            if t > 20 {
                let step_mag = lr_t * m_hat / (v_hat.sqrt() + 1e-8);
                assert!(step_mag < 0.0 && step_mag.abs() <= lr_t * 1.2);
            }
        }
    }

    #[test]
    fn nonfinite_gradient_is_an_error() {
        let mut params = vec![0.0];
        let mut state = AdamState::zeros(1);
        let err = state.step(&mut params, &[f64::NAN], &TrainConfig::default());
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    fn toy_task(seed: u64) -> (Vec<FrameMatrix>, Vec<usize>) {
        // two widely separated speakers in feature space
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frames = Vec::new();
        let mut labels = Vec::new();
        for spk in 0..2usize {
            let center = if spk == 0 { 3.0 } else { -3.0 };
            for _ in 0..8 {
                let rows: Vec<Vec<f64>> = (0..24)
                    .map(|_| {
                        (0..4)
                            .map(|_| center + rng.random_range(-0.5..0.5))
                            .collect()
                    })
                    .collect();
                frames.push(FrameMatrix::from_rows(&rows));
                labels.push(spk);
            }
        }
        (frames, labels)
    }

    fn toy_arch() -> EncoderConfig {
        EncoderConfig {
            input_dim: 4,
            hidden_channels: 8,
            kernel: 3,
            dilations: vec![1, 2],
            embed_dim: 8,
        }
    }

    fn toy_train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            learning_rate: 0.01,
            weight_decay: 1e-8,
            warmup_steps: 5,
            epochs: 5,
            margin: 0.2,
            scale: 30.0,
            segment_seconds: 0.16,
            seed: 3,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (frames, labels) = toy_task(1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..toy_train_cfg()
        };
        let mut model = EncoderModel::init(&toy_arch(), 2, cfg.margin, cfg.scale, 7).unwrap();
        let before = model.params().to_vec();
        let mut state = AdamState::zeros(model.num_params());
        let sample_fn = move |i: usize, rng: &mut ChaCha8Rng| Ok(crop_frames(&frames[i], 16, rng));
        train_epoch(&mut model, &mut state, &labels, &sample_fn, &cfg, 0).unwrap();
        // identical up to the class-row renormalization no-op, which may
        // divide an already-unit row by a norm one ulp away from 1
        let class_off = model.num_params() - 2 * model.embed_dim();
        assert_eq!(&model.params()[..class_off], &before[..class_off]);
        for (a, b) in model.params()[class_off..].iter().zip(&before[class_off..]) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn easy_task_loss_decreases_and_classifies_train_set() {
        let (frames, labels) = toy_task(2);
        let cfg = toy_train_cfg();
        let mut model = EncoderModel::init(&toy_arch(), 2, cfg.margin, cfg.scale, cfg.seed).unwrap();
        let mut state = AdamState::zeros(model.num_params());
        let frames_ref = &frames;
        let sample_fn = move |i: usize, rng: &mut ChaCha8Rng| Ok(crop_frames(&frames_ref[i], 16, rng));
        let mut losses = Vec::new();
        for epoch in 0..cfg.epochs {
            losses.push(train_epoch(&mut model, &mut state, &labels, &sample_fn, &cfg, epoch).unwrap());
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "losses not strictly decreasing: {losses:?}");
        }
        // classify the training utterances through the model head
        let e = model.embed_dim();
        for (f, &y) in frames.iter().zip(&labels) {
            let cache = model.forward_cache(f).unwrap();
            let z = &cache.projected;
            let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let pred = (0..2)
                .max_by(|&a, &b| {
                    let ca: f64 = model.class_weights()[a * e..(a + 1) * e]
                        .iter()
                        .zip(z)
                        .map(|(w, v)| w * v / zn)
                        .sum();
                    let cb: f64 = model.class_weights()[b * e..(b + 1) * e]
                        .iter()
                        .zip(z)
                        .map(|(w, v)| w * v / zn)
                        .sum();
                    ca.total_cmp(&cb)
                })
                .unwrap();
            assert_eq!(pred, y);
        }
        // class rows stay unit-norm after every step
        for k in 0..2 {
            let norm: f64 = model.class_weights()[k * e..(k + 1) * e]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_models() {
        let (frames, labels) = toy_task(4);
        let cfg = toy_train_cfg();
        let run = || {
            let mut model =
                EncoderModel::init(&toy_arch(), 2, cfg.margin, cfg.scale, cfg.seed).unwrap();
            let mut state = AdamState::zeros(model.num_params());
            let frames_ref = &frames;
            let sample_fn =
                move |i: usize, rng: &mut ChaCha8Rng| Ok(crop_frames(&frames_ref[i], 16, rng));
            for epoch in 0..2 {
                train_epoch(&mut model, &mut state, &labels, &sample_fn, &cfg, epoch).unwrap();
            }
            model
        };
        let a = run();
        let b = run();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn fit_selects_best_validation_epoch() {
        let (frames, labels) = toy_task(6);
        let cfg = TrainConfig {
            epochs: 3,
            ..toy_train_cfg()
        };
        let frames_ref = &frames;
        let sample_fn = move |i: usize, rng: &mut ChaCha8Rng| Ok(crop_frames(&frames_ref[i], 16, rng));
        // scripted validation EERs: best at epoch 1
        let scripted = std::sync::Mutex::new(vec![30.0f64, 5.0, 12.0].into_iter());
        let val_fn = move |_: &EncoderModel| Ok(scripted.lock().unwrap().next().unwrap());
        let outcome = fit(&toy_arch(), &cfg, 2, &labels, &sample_fn, &val_fn).unwrap();
        assert_eq!(outcome.best_epoch, 1);
        assert_eq!(outcome.val_eers, vec![30.0, 5.0, 12.0]);
        assert_eq!(outcome.epoch_losses.len(), 3);
        // optimizer state snapshot comes from the best epoch (2 epochs of
        // steps with 16 samples / batch 8 = 2 steps each)
        assert_eq!(outcome.opt_state.step, 4);
    }
}
