//! Verification trials, cosine scoring and equal error rate.

use crate::corpus::UtteranceManifest;
use crate::error::{Error, Result};
use crate::seed;
use rand::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

/// One verification trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub is_target: bool,
    pub enroll_id: String,
    pub test_id: String,
}

/// A list of trials; EER needs at least one target and one nontarget.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Writes the `label<SP>enroll<SP>test` text rows (1 = target).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.trials {
            writeln!(
                out,
                "{} {} {}",
                u8::from(t.is_target),
                t.enroll_id,
                t.test_id
            )
            .expect("string write");
        }
        crate::binio::atomic_write(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut trials = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            if raw.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
            }
            let is_target = match fields[0] {
                "1" => true,
                "0" => false,
                other => return Err(parse_err(format!("bad label {other}"))),
            };
            trials.push(Trial {
                is_target,
                enroll_id: fields[1].to_string(),
                test_id: fields[2].to_string(),
            });
        }
        Ok(TrialList { trials })
    }
}

/// Labeled scores, one per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<(bool, f64)>,
}

impl ScoreSet {
    /// Dumps `label<TAB>score` rows.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (is_target, score) in &self.scores {
            writeln!(out, "{}\t{}", u8::from(*is_target), score).expect("string write");
        }
        crate::binio::atomic_write(path, out.as_bytes())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numerical("zero-norm embedding in scoring"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Scores every trial by cosine similarity of the two embeddings.
pub fn score_trials(
    embeddings: &BTreeMap<String, Vec<f64>>,
    trials: &TrialList,
) -> Result<ScoreSet> {
    let missing: BTreeSet<&str> = trials
        .trials
        .iter()
        .flat_map(|t| [t.enroll_id.as_str(), t.test_id.as_str()])
        .filter(|id| !embeddings.contains_key(*id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::validation(format!(
            "embeddings missing for ids: {}",
            missing.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let scores = trials
        .trials
        .iter()
        .map(|t| {
            cosine(&embeddings[&t.enroll_id], &embeddings[&t.test_id])
                .map(|s| (t.is_target, s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet { scores })
}

/// Equal error rate (percent) and the crossing threshold.
///
/// Sweeps the operating points induced by the distinct scores (a score
/// tied with the threshold counts as an acceptance), then intersects the
/// FRR and FAR step functions by linear interpolation between the
/// bracketing points in ROC space. Interpolating in ROC space rather
/// than threshold space makes the result exactly invariant under
/// strictly increasing score transforms.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    let targets: Vec<f64> = scores
        .scores
        .iter()
        .filter(|(t, _)| *t)
        .map(|&(_, s)| s)
        .collect();
    let nontargets: Vec<f64> = scores
        .scores
        .iter()
        .filter(|(t, _)| !*t)
        .map(|&(_, s)| s)
        .collect();
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::validation(
            "EER needs at least one target and one nontarget trial",
        ));
    }
    if scores.scores.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::numerical("non-finite score"));
    }

    let mut thresholds: Vec<f64> = scores.scores.iter().map(|&(_, s)| s).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    // a sentinel above the maximum where FRR = 1, FAR = 0
    let above_max = thresholds.last().unwrap() + 1.0;
    thresholds.push(above_max);

    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;
    let op = |t: f64| -> (f64, f64) {
        let frr = targets.iter().filter(|&&s| s < t).count() as f64 / nt;
        let far = nontargets.iter().filter(|&&s| s >= t).count() as f64 / nn;
        (frr, far)
    };

    let mut prev = op(thresholds[0]);
    let mut prev_t = thresholds[0];
    if prev.0 >= prev.1 {
        // already crossed at the lowest threshold
        return Ok((100.0 * prev.0.max(prev.1), prev_t));
    }
    for &t in &thresholds[1..] {
        let cur = op(t);
        let (frr0, far0) = prev;
        let (frr1, far1) = cur;
        if frr1 >= far1 {
            if frr1 == far1 {
                return Ok((100.0 * frr1, t));
            }
            // interpolate between the bracketing ROC points
            let denom = (frr1 - frr0) - (far1 - far0);
            let alpha = (far0 - frr0) / denom;
            let eer = frr0 + alpha * (frr1 - frr0);
            let threshold = prev_t + alpha * (t - prev_t);
            return Ok((100.0 * eer, threshold));
        }
        prev = cur;
        prev_t = t;
    }
    // FRR = 1, FAR = 0 at the sentinel; cannot be reached without a
    // crossing earlier
    unreachable!("FRR/FAR curves must cross");
}

/// Builds a balanced synthetic trial list from ground-truth labels:
/// same-speaker pairs as targets, cross-speaker pairs as nontargets, no
/// repeated pair. Deterministic given the seed.
pub fn make_synthetic_trials(
    manifest: &UtteranceManifest,
    num_target: usize,
    num_nontarget: usize,
    seed_value: u64,
) -> Result<TrialList> {
    let mut by_speaker: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for e in manifest.entries() {
        let label = e.speaker_label.ok_or_else(|| {
            Error::validation("trial generation needs ground-truth labels")
        })?;
        by_speaker.entry(label).or_default().push(&e.utterance_id);
    }
    let eligible = by_speaker.values().filter(|v| v.len() >= 2).count();
    if by_speaker.len() < 2 || eligible == 0 {
        return Err(Error::validation(
            "need at least 2 speakers and one speaker with 2 utterances",
        ));
    }
    let mut target_pairs: Vec<(String, String)> = Vec::new();
    for utts in by_speaker.values() {
        for i in 0..utts.len() {
            for j in (i + 1)..utts.len() {
                target_pairs.push((utts[i].to_string(), utts[j].to_string()));
            }
        }
    }
    let speakers: Vec<&Vec<&str>> = by_speaker.values().collect();
    let mut nontarget_pairs: Vec<(String, String)> = Vec::new();
    for a in 0..speakers.len() {
        for b in (a + 1)..speakers.len() {
            for &ua in speakers[a] {
                for &ub in speakers[b] {
                    nontarget_pairs.push((ua.to_string(), ub.to_string()));
                }
            }
        }
    }
    if target_pairs.len() < num_target || nontarget_pairs.len() < num_nontarget {
        return Err(Error::validation(format!(
            "corpus too small: {} target / {} nontarget pairs available, {num_target}/{num_nontarget} requested",
            target_pairs.len(),
            nontarget_pairs.len()
        )));
    }
    let mut rng = seed::rng(seed_value, "trials", 0);
    target_pairs.shuffle(&mut rng);
    nontarget_pairs.shuffle(&mut rng);
    let mut trials = Vec::with_capacity(num_target + num_nontarget);
    for (enroll_id, test_id) in target_pairs.into_iter().take(num_target) {
        trials.push(Trial {
            is_target: true,
            enroll_id,
            test_id,
        });
    }
    for (enroll_id, test_id) in nontarget_pairs.into_iter().take(num_nontarget) {
        trials.push(Trial {
            is_target: false,
            enroll_id,
            test_id,
        });
    }
    Ok(TrialList { trials })
}
