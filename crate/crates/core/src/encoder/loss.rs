//! Additive-margin softmax on scaled cosine logits.

use crate::error::{Error, Result};

/// Batch-averaged AM-softmax loss.
///
/// Cosines come from the L2-normalized embedding against the (unit-norm)
/// class-weight rows; the margin is subtracted from the target cosine
/// before scaling. Returns the loss, the gradient w.r.t. every embedding
/// and the gradient w.r.t. the flat K x E class-weight matrix.
pub fn am_softmax_loss(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    class_w: &[f64],
    num_classes: usize,
    embed_dim: usize,
    margin: f64,
    scale: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::validation("batch/label size mismatch or empty batch"));
    }
    if class_w.len() != num_classes * embed_dim {
        return Err(Error::validation("class weight shape mismatch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let batch = embeddings.len() as f64;
    let mut total_loss = 0.0;
    let mut d_embeddings = Vec::with_capacity(embeddings.len());
    let mut d_w = vec![0.0; class_w.len()];
    let mut logits = vec![0.0; num_classes];

    for (z, &y) in embeddings.iter().zip(labels) {
        if z.len() != embed_dim {
            return Err(Error::validation("embedding dim mismatch"));
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::numerical("zero-norm embedding in AM-softmax"));
        }
        let unit: Vec<f64> = z.iter().map(|v| v / norm).collect();
        for (k, logit) in logits.iter_mut().enumerate() {
            let row = &class_w[k * embed_dim..(k + 1) * embed_dim];
            let cos: f64 = row.iter().zip(&unit).map(|(w, u)| w * u).sum();
            let m = if k == y { margin } else { 0.0 };
            *logit = scale * (cos - m);
        }
        // loss in the log domain; the log1p form keeps tiny losses exact
        // when the target logit dominates
        let max_other = logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != y)
            .map(|(_, &l)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        let loss = if logits[y] >= max_other {
            let sum: f64 = logits
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != y)
                .map(|(_, &l)| (l - logits[y]).exp())
                .sum();
            sum.ln_1p()
        } else {
            let m = max_other;
            let sum: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
            m + sum.ln() - logits[y]
        };
        total_loss += loss;

        let lse = {
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
        };
        // d loss / d unit, and class-weight gradients
        let mut d_unit = vec![0.0; embed_dim];
        for (k, &logit) in logits.iter().enumerate() {
            let p = (logit - lse).exp();
            let d_logit = (p - f64::from(u8::from(k == y))) / batch;
            let d_cos = scale * d_logit;
            let row = &class_w[k * embed_dim..(k + 1) * embed_dim];
            for i in 0..embed_dim {
                d_unit[i] += d_cos * row[i];
                d_w[k * embed_dim + i] += d_cos * unit[i];
            }
        }
        // through the normalization: dz = (du - (u . du) u) / |z|
        let u_dot: f64 = unit.iter().zip(&d_unit).map(|(u, g)| u * g).sum();
        let dz: Vec<f64> = d_unit
            .iter()
            .zip(&unit)
            .map(|(g, u)| (g - u_dot * u) / norm)
            .collect();
        d_embeddings.push(dz);
    }
    Ok((total_loss / batch, d_embeddings, d_w))
}
