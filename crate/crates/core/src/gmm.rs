//! Universal background model: a full- or diagonal-covariance GMM trained
//! by EM, plus per-utterance Baum-Welch sufficient statistics.
//!
//! The E-step and statistics accumulation run as a map-reduce over fixed
//! utterance chunks reduced in index order, so results are bit-identical
//! for any worker count.

use crate::cluster;
use crate::error::{Error, Result};
use crate::features::FrameMatrix;
use crate::{binio, seed};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rayon::prelude::*;
use std::io::Read as _;
use std::path::Path;

/// Covariance structure of the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    Full,
    Diagonal,
}

/// Component covariances in either mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariances {
    Full(Vec<DMatrix<f64>>),
    Diagonal(Vec<Vec<f64>>),
}

impl Covariances {
    pub fn mode(&self) -> CovarianceMode {
        match self {
            Covariances::Full(_) => CovarianceMode::Full,
            Covariances::Diagonal(_) => CovarianceMode::Diagonal,
        }
    }
}

enum DensityCache {
    Full { chol_l: DMatrix<f64> },
    Diagonal { inv_std: Vec<f64> },
}

/// The universal background model. Components carry weights, means and
/// covariances; the concatenated means form the super-vector around which
/// the total-variability model operates.
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Covariances,
    // per-component log normalizer and factorization, built once
    log_norm: Vec<f64>,
    cache: Vec<DensityCache>,
}

impl Clone for Gmm {
    fn clone(&self) -> Self {
        Gmm::new(self.weights.clone(), self.means.clone(), self.covariances.clone())
            .expect("validated model stays valid")
    }
}

impl std::fmt::Debug for Gmm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gmm")
            .field("components", &self.num_components())
            .field("dim", &self.dim())
            .field("mode", &self.mode())
            .finish()
    }
}

impl PartialEq for Gmm {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self.covariances == other.covariances
    }
}

const LN_2PI: f64 = 1.8378770664093453;

impl Gmm {
    /// Validates weights, dimensions and positive-definiteness and builds
    /// the density caches.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Covariances) -> Result<Self> {
        let c = weights.len();
        if c == 0 || means.len() != c {
            return Err(Error::validation("component count mismatch"));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::validation("inconsistent mean dimensions"));
        }
        let wsum: f64 = weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::validation(format!(
                "weights must be nonnegative and sum to 1 (sum = {wsum})"
            )));
        }
        let mut log_norm = Vec::with_capacity(c);
        let mut cache = Vec::with_capacity(c);
        match &covariances {
            Covariances::Full(covs) => {
                if covs.len() != c || covs.iter().any(|s| s.nrows() != d || s.ncols() != d) {
                    return Err(Error::validation("covariance shape mismatch"));
                }
                for (ci, cov) in covs.iter().enumerate() {
                    let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
                        Error::numerical(format!("component {ci} covariance is not SPD"))
                    })?;
                    let l = chol.unpack();
                    let logdet: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
                    log_norm.push(-0.5 * (d as f64 * LN_2PI + logdet));
                    cache.push(DensityCache::Full { chol_l: l });
                }
            }
            Covariances::Diagonal(covs) => {
                if covs.len() != c || covs.iter().any(|s| s.len() != d) {
                    return Err(Error::validation("covariance shape mismatch"));
                }
                for (ci, var) in covs.iter().enumerate() {
                    if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                        return Err(Error::numerical(format!(
                            "component {ci} has non-positive variance"
                        )));
                    }
                    let logdet: f64 = var.iter().map(|v| v.ln()).sum();
                    log_norm.push(-0.5 * (d as f64 * LN_2PI + logdet));
                    cache.push(DensityCache::Diagonal {
                        inv_std: var.iter().map(|v| 1.0 / v.sqrt()).collect(),
                    });
                }
            }
        }
        Ok(Gmm {
            weights,
            means,
            covariances,
            log_norm,
            cache,
        })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn mode(&self) -> CovarianceMode {
        self.covariances.mode()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &Covariances {
        &self.covariances
    }

    /// `log(pi_c) + log N(x; m_c, Sigma_c)` for every component.
    fn log_joint(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let d = self.dim();
        for c in 0..self.num_components() {
            let mean = &self.means[c];
            let quad = match &self.cache[c] {
                DensityCache::Full { chol_l } => {
                    // forward substitution: z = L^-1 (x - m), quad = |z|^2
                    let mut quad = 0.0;
                    for i in 0..d {
                        let mut v = x[i] - mean[i];
                        for k in 0..i {
                            v -= chol_l[(i, k)] * scratch[k];
                        }
                        let z = v / chol_l[(i, i)];
                        scratch[i] = z;
                        quad += z * z;
                    }
                    quad
                }
                DensityCache::Diagonal { inv_std } => {
                    let mut quad = 0.0;
                    for i in 0..d {
                        let z = (x[i] - mean[i]) * inv_std[i];
                        quad += z * z;
                    }
                    quad
                }
            };
            out[c] = self.weights[c].ln() + self.log_norm[c] - 0.5 * quad;
        }
    }

    /// Per-frame mixture log-likelihoods `log sum_c pi_c N(x_t; ...)`.
    pub fn per_frame_loglik(&self, frames: &FrameMatrix) -> Result<Vec<f64>> {
        if frames.dim() != self.dim() {
            return Err(Error::validation(format!(
                "frame dim {} != model dim {}",
                frames.dim(),
                self.dim()
            )));
        }
        let c = self.num_components();
        let mut out = Vec::with_capacity(frames.num_frames());
        let mut logs = vec![0.0; c];
        let mut scratch = vec![0.0; self.dim()];
        for x in frames.rows() {
            self.log_joint(x, &mut logs, &mut scratch);
            out.push(log_sum_exp(&logs));
        }
        Ok(out)
    }

    /// Zeroth/first-order Baum-Welch statistics for one utterance.
    pub fn accumulate_stats(&self, frames: &FrameMatrix) -> Result<BaumWelchStats> {
        if frames.dim() != self.dim() {
            return Err(Error::validation(format!(
                "frame dim {} != model dim {}",
                frames.dim(),
                self.dim()
            )));
        }
        let c = self.num_components();
        let d = self.dim();
        let mut stats = BaumWelchStats::zeros(c, d);
        let mut logs = vec![0.0; c];
        let mut scratch = vec![0.0; d];
        for x in frames.rows() {
            self.log_joint(x, &mut logs, &mut scratch);
            let lse = log_sum_exp(&logs);
            for ci in 0..c {
                let gamma = (logs[ci] - lse).exp();
                stats.n[ci] += gamma;
                for (fi, &xi) in stats.f[ci].iter_mut().zip(x) {
                    *fi += gamma * xi;
                }
            }
        }
        stats.total_frames = frames.num_frames();
        Ok(stats)
    }

    /// k-means initialization: centroids become means, weights are
    /// uniform, each covariance starts at the global data covariance
    /// (full) or its diagonal.
    pub fn init_kmeans(
        sample: &[Vec<f64>],
        num_components: usize,
        mode: CovarianceMode,
        seed_value: u64,
    ) -> Result<Gmm> {
        if sample.len() < num_components {
            return Err(Error::validation(format!(
                "sample of {} points cannot seed {num_components} components",
                sample.len()
            )));
        }
        let mut distinct = sample.to_vec();
        distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
        distinct.dedup();
        if distinct.len() < num_components {
            return Err(Error::validation(format!(
                "only {} distinct points for {num_components} components",
                distinct.len()
            )));
        }
        let d = sample[0].len();
        let km = cluster::kmeans(sample, num_components, seed_value, 100)?;
        let n = sample.len() as f64;
        let mut global_mean = vec![0.0; d];
        for x in sample {
            for (g, &v) in global_mean.iter_mut().zip(x) {
                *g += v;
            }
        }
        for g in &mut global_mean {
            *g /= n;
        }
        let covariances = match mode {
            CovarianceMode::Full => {
                let mut cov = DMatrix::zeros(d, d);
                for x in sample {
                    for i in 0..d {
                        let di = x[i] - global_mean[i];
                        for j in 0..d {
                            cov[(i, j)] += di * (x[j] - global_mean[j]);
                        }
                    }
                }
                cov /= n;
                // guard against degenerate sample directions
                for i in 0..d {
                    cov[(i, i)] += 1e-8;
                }
                Covariances::Full(vec![cov; num_components])
            }
            CovarianceMode::Diagonal => {
                let mut var = vec![0.0; d];
                for x in sample {
                    for (vi, (&xv, &gm)) in var.iter_mut().zip(x.iter().zip(&global_mean)) {
                        *vi += (xv - gm) * (xv - gm);
                    }
                }
                for v in &mut var {
                    *v = *v / n + 1e-8;
                }
                Covariances::Diagonal(vec![var; num_components])
            }
        };
        let weights = vec![1.0 / num_components as f64; num_components];
        Gmm::new(weights, km.centroids, covariances)
    }

    /// One EM step over the data. Returns the re-estimated model and the
    /// average per-frame log-likelihood of the INPUT model. A component
    /// whose expected count falls below `opts.starvation_count` is
    /// re-seeded at the frame the input model likes least.
    pub fn em_step(&self, data: &[FrameMatrix], opts: &EmOptions) -> Result<(Gmm, f64)> {
        if data.is_empty() || data.iter().all(|m| m.num_frames() == 0) {
            return Err(Error::validation("EM needs nonempty data"));
        }
        let c = self.num_components();
        let d = self.dim();
        for m in data {
            if m.dim() != d {
                return Err(Error::validation("frame dim mismatch"));
            }
        }

        // map over fixed utterance chunks, reduce in index order
        let chunks: Vec<&[FrameMatrix]> = data.chunks(EM_CHUNK).collect();
        let partials: Vec<EmAccumulator> = chunks
            .par_iter()
            .map(|chunk| {
                let mut acc = EmAccumulator::zeros(c, d, self.mode());
                let mut logs = vec![0.0; c];
                let mut scratch = vec![0.0; d];
                for m in *chunk {
                    for x in m.rows() {
                        self.log_joint(x, &mut logs, &mut scratch);
                        let lse = log_sum_exp(&logs);
                        acc.ll_sum += lse;
                        acc.frames += 1;
                        if lse < acc.worst_ll {
                            acc.worst_ll = lse;
                            acc.worst_frame = x.to_vec();
                        }
                        for ci in 0..c {
                            let gamma = (logs[ci] - lse).exp();
                            acc.n[ci] += gamma;
                            let fc = &mut acc.f[ci];
                            for (fi, &xi) in fc.iter_mut().zip(x) {
                                *fi += gamma * xi;
                            }
                            match &mut acc.s {
                                SecondOrder::Full(mats) => {
                                    let mat = &mut mats[ci];
                                    for i in 0..d {
                                        let gxi = gamma * x[i];
                                        for j in 0..d {
                                            mat[(i, j)] += gxi * x[j];
                                        }
                                    }
                                }
                                SecondOrder::Diagonal(rows) => {
                                    let row = &mut rows[ci];
                                    for (si, &xi) in row.iter_mut().zip(x) {
                                        *si += gamma * xi * xi;
                                    }
                                }
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut acc = EmAccumulator::zeros(c, d, self.mode());
        for p in partials {
            acc.merge(p);
        }
        let total = acc.frames as f64;
        let avg_ll = acc.ll_sum / total;

        // global moments for the variance floor and re-seeding covariance
        let mut global_mean = vec![0.0; d];
        let mut global_sq = vec![0.0; d];
        for ci in 0..c {
            for i in 0..d {
                global_mean[i] += acc.f[ci][i];
            }
            match &acc.s {
                SecondOrder::Full(mats) => {
                    for i in 0..d {
                        global_sq[i] += mats[ci][(i, i)];
                    }
                }
                SecondOrder::Diagonal(rows) => {
                    for i in 0..d {
                        global_sq[i] += rows[ci][i];
                    }
                }
            }
        }
        let global_var: Vec<f64> = (0..d)
            .map(|i| {
                let mu = global_mean[i] / total;
                (global_sq[i] / total - mu * mu).max(1e-12)
            })
            .collect();
        let floor: Vec<f64> = global_var.iter().map(|v| v * opts.variance_floor_scale).collect();
        let floor_scalar = floor.iter().sum::<f64>() / d as f64;

        let mut weights = Vec::with_capacity(c);
        let mut means = Vec::with_capacity(c);
        let mut covs_full: Vec<DMatrix<f64>> = Vec::new();
        let mut covs_diag: Vec<Vec<f64>> = Vec::new();
        for ci in 0..c {
            if acc.n[ci] < opts.starvation_count {
                log::warn!(
                    "component {ci} starved (expected count {:.3}); re-seeding at worst frame",
                    acc.n[ci]
                );
                weights.push(1.0 / (2.0 * c as f64));
                means.push(acc.worst_frame.clone());
                match self.mode() {
                    CovarianceMode::Full => {
                        let mut cov = DMatrix::zeros(d, d);
                        for i in 0..d {
                            cov[(i, i)] = global_var[i];
                        }
                        covs_full.push(cov);
                    }
                    CovarianceMode::Diagonal => covs_diag.push(global_var.clone()),
                }
                continue;
            }
            weights.push(acc.n[ci] / total);
            let mean: Vec<f64> = acc.f[ci].iter().map(|&fi| fi / acc.n[ci]).collect();
            match &acc.s {
                SecondOrder::Full(mats) => {
                    let mut cov = DMatrix::zeros(d, d);
                    for i in 0..d {
                        for j in 0..d {
                            cov[(i, j)] = mats[ci][(i, j)] / acc.n[ci] - mean[i] * mean[j];
                        }
                    }
                    // symmetrize, then floor eigenvalues
                    for i in 0..d {
                        for j in (i + 1)..d {
                            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                            cov[(i, j)] = v;
                            cov[(j, i)] = v;
                        }
                    }
                    covs_full.push(floor_full_covariance(cov, floor_scalar));
                }
                SecondOrder::Diagonal(rows) => {
                    let var: Vec<f64> = (0..d)
                        .map(|i| (rows[ci][i] / acc.n[ci] - mean[i] * mean[i]).max(floor[i]))
                        .collect();
                    covs_diag.push(var);
                }
            }
            means.push(mean);
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
        let covariances = match self.mode() {
            CovarianceMode::Full => Covariances::Full(covs_full),
            CovarianceMode::Diagonal => Covariances::Diagonal(covs_diag),
        };
        Ok((Gmm::new(weights, means, covariances)?, avg_ll))
    }

    /// Runs `iterations` EM steps, returning the final model and the
    /// input-model average log-likelihood trace.
    pub fn train_em(
        &self,
        data: &[FrameMatrix],
        iterations: usize,
        opts: &EmOptions,
    ) -> Result<(Gmm, Vec<f64>)> {
        let mut model = self.clone();
        let mut trace = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let (next, ll) = model.em_step(data, opts)?;
            trace.push(ll);
            model = next;
        }
        Ok((model, trace))
    }

    /// Writes the `GMM1` checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let c = self.num_components();
        let d = self.dim();
        let mut buf = Vec::new();
        binio::write_magic(&mut buf, b"GMM1")?;
        buf.push(match self.mode() {
            CovarianceMode::Diagonal => 0u8,
            CovarianceMode::Full => 1u8,
        });
        binio::write_u32(&mut buf, c as u32)?;
        binio::write_u32(&mut buf, d as u32)?;
        for &w in &self.weights {
            binio::write_f64(&mut buf, w)?;
        }
        for m in &self.means {
            for &v in m {
                binio::write_f64(&mut buf, v)?;
            }
        }
        match &self.covariances {
            Covariances::Diagonal(rows) => {
                for row in rows {
                    for &v in row {
                        binio::write_f64(&mut buf, v)?;
                    }
                }
            }
            Covariances::Full(mats) => {
                for mat in mats {
                    for i in 0..d {
                        for j in 0..d {
                            binio::write_f64(&mut buf, mat[(i, j)])?;
                        }
                    }
                }
            }
        }
        binio::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Gmm> {
        let bytes = std::fs::read(path)?;
        let mut r = bytes.as_slice();
        binio::expect_magic(&mut r, b"GMM1", path)?;
        let mut mode_byte = [0u8; 1];
        r.read_exact(&mut mode_byte)?;
        let c = binio::read_u32(&mut r)? as usize;
        let d = binio::read_u32(&mut r)? as usize;
        let mut weights = Vec::with_capacity(c);
        for _ in 0..c {
            weights.push(binio::read_f64(&mut r)?);
        }
        let mut means = Vec::with_capacity(c);
        for _ in 0..c {
            let mut m = Vec::with_capacity(d);
            for _ in 0..d {
                m.push(binio::read_f64(&mut r)?);
            }
            means.push(m);
        }
        let covariances = match mode_byte[0] {
            0 => {
                let mut rows = Vec::with_capacity(c);
                for _ in 0..c {
                    let mut row = Vec::with_capacity(d);
                    for _ in 0..d {
                        row.push(binio::read_f64(&mut r)?);
                    }
                    rows.push(row);
                }
                Covariances::Diagonal(rows)
            }
            1 => {
                let mut mats = Vec::with_capacity(c);
                for _ in 0..c {
                    let mut mat = DMatrix::zeros(d, d);
                    for i in 0..d {
                        for j in 0..d {
                            mat[(i, j)] = binio::read_f64(&mut r)?;
                        }
                    }
                    mats.push(mat);
                }
                Covariances::Full(mats)
            }
            b => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("unknown covariance mode byte {b}"),
                })
            }
        };
        Gmm::new(weights, means, covariances)
    }
}

/// EM behaviour knobs.
#[derive(Debug, Clone)]
pub struct EmOptions {
    /// Eigen/variance floor as a fraction of the global data variance.
    pub variance_floor_scale: f64,
    /// Re-seed a component whose expected frame count drops below this.
    pub starvation_count: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            variance_floor_scale: 1e-4,
            starvation_count: 1.0,
        }
    }
}

const EM_CHUNK: usize = 32;

enum SecondOrder {
    Full(Vec<DMatrix<f64>>),
    Diagonal(Vec<Vec<f64>>),
}

struct EmAccumulator {
    n: Vec<f64>,
    f: Vec<Vec<f64>>,
    s: SecondOrder,
    ll_sum: f64,
    frames: usize,
    worst_ll: f64,
    worst_frame: Vec<f64>,
}

impl EmAccumulator {
    fn zeros(c: usize, d: usize, mode: CovarianceMode) -> Self {
        EmAccumulator {
            n: vec![0.0; c],
            f: vec![vec![0.0; d]; c],
            s: match mode {
                CovarianceMode::Full => SecondOrder::Full(vec![DMatrix::zeros(d, d); c]),
                CovarianceMode::Diagonal => SecondOrder::Diagonal(vec![vec![0.0; d]; c]),
            },
            ll_sum: 0.0,
            frames: 0,
            worst_ll: f64::INFINITY,
            worst_frame: vec![0.0; d],
        }
    }

    fn merge(&mut self, other: EmAccumulator) {
        for (a, b) in self.n.iter_mut().zip(&other.n) {
            *a += b;
        }
        for (fa, fb) in self.f.iter_mut().zip(&other.f) {
            for (a, b) in fa.iter_mut().zip(fb) {
                *a += b;
            }
        }
        match (&mut self.s, &other.s) {
            (SecondOrder::Full(a), SecondOrder::Full(b)) => {
                for (ma, mb) in a.iter_mut().zip(b) {
                    *ma += mb;
                }
            }
            (SecondOrder::Diagonal(a), SecondOrder::Diagonal(b)) => {
                for (ra, rb) in a.iter_mut().zip(b) {
                    for (x, y) in ra.iter_mut().zip(rb) {
                        *x += y;
                    }
                }
            }
            _ => unreachable!("mixed accumulator modes"),
        }
        self.ll_sum += other.ll_sum;
        self.frames += other.frames;
        if other.worst_ll < self.worst_ll {
            self.worst_ll = other.worst_ll;
            self.worst_frame = other.worst_frame;
        }
    }
}

/// Floors the eigenvalues of a symmetric matrix; returns the input
/// untouched when no eigenvalue is below the floor.
fn floor_full_covariance(cov: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = cov.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return cov;
    }
    let clamped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(floor)),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Zeroth- and first-order Baum-Welch statistics of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct BaumWelchStats {
    /// Soft frame counts per component.
    pub n: Vec<f64>,
    /// Responsibility-weighted frame sums, C rows of D.
    pub f: Vec<Vec<f64>>,
    pub total_frames: usize,
}

impl BaumWelchStats {
    pub fn zeros(c: usize, d: usize) -> Self {
        BaumWelchStats {
            n: vec![0.0; c],
            f: vec![vec![0.0; d]; c],
            total_frames: 0,
        }
    }

    pub fn num_components(&self) -> usize {
        self.n.len()
    }

    pub fn dim(&self) -> usize {
        self.f.first().map_or(0, Vec::len)
    }

    /// Checks the count consistency invariant.
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.n.iter().sum();
        let expect = self.total_frames as f64;
        if self.n.iter().any(|&v| v < 0.0) {
            return Err(Error::numerical("negative zeroth-order stat"));
        }
        if (total - expect).abs() > 1e-8 * expect.max(1.0) {
            return Err(Error::numerical(format!(
                "stats counts {total} disagree with frame count {expect}"
            )));
        }
        Ok(())
    }
}

/// Pools a deterministic subsample of up to `max_frames` frames across
/// utterances (all frames when `max_frames` is 0 or exceeds the total).
pub fn pool_frames(mats: &[FrameMatrix], max_frames: usize, seed_value: u64) -> Vec<Vec<f64>> {
    let total: usize = mats.iter().map(FrameMatrix::num_frames).sum();
    let mut all: Vec<Vec<f64>> = Vec::with_capacity(total);
    for m in mats {
        for row in m.rows() {
            all.push(row.to_vec());
        }
    }
    if max_frames == 0 || total <= max_frames {
        return all;
    }
    let mut rng = seed::rng(seed_value, "pool-frames", 0);
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut rng);
    idx.truncate(max_frames);
    idx.sort_unstable();
    idx.into_iter().map(|i| std::mem::take(&mut all[i])).collect()
}
