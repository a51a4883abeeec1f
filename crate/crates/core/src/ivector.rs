//! Total-variability factor analysis over GMM super-vectors.
//!
//! The generative model decomposes an utterance's super-vector as
//! `M = m + T w` with a standard-normal prior on the low-dimensional
//! factor `w`; residual variability stays in the UBM covariances. The
//! posterior over `w` given Baum-Welch statistics is Gaussian with
//! closed-form moments, and `T` is trained by EM on those moments. The
//! posterior mean is the i-vector.

use crate::binio;
use crate::error::{Error, Result};
use crate::gmm::{BaumWelchStats, Covariances, Gmm};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::io::Read as _;
use std::path::Path;
use std::sync::Arc;

/// The trained total-variability model: per-component loading blocks
/// `T_c` (D x R) plus the UBM supplying `m` and `Sigma`.
#[derive(Clone)]
pub struct TvModel {
    blocks: Vec<DMatrix<f64>>,
    ubm: Arc<Gmm>,
    rank: usize,
    // per-component Sigma_c^-1 T_c and T_c^T Sigma_c^-1 T_c
    sigma_inv_t: Vec<DMatrix<f64>>,
    gram: Vec<DMatrix<f64>>,
}

impl std::fmt::Debug for TvModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TvModel")
            .field("components", &self.blocks.len())
            .field("dim", &self.ubm.dim())
            .field("rank", &self.rank)
            .finish()
    }
}

/// A single utterance factor. `normalized` marks unit L2 length.
#[derive(Debug, Clone, PartialEq)]
pub struct IVector {
    pub w: Vec<f64>,
    pub utterance_id: String,
    pub normalized: bool,
}

impl TvModel {
    /// Builds the model and its per-component caches.
    pub fn new(blocks: Vec<DMatrix<f64>>, ubm: Arc<Gmm>) -> Result<Self> {
        let c = ubm.num_components();
        let d = ubm.dim();
        if blocks.len() != c {
            return Err(Error::validation("block count != UBM components"));
        }
        let rank = blocks.first().map_or(0, DMatrix::ncols);
        if rank == 0 || rank > c * d {
            return Err(Error::validation(format!(
                "rank must satisfy 1 <= R <= C*D, got {rank}"
            )));
        }
        if blocks.iter().any(|b| b.nrows() != d || b.ncols() != rank) {
            return Err(Error::validation("block shape mismatch"));
        }
        if blocks.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(Error::numerical("non-finite loading matrix"));
        }
        let mut sigma_inv_t = Vec::with_capacity(c);
        let mut gram = Vec::with_capacity(c);
        match ubm.covariances() {
            Covariances::Full(covs) => {
                for (ci, block) in blocks.iter().enumerate() {
                    let chol = Cholesky::new(covs[ci].clone()).ok_or_else(|| {
                        Error::numerical(format!("UBM component {ci} covariance not SPD"))
                    })?;
                    let sit = chol.solve(block);
                    gram.push(block.transpose() * &sit);
                    sigma_inv_t.push(sit);
                }
            }
            Covariances::Diagonal(vars) => {
                for (ci, block) in blocks.iter().enumerate() {
                    let mut sit = block.clone();
                    for i in 0..d {
                        let inv = 1.0 / vars[ci][i];
                        for j in 0..rank {
                            sit[(i, j)] *= inv;
                        }
                    }
                    gram.push(block.transpose() * &sit);
                    sigma_inv_t.push(sit);
                }
            }
        }
        Ok(TvModel {
            blocks,
            ubm,
            rank,
            sigma_inv_t,
            gram,
        })
    }

    /// Random initialization, entries i.i.d. N(0, 0.1^2).
    pub fn init_random(ubm: Arc<Gmm>, rank: usize, seed_value: u64) -> Result<Self> {
        let mut rng = crate::seed::rng(seed_value, "tv-init", 0);
        let d = ubm.dim();
        let blocks = (0..ubm.num_components())
            .map(|_| DMatrix::from_fn(d, rank, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        TvModel::new(blocks, ubm)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ubm(&self) -> &Arc<Gmm> {
        &self.ubm
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    /// Loading blocks stacked into the (C*D) x R total matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let d = self.ubm.dim();
        let mut t = DMatrix::zeros(self.blocks.len() * d, self.rank);
        for (ci, block) in self.blocks.iter().enumerate() {
            t.view_mut((ci * d, 0), (d, self.rank)).copy_from(block);
        }
        t
    }

    fn check_stats(&self, stats: &BaumWelchStats) -> Result<()> {
        if stats.num_components() != self.ubm.num_components() || stats.dim() != self.ubm.dim() {
            return Err(Error::validation(format!(
                "stats shape ({}, {}) does not match UBM ({}, {})",
                stats.num_components(),
                stats.dim(),
                self.ubm.num_components(),
                self.ubm.dim()
            )));
        }
        Ok(())
    }

    /// Centered first-order stats and the posterior natural parameters:
    /// `L = I + sum_c N_c T_c' Sigma_c^-1 T_c`, `g = sum_c T_c' Sigma_c^-1 F~_c`.
    fn natural_params(&self, stats: &BaumWelchStats) -> (DMatrix<f64>, DVector<f64>) {
        let r = self.rank;
        let d = self.ubm.dim();
        let mut precision = DMatrix::identity(r, r);
        let mut g = DVector::zeros(r);
        for ci in 0..self.ubm.num_components() {
            let n = stats.n[ci];
            if n > 0.0 {
                precision += &self.gram[ci] * n;
            }
            let mean = &self.ubm.means()[ci];
            let centered =
                DVector::from_iterator(d, stats.f[ci].iter().zip(mean).map(|(&f, &m)| f - n * m));
            g += self.sigma_inv_t[ci].transpose() * centered;
        }
        (precision, g)
    }

    /// Gaussian posterior over the factor: mean and precision. The
    /// precision is SPD by construction; a failed factorization signals a
    /// corrupted model.
    pub fn posterior(&self, stats: &BaumWelchStats) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_stats(stats)?;
        let (precision, g) = self.natural_params(stats);
        let chol = Cholesky::new(precision.clone())
            .ok_or_else(|| Error::numerical("posterior precision not SPD: corrupted model"))?;
        Ok((chol.solve(&g), precision))
    }

    /// Posterior mean as an i-vector (not yet length-normalized).
    pub fn extract(&self, stats: &BaumWelchStats, utterance_id: &str) -> Result<IVector> {
        let (mean, _) = self.posterior(stats)?;
        Ok(IVector {
            w: mean.iter().copied().collect(),
            utterance_id: utterance_id.to_string(),
            normalized: false,
        })
    }

    /// Extracts i-vectors for many utterances in parallel (order kept).
    pub fn extract_all(&self, stats: &[(String, BaumWelchStats)]) -> Result<Vec<IVector>> {
        stats
            .par_iter()
            .map(|(id, s)| self.extract(s, id))
            .collect()
    }

    /// One EM step over the utterance statistics. Returns the updated
    /// model and the input model's auxiliary objective
    /// `sum_s (w_s' L_s w_s - log det L_s) / 2`, which is non-decreasing
    /// across EM iterations.
    pub fn em_step(&self, stats: &[BaumWelchStats]) -> Result<(TvModel, f64)> {
        if stats.is_empty() {
            return Err(Error::validation("EM needs at least one utterance"));
        }
        for s in stats {
            self.check_stats(s)?;
        }
        let c = self.ubm.num_components();
        let d = self.ubm.dim();
        let r = self.rank;

        struct Partial {
            a: Vec<DMatrix<f64>>,
            b: Vec<DMatrix<f64>>,
            aux: f64,
        }
        let chunks: Vec<&[BaumWelchStats]> = stats.chunks(64).collect();
        let partials: Vec<Result<Partial>> = chunks
            .par_iter()
            .map(|chunk| {
                let mut part = Partial {
                    a: vec![DMatrix::zeros(r, r); c],
                    b: vec![DMatrix::zeros(d, r); c],
                    aux: 0.0,
                };
                for s in *chunk {
                    let (precision, g) = self.natural_params(s);
                    let chol = Cholesky::new(precision.clone()).ok_or_else(|| {
                        Error::numerical("posterior precision not SPD: corrupted model")
                    })?;
                    let mean = chol.solve(&g);
                    let logdet: f64 =
                        2.0 * (0..r).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
                    part.aux += 0.5 * (mean.dot(&g) - logdet);
                    let second = chol.inverse() + &mean * mean.transpose();
                    for ci in 0..c {
                        let n = s.n[ci];
                        if n > 0.0 {
                            part.a[ci] += &second * n;
                        }
                        let ubm_mean = &self.ubm.means()[ci];
                        let centered = DVector::from_iterator(
                            d,
                            s.f[ci].iter().zip(ubm_mean).map(|(&f, &m)| f - n * m),
                        );
                        part.b[ci] += centered * mean.transpose();
                    }
                }
                Ok(part)
            })
            .collect();
        let mut a = vec![DMatrix::zeros(r, r); c];
        let mut b = vec![DMatrix::zeros(d, r); c];
        let mut aux = 0.0;
        for p in partials {
            let p = p?;
            for ci in 0..c {
                a[ci] += &p.a[ci];
                b[ci] += &p.b[ci];
            }
            aux += p.aux;
        }
        let mut blocks = Vec::with_capacity(c);
        for ci in 0..c {
            let chol = Cholesky::new(a[ci].clone()).ok_or_else(|| {
                Error::numerical(format!(
                    "singular M-step accumulator for component {ci}: degenerate data"
                ))
            })?;
            // T_c = B_c A_c^-1  <=>  T_c' = A_c^-1 B_c'
            blocks.push(chol.solve(&b[ci].transpose()).transpose());
        }
        Ok((TvModel::new(blocks, Arc::clone(&self.ubm))?, aux))
    }

    /// Runs `iterations` EM steps; returns the trained model and the
    /// auxiliary trace.
    pub fn train_em(&self, stats: &[BaumWelchStats], iterations: usize) -> Result<(TvModel, Vec<f64>)> {
        let mut model = self.clone();
        let mut trace = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let (next, aux) = model.em_step(stats)?;
            trace.push(aux);
            model = next;
        }
        Ok((model, trace))
    }

    /// Writes the `TVM1` checkpoint plus a sidecar text header
    /// (`<path>.ubm`) naming the UBM checkpoint it references.
    pub fn save(&self, path: &Path, ubm_ref: &str) -> Result<()> {
        let c = self.blocks.len();
        let d = self.ubm.dim();
        let mut buf = Vec::new();
        binio::write_magic(&mut buf, b"TVM1")?;
        binio::write_u32(&mut buf, c as u32)?;
        binio::write_u32(&mut buf, d as u32)?;
        binio::write_u32(&mut buf, self.rank as u32)?;
        for block in &self.blocks {
            for i in 0..d {
                for j in 0..self.rank {
                    binio::write_f64(&mut buf, block[(i, j)])?;
                }
            }
        }
        binio::atomic_write(path, &buf)?;
        let sidecar = sidecar_path(path);
        binio::atomic_write(&sidecar, format!("ubm\t{ubm_ref}\n").as_bytes())
    }

    /// Loads a checkpoint; the UBM is found through the sidecar header,
    /// resolved relative to the checkpoint directory.
    pub fn load(path: &Path) -> Result<TvModel> {
        let sidecar = sidecar_path(path);
        let header = std::fs::read_to_string(&sidecar).map_err(|_| Error::MissingArtifact {
            what: format!("sidecar header {}", sidecar.display()),
            hint: "train-tv".into(),
        })?;
        let ubm_ref = header
            .lines()
            .find_map(|l| l.strip_prefix("ubm\t"))
            .ok_or_else(|| Error::Format {
                path: sidecar.clone(),
                message: "missing `ubm` entry".into(),
            })?;
        let ubm_path = {
            let p = Path::new(ubm_ref);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                path.parent().unwrap_or_else(|| Path::new(".")).join(p)
            }
        };
        let ubm = Arc::new(Gmm::load(&ubm_path)?);

        let bytes = std::fs::read(path)?;
        let mut r = bytes.as_slice();
        binio::expect_magic(&mut r, b"TVM1", path)?;
        let c = binio::read_u32(&mut r)? as usize;
        let d = binio::read_u32(&mut r)? as usize;
        let rank = binio::read_u32(&mut r)? as usize;
        if c != ubm.num_components() || d != ubm.dim() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "checkpoint shape ({c}, {d}) does not match UBM ({}, {})",
                    ubm.num_components(),
                    ubm.dim()
                ),
            });
        }
        let mut blocks = Vec::with_capacity(c);
        for _ in 0..c {
            let mut block = DMatrix::zeros(d, rank);
            for i in 0..d {
                for j in 0..rank {
                    block[(i, j)] = binio::read_f64(&mut r)?;
                }
            }
            blocks.push(block);
        }
        TvModel::new(blocks, ubm)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".ubm");
    std::path::PathBuf::from(s)
}

/// Scales an i-vector to unit L2 norm. A zero vector is degenerate.
pub fn length_normalize(v: &IVector) -> Result<IVector> {
    let norm = v.w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::numerical(format!(
            "degenerate i-vector for {}",
            v.utterance_id
        )));
    }
    Ok(IVector {
        w: v.w.iter().map(|x| x / norm).collect(),
        utterance_id: v.utterance_id.clone(),
        normalized: true,
    })
}

/// Writes the `IVA1` vector archive: per record the utterance id, R f32
/// values and the normalized flag.
pub fn save_archive(path: &Path, vectors: &[IVector]) -> Result<()> {
    let r = vectors.first().map_or(0, |v| v.w.len());
    if vectors.iter().any(|v| v.w.len() != r) {
        return Err(Error::validation("mixed vector ranks in archive"));
    }
    let mut buf = Vec::new();
    binio::write_magic(&mut buf, b"IVA1")?;
    binio::write_u32(&mut buf, vectors.len() as u32)?;
    binio::write_u32(&mut buf, r as u32)?;
    for v in vectors {
        binio::write_u32(&mut buf, v.utterance_id.len() as u32)?;
        buf.extend_from_slice(v.utterance_id.as_bytes());
        for &x in &v.w {
            binio::write_f32(&mut buf, x as f32)?;
        }
        buf.push(u8::from(v.normalized));
    }
    binio::atomic_write(path, &buf)
}

pub fn load_archive(path: &Path) -> Result<Vec<IVector>> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    binio::expect_magic(&mut r, b"IVA1", path)?;
    let count = binio::read_u32(&mut r)? as usize;
    let rank = binio::read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = binio::read_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let utterance_id = String::from_utf8(id).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("bad utterance id: {e}"),
        })?;
        let mut w = Vec::with_capacity(rank);
        for _ in 0..rank {
            w.push(f64::from(binio::read_f32(&mut r)?));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        out.push(IVector {
            w,
            utterance_id,
            normalized: flag[0] != 0,
        });
    }
    Ok(out)
}
