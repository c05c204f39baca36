//! Class and patch histograms of label maps, the mean-absolute histogram
//! distance, and Mahalanobis scoring against a fitted bank.

use std::path::Path;

use thiserror::Error;

use crate::tensor_io::{IoError, LabelMap};

const BANK_MAGIC: &[u8; 4] = b"CSHB";
const BANK_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HistError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("patch size must be positive")]
    InvalidPatchSize,
    #[error("covariance is not positive definite (pivot {0})")]
    NotPositiveDefinite(usize),
    #[error("malformed bank file: {0}")]
    BadBank(&'static str),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, HistError>;

/// Fraction of the map covered by each class `1..=n_cls`. Background is not a
/// dimension; pixels above `n_cls` are ignored.
pub fn class_histogram(map: &LabelMap, n_cls: usize) -> Vec<f64> {
    let mut counts = vec![0u64; n_cls];
    for &p in map.pixels() {
        let p = p as usize;
        if p >= 1 && p <= n_cls {
            counts[p - 1] += 1;
        }
    }
    let total = (map.width() * map.height()) as f64;
    counts.iter().map(|&c| c as f64 / total).collect()
}

/// Number of grid cells along an axis of length `len` for patch size `s`:
/// `round(len / s)`, at least 1. The last cell absorbs the remainder.
pub fn grid_cells(len: usize, s: usize) -> usize {
    ((len as f64 / s as f64).round() as usize).max(1)
}

/// Pixel range `[start, end)` of cell `i` out of `cells` along an axis.
pub fn cell_range(len: usize, s: usize, cells: usize, i: usize) -> (usize, usize) {
    let start = (i * s).min(len);
    let end = if i + 1 == cells { len } else { ((i + 1) * s).min(len) };
    (start, end)
}

/// Row-major concatenation of per-cell class histograms, each normalized by
/// its own cell's pixel count.
pub fn patch_histogram(map: &LabelMap, patch_size: usize, n_cls: usize) -> Result<Vec<f64>> {
    if patch_size == 0 {
        return Err(HistError::InvalidPatchSize);
    }
    let (w, h) = (map.width(), map.height());
    let (gw, gh) = (grid_cells(w, patch_size), grid_cells(h, patch_size));
    let mut out = Vec::with_capacity(gw * gh * n_cls);
    let mut counts = vec![0u64; n_cls];
    for gy in 0..gh {
        let (y0, y1) = cell_range(h, patch_size, gh, gy);
        for gx in 0..gw {
            let (x0, x1) = cell_range(w, patch_size, gw, gx);
            counts.iter_mut().for_each(|c| *c = 0);
            for y in y0..y1 {
                for &p in &map.pixels()[y * w + x0..y * w + x1] {
                    let p = p as usize;
                    if p >= 1 && p <= n_cls {
                        counts[p - 1] += 1;
                    }
                }
            }
            let area = ((x1 - x0) * (y1 - y0)) as f64;
            out.extend(counts.iter().map(|&c| if area > 0.0 { c as f64 / area } else { 0.0 }));
        }
    }
    Ok(out)
}

/// `(1/N) * sum_k |h1[k] - h2[k]|`.
pub fn histogram_match_distance(h1: &[f64], h2: &[f64]) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(HistError::DimMismatch {
            expected: h1.len(),
            found: h2.len(),
        });
    }
    if h1.is_empty() {
        return Ok(0.0);
    }
    Ok(h1.iter().zip(h2).map(|(a, b)| (a - b).abs()).sum::<f64>() / h1.len() as f64)
}

pub fn l1_distance(h1: &[f64], h2: &[f64]) -> f64 {
    h1.iter().zip(h2).map(|(a, b)| (a - b).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegPolicy {
    pub eps: f64,
    pub eps_abs: f64,
}

impl Default for RegPolicy {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            eps_abs: 1e-9,
        }
    }
}

/// Mean and Cholesky factor of the ridge-regularized sample covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBank {
    /// 0 when the bank was not fitted from label maps.
    pub patch_size: u32,
    pub n_cls: u32,
    pub n_samples: u64,
    pub policy: RegPolicy,
    /// Value added to the covariance diagonal.
    pub ridge: f64,
    mean: Vec<f64>,
    /// Lower-triangular, row-major `d x d`.
    chol: Vec<f64>,
}

fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(HistError::NotPositiveDefinite(i));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Sample mean and covariance (divisor `n - 1`).
pub fn mean_and_covariance(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = samples.len();
    if n < 2 {
        return Err(HistError::TooFewSamples { needed: 2, got: n });
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(HistError::DimMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for s in samples {
        for ((c, v), m) in centered.iter_mut().zip(s).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            for j in 0..=i {
                cov[i * d + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok((mean, cov))
}

/// Fits `mu` and `Sigma + eps * (tr(Sigma)/d + eps_abs) * I`.
pub fn fit_bank(histograms: &[Vec<f64>], policy: RegPolicy) -> Result<HistogramBank> {
    let (mean, mut cov) = mean_and_covariance(histograms)?;
    let d = mean.len();
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let ridge = policy.eps * (trace / d.max(1) as f64 + policy.eps_abs);
    for i in 0..d {
        cov[i * d + i] += ridge;
    }
    let mut bank = HistogramBank::from_parts(mean, &cov)?;
    bank.n_samples = histograms.len() as u64;
    bank.policy = policy;
    bank.ridge = ridge;
    Ok(bank)
}

/// Fits a bank on patch histograms of `maps` at one patch size.
pub fn fit_patch_bank(maps: &[LabelMap], patch_size: usize, n_cls: usize, policy: RegPolicy) -> Result<HistogramBank> {
    let hists = maps
        .iter()
        .map(|m| patch_histogram(m, patch_size, n_cls))
        .collect::<Result<Vec<_>>>()?;
    let mut bank = fit_bank(&hists, policy)?;
    bank.patch_size = patch_size as u32;
    bank.n_cls = n_cls as u32;
    Ok(bank)
}

impl HistogramBank {
    /// Bank from a mean and an already regularized SPD covariance.
    pub fn from_parts(mean: Vec<f64>, covariance: &[f64]) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(HistError::DimMismatch {
                expected: d * d,
                found: covariance.len(),
            });
        }
        let chol = cholesky(covariance, d)?;
        Ok(Self {
            patch_size: 0,
            n_cls: 0,
            n_samples: 0,
            policy: RegPolicy::default(),
            ridge: 0.0,
            mean,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cholesky_factor(&self) -> &[f64] {
        &self.chol
    }

    /// `L L^T`, the covariance actually used for scoring.
    pub fn regularized_covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..=i.min(j)).map(|k| self.chol[i * d + k] * self.chol[j * d + k]).sum();
            }
        }
        out
    }

    /// Histogram of `map` in this bank's layout.
    pub fn histogram_of(&self, map: &LabelMap) -> Result<Vec<f64>> {
        patch_histogram(map, self.patch_size as usize, self.n_cls as usize)
    }

    pub fn encode(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::with_capacity(48 + 8 * (d + d * (d + 1) / 2));
        out.extend_from_slice(BANK_MAGIC);
        for v in [BANK_VERSION, d as u32, self.patch_size, self.n_cls] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.n_samples.to_le_bytes());
        for v in [self.policy.eps, self.policy.eps_abs, self.ridge] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.mean {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..d {
            for j in 0..=i {
                out.extend_from_slice(&self.chol[i * d + j].to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or(HistError::BadBank("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != BANK_MAGIC {
            return Err(HistError::BadBank("bad magic"));
        }
        let mut u32s = [0u32; 4];
        for v in &mut u32s {
            *v = u32::from_le_bytes(take(4)?.try_into().unwrap());
        }
        let [version, d, patch_size, n_cls] = u32s;
        if version != BANK_VERSION {
            return Err(HistError::BadBank("unsupported version"));
        }
        let n_samples = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut f = || -> Result<f64> { Ok(f64::from_le_bytes(take(8)?.try_into().unwrap())) };
        let (eps, eps_abs, ridge) = (f()?, f()?, f()?);
        let d = d as usize;
        let mean = (0..d).map(|_| f()).collect::<Result<Vec<_>>>()?;
        let mut chol = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                chol[i * d + j] = f()?;
            }
        }
        if pos != bytes.len() {
            return Err(HistError::BadBank("trailing bytes"));
        }
        if (0..d).any(|i| !(chol[i * d + i] > 0.0)) {
            return Err(HistError::BadBank("factor diagonal not positive"));
        }
        Ok(Self {
            patch_size,
            n_cls,
            n_samples,
            policy: RegPolicy { eps, eps_abs },
            ridge,
            mean,
            chol,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

/// `sqrt((h - mu)^T Sigma^-1 (h - mu))` via a forward solve with the factor.
pub fn mahalanobis_score(bank: &HistogramBank, h: &[f64]) -> Result<f64> {
    let d = bank.dim();
    if h.len() != d {
        return Err(HistError::DimMismatch {
            expected: d,
            found: h.len(),
        });
    }
    let l = &bank.chol;
    let mut z = vec![0.0; d];
    let mut sq = 0.0;
    for i in 0..d {
        let mut s = h[i] - bank.mean[i];
        for k in 0..i {
            s -= l[i * d + k] * z[k];
        }
        z[i] = s / l[i * d + i];
        sq += z[i] * z[i];
    }
    Ok(sq.sqrt())
}
