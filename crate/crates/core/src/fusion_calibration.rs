//! Trimmed z-score normalization of score streams and their fusion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SIGMA_FLOOR: f64 = 1e-12;
pub const DEFAULT_TRIM: (f64, f64) = (0.2, 0.8);
pub const MIN_SCORES: usize = 5;
pub const STREAM_LGST: &str = "lgst";

/// Stream id for the patch-histogram score at patch size `s`.
pub fn patch_stream(s: usize) -> String {
    format!("ph_{s}")
}

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("stream {stream:?} has {got} scores, need at least {MIN_SCORES}")]
    TooFewScores { stream: String, got: usize },
    #[error("trim range ({0}, {1}) is not 0 <= low < high <= 1")]
    InvalidTrim(f64, f64),
    #[error("stream {0:?} is not in the calibration profile")]
    UnknownStream(String),
    #[error("non-finite score in stream {0:?}")]
    NonFinite(String),
    #[error("no streams")]
    Empty,
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub mu: f64,
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalibrationProfile {
    pub streams: BTreeMap<String, StreamStats>,
}

/// Mean and population std of the sorted scores at indices
/// `floor(low * n) <= i < ceil(high * n)`; std floored at [`SIGMA_FLOOR`].
pub fn trimmed_stats(scores: &[f64], low: f64, high: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&low) || !(high > low && high <= 1.0) {
        return Err(FusionError::InvalidTrim(low, high));
    }
    let n = scores.len();
    if n < MIN_SCORES {
        return Err(FusionError::TooFewScores {
            stream: String::new(),
            got: n,
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(FusionError::NonFinite(String::new()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // tolerance keeps e.g. 0.7 * 10 from rounding up to 8
    let start = ((low * n as f64) + 1e-9).floor() as usize;
    let end = (((high * n as f64) - 1e-9).ceil() as usize).clamp(start + 1, n);
    let kept = &sorted[start..end];
    let mu = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = kept.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / kept.len() as f64;
    Ok((mu, var.sqrt().max(SIGMA_FLOOR)))
}

pub fn calibrate(validation: &BTreeMap<String, Vec<f64>>, trim: (f64, f64)) -> Result<CalibrationProfile> {
    if validation.is_empty() {
        return Err(FusionError::Empty);
    }
    let mut streams = BTreeMap::new();
    for (name, scores) in validation {
        let (mu, sigma) = trimmed_stats(scores, trim.0, trim.1).map_err(|e| match e {
            FusionError::TooFewScores { got, .. } => FusionError::TooFewScores {
                stream: name.clone(),
                got,
            },
            FusionError::NonFinite(_) => FusionError::NonFinite(name.clone()),
            other => other,
        })?;
        streams.insert(
            name.clone(),
            StreamStats {
                mu,
                sigma,
                low: trim.0,
                high: trim.1,
            },
        );
    }
    Ok(CalibrationProfile { streams })
}

impl CalibrationProfile {
    pub fn normalize(&self, stream: &str, score: f64) -> Result<f64> {
        let s = self
            .streams
            .get(stream)
            .ok_or_else(|| FusionError::UnknownStream(stream.to_string()))?;
        Ok((score - s.mu) / s.sigma)
    }

    pub fn sigma(&self, stream: &str) -> Option<f64> {
        self.streams.get(stream).map(|s| s.sigma)
    }
}

/// Sum of per-stream normalized scores.
pub fn fuse<'a>(profile: &CalibrationProfile, raw: impl IntoIterator<Item = (&'a str, f64)>) -> Result<f64> {
    raw.into_iter().map(|(name, s)| profile.normalize(name, s)).sum()
}
