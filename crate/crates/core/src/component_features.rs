//! Rotation-invariant component descriptors.
//!
//! A descriptor is the mean, over `R` uniformly spaced rotations, of a feature
//! function applied to the normalized component crop. The feature function is
//! pluggable: [`BuiltinDescriptor`] is an analytic stand-in, while externally
//! computed CNN vectors arrive pre-pooled through tensor files.

use std::path::Path;

use thiserror::Error;

use crate::mask_ops::{self, BinaryMask, ComponentCrop, MaskError, CROP_SIZE};
use crate::tensor_io::{self, Image, IoError};

pub const DEFAULT_ROTATIONS: usize = 60;

const HIST_BINS: usize = 8;
const HIST_CHANNELS: usize = 3;
const HU_COUNT: usize = 7;

/// Output width of [`BuiltinDescriptor`]: color histogram, area fraction, Hu invariants.
pub const BUILTIN_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("feature dimension mismatch: expected {expected}, got {found}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("rotation count must be at least 1")]
    NoRotations,
    #[error("non-finite feature value")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Maps a normalized crop to a fixed-length vector.
pub trait FeatureFunction: Sync {
    fn dim(&self) -> usize;
    fn compute(&self, crop: &ComponentCrop) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentDescriptor {
    pub vector: Vec<f64>,
    pub component: usize,
    pub image: usize,
}

/// Mean of `f` over crops rotated by `360 * r / rotations` degrees.
pub fn rotation_invariant_descriptor(
    image: &Image,
    mask: &BinaryMask,
    f: &dyn FeatureFunction,
    rotations: usize,
) -> Result<Vec<f64>> {
    if rotations == 0 {
        return Err(FeatureError::NoRotations);
    }
    let rect = mask_ops::min_area_rect(mask)?;
    let dim = f.dim();
    let mut acc = vec![0.0; dim];
    for r in 0..rotations {
        let angle = 360.0 * r as f64 / rotations as f64;
        let crop = mask_ops::normalize_crop_with_rect(image, mask, &rect, angle)?;
        let v = f.compute(&crop);
        if v.len() != dim {
            return Err(FeatureError::FeatureDimMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += x;
        }
    }
    for a in acc.iter_mut() {
        *a /= rotations as f64;
    }
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(FeatureError::NonFinite);
    }
    Ok(acc)
}

/// Reads a pooled per-crop vector produced by an external extractor.
pub fn read_external_descriptor(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Vec<f64>> {
    let t = tensor_io::read_tensor(path)?;
    let v: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
    if let Some(d) = expected_dim.filter(|&d| d != v.len()) {
        return Err(FeatureError::FeatureDimMismatch {
            expected: d,
            found: v.len(),
        });
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinDescriptor;

impl FeatureFunction for BuiltinDescriptor {
    fn dim(&self) -> usize {
        BUILTIN_DIM
    }

    fn compute(&self, crop: &ComponentCrop) -> Vec<f64> {
        builtin_descriptor(crop)
    }
}

/// 8-bin per-channel color histogram of the component pixels (24), component
/// area fraction of the patch (1) and the seven Hu moment invariants of the
/// crop mask (7).
pub fn builtin_descriptor(crop: &ComponentCrop) -> Vec<f64> {
    let mut out = vec![0.0; BUILTIN_DIM];
    let count = crop.mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return out;
    }
    let w = 1.0 / count as f64;
    let channels = crop.channels.min(HIST_CHANNELS);
    for (k, _) in crop.mask.iter().enumerate().filter(|(_, &b)| b) {
        for c in 0..channels {
            let v = crop.pixels[k * crop.channels + c] as f64;
            let bin = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            out[c * HIST_BINS + bin] += w;
        }
    }
    let area_slot = HIST_BINS * HIST_CHANNELS;
    out[area_slot] = count as f64 / (CROP_SIZE * CROP_SIZE) as f64;
    let hu = hu_moments(CROP_SIZE, CROP_SIZE, &crop.mask);
    out[area_slot + 1..area_slot + 1 + HU_COUNT].copy_from_slice(&hu);
    out
}

/// `∫ t^p dt` over a unit interval centered at `a`.
fn unit_interval_moment(a: f64, p: usize) -> f64 {
    match p {
        0 => 1.0,
        1 => a,
        2 => a * a + 1.0 / 12.0,
        3 => a * a * a + a / 4.0,
        _ => unreachable!("moments above order 3 are not used"),
    }
}

/// Scale-normalized central moments `η_pq` (p + q ≤ 3), treating every set
/// pixel as a unit square so that integer upscaling leaves them unchanged.
pub fn normalized_central_moments(width: usize, height: usize, bits: &[bool]) -> [[f64; 4]; 4] {
    let mut eta = [[0.0; 4]; 4];
    let (mut m00, mut m10, mut m01) = (0.0, 0.0, 0.0);
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        m00 += 1.0;
        m10 += (i % width) as f64 + 0.5;
        m01 += (i / width) as f64 + 0.5;
    }
    debug_assert!(bits.len() == width * height);
    if m00 == 0.0 {
        return eta;
    }
    let (cx, cy) = (m10 / m00, m01 / m00);
    let mut mu = [[0.0; 4]; 4];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        let dx = (i % width) as f64 + 0.5 - cx;
        let dy = (i / width) as f64 + 0.5 - cy;
        for p in 0..4 {
            let ip = unit_interval_moment(dx, p);
            for q in 0..4 - p {
                mu[p][q] += ip * unit_interval_moment(dy, q);
            }
        }
    }
    for p in 0..4 {
        for q in 0..4 - p {
            if p + q >= 2 {
                eta[p][q] = mu[p][q] / m00.powf(1.0 + (p + q) as f64 / 2.0);
            }
        }
    }
    eta
}

pub fn hu_moments(width: usize, height: usize, bits: &[bool]) -> [f64; 7] {
    let e = normalized_central_moments(width, height, bits);
    let (n20, n02, n11) = (e[2][0], e[0][2], e[1][1]);
    let (n30, n03, n21, n12) = (e[3][0], e[0][3], e[2][1], e[1][2]);
    let a = n30 + n12;
    let b = n21 + n03;
    [
        n20 + n02,
        (n20 - n02).powi(2) + 4.0 * n11 * n11,
        (n30 - 3.0 * n12).powi(2) + (3.0 * n21 - n03).powi(2),
        a * a + b * b,
        (n30 - 3.0 * n12) * a * (a * a - 3.0 * b * b) + (3.0 * n21 - n03) * b * (3.0 * a * a - b * b),
        (n20 - n02) * (a * a - b * b) + 4.0 * n11 * a * b,
        (3.0 * n21 - n03) * a * (a * a - 3.0 * b * b) - (n30 - 3.0 * n12) * b * (3.0 * a * a - b * b),
    ]
}
