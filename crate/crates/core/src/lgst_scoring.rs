//! Student-teacher difference maps computed from supplied feature tensors and
//! their reduction to image scores.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_io::{read_json, read_tensor, FeatureTensor, IoError};

#[derive(Debug, Error)]
pub enum LgstError {
    #[error("tensor shapes differ: {0:?} vs {1:?}")]
    DimMismatch(Vec<usize>, Vec<usize>),
    #[error("empty anomaly map")]
    EmptyMap,
    #[error("no tensors listed for image {0}")]
    MissingImage(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, LgstError>;

/// Nonnegative per-pixel scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl AnomalyMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Bilinear resize with pixel centers aligned (`src = (dst + 0.5) * scale - 0.5`).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> AnomalyMap {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |d: usize, scale: f64, len: usize| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, s - i0 as f64)
        };
        let cols: Vec<_> = (0..width).map(|x| axis(x, sx, self.width)).collect();
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for &(x0, x1, fx) in &cols {
                let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
                let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
                values.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        AnomalyMap { width, height, values }
    }
}

/// Per-position channel mean of squared differences.
pub fn difference_map(a: &FeatureTensor, b: &FeatureTensor) -> Result<AnomalyMap> {
    if a.shape() != b.shape() {
        return Err(LgstError::DimMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let (c, h, w) = a.chw()?;
    let plane = h * w;
    let mut values = vec![0.0f64; plane];
    for ch in 0..c {
        let (pa, pb) = (&a.data()[ch * plane..(ch + 1) * plane], &b.data()[ch * plane..(ch + 1) * plane]);
        for ((v, &x), &y) in values.iter_mut().zip(pa).zip(pb) {
            let d = x as f64 - y as f64;
            *v += d * d;
        }
    }
    if c > 0 {
        values.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(AnomalyMap {
        width: w,
        height: h,
        values,
    })
}

pub struct LgstInputs {
    pub teacher: FeatureTensor,
    pub local_head_local: FeatureTensor,
    pub local_head_global: FeatureTensor,
    pub global_student: FeatureTensor,
}

pub struct LgstMaps {
    pub local: AnomalyMap,
    pub global: AnomalyMap,
    pub combined: AnomalyMap,
}

/// Local head against the teacher, second head against the global student,
/// and their mean.
pub fn lgst_maps(inp: &LgstInputs) -> Result<LgstMaps> {
    let local = difference_map(&inp.teacher, &inp.local_head_local)?;
    let global = difference_map(&inp.global_student, &inp.local_head_global)?;
    if (local.width, local.height) != (global.width, global.height) {
        return Err(LgstError::DimMismatch(
            inp.teacher.shape().to_vec(),
            inp.global_student.shape().to_vec(),
        ));
    }
    let combined = AnomalyMap {
        width: local.width,
        height: local.height,
        values: local.values.iter().zip(&global.values).map(|(a, b)| (a + b) / 2.0).collect(),
    };
    Ok(LgstMaps { local, global, combined })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreReduction {
    #[default]
    Max,
    /// Mean of the largest `ceil(fraction * n)` values (at least one).
    TopK { fraction: f64 },
}

impl ScoreReduction {
    pub const DEFAULT_TOPK_FRACTION: f64 = 0.001;
}

pub fn map_to_score(map: &AnomalyMap, reduction: ScoreReduction) -> Result<f64> {
    if map.values.is_empty() {
        return Err(LgstError::EmptyMap);
    }
    Ok(match reduction {
        ScoreReduction::Max => map.max(),
        ScoreReduction::TopK { fraction } => {
            let n = map.values.len();
            let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
            let mut v = map.values.clone();
            v.select_nth_unstable_by(n - k, f64::total_cmp);
            v[n - k..].iter().sum::<f64>() / k as f64
        }
    })
}

/// File names of the four tensors for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LgstFiles {
    pub teacher: PathBuf,
    pub local_head_local: PathBuf,
    pub local_head_global: PathBuf,
    pub global_student: PathBuf,
}

impl LgstFiles {
    /// `{id}.teacher.cstf`, `{id}.local_head_local.cstf`, ...
    pub fn conventional(id: &str) -> Self {
        let f = |s: &str| PathBuf::from(format!("{id}.{s}.cstf"));
        Self {
            teacher: f("teacher"),
            local_head_local: f("local_head_local"),
            local_head_global: f("local_head_global"),
            global_student: f("global_student"),
        }
    }
}

/// `manifest.json` in a tensor directory: image id to file names, relative to
/// the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub images: BTreeMap<String, LgstFiles>,
}

impl TensorManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(read_json(path)?)
    }

    pub fn load(&self, dir: &Path, id: &str) -> Result<LgstInputs> {
        let files = self.images.get(id).ok_or_else(|| LgstError::MissingImage(id.to_string()))?;
        Ok(LgstInputs {
            teacher: read_tensor(dir.join(&files.teacher))?,
            local_head_local: read_tensor(dir.join(&files.local_head_local))?,
            local_head_global: read_tensor(dir.join(&files.local_head_global))?,
            global_student: read_tensor(dir.join(&files.global_student))?,
        })
    }
}
