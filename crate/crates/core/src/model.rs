//! Fitted model: one histogram bank per patch size, a calibration profile and
//! the training maps used for localization, persisted as a directory.
//!
//! ```text
//! model.json               ModelMeta
//! calibration.json         CalibrationProfile
//! banks/bank_{s}.bin       HistogramBank per patch size
//! train_maps/{id}.pgm      label maps the banks were fitted on
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion_calibration::{self, patch_stream, CalibrationProfile, FusionError, DEFAULT_TRIM, MIN_SCORES, STREAM_LGST};
use crate::histogram_scoring::{fit_patch_bank, mahalanobis_score, HistError, HistogramBank, RegPolicy};
use crate::lgst_scoring::{map_to_score, AnomalyMap, LgstError, ScoreReduction};
use crate::localization::{self, LocalizationError, LocalizationResult};
use crate::tensor_io::{self, IoError, LabelMap};

pub const MODEL_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.json";
pub const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("need at least {needed} training maps, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),
    #[error("label map has class {class} but the model knows {n_cls}")]
    ClassOutOfRange { class: u8, n_cls: usize },
    #[error(transparent)]
    Hist(#[from] HistError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Lgst(#[from] LgstError),
    #[error(transparent)]
    Localization(#[from] LocalizationError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub patch_sizes: Vec<usize>,
    /// Fraction of the normal maps held out for calibration.
    pub validation_fraction: f64,
    pub trim: (f64, f64),
    pub policy: RegPolicy,
    pub reduction: ScoreReduction,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            patch_sizes: vec![256, 128],
            validation_fraction: 0.2,
            trim: DEFAULT_TRIM,
            policy: RegPolicy::default(),
            reduction: ScoreReduction::Max,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub version: u32,
    pub n_cls: usize,
    pub patch_sizes: Vec<usize>,
    /// Maps segmenter class ids to model class ids (`remap[k]`), when the two differ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_remap: Option<Vec<u8>>,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub config: FitConfig,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub meta: ModelMeta,
    pub banks: Vec<HistogramBank>,
    pub calibration: CalibrationProfile,
    pub train_maps: Vec<LabelMap>,
}

/// Raw per-stream scores and their fused sum for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub streams: BTreeMap<String, f64>,
    pub fused: f64,
}

/// Deterministic (train, validation) index split.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ModelError::InvalidConfig("validation_fraction must be in (0, 1)".into()));
    }
    let n_val = ((fraction * n as f64).round() as usize).max(MIN_SCORES);
    if n < n_val + 2 {
        return Err(ModelError::TooFewSamples {
            needed: MIN_SCORES + 2,
            got: n,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    Ok((idx, val))
}

/// Class correspondence by largest pixel overlap: `remap[k]` is the model
/// class most often painted where the segmenter says `k`. Background stays 0.
pub fn class_remap(segmented: &[LabelMap], model_maps: &[LabelMap], n_seg: usize, n_cls: usize) -> Vec<u8> {
    let mut counts = vec![vec![0u64; n_cls + 1]; n_seg + 1];
    for (s, m) in segmented.iter().zip(model_maps) {
        for (&a, &b) in s.pixels().iter().zip(m.pixels()) {
            if (a as usize) <= n_seg && (b as usize) <= n_cls {
                counts[a as usize][b as usize] += 1;
            }
        }
    }
    counts
        .iter()
        .enumerate()
        .map(|(k, row)| {
            if k == 0 {
                return 0;
            }
            // first maximum, so ties go to the lower id
            let best = row.iter().enumerate().fold((0, 0), |acc, (j, &c)| if c > acc.1 { (j, c) } else { acc });
            best.0 as u8
        })
        .collect()
}

pub fn apply_remap(map: &LabelMap, remap: &[u8]) -> LabelMap {
    let pixels = map.pixels().iter().map(|&p| remap.get(p as usize).copied().unwrap_or(0)).collect();
    LabelMap::new(map.width(), map.height(), pixels).expect("same size")
}

fn bank_path(dir: &Path, s: usize) -> PathBuf {
    dir.join("banks").join(format!("bank_{s}.bin"))
}

impl Model {
    /// Fits banks on a random `1 - validation_fraction` share of `maps` and
    /// calibrates every stream on the rest. `lgst` holds per-map LGST anomaly
    /// maps; the LGST stream is calibrated only if every held-out map has one.
    pub fn fit(
        maps: &[LabelMap],
        ids: &[String],
        lgst: Option<&[Option<AnomalyMap>]>,
        n_cls: usize,
        cfg: &FitConfig,
    ) -> Result<Model> {
        if ids.len() != maps.len() || lgst.is_some_and(|l| l.len() != maps.len()) {
            return Err(ModelError::InvalidConfig("ids, maps and lgst maps differ in count".into()));
        }
        if cfg.patch_sizes.is_empty() || cfg.patch_sizes.contains(&0) {
            return Err(ModelError::InvalidConfig("patch sizes must be positive and non-empty".into()));
        }
        if n_cls == 0 || n_cls > 255 {
            return Err(ModelError::InvalidConfig(format!("n_cls {n_cls} outside 1..=255")));
        }
        for m in maps {
            check_classes(m, n_cls)?;
        }
        let (train, val) = holdout_split(maps.len(), cfg.validation_fraction, cfg.seed)?;
        let train_maps: Vec<LabelMap> = train.iter().map(|&i| maps[i].clone()).collect();
        let banks = cfg
            .patch_sizes
            .par_iter()
            .map(|&s| fit_patch_bank(&train_maps, s, n_cls, cfg.policy))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut validation: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (s, bank) in cfg.patch_sizes.iter().zip(&banks) {
            let scores = val
                .par_iter()
                .map(|&i| mahalanobis_score(bank, &bank.histogram_of(&maps[i])?))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            validation.insert(patch_stream(*s), scores);
        }
        if let Some(l) = lgst {
            let held: Option<Vec<&AnomalyMap>> = val.iter().map(|&i| l[i].as_ref()).collect();
            if let Some(held) = held {
                let scores = held
                    .iter()
                    .map(|m| map_to_score(m, cfg.reduction))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                validation.insert(STREAM_LGST.to_string(), scores);
            }
        }
        let calibration = fusion_calibration::calibrate(&validation, cfg.trim)?;
        Ok(Model {
            meta: ModelMeta {
                version: MODEL_VERSION,
                n_cls,
                patch_sizes: cfg.patch_sizes.clone(),
                class_remap: None,
                train_ids: train.iter().map(|&i| ids[i].clone()).collect(),
                validation_ids: val.iter().map(|&i| ids[i].clone()).collect(),
                config: cfg.clone(),
            },
            banks,
            calibration,
            train_maps,
        })
    }

    pub fn n_cls(&self) -> usize {
        self.meta.n_cls
    }

    /// Converts a segmenter map into model classes.
    pub fn to_model_classes(&self, map: &LabelMap) -> LabelMap {
        match &self.meta.class_remap {
            Some(r) => apply_remap(map, r),
            None => map.clone(),
        }
    }

    /// Raw stream scores for a map already in model classes.
    pub fn raw_scores(&self, map: &LabelMap, lgst: Option<&AnomalyMap>) -> Result<BTreeMap<String, f64>> {
        check_classes(map, self.n_cls())?;
        let mut out = BTreeMap::new();
        for (s, bank) in self.meta.patch_sizes.iter().zip(&self.banks) {
            out.insert(patch_stream(*s), mahalanobis_score(bank, &bank.histogram_of(map)?)?);
        }
        if let Some(m) = lgst {
            if self.calibration.streams.contains_key(STREAM_LGST) {
                out.insert(STREAM_LGST.to_string(), map_to_score(m, self.meta.config.reduction)?);
            } else {
                log::warn!("model has no calibrated lgst stream; ignoring lgst map");
            }
        }
        Ok(out)
    }

    pub fn score(&self, id: &str, map: &LabelMap, lgst: Option<&AnomalyMap>) -> Result<ScoreRecord> {
        let streams = self.raw_scores(map, lgst)?;
        let fused = fusion_calibration::fuse(&self.calibration, streams.iter().map(|(k, v)| (k.as_str(), *v)))?;
        Ok(ScoreRecord {
            id: id.to_string(),
            streams,
            fused,
        })
    }

    pub fn localize(&self, map: &LabelMap, lgst: Option<&AnomalyMap>) -> Result<LocalizationResult> {
        check_classes(map, self.n_cls())?;
        Ok(localization::localize(map, &self.banks, &self.train_maps, lgst, &self.calibration)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mkdir = |p: PathBuf| {
            std::fs::create_dir_all(&p).map_err(|source| IoError::Io { path: p, source })
        };
        mkdir(dir.join("banks"))?;
        mkdir(dir.join("train_maps"))?;
        for (s, bank) in self.meta.patch_sizes.iter().zip(&self.banks) {
            bank.write(bank_path(dir, *s))?;
        }
        for (id, m) in self.meta.train_ids.iter().zip(&self.train_maps) {
            tensor_io::write_label_map(m, dir.join("train_maps").join(format!("{id}.pgm")))?;
        }
        tensor_io::write_json(dir.join(CALIBRATION_FILE), &self.calibration)?;
        // written last so a partial directory never loads
        tensor_io::write_json(dir.join(MODEL_FILE), &self.meta)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Model> {
        let dir = dir.as_ref();
        let meta: ModelMeta = tensor_io::read_json(dir.join(MODEL_FILE))?;
        if meta.version != MODEL_VERSION {
            return Err(ModelError::UnsupportedVersion(meta.version));
        }
        let banks = meta
            .patch_sizes
            .iter()
            .map(|&s| HistogramBank::read(bank_path(dir, s)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let calibration = tensor_io::read_json(dir.join(CALIBRATION_FILE))?;
        let train_maps = meta
            .train_ids
            .par_iter()
            .map(|id| tensor_io::read_label_map(dir.join("train_maps").join(format!("{id}.pgm"))))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Model {
            meta,
            banks,
            calibration,
            train_maps,
        })
    }
}

fn check_classes(map: &LabelMap, n_cls: usize) -> Result<()> {
    match map.max_class() {
        c if c as usize > n_cls => Err(ModelError::ClassOutOfRange { class: c, n_cls }),
        _ => Ok(()),
    }
}
