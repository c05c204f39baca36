//! Pixel anomaly maps from patch-histogram discrepancies, merged with the
//! student-teacher map.

use rayon::prelude::*;
use thiserror::Error;

use crate::fusion_calibration::{CalibrationProfile, STREAM_LGST};
use crate::histogram_scoring::{cell_range, class_histogram, grid_cells, l1_distance, HistError, HistogramBank};
use crate::lgst_scoring::AnomalyMap;
use crate::tensor_io::LabelMap;

/// Histogram differences at or below this magnitude are ignored.
pub const DIFF_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error("no training maps to borrow geometry from")]
    NoTrainingMaps,
    #[error("map size mismatch: {0:?} vs {1:?}")]
    DimMismatch((usize, usize), (usize, usize)),
    #[error("bank has no patch layout")]
    UnlaidBank,
    #[error(transparent)]
    Hist(#[from] HistError),
}

pub type Result<T> = std::result::Result<T, LocalizationError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub patch_hist_map: AnomalyMap,
    pub lgst_map: AnomalyMap,
    pub merged: AnomalyMap,
}

/// Training map whose class histogram is closest in L1 (first on ties).
pub fn nearest_normal<'a>(test: &LabelMap, train_maps: &'a [LabelMap], n_cls: usize) -> Result<&'a LabelMap> {
    let h = class_histogram(test, n_cls);
    let dists: Vec<f64> = train_maps
        .par_iter()
        .map(|m| l1_distance(&h, &class_histogram(m, n_cls)))
        .collect();
    let best = dists
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .ok_or(LocalizationError::NoTrainingMaps)?;
    Ok(&train_maps[best.0])
}

/// For every bank (one per patch size) and every grid cell, spreads each
/// class's histogram excess uniformly over that class's pixels in the test
/// cell and each deficit over the class's pixels in the same cell of the
/// nearest normal training map (the whole cell if it has none). Maps from all
/// patch sizes are summed.
pub fn histogram_anomaly_map(
    test: &LabelMap,
    banks: &[HistogramBank],
    train_maps: &[LabelMap],
) -> Result<AnomalyMap> {
    let (w, h) = (test.width(), test.height());
    let mut out = AnomalyMap::zeros(w, h);
    let Some(first) = banks.first() else {
        return Ok(out);
    };
    if train_maps.is_empty() {
        return Err(LocalizationError::NoTrainingMaps);
    }
    if let Some(m) = train_maps.iter().find(|m| (m.width(), m.height()) != (w, h)) {
        return Err(LocalizationError::DimMismatch((w, h), (m.width(), m.height())));
    }
    let normal = nearest_normal(test, train_maps, first.n_cls as usize)?;
    for bank in banks {
        if bank.patch_size == 0 {
            return Err(LocalizationError::UnlaidBank);
        }
        add_bank_map(&mut out, test, normal, bank)?;
    }
    Ok(out)
}

fn add_bank_map(out: &mut AnomalyMap, test: &LabelMap, normal: &LabelMap, bank: &HistogramBank) -> Result<()> {
    let (w, h) = (test.width(), test.height());
    let (s, n_cls) = (bank.patch_size as usize, bank.n_cls as usize);
    let hist = bank.histogram_of(test)?;
    if hist.len() != bank.dim() {
        return Err(HistError::DimMismatch {
            expected: bank.dim(),
            found: hist.len(),
        }
        .into());
    }
    let (gw, gh) = (grid_cells(w, s), grid_cells(h, s));
    for gy in 0..gh {
        let (y0, y1) = cell_range(h, s, gh, gy);
        for gx in 0..gw {
            let (x0, x1) = cell_range(w, s, gw, gx);
            let cell = gy * gw + gx;
            for k in 0..n_cls {
                let diff = hist[cell * n_cls + k] - bank.mean()[cell * n_cls + k];
                if diff.abs() <= DIFF_TOLERANCE {
                    continue;
                }
                let class = (k + 1) as u8;
                let geometry = if diff > 0.0 { test } else { normal };
                let region: Vec<usize> = (y0..y1)
                    .flat_map(|y| (x0..x1).map(move |x| y * w + x))
                    .filter(|&i| geometry.pixels()[i] == class)
                    .collect();
                let region = if region.is_empty() {
                    (y0..y1).flat_map(|y| (x0..x1).map(move |x| y * w + x)).collect()
                } else {
                    region
                };
                let share = diff.abs() / region.len() as f64;
                for i in region {
                    out.values[i] += share;
                }
            }
        }
    }
    Ok(())
}

/// Calibration sigmas used to put the two branches on a common scale: the
/// mean over `ph_*` streams, and the `lgst` stream (1 when absent).
pub fn branch_sigmas(profile: &CalibrationProfile) -> (f64, f64) {
    let ph: Vec<f64> = profile
        .streams
        .iter()
        .filter(|(k, _)| k.starts_with("ph_"))
        .map(|(_, v)| v.sigma)
        .collect();
    let sigma_ph = if ph.is_empty() { 1.0 } else { ph.iter().sum::<f64>() / ph.len() as f64 };
    (sigma_ph, profile.sigma(STREAM_LGST).unwrap_or(1.0))
}

/// `ph / sigma_ph + lgst / sigma_lgst` per pixel.
pub fn merge_maps(ph: &AnomalyMap, lgst: &AnomalyMap, profile: &CalibrationProfile) -> Result<AnomalyMap> {
    if (ph.width, ph.height) != (lgst.width, lgst.height) {
        return Err(LocalizationError::DimMismatch((ph.width, ph.height), (lgst.width, lgst.height)));
    }
    let (sp, sl) = branch_sigmas(profile);
    Ok(AnomalyMap {
        width: ph.width,
        height: ph.height,
        values: ph.values.iter().zip(&lgst.values).map(|(a, b)| a / sp + b / sl).collect(),
    })
}

/// Full localization for one image; the LGST map is resized to the label map.
pub fn localize(
    test: &LabelMap,
    banks: &[HistogramBank],
    train_maps: &[LabelMap],
    lgst: Option<&AnomalyMap>,
    profile: &CalibrationProfile,
) -> Result<LocalizationResult> {
    let ph = histogram_anomaly_map(test, banks, train_maps)?;
    let lgst_map = match lgst {
        Some(m) => m.resize_bilinear(ph.width, ph.height),
        None => AnomalyMap::zeros(ph.width, ph.height),
    };
    let merged = merge_maps(&ph, &lgst_map, profile)?;
    Ok(LocalizationResult {
        patch_hist_map: ph,
        lgst_map,
        merged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion_calibration::StreamStats;
    use crate::histogram_scoring::{fit_patch_bank, patch_histogram, RegPolicy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(w: usize, squares: &[(usize, usize, u8)]) -> LabelMap {
        let mut m = LabelMap::background(w, w);
        for &(x0, y0, c) in squares {
            for y in y0..y0 + 8 {
                for x in x0..x0 + 8 {
                    m.set(x, y, c);
                }
            }
        }
        m
    }

    fn normals() -> Vec<LabelMap> {
        (0..6).map(|i| scene(64, &[(4 + i % 3, 4, 1), (40, 40 + i % 2, 2)])).collect()
    }

    fn banks(train: &[LabelMap]) -> Vec<HistogramBank> {
        [64, 32]
            .iter()
            .map(|&s| fit_patch_bank(train, s, 2, RegPolicy::default()).unwrap())
            .collect()
    }

    #[test]
    fn mean_scene_gives_zero_map() {
        let train = vec![scene(64, &[(4, 4, 1), (40, 40, 2)]); 3];
        let b = banks(&train);
        let m = histogram_anomaly_map(&train[0], &b, &train).unwrap();
        assert_eq!(m.max(), 0.0);
    }

    #[test]
    fn extra_component_gets_mass() {
        let train = normals();
        let b = banks(&train);
        let test = scene(64, &[(5, 4, 1), (40, 40, 2), (40, 6, 1)]);
        let m = histogram_anomaly_map(&test, &b, &train).unwrap();
        let inside: f64 = (6..14).flat_map(|y| (40..48).map(move |x| (x, y))).map(|(x, y)| m.get(x, y)).sum();
        assert!(inside / m.sum() >= 0.6, "{}", inside / m.sum());
    }

    #[test]
    fn missing_component_uses_nearest_normal_geometry() {
        let train = normals();
        let b = banks(&train);
        let test = scene(64, &[(5, 4, 1)]);
        let normal = nearest_normal(&test, &train, 2).unwrap();
        let m = histogram_anomaly_map(&test, &b, &train).unwrap();
        let inside: f64 = m
            .values
            .iter()
            .zip(normal.pixels())
            .filter(|(_, &p)| p == 2)
            .map(|(v, _)| v)
            .sum();
        assert!(inside / m.sum() >= 0.6, "{}", inside / m.sum());
    }

    #[test]
    fn mass_equals_l1_discrepancy() {
        let train = normals();
        let b = banks(&train);
        let test = scene(64, &[(20, 30, 1), (50, 10, 2), (10, 50, 2)]);
        for bank in &b {
            let m = histogram_anomaly_map(&test, std::slice::from_ref(bank), &train).unwrap();
            let l1 = l1_distance(&patch_histogram(&test, bank.patch_size as usize, 2).unwrap(), bank.mean());
            assert!((m.sum() - l1).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        let train = normals();
        let b = banks(&train);
        assert!(matches!(
            histogram_anomaly_map(&train[0], &b, &[]),
            Err(LocalizationError::NoTrainingMaps)
        ));
        let small = AnomalyMap::zeros(3, 3);
        assert!(merge_maps(&small, &AnomalyMap::zeros(4, 3), &CalibrationProfile::default()).is_err());
    }

    fn profile(sph: f64, sl: f64) -> CalibrationProfile {
        let mut p = CalibrationProfile::default();
        let s = |sigma| StreamStats {
            mu: 0.0,
            sigma,
            low: 0.2,
            high: 0.8,
        };
        p.streams.insert("ph_256".into(), s(sph));
        p.streams.insert("ph_128".into(), s(3.0 * sph));
        p.streams.insert("lgst".into(), s(sl));
        p
    }

    #[test]
    fn merge_cases() {
        let z = AnomalyMap::zeros(4, 4);
        assert_eq!(merge_maps(&z, &z, &profile(1.0, 1.0)).unwrap().max(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = AnomalyMap {
            width: 4,
            height: 4,
            values: (0..16).map(|_| rng.gen_range(0.0..3.0)).collect(),
        };
        let b = AnomalyMap {
            width: 4,
            height: 4,
            values: (0..16).map(|_| rng.gen_range(0.0..3.0)).collect(),
        };
        let p = profile(0.5, 4.0);
        // sigma_ph = mean(0.5, 1.5) = 1
        let only_a = merge_maps(&a, &z, &p).unwrap();
        assert_eq!(only_a.values, a.values);
        let m = merge_maps(&a, &b, &p).unwrap();
        for i in 0..16 {
            assert_eq!(m.values[i], a.values[i] / 1.0 + b.values[i] / 4.0);
        }
    }

    #[test]
    fn localize_resizes_lgst() {
        let train = normals();
        let b = banks(&train);
        let lg = AnomalyMap {
            width: 8,
            height: 8,
            values: vec![2.0; 64],
        };
        let r = localize(&train[0], &b, &train, Some(&lg), &profile(1.0, 2.0)).unwrap();
        assert_eq!((r.lgst_map.width, r.lgst_map.height), (64, 64));
        assert!(r.merged.values.iter().all(|&v| v >= 1.0 - 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn maps_are_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = normals();
            let b = banks(&train);
            let squares: Vec<(usize, usize, u8)> = (0..rng.gen_range(0..4))
                .map(|_| (rng.gen_range(0..56), rng.gen_range(0..56), rng.gen_range(1..=2)))
                .collect();
            let m = histogram_anomaly_map(&scene(64, &squares), &b, &train).unwrap();
            prop_assert!(m.values.iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }
}
