//! Semantic pseudo-label generation: mask refinement, component clustering,
//! label-map painting, histogram-based map filtering, and synthetic-anomaly
//! pasting for segmentation training data.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{self, ClusterError, HdbscanConfig, MeanShiftConfig, NOISE};
use crate::component_features::{rotation_invariant_descriptor, FeatureError, FeatureFunction, DEFAULT_ROTATIONS};
use crate::histogram_scoring::class_histogram;
use crate::mask_ops::{self, BinaryMask, MaskError, MaskSet};
use crate::tensor_io::{Image, LabelMap};

/// Bandwidth suited to [`crate::component_features::BuiltinDescriptor`] vectors.
pub const BUILTIN_BANDWIDTH: f64 = 0.5;
pub const LSA_ATTEMPTS: usize = 100;
/// Noise factor for label-map filtering. Normal maps jitter by a few pixels of
/// area per class, while a missing or extra component moves the histogram by
/// orders of magnitude more, so only very late exits count as noise.
pub const MAP_NOISE_LAMBDA_FACTOR: f64 = 50.0;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("image {0} has no usable masks")]
    NoMasks(usize),
    #[error("{images} images but {masks} mask sets")]
    CountMismatch { images: usize, masks: usize },
    #[error("every cluster has fewer than {alpha} members")]
    NoSurvivingClusters { alpha: usize },
    #[error("{0} clusters exceed the 255-class label map limit")]
    TooManyClasses(usize),
    #[error("source map has no foreground component")]
    NoComponent,
    #[error("no placement found after {LSA_ATTEMPTS} attempts")]
    NoValidPlacement,
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

pub type Result<T> = std::result::Result<T, LabelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Proposals are filtered (grounding, then combine).
    #[default]
    Fine,
    /// Proposals are used as given.
    Coarse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelGenConfig {
    pub mode: LabelMode,
    /// Fine mode only: apply the grounding filter when a grounding mask exists.
    pub use_grounding: bool,
    /// Minimum cluster size; `None` means half the image count, rounded up.
    pub alpha: Option<usize>,
    pub meanshift: MeanShiftConfig,
    pub rotations: usize,
    pub fill_holes: bool,
}

impl Default for LabelGenConfig {
    fn default() -> Self {
        Self {
            mode: LabelMode::Fine,
            use_grounding: true,
            alpha: None,
            meanshift: MeanShiftConfig::with_bandwidth(BUILTIN_BANDWIDTH),
            rotations: DEFAULT_ROTATIONS,
            fill_holes: true,
        }
    }
}

impl LabelGenConfig {
    pub fn alpha_for(&self, n_images: usize) -> usize {
        self.alpha.unwrap_or(n_images.div_ceil(2)).max(1)
    }
}

/// Drops empty masks, then applies the mode's filters.
pub fn refine_masks(masks: &MaskSet, grounding: Option<&BinaryMask>, cfg: &LabelGenConfig) -> Result<MaskSet> {
    let nonempty: Vec<BinaryMask> = masks.masks().iter().filter(|m| !m.is_empty()).cloned().collect();
    let mut set = MaskSet::new(masks.width(), masks.height(), nonempty)?;
    if cfg.mode == LabelMode::Coarse {
        return Ok(set);
    }
    if let Some(g) = grounding.filter(|_| cfg.use_grounding) {
        set = mask_ops::filter_by_grounding(g, &set)?;
    }
    if set.is_empty() {
        return Ok(set);
    }
    Ok(mask_ops::filter_by_combine(&set)?)
}

#[derive(Debug, Clone)]
pub struct GeneratedLabels {
    pub n_cls: usize,
    pub maps: Vec<LabelMap>,
    /// Cluster id per (image, mask), [`NOISE`] for discarded components.
    pub component_labels: Vec<Vec<u32>>,
    pub descriptors: Vec<Vec<Vec<f64>>>,
}

/// Descriptors for every mask, in parallel over all (image, mask) pairs.
pub fn compute_descriptors(
    images: &[Image],
    masks: &[MaskSet],
    f: &dyn FeatureFunction,
    rotations: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if images.len() != masks.len() {
        return Err(LabelError::CountMismatch {
            images: images.len(),
            masks: masks.len(),
        });
    }
    images
        .par_iter()
        .zip(masks)
        .map(|(img, set)| {
            set.masks()
                .par_iter()
                .map(|m| rotation_invariant_descriptor(img, m, f, rotations).map_err(LabelError::from))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Clusters descriptors with mean-shift, drops clusters below alpha and paints
/// surviving components (smaller components on top).
pub fn generate_labels(
    images: &[Image],
    masks: &[MaskSet],
    f: &dyn FeatureFunction,
    cfg: &LabelGenConfig,
) -> Result<GeneratedLabels> {
    if let Some(i) = masks.iter().position(|s| s.is_empty()) {
        return Err(LabelError::NoMasks(i));
    }
    let descriptors = compute_descriptors(images, masks, f, cfg.rotations)?;
    labels_from_descriptors(masks, descriptors, cfg)
}

/// [`generate_labels`] with descriptors already computed, e.g. read from
/// external feature files.
pub fn labels_from_descriptors(
    masks: &[MaskSet],
    descriptors: Vec<Vec<Vec<f64>>>,
    cfg: &LabelGenConfig,
) -> Result<GeneratedLabels> {
    if masks.len() != descriptors.len() {
        return Err(LabelError::CountMismatch {
            images: descriptors.len(),
            masks: masks.len(),
        });
    }
    if let Some(i) = masks.iter().position(|s| s.is_empty()) {
        return Err(LabelError::NoMasks(i));
    }
    let flat: Vec<Vec<f64>> = descriptors.iter().flatten().cloned().collect();
    let raw = clustering::mean_shift(&flat, &cfg.meanshift)?;
    let alpha = cfg.alpha_for(masks.len());
    let kept = clustering::alpha_filter(&raw, alpha);
    let n_cls = kept.n_clusters();
    if n_cls == 0 {
        return Err(LabelError::NoSurvivingClusters { alpha });
    }
    if n_cls > 255 {
        return Err(LabelError::TooManyClasses(n_cls));
    }
    let mut offset = 0;
    let mut component_labels = Vec::with_capacity(masks.len());
    let mut maps = Vec::with_capacity(masks.len());
    for set in masks {
        let labels = kept.labels[offset..offset + set.len()].to_vec();
        offset += set.len();
        maps.push(paint(set, &labels, cfg.fill_holes));
        component_labels.push(labels);
    }
    Ok(GeneratedLabels {
        n_cls,
        maps,
        component_labels,
        descriptors,
    })
}

fn paint(set: &MaskSet, labels: &[u32], fill_holes: bool) -> LabelMap {
    let mut parts: Vec<(BinaryMask, u8)> = set
        .masks()
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != NOISE)
        .map(|(m, &l)| (if fill_holes { m.fill_holes() } else { m.clone() }, l as u8))
        .collect();
    parts.sort_by_key(|(m, _)| std::cmp::Reverse(m.area()));
    let mut map = LabelMap::background(set.width(), set.height());
    for (m, l) in &parts {
        for (x, y) in m.iter_set() {
            map.set(x, y, *l);
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Clustering found no usable majority and every map was kept.
    pub fallback: bool,
}

/// Default clustering for [`filter_label_maps`].
pub fn label_map_hdbscan(n_maps: usize) -> HdbscanConfig {
    HdbscanConfig {
        noise_lambda_factor: MAP_NOISE_LAMBDA_FACTOR,
        ..HdbscanConfig::for_sample_count(n_maps)
    }
}

/// Keeps the maps whose class histograms fall in the largest HDBSCAN cluster.
pub fn filter_label_maps(maps: &[LabelMap], n_cls: usize, cfg: Option<HdbscanConfig>) -> Result<DatasetSplit> {
    let all = || DatasetSplit {
        labeled: (0..maps.len()).collect(),
        unlabeled: Vec::new(),
        fallback: true,
    };
    if maps.is_empty() {
        return Err(LabelError::InvalidConfig("no label maps"));
    }
    let hists: Vec<Vec<f64>> = maps.iter().map(|m| class_histogram(m, n_cls)).collect();
    let cfg = cfg.unwrap_or_else(|| label_map_hdbscan(maps.len()));
    let assignment = match clustering::hdbscan(&hists, &cfg) {
        Ok(a) => a,
        Err(ClusterError::TooFewPoints { needed, got }) => {
            warn!("only {got} label maps (need {needed} to filter); keeping all");
            return Ok(all());
        }
        Err(e) => return Err(e.into()),
    };
    match clustering::largest_cluster_filter(&assignment) {
        Ok(labeled) => {
            let unlabeled = (0..maps.len()).filter(|i| labeled.binary_search(i).is_err()).collect();
            Ok(DatasetSplit {
                labeled,
                unlabeled,
                fallback: false,
            })
        }
        Err(ClusterError::AllNoise) => {
            warn!("every label map histogram is noise; keeping all {} maps", maps.len());
            Ok(all())
        }
        Err(e) => Err(e.into()),
    }
}

/// JSON form of a split, keyed by image id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub n_cls: usize,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    #[serde(default)]
    pub fallback: bool,
}

impl SplitFile {
    pub fn new(split: &DatasetSplit, ids: &[String], n_cls: usize) -> Self {
        Self {
            n_cls,
            labeled: split.labeled.iter().map(|&i| ids[i].clone()).collect(),
            unlabeled: split.unlabeled.iter().map(|&i| ids[i].clone()).collect(),
            fallback: split.fallback,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LsaConfig {
    /// Minimum centroid displacement as a fraction of `max(width, height)`.
    pub min_displacement: f64,
    pub components_per_image: usize,
}

impl Default for LsaConfig {
    fn default() -> Self {
        Self {
            min_displacement: 0.1,
            components_per_image: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub class: u8,
    pub offset: (i64, i64),
    /// Pasted pixels in target coordinates.
    pub mask: BinaryMask,
}

/// Pastes random components of `source` into `image`/`map`, each moved at least
/// `min_displacement * max(W, H)` from where it was.
pub fn lsa_augment(
    image: &Image,
    map: &LabelMap,
    source_image: &Image,
    source_map: &LabelMap,
    cfg: &LsaConfig,
    seed: u64,
) -> Result<(Image, LabelMap, Vec<Placement>)> {
    if !(cfg.min_displacement > 0.0 && cfg.min_displacement < 1.0) {
        return Err(LabelError::InvalidConfig("min_displacement must be in (0, 1)"));
    }
    let dims = (map.width(), map.height());
    if (image.width(), image.height()) != dims
        || (source_image.width(), source_image.height()) != dims
        || (source_map.width(), source_map.height()) != dims
        || source_image.channels() != image.channels()
    {
        return Err(MaskError::DimMismatch(dims, (source_map.width(), source_map.height())).into());
    }
    let (w, h) = dims;
    let mut comps = Vec::new();
    for class in 1..=source_map.max_class() {
        if let Ok(set) = mask_ops::connected_components(source_map, class) {
            comps.extend(set.into_masks().into_iter().map(|m| (class, m)));
        }
    }
    if comps.is_empty() {
        return Err(LabelError::NoComponent);
    }
    let min_disp = cfg.min_displacement * w.max(h) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out_img = image.clone();
    let mut out_map = map.clone();
    let mut placements = Vec::with_capacity(cfg.components_per_image);
    for _ in 0..cfg.components_per_image {
        let (class, comp) = &comps[rng.gen_range(0..comps.len())];
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        for (x, y) in comp.iter_set() {
            (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
        }
        let offset = (0..LSA_ATTEMPTS)
            .map(|_| {
                let nx = rng.gen_range(0..=w - 1 - (x1 - x0)) as i64;
                let ny = rng.gen_range(0..=h - 1 - (y1 - y0)) as i64;
                (nx - x0 as i64, ny - y0 as i64)
            })
            .find(|&(dx, dy)| ((dx * dx + dy * dy) as f64).sqrt() >= min_disp)
            .ok_or(LabelError::NoValidPlacement)?;
        let mut pasted = BinaryMask::empty(w, h);
        for (x, y) in comp.iter_set() {
            let (tx, ty) = ((x as i64 + offset.0) as usize, (y as i64 + offset.1) as usize);
            out_img.put_pixel(tx, ty, source_image.pixel(x, y));
            out_map.set(tx, ty, *class);
            pasted.set(tx, ty, true);
        }
        placements.push(Placement {
            class: *class,
            offset,
            mask: pasted,
        });
    }
    Ok((out_img, out_map, placements))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::component_features::BuiltinDescriptor;

    fn disk(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r)
    }

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    /// Red disk and blue square at jittered positions.
    fn two_part_scene(i: usize) -> (Image, MaskSet, LabelMap) {
        let (w, h) = (64, 64);
        let j = (i % 5) as f64;
        let d = disk(w, h, 16.0 + j, 18.0, 9.0);
        let s = rect(w, h, 36 + i % 4, 34, 52 + i % 4, 50);
        let mut img = Image::filled(w, h, [0, 0, 0]);
        let mut truth = LabelMap::background(w, h);
        for (x, y) in d.iter_set() {
            img.put_pixel(x, y, &[220, 30, 30]);
            truth.set(x, y, 1);
        }
        for (x, y) in s.iter_set() {
            img.put_pixel(x, y, &[30, 30, 220]);
            truth.set(x, y, 2);
        }
        (img, MaskSet::new(w, h, vec![d, s]).unwrap(), truth)
    }

    fn quick_cfg() -> LabelGenConfig {
        LabelGenConfig {
            rotations: 6,
            ..LabelGenConfig::default()
        }
    }

    #[test]
    fn two_archetypes_recovered() {
        let scenes: Vec<_> = (0..8).map(two_part_scene).collect();
        let images: Vec<Image> = scenes.iter().map(|s| s.0.clone()).collect();
        let masks: Vec<MaskSet> = scenes.iter().map(|s| s.1.clone()).collect();
        let out = generate_labels(&images, &masks, &BuiltinDescriptor, &quick_cfg()).unwrap();
        assert_eq!(out.n_cls, 2);
        // consistent up to a permutation
        let disk_id = out.maps[0].pixels()[scenes[0].2.pixels().iter().position(|&p| p == 1).unwrap()];
        let perm = |t: u8| match t {
            0 => 0,
            1 => disk_id,
            _ => 3 - disk_id,
        };
        for (map, (_, _, truth)) in out.maps.iter().zip(&scenes) {
            assert!(map.pixels().iter().zip(truth.pixels()).all(|(&a, &b)| a == perm(b)));
        }
    }

    #[test]
    fn alpha_threshold_semantics() {
        let scenes: Vec<_> = (0..3).map(two_part_scene).collect();
        let images: Vec<Image> = scenes.iter().map(|s| s.0.clone()).collect();
        let masks: Vec<MaskSet> = scenes.iter().map(|s| s.1.clone()).collect();
        let cfg = LabelGenConfig {
            alpha: Some(4),
            ..quick_cfg()
        };
        assert!(matches!(
            generate_labels(&images, &masks, &BuiltinDescriptor, &cfg),
            Err(LabelError::NoSurvivingClusters { alpha: 4 })
        ));
        let one = LabelGenConfig {
            alpha: Some(1),
            ..quick_cfg()
        };
        let out = generate_labels(&images[..1], &masks[..1], &BuiltinDescriptor, &one).unwrap();
        assert!(out.n_cls >= 1 && out.n_cls <= 2);
    }

    #[test]
    fn smaller_component_painted_on_top() {
        let (w, h) = (32, 32);
        let big = rect(w, h, 0, 0, 32, 32);
        let small = rect(w, h, 10, 10, 14, 14);
        let set = MaskSet::new(w, h, vec![small.clone(), big]).unwrap();
        let map = paint(&set, &[2, 1], false);
        assert_eq!(map.get(11, 11), 2);
        assert_eq!(map.get(0, 0), 1);
        let noise = paint(&set, &[NOISE, 1], false);
        assert_eq!(noise.get(11, 11), 1);
    }

    #[test]
    fn hole_filling_is_optional() {
        let (w, h) = (20, 20);
        let ring = BinaryMask::from_fn(w, h, |x, y| {
            let d = (x as f64 - 9.5).hypot(y as f64 - 9.5);
            (4.0..8.0).contains(&d)
        });
        let set = MaskSet::new(w, h, vec![ring]).unwrap();
        assert_eq!(paint(&set, &[1], true).get(10, 10), 1);
        assert_eq!(paint(&set, &[1], false).get(10, 10), 0);
    }

    #[test]
    fn refine_by_mode() {
        let (w, h) = (16, 16);
        let a = rect(w, h, 0, 0, 4, 4);
        let b = rect(w, h, 8, 8, 12, 12);
        let mut ab = a.clone();
        ab.union_with(&b).unwrap();
        let set = MaskSet::new(w, h, vec![ab.clone(), a.clone(), BinaryMask::empty(w, h), b.clone()]).unwrap();
        let coarse = LabelGenConfig {
            mode: LabelMode::Coarse,
            ..LabelGenConfig::default()
        };
        assert_eq!(refine_masks(&set, None, &coarse).unwrap().len(), 3);
        let fine = refine_masks(&set, None, &LabelGenConfig::default()).unwrap();
        assert_eq!(fine.masks(), &[a.clone(), b.clone()]);
        let grounded = refine_masks(&set, Some(&a), &LabelGenConfig::default()).unwrap();
        assert_eq!(grounded.masks(), &[a]);
    }

    fn map_with_areas(areas: &[usize]) -> LabelMap {
        let mut px = vec![0u8; 1600];
        let mut at = 0;
        for (k, &a) in areas.iter().enumerate() {
            px[at..at + a].fill(k as u8 + 1);
            at += a;
        }
        LabelMap::new(40, 40, px).unwrap()
    }

    #[test]
    fn identical_maps_all_labeled() {
        let maps = vec![map_with_areas(&[100, 50]); 20];
        let split = filter_label_maps(&maps, 2, None).unwrap();
        assert_eq!(split.labeled.len(), 20);
        assert!(split.unlabeled.is_empty());
    }

    #[test]
    fn halved_class_maps_rejected() {
        let mut maps: Vec<LabelMap> = (0..18).map(|i| map_with_areas(&[400 + i % 3, 200])).collect();
        maps.push(map_with_areas(&[200, 200]));
        maps.push(map_with_areas(&[400, 100]));
        let split = filter_label_maps(&maps, 2, None).unwrap();
        assert!(!split.fallback);
        assert_eq!(split.unlabeled, vec![18, 19]);
        assert_eq!(split.labeled, (0..18).collect::<Vec<_>>());
    }

    #[test]
    fn scattered_maps_fall_back() {
        let maps: Vec<LabelMap> = (0..10).map(|i| map_with_areas(&[i * i * 4 + 1])).collect();
        let cfg = HdbscanConfig {
            min_cluster_size: 5,
            min_samples: 5,
            allow_single_cluster: false,
            noise_lambda_factor: MAP_NOISE_LAMBDA_FACTOR,
        };
        let split = filter_label_maps(&maps, 1, Some(cfg)).unwrap();
        assert!(split.fallback);
        assert_eq!(split.labeled.len(), 10);
        let few = filter_label_maps(&maps[..3], 1, None).unwrap();
        assert!(few.fallback);
    }

    #[test]
    fn split_file_json() {
        let split = DatasetSplit {
            labeled: vec![0, 2],
            unlabeled: vec![1],
            fallback: false,
        };
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let json = serde_json::to_value(SplitFile::new(&split, &ids, 2)).unwrap();
        assert_eq!(json, serde_json::json!({"n_cls": 2, "labeled": ["a", "c"], "unlabeled": ["b"], "fallback": false}));
    }

    #[test]
    fn lsa_moves_far_and_labels_exactly() {
        let (img, _, truth) = two_part_scene(0);
        let target_img = Image::filled(64, 64, [0, 0, 0]);
        let target = LabelMap::background(64, 64);
        for seed in 0..50 {
            let (out_img, out_map, placed) =
                lsa_augment(&target_img, &target, &img, &truth, &LsaConfig::default(), seed).unwrap();
            let p = &placed[0];
            let (dx, dy) = p.offset;
            assert!(((dx * dx + dy * dy) as f64).sqrt() >= 6.4);
            for y in 0..64 {
                for x in 0..64 {
                    if p.mask.get(x, y) {
                        assert_eq!(out_map.get(x, y), p.class);
                        let (sx, sy) = ((x as i64 - dx) as usize, (y as i64 - dy) as usize);
                        assert_eq!(truth.get(sx, sy), p.class);
                        assert_eq!(out_img.pixel(x, y), img.pixel(sx, sy));
                    } else {
                        assert_eq!(out_map.get(x, y), 0);
                        assert_eq!(out_img.pixel(x, y), target_img.pixel(x, y));
                    }
                }
            }
        }
        let a = lsa_augment(&target_img, &target, &img, &truth, &LsaConfig::default(), 7).unwrap();
        let b = lsa_augment(&target_img, &target, &img, &truth, &LsaConfig::default(), 7).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn lsa_errors() {
        let img = Image::filled(16, 16, [0, 0, 0]);
        let empty = LabelMap::background(16, 16);
        assert!(matches!(
            lsa_augment(&img, &empty, &img, &empty, &LsaConfig::default(), 0),
            Err(LabelError::NoComponent)
        ));
        let full = LabelMap::new(16, 16, vec![1; 256]).unwrap();
        assert!(matches!(
            lsa_augment(&img, &empty, &img, &full, &LsaConfig::default(), 0),
            Err(LabelError::NoValidPlacement)
        ));
    }
}
