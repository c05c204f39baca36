//! Synthetic scenes with known segmentation and injected anomalies, an AUROC
//! evaluator and a latency/throughput harness.
//!
//! Scenes place colored shapes in fixed home cells of a grid. Every instance is
//! centered on an integer pixel, so moving it by whole pixels keeps its
//! rasterized area, which makes position swaps invisible to global class
//! histograms.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lgst_scoring::{LgstFiles, LgstInputs, TensorManifest};
use crate::mask_ops::{BinaryMask, MaskSet};
use crate::tensor_io::{self, encode_mask, FeatureTensor, Image, IoError, LabelMap};

pub const TENSOR_SIDE: usize = 56;
pub const DEFAULT_TENSOR_CHANNELS: usize = 8;
pub const MANIFEST: &str = "manifest.json";
const PLACEMENT_TRIES: usize = 200;
/// Proposal sets of this fraction of training images include a stray blob.
const NOISE_BLOB_RATE: f64 = 0.3;
const STUDENT_NOISE: f32 = 0.02;
const DEFECT_SHIFT: f32 = 0.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene spec infeasible: {0}")]
    SpecInfeasible(String),
    #[error("empty score list")]
    EmptyInput,
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Bar,
    Triangle,
}

impl Shape {
    /// Inside test for a point relative to the center, already unrotated.
    /// Straight half-extents are whole pixels so that axis-aligned placements
    /// cover the same area as the shape's average over rotations.
    fn contains(self, x: f64, y: f64, r: f64) -> bool {
        match self {
            Shape::Disk => x * x + y * y <= r * r,
            Shape::Square => {
                let a = (0.8 * r).round();
                x.abs() <= a && y.abs() <= a
            }
            Shape::Bar => x.abs() <= r.round() && y.abs() <= (0.35 * r).round(),
            Shape::Triangle => (0..3).all(|k| {
                // inward half-planes of an equilateral triangle with circumradius r
                let a = 2.0 * PI * k as f64 / 3.0 + PI / 2.0;
                x * a.cos() + y * a.sin() <= r / 2.0
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub shape: Shape,
    pub color: [u8; 3],
    /// Circumradius in pixels.
    pub size: f64,
    pub count: usize,
    /// `(column, row)` of the grid cell the instances live in.
    pub home_cell: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Grid `(columns, rows)`.
    pub grid: (usize, usize),
    pub archetypes: Vec<Archetype>,
    /// Std of the integer positional jitter, pixels; clipped at two sigma.
    pub jitter: f64,
    /// Std of additive color noise on 0..255 values.
    pub color_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let a = |shape, color, home_cell| Archetype {
            shape,
            color,
            size: 26.0,
            count: 1,
            home_cell,
        };
        Self {
            width: 256,
            height: 256,
            grid: (2, 2),
            archetypes: vec![
                a(Shape::Disk, [220, 40, 40], (0, 0)),
                a(Shape::Square, [40, 70, 220], (1, 0)),
                a(Shape::Bar, [40, 200, 60], (0, 1)),
                a(Shape::Triangle, [230, 210, 40], (1, 1)),
            ],
            jitter: 3.0,
            color_noise: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Red disk and blue square only.
    pub fn two_archetypes() -> Self {
        let mut s = Self::default();
        s.archetypes.truncate(2);
        s
    }

    pub fn n_classes(&self) -> usize {
        self.archetypes.len()
    }

    pub fn cell_size(&self) -> (usize, usize) {
        (self.width / self.grid.0.max(1), self.height / self.grid.1.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::SpecInfeasible(m));
        if self.archetypes.is_empty() || self.archetypes.len() > 255 {
            return bad("need between 1 and 255 archetypes".into());
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.width == 0 || self.height == 0 {
            return bad("empty canvas or grid".into());
        }
        let (cw, ch) = self.cell_size();
        let margin = 2.0 * self.jitter + 2.0;
        for (i, a) in self.archetypes.iter().enumerate() {
            if a.count == 0 {
                return bad(format!("archetype {i} has count 0"));
            }
            if a.home_cell.0 >= self.grid.0 || a.home_cell.1 >= self.grid.1 {
                return bad(format!("archetype {i} home cell outside grid"));
            }
            if a.color == [0, 0, 0] || self.archetypes[..i].iter().any(|b| b.color == a.color) {
                return bad(format!("archetype {i} color is not distinct"));
            }
            let slot = cw as f64 / (a.count + 1) as f64;
            if 2.0 * (a.size + margin) > ch as f64 || (a.count > 1 && slot < 2.0 * (a.size + margin)) {
                return bad(format!("archetype {i} does not fit its cell"));
            }
            if self.archetypes[..i]
                .iter()
                .any(|b| b.home_cell == a.home_cell)
            {
                return bad(format!("archetype {i} shares a home cell"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    MissingComponent,
    ExtraComponent,
    SwappedPositions,
    StructuralDefect,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::MissingComponent,
        AnomalyKind::ExtraComponent,
        AnomalyKind::SwappedPositions,
        AnomalyKind::StructuralDefect,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AnomalyKind::MissingComponent => "missing",
            AnomalyKind::ExtraComponent => "extra",
            AnomalyKind::SwappedPositions => "swapped",
            AnomalyKind::StructuralDefect => "defect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Instance {
    archetype: usize,
    center: (i64, i64),
    angle: f64,
}

/// What the injector changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyInfo {
    pub kind: AnomalyKind,
    /// Label of the class involved (first one for swaps).
    pub class: u8,
    /// Grid cell the change happened in.
    pub cell: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub anomaly: Option<AnomalyInfo>,
    pub image: Image,
    pub truth: LabelMap,
    /// Pixels that differ from the scene before injection (removed, added or moved).
    pub anomaly_mask: Option<BinaryMask>,
    /// Training images only: proposal masks and grounding mask.
    pub proposals: Option<(MaskSet, BinaryMask)>,
    seed: u64,
}

fn instance_mask(spec: &SceneSpec, inst: &Instance) -> BinaryMask {
    let a = &spec.archetypes[inst.archetype];
    let (w, h) = (spec.width, spec.height);
    let mut m = BinaryMask::empty(w, h);
    let reach = a.size.ceil() as i64 + 1;
    let (s, c) = inst.angle.to_radians().sin_cos();
    for y in (inst.center.1 - reach).max(0)..(inst.center.1 + reach + 1).min(h as i64) {
        for x in (inst.center.0 - reach).max(0)..(inst.center.0 + reach + 1).min(w as i64) {
            let (px, py) = ((x - inst.center.0) as f64 + 0.5, (y - inst.center.1) as f64 + 0.5);
            let (ux, uy) = (px * c + py * s, -px * s + py * c);
            if a.shape.contains(ux, uy, a.size) {
                m.set(x as usize, y as usize, true);
            }
        }
    }
    m
}

fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Instance> {
    let (cw, ch) = spec.cell_size();
    let jitter = Normal::new(0.0, spec.jitter.max(1e-9)).unwrap();
    let jit = |rng: &mut ChaCha8Rng| {
        if spec.jitter <= 0.0 {
            0
        } else {
            jitter.sample(rng).clamp(-2.0 * spec.jitter, 2.0 * spec.jitter).round() as i64
        }
    };
    let mut out = Vec::new();
    for (k, a) in spec.archetypes.iter().enumerate() {
        for i in 0..a.count {
            let x = a.home_cell.0 * cw + (cw * (i + 1)) / (a.count + 1);
            let y = a.home_cell.1 * ch + ch / 2;
            let center = (x as i64 + jit(rng), y as i64 + jit(rng));
            let angle = if a.shape == Shape::Disk { 0.0 } else { rng.gen_range(0.0..360.0) };
            out.push(Instance {
                archetype: k,
                center,
                angle,
            });
        }
    }
    out
}

fn cell_of(spec: &SceneSpec, p: (i64, i64)) -> (usize, usize) {
    let (cw, ch) = spec.cell_size();
    (
        (p.0.max(0) as usize / cw).min(spec.grid.0 - 1),
        (p.1.max(0) as usize / ch).min(spec.grid.1 - 1),
    )
}

fn render(spec: &SceneSpec, masks: &[(usize, BinaryMask)], rng: &mut ChaCha8Rng) -> (Image, LabelMap) {
    let (w, h) = (spec.width, spec.height);
    let mut truth = LabelMap::background(w, h);
    for (k, m) in masks {
        for (x, y) in m.iter_set() {
            truth.set(x, y, *k as u8 + 1);
        }
    }
    let mut img = Image::filled(w, h, [0, 0, 0]);
    let noise = Normal::new(0.0, spec.color_noise.max(1e-9)).unwrap();
    for y in 0..h {
        for x in 0..w {
            let c = truth.get(x, y);
            let base = if c == 0 { [0, 0, 0] } else { spec.archetypes[c as usize - 1].color };
            if spec.color_noise > 0.0 {
                let px: Vec<u8> = base
                    .iter()
                    .map(|&v| (v as f64 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
                    .collect();
                img.put_pixel(x, y, &px);
            } else {
                img.put_pixel(x, y, &base);
            }
        }
    }
    (img, truth)
}

fn dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    let (w, h) = m.dims();
    let mut out = m.clone();
    for (x, y) in m.iter_set() {
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                out.set(xx, yy, true);
            }
        }
    }
    out
}

fn overlaps(a: &BinaryMask, b: &BinaryMask) -> bool {
    a.bits().iter().zip(b.bits()).any(|(&x, &y)| x && y)
}

/// Instance masks and optional change mask after injecting `kind`.
fn inject(
    spec: &SceneSpec,
    instances: &mut Vec<Instance>,
    kind: AnomalyKind,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(usize, BinaryMask)>, BinaryMask, AnomalyInfo)> {
    let (w, h) = (spec.width, spec.height);
    let mut masks: Vec<(usize, BinaryMask)> =
        instances.iter().map(|i| (i.archetype, instance_mask(spec, i))).collect();
    let mut changed = BinaryMask::empty(w, h);
    let info = match kind {
        AnomalyKind::MissingComponent => {
            let idx = rng.gen_range(0..instances.len());
            let gone = instances.remove(idx);
            changed = masks.remove(idx).1;
            AnomalyInfo {
                kind,
                class: gone.archetype as u8 + 1,
                cell: cell_of(spec, gone.center),
            }
        }
        AnomalyKind::ExtraComponent => {
            let archetype = rng.gen_range(0..spec.archetypes.len());
            let a = &spec.archetypes[archetype];
            let mut occupied = BinaryMask::empty(w, h);
            for (_, m) in &masks {
                occupied.union_with(m).expect("same canvas");
            }
            let occupied = dilate(&occupied, 3);
            let (cw, ch) = spec.cell_size();
            let mut cells: Vec<(usize, usize)> = (0..spec.grid.1)
                .flat_map(|r| (0..spec.grid.0).map(move |c| (c, r)))
                .filter(|&c| c != a.home_cell)
                .collect();
            if cells.is_empty() {
                return Err(SynthError::SpecInfeasible("no foreign cell for an extra component".into()));
            }
            let reach = a.size.ceil() as usize + 1;
            let mut placed = None;
            for _ in 0..PLACEMENT_TRIES {
                let cell = cells[rng.gen_range(0..cells.len())];
                // center inside the cell; the shape may cross into neighbours
                let (lo_x, hi_x) = ((cell.0 * cw).max(reach), ((cell.0 + 1) * cw).min(w.saturating_sub(reach)));
                let (lo_y, hi_y) = ((cell.1 * ch).max(reach), ((cell.1 + 1) * ch).min(h.saturating_sub(reach)));
                if lo_x >= hi_x || lo_y >= hi_y {
                    cells.retain(|&c| c != cell);
                    if cells.is_empty() {
                        break;
                    }
                    continue;
                }
                let inst = Instance {
                    archetype,
                    center: (rng.gen_range(lo_x..hi_x) as i64, rng.gen_range(lo_y..hi_y) as i64),
                    angle: if a.shape == Shape::Disk { 0.0 } else { rng.gen_range(0.0..360.0) },
                };
                let m = instance_mask(spec, &inst);
                if !overlaps(&m, &occupied) {
                    placed = Some((inst, m, cell));
                    break;
                }
            }
            let (inst, m, cell) =
                placed.ok_or_else(|| SynthError::SpecInfeasible("no room for an extra component".into()))?;
            instances.push(inst);
            changed = m.clone();
            masks.push((archetype, m));
            AnomalyInfo {
                kind,
                class: archetype as u8 + 1,
                cell,
            }
        }
        AnomalyKind::SwappedPositions => {
            let n = instances.len();
            let pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|&(i, j)| {
                    instances[i].archetype != instances[j].archetype
                        && cell_of(spec, instances[i].center) != cell_of(spec, instances[j].center)
                })
                .collect();
            if pairs.is_empty() {
                return Err(SynthError::SpecInfeasible("no pair of instances to swap".into()));
            }
            let (i, j) = pairs[rng.gen_range(0..pairs.len())];
            let (ci, cj) = (instances[i].center, instances[j].center);
            instances[i].center = cj;
            instances[j].center = ci;
            for k in [i, j] {
                changed.union_with(&masks[k].1).expect("same canvas");
                masks[k].1 = instance_mask(spec, &instances[k]);
                changed.union_with(&masks[k].1).expect("same canvas");
            }
            AnomalyInfo {
                kind,
                class: instances[i].archetype as u8 + 1,
                cell: cell_of(spec, cj),
            }
        }
        AnomalyKind::StructuralDefect => {
            let idx = rng.gen_range(0..instances.len());
            let inst = instances[idx];
            let r = spec.archetypes[inst.archetype].size;
            let half = 35f64.to_radians();
            let m = &mut masks[idx].1;
            // aim at a far-out pixel so thin shapes still lose a visible chunk
            let rim: Vec<(f64, f64)> = m
                .iter_set()
                .map(|(x, y)| (x as f64 + 0.5 - inst.center.0 as f64, y as f64 + 0.5 - inst.center.1 as f64))
                .filter(|&(dx, dy)| dx.hypot(dy) >= 0.7 * r)
                .collect();
            let dir = if rim.is_empty() {
                rng.gen_range(0.0..2.0 * PI)
            } else {
                let (dx, dy) = rim[rng.gen_range(0..rim.len())];
                dy.atan2(dx)
            };
            let bitten: Vec<(usize, usize)> = m
                .iter_set()
                .filter(|&(x, y)| {
                    let (dx, dy) = (x as f64 + 0.5 - inst.center.0 as f64, y as f64 + 0.5 - inst.center.1 as f64);
                    let mut da = dy.atan2(dx) - dir;
                    da = (da + PI).rem_euclid(2.0 * PI) - PI;
                    da.abs() <= half && dx.hypot(dy) >= 0.35 * r
                })
                .collect();
            for &(x, y) in &bitten {
                m.set(x, y, false);
                changed.set(x, y, true);
            }
            AnomalyInfo {
                kind,
                class: inst.archetype as u8 + 1,
                cell: cell_of(spec, inst.center),
            }
        }
    };
    Ok((masks, changed, info))
}

fn proposals(spec: &SceneSpec, masks: &[(usize, BinaryMask)], rng: &mut ChaCha8Rng) -> (MaskSet, BinaryMask) {
    let (w, h) = (spec.width, spec.height);
    let mut fg = BinaryMask::empty(w, h);
    for (_, m) in masks {
        fg.union_with(m).expect("same canvas");
    }
    let mut list: Vec<BinaryMask> = masks.iter().map(|(_, m)| m.clone()).collect();
    list.push(fg.clone());
    if rng.gen_bool(NOISE_BLOB_RATE) {
        let near_fg = dilate(&fg, 2);
        for _ in 0..PLACEMENT_TRIES {
            let (cx, cy, r) = (
                rng.gen_range(0..w) as f64,
                rng.gen_range(0..h) as f64,
                rng.gen_range(4.0..10.0),
            );
            let blob = BinaryMask::from_fn(w, h, |x, y| (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r);
            if !blob.is_empty() && !overlaps(&blob, &near_fg) {
                list.push(blob);
                break;
            }
        }
    }
    (MaskSet::new(w, h, list).expect("same canvas"), fg)
}

fn sample_seed(spec: &SceneSpec, index: usize) -> u64 {
    spec.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Renders one scene; `kind = None` is a normal scene.
pub fn generate_sample(spec: &SceneSpec, id: String, split: Split, kind: Option<AnomalyKind>, index: usize) -> Result<Sample> {
    let seed = sample_seed(spec, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = layout(spec, &mut rng);
    let (masks, anomaly_mask, anomaly) = match kind {
        None => (
            instances.iter().map(|i| (i.archetype, instance_mask(spec, i))).collect(),
            None,
            None,
        ),
        Some(k) => {
            let (m, changed, info) = inject(spec, &mut instances, k, &mut rng)?;
            (m, Some(changed), Some(info))
        }
    };
    let (image, truth) = render(spec, &masks, &mut rng);
    let proposals = (split == Split::Train).then(|| proposals(spec, &masks, &mut rng));
    Ok(Sample {
        id,
        split,
        anomaly,
        image,
        truth,
        anomaly_mask,
        proposals,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetCounts {
    pub n_train: usize,
    pub n_test_normal: usize,
    /// Per anomaly kind.
    pub n_test_anomalous: usize,
    pub kinds: Vec<AnomalyKind>,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self {
            n_train: 100,
            n_test_normal: 50,
            n_test_anomalous: 50,
            kinds: AnomalyKind::ALL.to_vec(),
        }
    }
}

/// All samples of a dataset, in manifest order (train, normal test, then each kind).
pub fn generate_samples(spec: &SceneSpec, counts: &DatasetCounts) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut plan: Vec<(String, Split, Option<AnomalyKind>)> = Vec::new();
    plan.extend((0..counts.n_train).map(|i| (format!("train_{i:04}"), Split::Train, None)));
    plan.extend((0..counts.n_test_normal).map(|i| (format!("test_good_{i:04}"), Split::Test, None)));
    for k in &counts.kinds {
        plan.extend((0..counts.n_test_anomalous).map(|i| (format!("test_{}_{i:04}", k.tag()), Split::Test, Some(*k))));
    }
    plan.into_par_iter()
        .enumerate()
        .map(|(i, (id, split, kind))| generate_sample(spec, id, split, kind, i))
        .collect()
}

/// Per-pixel class of the nearest archetype color (background is black).
pub fn oracle_segment(image: &Image, spec: &SceneSpec) -> LabelMap {
    let mut palette = vec![[0u8; 3]];
    palette.extend(spec.archetypes.iter().map(|a| a.color));
    let mut out = LabelMap::background(image.width(), image.height());
    for y in 0..image.height() {
        for x in 0..image.width() {
            let p = image.pixel(x, y);
            let rgb = if p.len() == 3 { [p[0], p[1], p[2]] } else { [p[0]; 3] };
            let (best, _) = palette
                .iter()
                .enumerate()
                .map(|(k, c)| (k, (0..3).map(|i| (c[i] as i32 - rgb[i] as i32).pow(2)).sum::<i32>()))
                .fold((0, i32::MAX), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            out.set(x, y, best as u8);
        }
    }
    out
}

/// Fixed random projection of pooled image colors to `channels` features.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    weights: Vec<[f32; 4]>,
}

impl SyntheticTeacher {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC_4E55);
        let weights = (0..channels)
            .map(|_| [0; 4].map(|_: i32| rng.gen_range(-1.5f32..1.5)))
            .collect();
        Self { weights }
    }

    pub fn features(&self, image: &Image) -> FeatureTensor {
        let c = self.weights.len();
        let s = TENSOR_SIDE;
        let mut data = vec![0.0f32; c * s * s];
        let (sx, sy) = (image.width() as f64 / s as f64, image.height() as f64 / s as f64);
        let mut px = [0.0f32; 3];
        for v in 0..s {
            for u in 0..s {
                image.sample_bilinear((u as f64 + 0.5) * sx - 0.5, (v as f64 + 0.5) * sy - 0.5, &mut px);
                if image.channels() == 1 {
                    px = [px[0]; 3];
                }
                for (k, w) in self.weights.iter().enumerate() {
                    let z = w[0] * px[0] / 255.0 + w[1] * px[1] / 255.0 + w[2] * px[2] / 255.0 + w[3];
                    data[k * s * s + v * s + u] = z.tanh();
                }
            }
        }
        FeatureTensor::new(vec![c, s, s], data).expect("shape matches")
    }
}

/// Fraction of each tensor cell covered by `mask`.
fn mask_coverage(mask: &BinaryMask) -> Vec<f32> {
    let s = TENSOR_SIDE;
    let (w, h) = mask.dims();
    let mut cov = vec![0.0f32; s * s];
    let mut area = vec![0.0f32; s * s];
    for y in 0..h {
        for x in 0..w {
            let i = (y * s / h) * s + x * s / w;
            area[i] += 1.0;
            if mask.get(x, y) {
                cov[i] += 1.0;
            }
        }
    }
    cov.iter().zip(&area).map(|(c, a)| if *a > 0.0 { c / a } else { 0.0 }).collect()
}

/// Teacher features of the rendered image plus noisy students; anomalous
/// samples get an extra shift wherever the change mask covers a cell.
pub fn synthetic_lgst(sample: &Sample, teacher: &SyntheticTeacher) -> LgstInputs {
    let t = teacher.features(&sample.image);
    let mut rng = ChaCha8Rng::seed_from_u64(sample.seed ^ 0x5717_DE47);
    let noise = Normal::new(0.0f32, STUDENT_NOISE).unwrap();
    let shift = sample.anomaly_mask.as_ref().map(mask_coverage);
    let plane = TENSOR_SIDE * TENSOR_SIDE;
    let mut student = |perturb: bool| {
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let bump = match (&shift, perturb) {
                    (Some(cov), true) => DEFECT_SHIFT * cov[i % plane],
                    _ => 0.0,
                };
                v + noise.sample(&mut rng) + bump
            })
            .collect();
        FeatureTensor::new(t.shape().to_vec(), data).expect("shape matches")
    };
    let local_head_local = student(true);
    let global_student = student(false);
    let local_head_global = student(true);
    LgstInputs {
        teacher: t,
        local_head_local,
        local_head_global,
        global_student,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub anomaly: Option<AnomalyInfo>,
    pub image: PathBuf,
    pub label: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub anomaly_mask: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub proposals: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grounding: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: SceneSpec,
    pub counts: DatasetCounts,
    /// Relative path of the tensor manifest, when tensors were written.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tensors: Option<PathBuf>,
    pub images: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(tensor_io::read_json(dir.as_ref().join(MANIFEST))?)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

/// Writes `images/`, `labels/`, `masks/` (change masks), `proposals/`,
/// `grounding/`, optionally `tensors/`, and `manifest.json`.
pub fn generate_dataset(
    spec: &SceneSpec,
    counts: &DatasetCounts,
    out: impl AsRef<Path>,
    tensor_channels: Option<usize>,
) -> Result<DatasetManifest> {
    let out = out.as_ref();
    let samples = generate_samples(spec, counts)?;
    for d in ["images", "labels", "masks", "proposals", "grounding"] {
        mkdir(&out.join(d))?;
    }
    let teacher = tensor_channels.map(|c| SyntheticTeacher::new(c, spec.seed));
    if teacher.is_some() {
        mkdir(&out.join("tensors"))?;
    }
    let entries = samples
        .par_iter()
        .map(|s| -> Result<(ManifestEntry, Option<LgstFiles>)> {
            let image = PathBuf::from(format!("images/{}.ppm", s.id));
            let label = PathBuf::from(format!("labels/{}.pgm", s.id));
            tensor_io::write_image(&s.image, out.join(&image))?;
            tensor_io::write_label_map(&s.truth, out.join(&label))?;
            let anomaly_mask = match &s.anomaly_mask {
                Some(m) => {
                    let p = PathBuf::from(format!("masks/{}.pgm", s.id));
                    write_bytes(&out.join(&p), &encode_mask(m.width(), m.height(), m.bits()))?;
                    Some(p)
                }
                None => None,
            };
            let (proposals, grounding) = match &s.proposals {
                Some((set, g)) => {
                    let p = PathBuf::from(format!("proposals/{}", s.id));
                    set.write_dir(out.join(&p))?;
                    let gp = PathBuf::from(format!("grounding/{}.pgm", s.id));
                    write_bytes(&out.join(&gp), &encode_mask(g.width(), g.height(), g.bits()))?;
                    (Some(p), Some(gp))
                }
                None => (None, None),
            };
            let files = match &teacher {
                Some(t) => {
                    let inp = synthetic_lgst(s, t);
                    let files = LgstFiles::conventional(&s.id);
                    let dir = out.join("tensors");
                    tensor_io::write_tensor(&inp.teacher, dir.join(&files.teacher))?;
                    tensor_io::write_tensor(&inp.local_head_local, dir.join(&files.local_head_local))?;
                    tensor_io::write_tensor(&inp.local_head_global, dir.join(&files.local_head_global))?;
                    tensor_io::write_tensor(&inp.global_student, dir.join(&files.global_student))?;
                    Some(files)
                }
                None => None,
            };
            Ok((
                ManifestEntry {
                    id: s.id.clone(),
                    split: s.split,
                    anomaly: s.anomaly,
                    image,
                    label,
                    anomaly_mask,
                    proposals,
                    grounding,
                },
                files,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tensor_manifest = TensorManifest::default();
    let mut images = Vec::with_capacity(entries.len());
    for (e, files) in entries {
        if let Some(f) = files {
            tensor_manifest.images.insert(e.id.clone(), f);
        }
        images.push(e);
    }
    let tensors = teacher.as_ref().map(|_| PathBuf::from("tensors").join(MANIFEST));
    if let Some(t) = &tensors {
        tensor_io::write_json(out.join(t), &tensor_manifest)?;
    }
    let manifest = DatasetManifest {
        version: 1,
        spec: spec.clone(),
        counts: counts.clone(),
        tensors,
        images,
    };
    tensor_io::write_json(out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Probability that an anomalous score beats a normal one, ties counting one
/// half, from average ranks.
pub fn auroc(scores_normal: &[f64], scores_anomalous: &[f64]) -> Result<f64> {
    let (n, m) = (scores_normal.len(), scores_anomalous.len());
    if n == 0 || m == 0 {
        return Err(SynthError::EmptyInput);
    }
    let mut all: Vec<(f64, bool)> = scores_normal
        .iter()
        .map(|&s| (s, false))
        .chain(scores_anomalous.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (m * (m + 1)) as f64 / 2.0;
    Ok(u / (n * m) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub runs: usize,
    pub batch_size: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            runs: 500,
            batch_size: 8,
            warmup: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Mean wall time of a batch-1 run.
    pub latency_ms: f64,
    /// `batch_size * runs / total_time_s`.
    pub throughput_fps: f64,
    pub runs: usize,
    pub batch_size: usize,
    pub warmup: usize,
    /// Wall time of the timed batched runs.
    pub total_time_s: f64,
}

impl BenchReport {
    pub fn from_timings(cfg: &BenchConfig, latency_total_s: f64, total_time_s: f64) -> Self {
        Self {
            latency_ms: latency_total_s * 1e3 / cfg.runs as f64,
            throughput_fps: (cfg.batch_size * cfg.runs) as f64 / total_time_s,
            runs: cfg.runs,
            batch_size: cfg.batch_size,
            warmup: cfg.warmup,
            total_time_s,
        }
    }
}

/// Times `process` on `n_inputs` inputs, cycling through them. `process`
/// receives the input indices of one batch.
pub fn bench(cfg: &BenchConfig, n_inputs: usize, mut process: impl FnMut(&[usize])) -> BenchReport {
    let runs = cfg.runs.max(1);
    let batch = cfg.batch_size.max(1);
    let cfg = BenchConfig {
        runs,
        batch_size: batch,
        warmup: cfg.warmup,
    };
    let n = n_inputs.max(1);
    let mut next = 0usize;
    let mut take = |k: usize| -> Vec<usize> {
        (0..k)
            .map(|_| {
                next += 1;
                (next - 1) % n
            })
            .collect()
    };
    for _ in 0..cfg.warmup {
        process(&take(1));
    }
    let mut latency = 0.0;
    for _ in 0..runs {
        let idx = take(1);
        let t = Instant::now();
        process(&idx);
        latency += t.elapsed().as_secs_f64();
    }
    let batches: Vec<Vec<usize>> = (0..runs).map(|_| take(batch)).collect();
    let t = Instant::now();
    for b in &batches {
        process(b);
    }
    let total = t.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    BenchReport::from_timings(&cfg, latency, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histogram_scoring::{class_histogram, patch_histogram};
    use proptest::prelude::*;

    fn counts(n: usize, kinds: &[AnomalyKind]) -> DatasetCounts {
        DatasetCounts {
            n_train: n,
            n_test_normal: n,
            n_test_anomalous: n,
            kinds: kinds.to_vec(),
        }
    }

    #[test]
    fn default_scene_is_feasible() {
        SceneSpec::default().validate().unwrap();
        SceneSpec::two_archetypes().validate().unwrap();
        let mut bad = SceneSpec::default();
        bad.archetypes[0].size = 100.0;
        assert!(matches!(bad.validate(), Err(SynthError::SpecInfeasible(_))));
        let mut same = SceneSpec::default();
        same.archetypes[1].color = same.archetypes[0].color;
        assert!(same.validate().is_err());
    }

    #[test]
    fn deterministic_by_seed() {
        let spec = SceneSpec::default();
        let a = generate_samples(&spec, &counts(3, &AnomalyKind::ALL)).unwrap();
        let b = generate_samples(&spec, &counts(3, &AnomalyKind::ALL)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.truth, y.truth);
        }
        let other = SceneSpec {
            seed: 1,
            ..spec.clone()
        };
        let c = generate_samples(&other, &counts(3, &[])).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    fn instance_count(map: &LabelMap, n_cls: u8) -> usize {
        (1..=n_cls)
            .map(|k| crate::mask_ops::connected_components(map, k).map(|s| s.len()).unwrap_or(0))
            .sum()
    }

    #[test]
    fn missing_and_extra_change_count() {
        let spec = SceneSpec::default();
        let s = generate_samples(&spec, &counts(4, &[AnomalyKind::MissingComponent, AnomalyKind::ExtraComponent])).unwrap();
        for x in &s {
            let n = instance_count(&x.truth, 4);
            match x.anomaly.map(|a| a.kind) {
                None => assert_eq!(n, 4),
                Some(AnomalyKind::MissingComponent) => assert_eq!(n, 3),
                Some(AnomalyKind::ExtraComponent) => {
                    assert_eq!(n, 5);
                    let info = x.anomaly.unwrap();
                    assert_ne!(info.cell, spec.archetypes[info.class as usize - 1].home_cell);
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn swaps_keep_class_histogram() {
        let spec = SceneSpec::default();
        let s = generate_samples(&spec, &counts(6, &[AnomalyKind::SwappedPositions])).unwrap();
        let normals: Vec<&Sample> = s.iter().filter(|x| x.anomaly.is_none()).collect();
        for x in s.iter().filter(|x| x.anomaly.is_some()) {
            // same index seeds differ, so compare against the scene before the swap
            let mut rng = ChaCha8Rng::seed_from_u64(x.seed);
            let inst = layout(&spec, &mut rng);
            let masks: Vec<(usize, BinaryMask)> = inst.iter().map(|i| (i.archetype, instance_mask(&spec, i))).collect();
            let (_, before) = render(&spec, &masks, &mut rng);
            assert_eq!(class_histogram(&x.truth, 4), class_histogram(&before, 4));
            assert_ne!(patch_histogram(&x.truth, 128, 4).unwrap(), patch_histogram(&before, 128, 4).unwrap());
        }
        assert!(!normals.is_empty());
    }

    #[test]
    fn defect_bites_one_component() {
        let spec = SceneSpec::default();
        let s = generate_samples(&spec, &counts(3, &[AnomalyKind::StructuralDefect])).unwrap();
        for x in s.iter().filter(|x| x.anomaly.is_some()) {
            let m = x.anomaly_mask.as_ref().unwrap();
            assert!(m.area() > 20);
            assert!(m.iter_set().all(|(x2, y2)| x.truth.get(x2, y2) == 0));
        }
    }

    #[test]
    fn oracle_segmentation() {
        let spec = SceneSpec::default();
        for x in generate_samples(&spec, &counts(10, &AnomalyKind::ALL)).unwrap() {
            assert_eq!(oracle_segment(&x.image, &spec), x.truth);
        }
        let noisy = SceneSpec {
            color_noise: 5.0,
            ..spec.clone()
        };
        for x in generate_samples(&noisy, &counts(2, &[])).unwrap() {
            let seg = oracle_segment(&x.image, &noisy);
            let agree = seg.pixels().iter().zip(x.truth.pixels()).filter(|(a, b)| a == b).count();
            assert!(agree as f64 / seg.pixels().len() as f64 >= 0.999);
        }
        let blank = Image::filled(8, 8, [0, 0, 0]);
        assert!(oracle_segment(&blank, &spec).pixels().iter().all(|&p| p == 0));
    }

    #[test]
    fn proposals_for_training_images() {
        let spec = SceneSpec::default();
        let s = generate_samples(&spec, &counts(10, &[])).unwrap();
        for x in &s {
            match x.split {
                Split::Train => {
                    let (set, g) = x.proposals.as_ref().unwrap();
                    assert!(set.len() == 5 || set.len() == 6);
                    assert_eq!(g.area(), x.truth.pixels().iter().filter(|&&p| p != 0).count());
                }
                Split::Test => assert!(x.proposals.is_none()),
            }
        }
    }

    #[test]
    fn dataset_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let c = counts(2, &[AnomalyKind::StructuralDefect]);
        let manifest = generate_dataset(&spec, &c, dir.path(), Some(4)).unwrap();
        assert_eq!(manifest.images.len(), 6);
        let back = DatasetManifest::read(dir.path()).unwrap();
        assert_eq!(back, manifest);
        let tm = TensorManifest::read(dir.path().join(back.tensors.unwrap())).unwrap();
        let inp = tm.load(&dir.path().join("tensors"), "train_0000").unwrap();
        assert_eq!(inp.teacher.shape(), &[4, TENSOR_SIDE, TENSOR_SIDE]);
        let e = &back.images[0];
        let set = MaskSet::read_dir(dir.path().join(e.proposals.as_ref().unwrap())).unwrap();
        assert!(set.len() >= 5);
        let img = tensor_io::read_image(dir.path().join(&e.image)).unwrap();
        assert_eq!(oracle_segment(&img, &spec), tensor_io::read_label_map(dir.path().join(&e.label)).unwrap());

        let again = tempfile::tempdir().unwrap();
        generate_dataset(&spec, &c, again.path(), Some(4)).unwrap();
        for e in &manifest.images {
            let a = std::fs::read(dir.path().join(&e.image)).unwrap();
            let b = std::fs::read(again.path().join(&e.image)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lgst_tensors_flag_defects() {
        let spec = SceneSpec::default();
        let t = SyntheticTeacher::new(8, spec.seed);
        let s = generate_samples(&spec, &counts(1, &[AnomalyKind::StructuralDefect])).unwrap();
        let score = |x: &Sample| {
            let m = crate::lgst_scoring::lgst_maps(&synthetic_lgst(x, &t)).unwrap();
            m.combined.max()
        };
        let normal = score(&s[1]);
        let bad = score(&s[2]);
        assert!(bad > 5.0 * normal, "{bad} vs {normal}");
    }

    fn pairwise(n: &[f64], a: &[f64]) -> f64 {
        let mut wins = 0.0;
        for &x in a {
            for &y in n {
                wins += if x > y {
                    1.0
                } else if x == y {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / (n.len() * a.len()) as f64
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
        assert!(matches!(auroc(&[], &[1.0]), Err(SynthError::EmptyInput)));
    }

    #[test]
    fn bench_report_formula() {
        let cfg = BenchConfig {
            runs: 1,
            batch_size: 1,
            warmup: 0,
        };
        let r = bench(&cfg, 3, |_| {});
        assert_eq!(r.runs, 1);
        assert!(r.latency_ms >= 0.0 && r.throughput_fps > 0.0);
        let cfg = BenchConfig {
            runs: 20,
            batch_size: 4,
            warmup: 2,
        };
        let mut seen = Vec::new();
        let r = bench(&cfg, 5, |b| seen.extend_from_slice(b));
        assert_eq!(r.throughput_fps, (r.batch_size * r.runs) as f64 / r.total_time_s);
        assert_eq!(seen.len(), 2 + 20 + 80);
        assert!(seen.iter().all(|&i| i < 5));
        let json = serde_json::to_value(r).unwrap();
        for key in ["latency_ms", "throughput_fps", "runs", "batch_size", "warmup", "total_time_s"] {
            assert!(json.get(key).is_some());
        }
    }

    proptest! {
        #[test]
        fn auroc_matches_pairs(
            n in prop::collection::vec(0u8..20, 1..30),
            a in prop::collection::vec(0u8..20, 1..30),
        ) {
            let n: Vec<f64> = n.into_iter().map(f64::from).collect();
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let got = auroc(&n, &a).unwrap();
            prop_assert_eq!(got, pairwise(&n, &a));
            prop_assert_eq!(got + auroc(&a, &n).unwrap(), 1.0);
        }
    }
}
