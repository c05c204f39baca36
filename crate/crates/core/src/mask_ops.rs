//! Binary-mask algebra, the two proposal-refinement filters, connected
//! components and rotation/scale normalized component crops.

use std::collections::VecDeque;

use thiserror::Error;

use crate::tensor_io::{Image, LabelMap};

/// Side length of a normalized component crop.
pub const CROP_SIZE: usize = 64;

/// Coverage threshold shared by both refinement filters.
pub const OVERLAP_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimMismatch((usize, usize), (usize, usize)),
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask set is empty")]
    EmptySet,
    #[error("class {0} does not occur in the label map")]
    ClassAbsent(u8),
}

pub type Result<T> = std::result::Result<T, MaskError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        assert_eq!(bits.len(), width * height, "mask length does not match dimensions");
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(MaskError::DimMismatch(self.dims(), other.dims()));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        self.check_dims(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    /// Pixel centroid `(x, y)` in continuous coordinates (pixel `x` spans `[x, x+1)`).
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            sx += (i % self.width) as f64 + 0.5;
            sy += (i / self.width) as f64 + 0.5;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i % self.width, i / self.width))
    }

    /// Fills enclosed holes: background pixels not 4-connected to the border.
    pub fn fill_holes(&self) -> BinaryMask {
        let (w, h) = self.dims();
        let mut outside = vec![false; w * h];
        let mut queue = VecDeque::new();
        for y in 0..h {
            for x in 0..w {
                if (x == 0 || y == 0 || x == w - 1 || y == h - 1) && !self.get(x, y) {
                    outside[y * w + x] = true;
                    queue.push_back((x, y));
                }
            }
        }
        while let Some((x, y)) = queue.pop_front() {
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !outside[j] && !self.bits[j] {
                    outside[j] = true;
                    queue.push_back((nx as usize, ny as usize));
                }
            }
        }
        BinaryMask::new(w, h, outside.into_iter().map(|o| !o).collect())
    }
}

/// Ordered stack of same-sized masks. Masks may overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    width: usize,
    height: usize,
    masks: Vec<BinaryMask>,
}

impl MaskSet {
    pub fn new(width: usize, height: usize, masks: Vec<BinaryMask>) -> Result<Self> {
        if let Some(m) = masks.iter().find(|m| m.dims() != (width, height)) {
            return Err(MaskError::DimMismatch((width, height), m.dims()));
        }
        Ok(Self {
            width,
            height,
            masks,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn into_masks(self) -> Vec<BinaryMask> {
        self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    fn without_empty(&self) -> Vec<&BinaryMask> {
        self.masks.iter().filter(|m| !m.is_empty()).collect()
    }

    pub fn read_dir(dir: impl AsRef<std::path::Path>) -> crate::tensor_io::Result<Self> {
        let (w, h, raw) = crate::tensor_io::read_mask_dir(dir)?;
        let masks = raw.into_iter().map(|bits| BinaryMask::new(w, h, bits)).collect();
        Ok(Self {
            width: w,
            height: h,
            masks,
        })
    }

    pub fn write_dir(&self, dir: impl AsRef<std::path::Path>) -> crate::tensor_io::Result<()> {
        let raw: Vec<Vec<bool>> = self.masks.iter().map(|m| m.bits.clone()).collect();
        crate::tensor_io::write_mask_dir(dir, self.width, self.height, &raw)
    }
}

/// `|m1 ∧ m2| / min(|m1|, |m2|)`, or 0 when the masks do not intersect.
pub fn intersect_ratio(m1: &BinaryMask, m2: &BinaryMask) -> Result<f64> {
    let inter = m1.intersection_area(m2)?;
    if inter == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / m1.area().min(m2.area()) as f64)
}

/// Keeps masks whose area lies more than 90% inside `grounding`, in input order.
/// Empty masks are dropped first.
pub fn filter_by_grounding(grounding: &BinaryMask, masks: &MaskSet) -> Result<MaskSet> {
    if grounding.dims() != (masks.width, masks.height) {
        return Err(MaskError::DimMismatch(grounding.dims(), (masks.width, masks.height)));
    }
    let mut kept = Vec::new();
    for mask in masks.without_empty() {
        let ratio = grounding.intersection_area(mask)? as f64 / mask.area() as f64;
        if ratio > OVERLAP_THRESHOLD {
            kept.push(mask.clone());
        }
    }
    MaskSet::new(masks.width, masks.height, kept)
}

/// Drops masks that are (nearly) a combination of smaller masks.
///
/// Masks are visited smallest first (ties keep input order). A mask is kept when
/// its `intersect_ratio` with the union of kept masks is below 0.9, otherwise it
/// is deferred. Deferred masks then get a second chance in deferral order: each is
/// re-admitted when less than 90% of it is covered by the union, which grows as
/// masks are re-admitted.
pub fn filter_by_combine(masks: &MaskSet) -> Result<MaskSet> {
    let mut sorted = masks.without_empty();
    if sorted.is_empty() {
        return Err(MaskError::EmptySet);
    }
    sorted.sort_by_key(|m| m.area());

    let mut union = BinaryMask::empty(masks.width, masks.height);
    let mut kept = Vec::new();
    let mut deferred = Vec::new();
    for (i, &mask) in sorted.iter().enumerate() {
        if intersect_ratio(&union, mask)? < OVERLAP_THRESHOLD || i == 0 {
            union.union_with(mask)?;
            kept.push(mask.clone());
        } else {
            deferred.push(mask);
        }
    }
    for mask in deferred {
        let coverage = union.intersection_area(mask)? as f64 / mask.area() as f64;
        if coverage < OVERLAP_THRESHOLD {
            union.union_with(mask)?;
            kept.push(mask.clone());
        }
    }
    MaskSet::new(masks.width, masks.height, kept)
}

const NEIGHBORS_8: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

fn components_where(width: usize, height: usize, inside: impl Fn(usize) -> bool) -> Vec<BinaryMask> {
    let mut seen = vec![false; width * height];
    let mut comps: Vec<(usize, BinaryMask)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..width * height {
        if seen[start] || !inside(start) {
            continue;
        }
        let mut mask = BinaryMask::empty(width, height);
        let mut area = 0;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            mask.bits[i] = true;
            area += 1;
            let (x, y) = ((i % width) as i64, (i / width) as i64);
            for (dx, dy) in NEIGHBORS_8 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if !seen[j] && inside(j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comps.push((area, mask));
    }
    // stable: equal areas stay in raster order of their first pixel
    comps.sort_by_key(|c| std::cmp::Reverse(c.0));
    comps.into_iter().map(|(_, m)| m).collect()
}

/// 8-connected components of the pixels labeled `class`, largest first.
pub fn connected_components(map: &LabelMap, class: u8) -> Result<MaskSet> {
    let px = map.pixels();
    let comps = components_where(map.width(), map.height(), |i| px[i] == class);
    if comps.is_empty() {
        return Err(MaskError::ClassAbsent(class));
    }
    MaskSet::new(map.width(), map.height(), comps)
}

/// 8-connected components of a binary mask, largest first.
pub fn mask_components(mask: &BinaryMask) -> Vec<BinaryMask> {
    components_where(mask.width, mask.height, |i| mask.bits[i])
}

pub type Point = (f64, f64);

#[inline]
pub fn rotate(p: Point, degrees: f64) -> Point {
    let (s, c) = degrees.to_radians().sin_cos();
    (p.0 * c - p.1 * s, p.0 * s + p.1 * c)
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull (Andrew's monotone chain), counter-clockwise, no collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let half_hull = |iter: &mut dyn Iterator<Item = &Point>| {
        let mut chain: Vec<Point> = Vec::new();
        for &p in iter {
            while chain.len() >= 2 && cross(chain[chain.len() - 2], chain[chain.len() - 1], p) <= 0.0 {
                chain.pop();
            }
            chain.push(p);
        }
        chain.pop();
        chain
    };
    let mut hull = half_hull(&mut pts.iter());
    hull.extend(half_hull(&mut pts.iter().rev()));
    hull
}

/// Corner points of the mask's pixel squares that can lie on the hull
/// (row extremes only).
pub fn mask_outline_points(mask: &BinaryMask) -> Vec<Point> {
    let mut pts = Vec::new();
    for y in 0..mask.height {
        let row = &mask.bits[y * mask.width..(y + 1) * mask.width];
        let (Some(lo), Some(hi)) = (row.iter().position(|&b| b), row.iter().rposition(|&b| b)) else {
            continue;
        };
        let (y0, y1) = (y as f64, y as f64 + 1.0);
        let (x0, x1) = (lo as f64, hi as f64 + 1.0);
        pts.extend_from_slice(&[(x0, y0), (x0, y1), (x1, y0), (x1, y1)]);
    }
    pts
}

/// Oriented rectangle; `width` runs along `angle_deg`, `height` across it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinAreaRect {
    pub center: Point,
    pub width: f64,
    pub height: f64,
    /// In `[0, 90)`.
    pub angle_deg: f64,
}

impl MinAreaRect {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }
}

/// Minimum-area enclosing rectangle of a convex polygon (CCW) by rotating calipers.
pub fn min_area_rect_of_hull(hull: &[Point]) -> Option<MinAreaRect> {
    let n = hull.len();
    if n < 3 {
        return None;
    }
    let dot = |a: Point, b: Point| a.0 * b.0 + a.1 * b.1;
    let edge_dir = |i: usize| {
        let (a, b) = (hull[i], hull[(i + 1) % n]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = dx.hypot(dy);
        (dx / len, dy / len)
    };
    // Calipers: along the edge (max / min), and across it (max of the inward normal).
    let advance = |mut j: usize, dir: Point, sign: f64| {
        for _ in 0..n {
            let next = (j + 1) % n;
            if sign * dot(hull[next], dir) > sign * dot(hull[j], dir) + 1e-12 {
                j = next;
            } else {
                break;
            }
        }
        j
    };
    let extreme = |dir: Point, sign: f64| {
        (0..n)
            .max_by(|&a, &b| (sign * dot(hull[a], dir)).total_cmp(&(sign * dot(hull[b], dir))))
            .unwrap()
    };
    let u0 = edge_dir(0);
    let mut far_u = extreme(u0, 1.0);
    let mut near_u = extreme(u0, -1.0);
    let mut far_n = extreme((-u0.1, u0.0), 1.0);

    let mut best: Option<MinAreaRect> = None;
    for i in 0..n {
        let u = edge_dir(i);
        let normal = (-u.1, u.0);
        far_u = advance(far_u, u, 1.0);
        near_u = advance(near_u, u, -1.0);
        far_n = advance(far_n, normal, 1.0);
        let base = hull[i];
        let max_u = dot(hull[far_u], u);
        let min_u = dot(hull[near_u], u);
        let min_n = dot(base, normal);
        let max_n = dot(hull[far_n], normal);
        let (w, h) = (max_u - min_u, max_n - min_n);
        if best.is_none_or(|b| w * h < b.area() - 1e-9) {
            let cu = 0.5 * (max_u + min_u);
            let cn = 0.5 * (max_n + min_n);
            let center = (cu * u.0 + cn * normal.0, cu * u.1 + cn * normal.1);
            let mut angle = u.1.atan2(u.0).to_degrees().rem_euclid(180.0);
            let (mut w, mut h) = (w, h);
            if angle >= 90.0 {
                angle -= 90.0;
                std::mem::swap(&mut w, &mut h);
            }
            best = Some(MinAreaRect {
                center,
                width: w,
                height: h,
                angle_deg: angle,
            });
        }
    }
    best
}

pub fn min_area_rect(mask: &BinaryMask) -> Result<MinAreaRect> {
    if mask.is_empty() {
        return Err(MaskError::EmptyMask);
    }
    let hull = convex_hull(&mask_outline_points(mask));
    Ok(min_area_rect_of_hull(&hull).expect("pixel outlines always span an area"))
}

/// A `CROP_SIZE`² patch of one component, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCrop {
    pub channels: usize,
    /// Interleaved, `CROP_SIZE * CROP_SIZE * channels`; zero outside the component.
    pub pixels: Vec<f32>,
    pub mask: Vec<bool>,
    pub source_mask: usize,
    pub angle_deg: f64,
}

impl ComponentCrop {
    pub fn to_image(&self) -> Image {
        let data = self.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        Image::new(CROP_SIZE, CROP_SIZE, self.channels, data).expect("crop geometry is fixed")
    }
}

/// Crops a component, rotated by `angle_deg` about its minimum-area rectangle
/// center and scaled so the rectangle diagonal spans `CROP_SIZE` pixels.
/// Image values are resampled bilinearly, the mask by nearest neighbor.
pub fn normalize_crop(image: &Image, mask: &BinaryMask, angle_deg: f64) -> Result<ComponentCrop> {
    if (image.width(), image.height()) != mask.dims() {
        return Err(MaskError::DimMismatch((image.width(), image.height()), mask.dims()));
    }
    let rect = min_area_rect(mask)?;
    normalize_crop_with_rect(image, mask, &rect, angle_deg)
}

pub fn normalize_crop_with_rect(
    image: &Image,
    mask: &BinaryMask,
    rect: &MinAreaRect,
    angle_deg: f64,
) -> Result<ComponentCrop> {
    let channels = image.channels();
    let scale = CROP_SIZE as f64 / rect.diagonal();
    let half = CROP_SIZE as f64 / 2.0;
    let mut pixels = vec![0.0f32; CROP_SIZE * CROP_SIZE * channels];
    let mut crop_mask = vec![false; CROP_SIZE * CROP_SIZE];
    let mut sample = [0.0f32; 3];
    for v in 0..CROP_SIZE {
        for u in 0..CROP_SIZE {
            let q = ((u as f64 + 0.5 - half) / scale, (v as f64 + 0.5 - half) / scale);
            let d = rotate(q, -angle_deg);
            let (sx, sy) = (rect.center.0 + d.0, rect.center.1 + d.1);
            if sx < 0.0 || sy < 0.0 || sx >= mask.width as f64 || sy >= mask.height as f64 {
                continue;
            }
            if !mask.get(sx as usize, sy as usize) {
                continue;
            }
            let k = v * CROP_SIZE + u;
            crop_mask[k] = true;
            image.sample_bilinear(sx - 0.5, sy - 0.5, &mut sample);
            for c in 0..channels {
                pixels[k * channels + c] = sample[c] / 255.0;
            }
        }
    }
    Ok(ComponentCrop {
        channels,
        pixels,
        mask: crop_mask,
        source_mask: 0,
        angle_deg,
    })
}
