//! Flat-kernel mean-shift and HDBSCAN, plus the size filters applied to
//! their outputs.
//!
//! Cluster ids are 1-based; [`NOISE`] (0) marks unassigned points, which lines
//! up with background in label maps.

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

pub const NOISE: u32 = 0;

/// Default for [`HdbscanConfig::noise_lambda_factor`].
pub const NOISE_LAMBDA_FACTOR: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("no input points")]
    EmptyInput,
    #[error("points have inconsistent dimensions")]
    RaggedInput,
    #[error("non-finite coordinate in point {0}")]
    NonFinite(usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("every point is noise")]
    AllNoise,
}

pub type Result<T> = std::result::Result<T, ClusterError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Per point: cluster id in `1..=sizes.len()`, or [`NOISE`].
    pub labels: Vec<u32>,
    /// `sizes[k - 1]` is the member count of cluster `k`.
    pub sizes: Vec<usize>,
    /// Mode (mean-shift) or member mean (HDBSCAN) per cluster.
    pub exemplars: Vec<Vec<f64>>,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn members(&self, id: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    /// Same partition up to renaming of ids.
    pub fn same_partition(&self, other: &ClusterAssignment) -> bool {
        if self.labels.len() != other.labels.len() {
            return false;
        }
        let mut fwd = std::collections::HashMap::new();
        let mut back = std::collections::HashMap::new();
        self.labels.iter().zip(&other.labels).all(|(&a, &b)| {
            if (a == NOISE) != (b == NOISE) {
                return false;
            }
            *fwd.entry(a).or_insert(b) == b && *back.entry(b).or_insert(a) == a
        })
    }
}

fn validate(points: &[Vec<f64>]) -> Result<usize> {
    let first = points.first().ok_or(ClusterError::EmptyInput)?;
    let d = first.len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != d {
            return Err(ClusterError::RaggedInput);
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(ClusterError::NonFinite(i));
        }
    }
    Ok(d)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanShiftConfig {
    pub bandwidth: f64,
    pub max_iter: usize,
    pub convergence_tol: f64,
    pub mode_merge_radius: f64,
}

impl MeanShiftConfig {
    /// `max_iter = 300`, `convergence_tol = 1e-4 * bandwidth`, `mode_merge_radius = bandwidth`.
    pub fn with_bandwidth(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            max_iter: 300,
            convergence_tol: 1e-4 * bandwidth,
            mode_merge_radius: bandwidth,
        }
    }
}

fn seek_mode(points: &[Vec<f64>], seed: &[f64], cfg: &MeanShiftConfig) -> Vec<f64> {
    let radius2 = cfg.bandwidth * cfg.bandwidth;
    let mut x = seed.to_vec();
    let mut mean = vec![0.0; x.len()];
    for _ in 0..cfg.max_iter {
        mean.iter_mut().for_each(|m| *m = 0.0);
        let mut count = 0usize;
        for p in points.iter().filter(|p| sq_dist(p, &x) <= radius2) {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
            count += 1;
        }
        if count == 0 {
            break;
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let shift = sq_dist(&mean, &x).sqrt();
        std::mem::swap(&mut x, &mut mean);
        if shift < cfg.convergence_tol {
            break;
        }
    }
    x
}

/// Flat-kernel mean-shift seeded from every point.
///
/// Converged modes are merged in seed order: a mode within `mode_merge_radius`
/// of an already kept mode is dropped. Points take the id of the nearest kept
/// mode (lowest id on ties).
pub fn mean_shift(points: &[Vec<f64>], cfg: &MeanShiftConfig) -> Result<ClusterAssignment> {
    validate(points)?;
    if !(cfg.bandwidth > 0.0) || cfg.max_iter == 0 {
        return Err(ClusterError::InvalidConfig("bandwidth must be > 0 and max_iter >= 1"));
    }
    let converged: Vec<Vec<f64>> = points.par_iter().map(|p| seek_mode(points, p, cfg)).collect();
    let merge2 = cfg.mode_merge_radius * cfg.mode_merge_radius;
    let mut modes: Vec<Vec<f64>> = Vec::new();
    for m in converged {
        if !modes.iter().any(|kept| sq_dist(kept, &m) <= merge2) {
            modes.push(m);
        }
    }
    let labels: Vec<u32> = points
        .iter()
        .map(|p| {
            let (best, _) = modes
                .iter()
                .enumerate()
                .map(|(k, m)| (k, sq_dist(m, p)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            best as u32 + 1
        })
        .collect();
    let mut sizes = vec![0; modes.len()];
    for &l in &labels {
        sizes[l as usize - 1] += 1;
    }
    Ok(drop_empty_clusters(ClusterAssignment {
        labels,
        sizes,
        exemplars: modes,
    }))
}

fn drop_empty_clusters(a: ClusterAssignment) -> ClusterAssignment {
    if a.sizes.iter().all(|&s| s > 0) {
        return a;
    }
    let mut remap = vec![NOISE; a.sizes.len() + 1];
    let mut sizes = Vec::new();
    let mut exemplars = Vec::new();
    for (k, (&s, e)) in a.sizes.iter().zip(a.exemplars).enumerate() {
        if s > 0 {
            sizes.push(s);
            exemplars.push(e);
            remap[k + 1] = sizes.len() as u32;
        }
    }
    ClusterAssignment {
        labels: a.labels.iter().map(|&l| remap[l as usize]).collect(),
        sizes,
        exemplars,
    }
}

/// Relabels clusters with fewer than `alpha` members as noise; survivors are
/// renumbered `1..` by size, largest first (ties by previous id).
pub fn alpha_filter(assignment: &ClusterAssignment, alpha: usize) -> ClusterAssignment {
    let mut survivors: Vec<usize> = (0..assignment.sizes.len())
        .filter(|&k| assignment.sizes[k] >= alpha)
        .collect();
    survivors.sort_by(|&a, &b| assignment.sizes[b].cmp(&assignment.sizes[a]).then(a.cmp(&b)));
    let mut remap = vec![NOISE; assignment.sizes.len() + 1];
    for (new, &old) in survivors.iter().enumerate() {
        remap[old + 1] = new as u32 + 1;
    }
    ClusterAssignment {
        labels: assignment.labels.iter().map(|&l| remap[l as usize]).collect(),
        sizes: survivors.iter().map(|&k| assignment.sizes[k]).collect(),
        exemplars: survivors.iter().map(|&k| assignment.exemplars[k].clone()).collect(),
    }
}

/// Members of the largest cluster (smallest id on ties).
pub fn largest_cluster_filter(assignment: &ClusterAssignment) -> Result<Vec<usize>> {
    let (best, _) = assignment
        .sizes
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0)
        .fold((None, 0), |acc, (k, &s)| if s > acc.1 { (Some(k), s) } else { acc });
    let best = best.ok_or(ClusterError::AllNoise)?;
    Ok(assignment.members(best as u32 + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HdbscanConfig {
    pub min_cluster_size: usize,
    pub min_samples: usize,
    /// Lets the root of the condensed tree be selected, so a single dense group
    /// is reported as one cluster instead of noise.
    #[serde(default = "default_true")]
    pub allow_single_cluster: bool,
    /// A member of a selected cluster whose exit lambda is below the cluster's
    /// median exit lambda divided by this factor is reported as noise.
    /// Infinity keeps every member.
    #[serde(default = "default_noise_factor")]
    pub noise_lambda_factor: f64,
}

fn default_true() -> bool {
    true
}

fn default_noise_factor() -> f64 {
    NOISE_LAMBDA_FACTOR
}

impl HdbscanConfig {
    /// `min_cluster_size = max(5, ceil(0.1 n))`, `min_samples = min_cluster_size`.
    pub fn for_sample_count(n: usize) -> Self {
        let mcs = 5.max((n as f64 * 0.1).ceil() as usize);
        Self {
            min_cluster_size: mcs,
            min_samples: mcs,
            allow_single_cluster: true,
            noise_lambda_factor: NOISE_LAMBDA_FACTOR,
        }
    }
}

struct Condensed {
    parent: Option<usize>,
    birth: f64,
    stability: f64,
    children: Vec<usize>,
    /// Points leaving this cluster directly, with their lambda.
    points: Vec<(usize, f64)>,
}

impl Condensed {
    fn new(parent: Option<usize>, birth: f64) -> Self {
        Self {
            parent,
            birth,
            stability: 0.0,
            children: Vec::new(),
            points: Vec::new(),
        }
    }
}

struct Linkage {
    /// For node `n + k`: (left, right, distance, size).
    merges: Vec<(usize, usize, f64, usize)>,
    n: usize,
}

impl Linkage {
    fn size(&self, node: usize) -> usize {
        if node < self.n {
            1
        } else {
            self.merges[node - self.n].3
        }
    }

    fn leaves(&self, node: usize, out: &mut Vec<usize>) {
        let mut stack = vec![node];
        while let Some(v) = stack.pop() {
            if v < self.n {
                out.push(v);
            } else {
                let (l, r, _, _) = self.merges[v - self.n];
                stack.push(r);
                stack.push(l);
            }
        }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Hierarchical density clustering with excess-of-mass selection.
///
/// Core distance is the distance to the `min_samples`-th nearest point,
/// counting the point itself. Clusters come from the condensed single-linkage
/// tree of mutual-reachability distances.
pub fn hdbscan(points: &[Vec<f64>], cfg: &HdbscanConfig) -> Result<ClusterAssignment> {
    validate(points)?;
    if cfg.min_cluster_size < 2 || cfg.min_samples < 2 {
        return Err(ClusterError::InvalidConfig("min_cluster_size and min_samples must be >= 2"));
    }
    if !(cfg.noise_lambda_factor >= 1.0) {
        return Err(ClusterError::InvalidConfig("noise_lambda_factor must be >= 1"));
    }
    let n = points.len();
    if n < cfg.min_cluster_size {
        return Err(ClusterError::TooFewPoints {
            needed: cfg.min_cluster_size,
            got: n,
        });
    }

    let dist: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| sq_dist(&points[i], &points[j]).sqrt()).collect())
        .collect();
    let k = cfg.min_samples.min(n) - 1;
    let core: Vec<f64> = dist
        .iter()
        .map(|row| {
            let mut r = row.clone();
            r.select_nth_unstable_by(k, f64::total_cmp);
            r[k]
        })
        .collect();
    let mreach = |i: usize, j: usize| dist[i][j].max(core[i]).max(core[j]);

    // Prim on the dense mutual-reachability graph.
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for j in 0..n {
            if !in_tree[j] {
                let d = mreach(current, j);
                if d < best[j] {
                    best[j] = d;
                    from[j] = current;
                }
            }
        }
        let next = (0..n)
            .filter(|&j| !in_tree[j])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
            .expect("graph is complete");
        edges.push((from[next], next, best[next]));
        in_tree[next] = true;
        current = next;
    }
    let max_weight = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    if max_weight == 0.0 {
        // every point coincides
        return Ok(ClusterAssignment {
            labels: vec![1; n],
            sizes: vec![n],
            exemplars: vec![points[0].clone()],
        });
    }
    edges.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0, a.1).cmp(&(b.0, b.1))));

    let mut uf: Vec<usize> = (0..2 * n).collect();
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut linkage = Linkage {
        merges: Vec::with_capacity(n - 1),
        n,
    };
    for &(a, b, w) in &edges {
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        let (na, nb) = (node_of[ra], node_of[rb]);
        let size = linkage.size(na) + linkage.size(nb);
        let id = n + linkage.merges.len();
        linkage.merges.push((na, nb, w, size));
        uf[rb] = ra;
        node_of[ra] = id;
    }

    // Duplicates merge at distance 0; treating that as the closest real
    // distance keeps them from dominating cluster stability.
    let min_positive = edges.iter().map(|e| e.2).filter(|&w| w > 0.0).fold(max_weight, f64::min);
    let lambda_of = |w: f64| 1.0 / w.max(min_positive);
    let mcs = cfg.min_cluster_size;

    let mut clusters = vec![Condensed::new(None, 0.0)];
    let mut stack = vec![(2 * n - 2, 0usize)];
    let mut scratch = Vec::new();
    while let Some((node, cid)) = stack.pop() {
        if node < n {
            let lambda = clusters[cid].birth.max(lambda_of(0.0));
            let birth = clusters[cid].birth;
            clusters[cid].points.push((node, lambda));
            clusters[cid].stability += lambda - birth;
            continue;
        }
        let (left, right, w, _) = linkage.merges[node - n];
        let lambda = lambda_of(w);
        let (ls, rs) = (linkage.size(left), linkage.size(right));
        let birth = clusters[cid].birth;
        let mut shed = |sub: usize, clusters: &mut Vec<Condensed>| {
            scratch.clear();
            linkage.leaves(sub, &mut scratch);
            for &p in &scratch {
                clusters[cid].points.push((p, lambda));
                clusters[cid].stability += lambda - birth;
            }
        };
        match (ls >= mcs, rs >= mcs) {
            (true, true) => {
                for (child, size) in [(left, ls), (right, rs)] {
                    let id = clusters.len();
                    clusters.push(Condensed::new(Some(cid), lambda));
                    clusters[cid].children.push(id);
                    clusters[cid].stability += size as f64 * (lambda - birth);
                    stack.push((child, id));
                }
            }
            (true, false) => {
                shed(right, &mut clusters);
                stack.push((left, cid));
            }
            (false, true) => {
                shed(left, &mut clusters);
                stack.push((right, cid));
            }
            (false, false) => {
                shed(left, &mut clusters);
                shed(right, &mut clusters);
            }
        }
    }

    // Excess of mass, children before parents (children always have larger ids).
    let nc = clusters.len();
    let mut selected = vec![false; nc];
    let mut subtree_best = vec![0.0; nc];
    for c in (0..nc).rev() {
        let child_sum: f64 = clusters[c].children.iter().map(|&ch| subtree_best[ch]).sum();
        let eligible = c != 0 || cfg.allow_single_cluster;
        if eligible && (clusters[c].children.is_empty() || clusters[c].stability >= child_sum) {
            selected[c] = true;
            subtree_best[c] = clusters[c].stability;
            let mut desc = clusters[c].children.clone();
            while let Some(d) = desc.pop() {
                selected[d] = false;
                desc.extend_from_slice(&clusters[d].children);
            }
        } else {
            subtree_best[c] = child_sum;
        }
    }

    // Point -> the selected cluster at or above the cluster it fell out of.
    let mut owner = vec![None; n];
    let mut fall_lambda = vec![0.0; n];
    for (c, cl) in clusters.iter().enumerate() {
        let mut up = Some(c);
        let mut sel = None;
        while let Some(u) = up {
            if selected[u] {
                sel = Some(u);
            }
            up = clusters[u].parent;
        }
        for &(p, lambda) in &cl.points {
            owner[p] = sel;
            fall_lambda[p] = lambda;
        }
    }
    // Members that left their cluster far below its typical density are noise.
    for c in (0..nc).filter(|&c| selected[c]) {
        let members: Vec<usize> = (0..n).filter(|&p| owner[p] == Some(c)).collect();
        let mut lambdas: Vec<f64> = members.iter().map(|&p| fall_lambda[p]).collect();
        let mid = lambdas.len() / 2;
        lambdas.select_nth_unstable_by(mid, f64::total_cmp);
        let cutoff = lambdas[mid] / cfg.noise_lambda_factor;
        for &p in &members {
            if fall_lambda[p] < cutoff {
                owner[p] = None;
            }
        }
    }

    // Number selected clusters by their smallest member index.
    let mut order: Vec<usize> = Vec::new();
    for o in owner.iter().flatten() {
        if !order.contains(o) {
            order.push(*o);
        }
    }
    let labels: Vec<u32> = owner
        .iter()
        .map(|o| o.map_or(NOISE, |c| order.iter().position(|&x| x == c).unwrap() as u32 + 1))
        .collect();
    let d = points[0].len();
    let mut sizes = vec![0usize; order.len()];
    let mut exemplars = vec![vec![0.0; d]; order.len()];
    for (p, &l) in labels.iter().enumerate().filter(|(_, &l)| l != NOISE) {
        sizes[l as usize - 1] += 1;
        for (e, v) in exemplars[l as usize - 1].iter_mut().zip(&points[p]) {
            *e += v;
        }
    }
    for (e, &s) in exemplars.iter_mut().zip(&sizes) {
        e.iter_mut().for_each(|v| *v /= s as f64);
    }
    Ok(ClusterAssignment {
        labels,
        sizes,
        exemplars,
    })
}

/// Orders clusters by decreasing size, then id.
pub fn by_size_desc(a: &ClusterAssignment) -> Vec<u32> {
    let mut ids: Vec<u32> = (1..=a.sizes.len() as u32).collect();
    ids.sort_by(|&x, &y| match a.sizes[y as usize - 1].cmp(&a.sizes[x as usize - 1]) {
        Ordering::Equal => x.cmp(&y),
        o => o,
    });
    ids
}
