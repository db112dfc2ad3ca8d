//! Partitioning vision tokens into disjoint regions.
//!
//! The semantic partition is Ward agglomerative clustering on L2-normalized
//! patch features. The merge cost between clusters `A` and `B` is the Ward
//! increase in within-cluster sum of squares,
//! `|A||B| / (|A| + |B|) * ||c_A - c_B||^2`. On unit vectors the cost of
//! merging two singletons is exactly their cosine distance, so the stopping
//! threshold `tau` reads in cosine-distance units.
//!
//! Every partition is stored in canonical form: regions are numbered by the
//! lowest vision-token index they contain.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PartitionMethod {
    Agglomerative,
    Tokenwise,
    RandomBlocks,
    Voronoi,
    Kmeans,
}

impl PartitionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionMethod::Agglomerative => "agglomerative",
            PartitionMethod::Tokenwise => "tokenwise",
            PartitionMethod::RandomBlocks => "random_blocks",
            PartitionMethod::Voronoi => "voronoi",
            PartitionMethod::Kmeans => "kmeans",
        }
    }
}

impl core::str::FromStr for PartitionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "agglomerative" => PartitionMethod::Agglomerative,
            "tokenwise" => PartitionMethod::Tokenwise,
            "random_blocks" => PartitionMethod::RandomBlocks,
            "voronoi" => PartitionMethod::Voronoi,
            "kmeans" => PartitionMethod::Kmeans,
            other => return Err(Error::validation("method", format!("unknown partition method {other:?}"))),
        })
    }
}

/// A disjoint cover of the `M` vision tokens by `K` nonempty regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    method: PartitionMethod,
    grid_dims: (usize, usize),
    labels: Vec<usize>,
    regions: Vec<Vec<usize>>,
}

impl RegionPartition {
    /// Builds a partition from per-token region labels. Labels may be any
    /// integers; they are renumbered canonically.
    pub fn from_labels(method: PartitionMethod, grid_dims: (usize, usize), raw: &[usize]) -> Result<Self> {
        let m = raw.len();
        if m == 0 {
            return Err(Error::validation("labels", "no vision tokens"));
        }
        if grid_dims.0 * grid_dims.1 != m {
            return Err(Error::validation(
                "grid_dims",
                format!("{}x{} does not cover {m} tokens", grid_dims.0, grid_dims.1),
            ));
        }
        let mut remap: Vec<(usize, usize)> = Vec::new();
        let mut labels = Vec::with_capacity(m);
        let mut regions: Vec<Vec<usize>> = Vec::new();
        for (i, &r) in raw.iter().enumerate() {
            let k = match remap.iter().find(|(old, _)| *old == r) {
                Some(&(_, k)) => k,
                None => {
                    let k = regions.len();
                    remap.push((r, k));
                    regions.push(Vec::new());
                    k
                }
            };
            labels.push(k);
            regions[k].push(i);
        }
        Ok(RegionPartition {
            method,
            grid_dims,
            labels,
            regions,
        })
    }

    /// Builds a partition from a `K x M` membership matrix, checking that it is
    /// a disjoint cover with no empty region.
    pub fn from_membership(
        method: PartitionMethod,
        grid_dims: (usize, usize),
        membership: &[Vec<bool>],
    ) -> Result<Self> {
        let k = membership.len();
        if k == 0 {
            return Err(Error::validation("membership", "no regions"));
        }
        let m = membership[0].len();
        let mut labels = vec![usize::MAX; m];
        for (r, row) in membership.iter().enumerate() {
            Error::check_dim("membership row", m, row.len())?;
            if !row.iter().any(|&b| b) {
                return Err(Error::validation("membership", format!("region {r} is empty")));
            }
            for (i, &b) in row.iter().enumerate() {
                if b {
                    if labels[i] != usize::MAX {
                        return Err(Error::validation("membership", format!("token {i} belongs to two regions")));
                    }
                    labels[i] = r;
                }
            }
        }
        if let Some(i) = labels.iter().position(|&l| l == usize::MAX) {
            return Err(Error::validation("membership", format!("token {i} belongs to no region")));
        }
        Self::from_labels(method, grid_dims, &labels)
    }

    /// Each vision token is its own region.
    pub fn tokenwise(grid_dims: (usize, usize)) -> Result<Self> {
        let m = grid_dims.0 * grid_dims.1;
        let labels: Vec<usize> = (0..m).collect();
        Self::from_labels(PartitionMethod::Tokenwise, grid_dims, &labels)
    }

    pub fn method(&self) -> PartitionMethod {
        self.method
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        self.grid_dims
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.labels.len()
    }

    /// Region index of every vision token.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn region_of(&self, token: usize) -> usize {
        self.labels[token]
    }

    /// Sorted token indices of region `k`.
    pub fn region(&self, k: usize) -> &[usize] {
        &self.regions[k]
    }

    pub fn regions(&self) -> &[Vec<usize>] {
        &self.regions
    }

    pub fn region_size(&self, k: usize) -> usize {
        self.regions[k].len()
    }

    /// Dense `K x M` membership matrix.
    pub fn membership(&self) -> Vec<Vec<bool>> {
        let m = self.num_tokens();
        self.regions
            .iter()
            .map(|r| {
                let mut row = vec![false; m];
                r.iter().for_each(|&i| row[i] = true);
                row
            })
            .collect()
    }

    /// Vision-token mask covering the given regions.
    pub fn token_mask(&self, regions: impl IntoIterator<Item = usize>) -> Vec<bool> {
        let mut mask = vec![false; self.num_tokens()];
        for k in regions {
            for &i in &self.regions[k] {
                mask[i] = true;
            }
        }
        mask
    }
}

fn normalized_rows(features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if features.is_empty() {
        return Err(Error::validation("feature_grid", "no rows"));
    }
    let d = features[0].len();
    if d == 0 {
        return Err(Error::validation("feature_grid", "zero feature dimension"));
    }
    let mut out = Vec::with_capacity(features.len());
    for (r, row) in features.iter().enumerate() {
        Error::check_dim("feature row", d, row.len())?;
        if let Some(j) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "feature_grid",
                index: r * d + j,
            });
        }
        let n = crate::stats::norm(row);
        if !(n > 0.0) {
            return Err(Error::ZeroNormFeature { row: r });
        }
        out.push(row.iter().map(|x| x / n).collect());
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Stopping rule for agglomerative clustering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgglomerativeConfig {
    /// Merging stops once the cheapest available merge costs more than this.
    pub tau: f64,
    /// Never merge below this many regions.
    pub k_min: Option<usize>,
    /// Keep merging past `tau` until at most this many regions remain.
    pub k_max: Option<usize>,
}

impl AgglomerativeConfig {
    pub fn with_tau(tau: f64) -> Self {
        AgglomerativeConfig {
            tau,
            k_min: None,
            k_max: None,
        }
    }
}

impl Default for AgglomerativeConfig {
    fn default() -> Self {
        Self::with_tau(0.5)
    }
}

/// One merge in the dendrogram: slots `a < b` were merged into slot `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub cost: f64,
}

/// Ward agglomerative clustering on cosine geometry.
///
/// Clusters live in slots named by their lowest token index. Each step merges
/// the cheapest pair; equal costs go to the lexicographically lowest slot
/// pair.
pub fn cluster_agglomerative(
    features: &[Vec<f64>],
    grid_dims: (usize, usize),
    config: AgglomerativeConfig,
) -> Result<RegionPartition> {
    Ok(agglomerate(features, grid_dims, config)?.0)
}

/// [`cluster_agglomerative`] that also returns the merges performed.
pub fn agglomerate(
    features: &[Vec<f64>],
    grid_dims: (usize, usize),
    config: AgglomerativeConfig,
) -> Result<(RegionPartition, Vec<Merge>)> {
    if !(config.tau > 0.0 && config.tau < 2.0) {
        return Err(Error::validation("tau", format!("{} outside (0, 2)", config.tau)));
    }
    let x = normalized_rows(features)?;
    let n = x.len();
    if let (Some(lo), Some(hi)) = (config.k_min, config.k_max) {
        if lo > hi {
            return Err(Error::validation("k_min", "exceeds k_max"));
        }
    }

    let mut cost = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = 0.5 * sq_dist(&x[i], &x[j]);
            cost[i * n + j] = c;
            cost[j * n + i] = c;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut parent: Vec<usize> = (0..n).collect();
    let mut count = n;
    let mut merges = Vec::new();

    while count > 1 {
        if config.k_min.is_some_and(|lo| count <= lo) {
            break;
        }
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for i in (0..n).filter(|&i| active[i]) {
            for j in ((i + 1)..n).filter(|&j| active[j]) {
                let c = cost[i * n + j];
                if c < best.0 {
                    best = (c, i, j);
                }
            }
        }
        let (c, a, b) = best;
        let forced = config.k_max.is_some_and(|hi| count > hi);
        if c > config.tau && !forced {
            break;
        }

        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in (0..n).filter(|&k| active[k] && k != a && k != b) {
            let nk = size[k] as f64;
            let updated = ((na + nk) * cost[a * n + k] + (nb + nk) * cost[b * n + k] - nk * c) / (na + nb + nk);
            cost[a * n + k] = updated;
            cost[k * n + a] = updated;
        }
        size[a] += size[b];
        active[b] = false;
        parent[b] = a;
        count -= 1;
        merges.push(Merge { a, b, cost: c });
    }

    let labels: Vec<usize> = (0..n)
        .map(|mut i| {
            while parent[i] != i {
                i = parent[i];
            }
            i
        })
        .collect();
    let part = RegionPartition::from_labels(PartitionMethod::Agglomerative, grid_dims, &labels)?;
    Ok((part, merges))
}

/// `K` axis-aligned rectangles produced by `K - 1` random guillotine cuts.
pub fn partition_random_blocks(grid_dims: (usize, usize), k: usize, seed: u64) -> Result<RegionPartition> {
    let (rows, cols) = grid_dims;
    let m = rows * cols;
    if k == 0 {
        return Err(Error::validation("K", "must be at least 1"));
    }
    if k > m {
        return Err(Error::TooManyRegions {
            requested: k,
            available: m,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (row0, col0, row1, col1), half-open
    let mut rects = vec![(0usize, 0usize, rows, cols)];
    for _ in 1..k {
        let splittable: Vec<usize> = (0..rects.len())
            .filter(|&r| {
                let (r0, c0, r1, c1) = rects[r];
                (r1 - r0) * (c1 - c0) >= 2
            })
            .collect();
        let pick = splittable[rng.random_range(0..splittable.len())];
        let (r0, c0, r1, c1) = rects[pick];
        let (h, w) = (r1 - r0, c1 - c0);
        let horizontal = match (h >= 2, w >= 2) {
            (true, true) => rng.random_bool(0.5),
            (true, false) => true,
            _ => false,
        };
        if horizontal {
            let cut = r0 + rng.random_range(1..h);
            rects[pick] = (r0, c0, cut, c1);
            rects.push((cut, c0, r1, c1));
        } else {
            let cut = c0 + rng.random_range(1..w);
            rects[pick] = (r0, c0, r1, cut);
            rects.push((r0, cut, r1, c1));
        }
    }
    let mut labels = vec![0usize; m];
    for (idx, &(r0, c0, r1, c1)) in rects.iter().enumerate() {
        for r in r0..r1 {
            for c in c0..c1 {
                labels[r * cols + c] = idx;
            }
        }
    }
    RegionPartition::from_labels(PartitionMethod::RandomBlocks, grid_dims, &labels)
}

/// Site lattice `(site_rows, site_cols)` for `k` Voronoi cells: the
/// factorization of `k` that fits inside the grid and whose aspect ratio is
/// closest to the grid's.
pub fn voronoi_lattice(grid_dims: (usize, usize), k: usize) -> Result<(usize, usize)> {
    let (rows, cols) = grid_dims;
    if k == 0 {
        return Err(Error::validation("K", "must be at least 1"));
    }
    if k > rows * cols {
        return Err(Error::TooManyRegions {
            requested: k,
            available: rows * cols,
        });
    }
    let target = libm::log(rows as f64 / cols as f64);
    let mut best: Option<((usize, usize), f64)> = None;
    for sr in 1..=k {
        if k % sr != 0 {
            continue;
        }
        let sc = k / sr;
        if sr > rows || sc > cols {
            continue;
        }
        let gap = libm::fabs(libm::log(sr as f64 / sc as f64) - target);
        if best.is_none_or(|(_, g)| gap < g) {
            best = Some(((sr, sc), gap));
        }
    }
    best.map(|(l, _)| l).ok_or_else(|| {
        Error::validation(
            "K",
            format!("{k} has no site lattice fitting a {rows}x{cols} grid"),
        )
    })
}

/// Site coordinates `(row, col)` of the Voronoi lattice, in site-index order.
pub fn voronoi_sites(grid_dims: (usize, usize), k: usize) -> Result<Vec<(f64, f64)>> {
    let (rows, cols) = grid_dims;
    let (sr, sc) = voronoi_lattice(grid_dims, k)?;
    let mut sites = Vec::with_capacity(k);
    for a in 0..sr {
        for b in 0..sc {
            sites.push((
                (a as f64 + 0.5) * rows as f64 / sr as f64 - 0.5,
                (b as f64 + 0.5) * cols as f64 / sc as f64 - 0.5,
            ));
        }
    }
    Ok(sites)
}

/// Each token goes to its nearest lattice site; ties go to the lowest site.
pub fn partition_voronoi(grid_dims: (usize, usize), k: usize) -> Result<RegionPartition> {
    let (rows, cols) = grid_dims;
    let sites = voronoi_sites(grid_dims, k)?;
    let mut labels = Vec::with_capacity(rows * cols);
    let mut used = vec![false; k];
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r as f64, c as f64);
            let mut best = (f64::INFINITY, 0usize);
            for (s, &(sy, sx)) in sites.iter().enumerate() {
                let d = (y - sy) * (y - sy) + (x - sx) * (x - sx);
                if d < best.0 {
                    best = (d, s);
                }
            }
            used[best.1] = true;
            labels.push(best.1);
        }
    }
    if let Some(s) = used.iter().position(|&u| !u) {
        return Err(Error::validation("K", format!("Voronoi site {s} captured no token")));
    }
    RegionPartition::from_labels(PartitionMethod::Voronoi, grid_dims, &labels)
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub partition: RegionPartition,
    /// Centroids in the original cluster order (not the canonical region order).
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances of normalized features to their centroid.
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Lloyd's algorithm on L2-normalized features from a seeded farthest-point
/// start. A cluster that empties is re-seeded with the point lying farthest
/// from its own centroid.
pub fn cluster_kmeans(
    features: &[Vec<f64>],
    grid_dims: (usize, usize),
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KMeansResult> {
    let x = normalized_rows(features)?;
    let n = x.len();
    if k == 0 {
        return Err(Error::validation("K", "must be at least 1"));
    }
    if k > n {
        return Err(Error::TooManyRegions {
            requested: k,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = x.iter().map(|p| sq_dist(p, &x[chosen[0]])).collect();
    while chosen.len() < k {
        let mut far = (f64::NEG_INFINITY, 0usize);
        for (i, &d) in nearest.iter().enumerate() {
            if d > far.0 && !chosen.contains(&i) {
                far = (d, i);
            }
        }
        chosen.push(far.1);
        for (i, p) in x.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &x[far.1]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| x[i].clone()).collect();

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        x.iter()
            .map(|p| {
                let mut best = (f64::INFINITY, 0usize);
                for (c, cen) in centroids.iter().enumerate() {
                    let d = sq_dist(p, cen);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            })
            .collect()
    };

    let mut labels = assign(&centroids);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        repair_empty_clusters(&x, &mut labels, &mut centroids);
        update_centroids(&x, &labels, &mut centroids);
        let next = assign(&centroids);
        if next == labels {
            converged = true;
            break;
        }
        labels = next;
    }
    repair_empty_clusters(&x, &mut labels, &mut centroids);
    update_centroids(&x, &labels, &mut centroids);

    let inertia = x.iter().zip(&labels).map(|(p, &c)| sq_dist(p, &centroids[c])).sum();
    let partition = RegionPartition::from_labels(PartitionMethod::Kmeans, grid_dims, &labels)?;
    Ok(KMeansResult {
        partition,
        centroids,
        inertia,
        iterations,
        converged,
    })
}

fn update_centroids(x: &[Vec<f64>], labels: &[usize], centroids: &mut [Vec<f64>]) {
    let d = x[0].len();
    let mut sums = vec![vec![0.0; d]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &c) in x.iter().zip(labels) {
        counts[c] += 1;
        sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    for (c, cen) in centroids.iter_mut().enumerate() {
        if counts[c] > 0 {
            for (dst, s) in cen.iter_mut().zip(&sums[c]) {
                *dst = s / counts[c] as f64;
            }
        }
    }
}

fn repair_empty_clusters(x: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    loop {
        let mut counts = vec![0usize; centroids.len()];
        labels.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = (f64::NEG_INFINITY, usize::MAX);
        for (i, (p, &c)) in x.iter().zip(labels.iter()).enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[c]);
            if d > far.0 {
                far = (d, i);
            }
        }
        log::debug!("re-seeding empty cluster {empty} with token {}", far.1);
        labels[far.1] = empty;
        centroids[empty] = x[far.1].clone();
    }
}
