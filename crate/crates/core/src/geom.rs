//! Point-cloud geometry kernels: sampling, neighbour search, grouping, and
//! inverse-distance interpolation.
//!
//! Everything here is brute force and exact. Ties are always resolved
//! towards the smaller index so results are reproducible across runs.

use std::rc::Rc;

use pcflow_autograd::{Segments, Tensor};

use crate::error::{Error, Result};

/// A non-empty set of finite 3D positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Vec<[f64; 3]>,
}

impl PointSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point set must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.cols() != 3 {
            return Err(Error::shape("PointSet::from_tensor", "n x 3", format!("{}x{}", t.rows(), t.cols())));
        }
        Self::new(t.to_points())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn get(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    pub fn select(&self, index: &[usize]) -> PointSet {
        PointSet {
            points: index.iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// Largest distance from the bounding-box centre, doubled.
    pub fn scaled(&self, factor: f64) -> PointSet {
        PointSet {
            points: self.points.iter().map(|p| p.map(|v| v * factor)).collect(),
        }
    }

    pub fn diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
        2.0 * self.points.iter().map(|p| distance(p, &c)).fold(0.0, f64::max)
    }
}

#[inline]
pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Per-query neighbour index groups into a reference set.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub groups: Vec<Vec<usize>>,
    pub k_max: usize,
    pub radius: Option<f64>,
}

/// Flattened pair list of a [`NeighborSet`]: pair `p` joins query
/// `query[p]` with reference `neighbor[p]`; `segments` groups pairs by query.
#[derive(Clone, Debug)]
pub struct PairIndex {
    pub query: Rc<[usize]>,
    pub neighbor: Rc<[usize]>,
    pub segments: Segments,
}

impl NeighborSet {
    pub fn query_count(&self) -> usize {
        self.groups.len()
    }

    pub fn pair_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn pairs(&self) -> PairIndex {
        let n = self.pair_count();
        let mut query = Vec::with_capacity(n);
        let mut neighbor = Vec::with_capacity(n);
        for (q, g) in self.groups.iter().enumerate() {
            query.extend(std::iter::repeat_n(q, g.len()));
            neighbor.extend_from_slice(g);
        }
        PairIndex {
            query: query.into(),
            neighbor: neighbor.into(),
            segments: Segments::from_lengths(self.groups.iter().map(Vec::len)),
        }
    }

    /// Keeps the first `k` members of every group. For [`knn`] output this
    /// equals a search with the smaller `k`.
    pub fn truncate(&self, k: usize) -> NeighborSet {
        NeighborSet {
            groups: self.groups.iter().map(|g| g[..g.len().min(k)].to_vec()).collect(),
            k_max: self.k_max.min(k),
            radius: self.radius,
        }
    }

    /// Drops every query and member not flagged valid; dropped queries keep
    /// an empty group.
    pub fn restrict(&self, query_valid: &[bool], reference_valid: &[bool]) -> NeighborSet {
        let groups = self
            .groups
            .iter()
            .zip(query_valid)
            .map(|(g, &ok)| {
                if ok {
                    g.iter().copied().filter(|&j| reference_valid[j]).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        NeighborSet {
            groups,
            k_max: self.k_max,
            radius: self.radius,
        }
    }
}

/// Farthest point sampling starting from `seed_index`.
///
/// Each further pick maximises the distance to the already selected set;
/// equal distances prefer the smaller index.
pub fn fps(points: &PointSet, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("fps: cannot select {m} of {n} points")));
    }
    if seed_index >= n {
        return Err(Error::invalid(format!("fps: seed index {seed_index} out of range for {n} points")));
    }
    let pts = points.points();
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut selected = vec![false; n];
    let mut out = Vec::with_capacity(m);
    let mut last = seed_index;
    selected[last] = true;
    out.push(last);
    while out.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = squared_distance(&pts[i], &pts[last]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        last = best;
        selected[last] = true;
        out.push(last);
    }
    Ok(out)
}

/// The `k` nearest references of every query, ordered by (distance, index).
pub fn knn(query: &PointSet, reference: &PointSet, k: usize) -> Result<NeighborSet> {
    if k > reference.len() {
        return Err(Error::invalid(format!(
            "knn: k = {k} exceeds reference size {}",
            reference.len()
        )));
    }
    let refs = reference.points();
    // Sorted (distance, index) of the best k so far. References are visited
    // in index order, so a tie never displaces an earlier member.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    let groups = query
        .points()
        .iter()
        .map(|q| {
            best.clear();
            if k == 0 {
                return Vec::new();
            }
            for (j, r) in refs.iter().enumerate() {
                let d = squared_distance(q, r);
                if best.len() == k {
                    if d >= best[k - 1].0 {
                        continue;
                    }
                    best.pop();
                }
                let at = best.partition_point(|e| e.0 <= d);
                best.insert(at, (d, j));
            }
            best.iter().map(|&(_, j)| j).collect()
        })
        .collect();
    Ok(NeighborSet {
        groups,
        k_max: k,
        radius: None,
    })
}

/// [`knn`] truncated to members strictly closer than `r`. Groups may be empty.
/// An infinite radius disables the truncation.
pub fn knn_radius(query: &PointSet, reference: &PointSet, k: usize, r: f64) -> Result<NeighborSet> {
    if r.is_nan() || r <= 0.0 {
        return Err(Error::invalid(format!("knn_radius: radius must be positive, got {r}")));
    }
    let mut set = knn(query, reference, k)?;
    if r.is_finite() {
        for (q, g) in query.points().iter().zip(set.groups.iter_mut()) {
            g.retain(|&j| distance(q, &reference.get(j)) < r);
        }
        set.radius = Some(r);
    }
    Ok(set)
}

/// One gathered neighbour: offset from its query point and its feature row.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedNeighbor {
    pub relative: [f64; 3],
    pub feature: Vec<f64>,
}

/// Gathers `(reference[n] - query[i], features[n])` for every neighbour `n` of
/// every query `i`; the outer vector is indexed by query.
pub fn group_relative(
    reference: &PointSet,
    reference_features: &Tensor,
    neighbors: &NeighborSet,
    query: &PointSet,
) -> Result<Vec<Vec<GroupedNeighbor>>> {
    if reference_features.rows() != reference.len() {
        return Err(Error::shape(
            "group_relative features",
            format!("{} rows", reference.len()),
            format!("{} rows", reference_features.rows()),
        ));
    }
    if neighbors.query_count() != query.len() {
        return Err(Error::shape(
            "group_relative neighbours",
            format!("{} groups", query.len()),
            format!("{} groups", neighbors.query_count()),
        ));
    }
    neighbors
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let q = query.get(i);
            g.iter()
                .map(|&n| {
                    if n >= reference.len() {
                        return Err(Error::invalid(format!("neighbour index {n} out of range")));
                    }
                    let p = reference.get(n);
                    Ok(GroupedNeighbor {
                        relative: [p[0] - q[0], p[1] - q[1], p[2] - q[2]],
                        feature: reference_features.row(n).to_vec(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Normalised inverse-distance weights from each fine point to its `k`
/// nearest coarse points: `w_j = 1 / (d_j + eps)`, divided by their sum.
#[derive(Clone, Debug)]
pub struct InterpolationWeights {
    pub index: Rc<[usize]>,
    pub weights: Rc<[f64]>,
    pub k: usize,
}

pub fn inverse_distance_weights(coarse: &PointSet, fine: &PointSet, k: usize, eps: f64) -> Result<InterpolationWeights> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("inverse_distance_weights: eps must be positive"));
    }
    if k == 0 {
        return Err(Error::invalid("inverse_distance_weights: k must be at least 1"));
    }
    let nn = knn(fine, coarse, k)?;
    let mut index = Vec::with_capacity(fine.len() * k);
    let mut weights = Vec::with_capacity(fine.len() * k);
    for (f, g) in fine.points().iter().zip(&nn.groups) {
        let raw: Vec<f64> = g.iter().map(|&j| 1.0 / (distance(f, &coarse.get(j)) + eps)).collect();
        let total: f64 = raw.iter().sum();
        index.extend_from_slice(g);
        weights.extend(raw.iter().map(|w| w / total));
    }
    Ok(InterpolationWeights {
        index: index.into(),
        weights: weights.into(),
        k,
    })
}

/// Interpolates per-point values from a coarse set onto a fine set.
pub fn inverse_distance_upsample(
    coarse: &PointSet,
    coarse_values: &Tensor,
    fine: &PointSet,
    k: usize,
    eps: f64,
) -> Result<Tensor> {
    if coarse_values.rows() != coarse.len() {
        return Err(Error::shape(
            "inverse_distance_upsample values",
            format!("{} rows", coarse.len()),
            format!("{} rows", coarse_values.rows()),
        ));
    }
    let w = inverse_distance_weights(coarse, fine, k, eps)?;
    let mut out = Tensor::zeros(fine.len(), coarse_values.cols());
    for i in 0..fine.len() {
        let row = out.row_mut(i);
        for t in 0..k {
            let (j, wt) = (w.index[i * k + t], w.weights[i * k + t]);
            for (o, v) in row.iter_mut().zip(coarse_values.row(j)) {
                *o += wt * v;
            }
        }
    }
    Ok(out)
}
