//! Point-cloud kernels: farthest-point sampling, exact nearest neighbors,
//! rigid transforms and weighted Kabsch alignment.

use std::cmp::Ordering;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3, SVD};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Relative singular-value floor below which alignment support is rank < 2.
pub const DEGENERACY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::TooFew {
                what: "point cloud",
                need: 1,
                got: 0,
            });
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::LengthMismatch {
                what: "flat coordinates",
                a: flat.len(),
                b: 3,
            });
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Row-major `N×3` copy.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validating constructor: `RᵀR = I` and `det R = 1` within 1e-6.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho.is_nan() || ortho > 1e-6 || det.is_nan() || (det - 1.0).abs() > 1e-6 || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::BadTransform(format!(
                "orthogonality error {ortho:e}, det {det}"
            )));
        }
        Ok(())
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    /// Rotation by `degrees` about coordinate axis 0, 1 or 2.
    pub fn about_axis(axis: usize, degrees: f64) -> Self {
        let mut a = Vector3::zeros();
        a[axis] = 1.0;
        Self::from_axis_angle(a, degrees.to_radians())
    }

    pub fn from_axis_angle(axis: Vector3<f64>, radians: f64) -> Self {
        Self {
            rotation: Rotation3::from_axis_angle(&Unit::new_normalize(axis), radians).into_inner(),
            translation: Vector3::zeros(),
        }
    }

    pub fn with_translation(mut self, t: [f64; 3]) -> Self {
        self.translation = Vector3::from(t);
        self
    }

    pub fn apply(&self, p: &Point) -> Point {
        let q = self.rotation * Vector3::from(*p) + self.translation;
        [q.x, q.y, q.z]
    }

    /// Rotates a direction vector (no translation).
    pub fn rotate(&self, v: &Point) -> Point {
        let q = self.rotation * Vector3::from(*v);
        [q.x, q.y, q.z]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Rows of `[R | t]`, 12 values.
    pub fn to_rows(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_rows(rows: &[f64; 12]) -> Self {
        let mut rotation = Matrix3::zeros();
        let mut translation = Vector3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                rotation[(r, c)] = rows[r * 4 + c];
            }
            translation[r] = rows[r * 4 + 3];
        }
        Self { rotation, translation }
    }
}

pub fn apply_transform(t: &RigidTransform, pc: &PointCloud) -> PointCloud {
    PointCloud {
        points: pc.points.iter().map(|p| t.apply(p)).collect(),
    }
}

/// `M×K` neighbor indices into a reference set, each row sorted by
/// ascending distance (ties by lower index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexTable {
    rows: usize,
    k: usize,
    indices: Vec<usize>,
}

impl IndexTable {
    pub fn new(rows: usize, k: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != rows * k {
            return Err(Error::LengthMismatch {
                what: "index table",
                a: indices.len(),
                b: rows * k,
            });
        }
        Ok(Self { rows, k, indices })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// First `k` columns only.
    pub fn truncate(&self, k: usize) -> IndexTable {
        let k = k.min(self.k);
        let indices = (0..self.rows).flat_map(|i| self.row(i)[..k].iter().copied()).collect();
        IndexTable {
            rows: self.rows,
            k,
            indices,
        }
    }

    /// Drops column 0, used to remove the self match of a self query.
    pub fn without_first(&self) -> IndexTable {
        let indices = (0..self.rows).flat_map(|i| self.row(i)[1..].iter().copied()).collect();
        IndexTable {
            rows: self.rows,
            k: self.k - 1,
            indices,
        }
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point sampling starting at `start`.
pub fn fps(points: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::TooFew {
            what: "fps candidates",
            need: m.max(1),
            got: n,
        });
    }
    if start >= n {
        return Err(Error::OutOfRange { index: start, len: n });
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = start;
    for _ in 0..m {
        selected.push(cur);
        taken[cur] = true;
        let c = points[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = sq_dist(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(selected)
}

/// Exact k-nearest neighbors by squared L2 over rows of width `dim`.
pub fn knn(query: &[f64], reference: &[f64], dim: usize, k: usize) -> Result<IndexTable> {
    if dim == 0 || !query.len().is_multiple_of(dim) || !reference.len().is_multiple_of(dim) {
        return Err(Error::LengthMismatch {
            what: "knn row width",
            a: query.len(),
            b: dim,
        });
    }
    let (m, n) = (query.len() / dim, reference.len() / dim);
    if k == 0 || k > n {
        return Err(Error::TooFew {
            what: "knn reference points",
            need: k.max(1),
            got: n,
        });
    }
    let mut indices = Vec::with_capacity(m * k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for q in query.chunks_exact(dim) {
        best.clear();
        for (j, r) in reference.chunks_exact(dim).enumerate() {
            let d = sq_dist(q, r);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            // insert after entries with equal distance so lower indices win ties
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, j));
            best.truncate(k);
        }
        indices.extend(best.iter().map(|&(_, j)| j));
    }
    IndexTable::new(m, k, indices)
}

/// `knn` on point slices.
pub fn knn_points(query: &[Point], reference: &[Point], k: usize) -> Result<IndexTable> {
    knn(query.as_flattened(), reference.as_flattened(), 3, k)
}

/// Copies to each fine point the `c`-wide value row of its nearest coarse point.
pub fn upsample_assign(fine: &[Point], coarse: &[Point], values: &[f64], c: usize) -> Result<Vec<f64>> {
    if values.len() != coarse.len() * c {
        return Err(Error::LengthMismatch {
            what: "upsample values",
            a: values.len(),
            b: coarse.len() * c,
        });
    }
    let nn = knn_points(fine, coarse, 1)?;
    Ok(nn.indices().iter().flat_map(|&j| values[j * c..(j + 1) * c].iter().copied()).collect())
}

/// Descending-order SVD of a 3×3 matrix: `(U, σ, V)` with `m = U·diag(σ)·Vᵀ`.
pub fn sorted_svd(m: &Matrix3<f64>) -> (Matrix3<f64>, [f64; 3], Matrix3<f64>) {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut us = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut sig = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
        vs.set_column(dst, &v.column(src));
        sig[dst] = s[src];
    }
    (us, sig, vs)
}

/// Weighted least-squares rigid fit: the `(R, t)` minimizing
/// `Σ wᵢ ‖R·srcᵢ + t − dstᵢ‖²`.
pub fn kabsch_weighted(src: &[Point], dst: &[Point], w: &[f64]) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() != w.len() {
        return Err(Error::LengthMismatch {
            what: "kabsch inputs",
            a: src.len(),
            b: dst.len().max(w.len()),
        });
    }
    if w.iter().any(|&v| v.is_nan() || v < 0.0) {
        return Err(Error::BadWeights);
    }
    let total: f64 = w.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::BadWeights);
    }
    let mut sc = Vector3::zeros();
    let mut dc = Vector3::zeros();
    for ((s, d), &wi) in src.iter().zip(dst).zip(w) {
        sc += Vector3::from(*s) * wi;
        dc += Vector3::from(*d) * wi;
    }
    sc /= total;
    dc /= total;
    let mut h = Matrix3::zeros();
    for ((s, d), &wi) in src.iter().zip(dst).zip(w) {
        h += ((Vector3::from(*d) - dc) * wi) * (Vector3::from(*s) - sc).transpose();
    }
    let (mut u, sigma, v) = sorted_svd(&h);
    if sigma[1].partial_cmp(&(DEGENERACY_TOL * sigma[0])) != Some(Ordering::Greater) {
        return Err(Error::Degenerate(sigma));
    }
    if (u * v.transpose()).determinant() < 0.0 {
        let flipped = -u.column(2);
        u.set_column(2, &flipped);
    }
    let rotation = u * v.transpose();
    Ok(RigidTransform {
        rotation,
        translation: dc - rotation * sc,
    })
}
