//! Four-scale point pyramid: FPS subsets, intra-scale neighbor tables and
//! the cross-scale down/up-sampling tables.

use crate::error::{Error, Result};
use crate::geometry::{fps, knn_points, IndexTable, Point, PointCloud};

pub const SCALES: usize = 4;
pub const NEIGHBORS: usize = 16;
pub const MIN_INPUT: usize = 64;
pub const MIN_LEVEL: usize = 8;
/// Width of the relative position encoding: offset, distance, absolute.
pub const REL_WIDTH: usize = 7;

/// Point counts per scale: `N·{1, 1/4, 1/16, 1/64}`, floored at 8.
pub fn level_sizes(n: usize) -> [usize; SCALES] {
    [n, (n / 4).max(MIN_LEVEL), (n / 16).max(MIN_LEVEL), (n / 64).max(MIN_LEVEL)]
}

#[derive(Clone, Debug)]
pub struct Level {
    /// Indices into the input cloud.
    pub index: Vec<usize>,
    pub points: Vec<Point>,
    /// Euclidean neighbors within this level, self first.
    pub neighbors: IndexTable,
    /// `l×K×7` relative position encoding of each neighbor.
    pub rel: Vec<f64>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.as_flattened().to_vec()
    }
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<Level>,
    /// `down[k]`: for each point of level k+1, its neighbors in level k.
    pub down: Vec<IndexTable>,
    /// `up[k]`: for each point of level k, its nearest point in level k+1.
    pub up: Vec<IndexTable>,
}

fn level(points: Vec<Point>, index: Vec<usize>) -> Result<Level> {
    let k = NEIGHBORS.min(points.len());
    let neighbors = knn_points(&points, &points, k)?;
    let mut rel = Vec::with_capacity(points.len() * k * REL_WIDTH);
    for (i, p) in points.iter().enumerate() {
        for &j in neighbors.row(i) {
            let q = points[j];
            let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
            let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            rel.extend_from_slice(&[d[0], d[1], d[2], dist, q[0], q[1], q[2]]);
        }
    }
    Ok(Level {
        index,
        points,
        neighbors,
        rel,
    })
}

pub fn build_pyramid(pc: &PointCloud) -> Result<Pyramid> {
    let n = pc.len();
    if n < MIN_INPUT {
        return Err(Error::TooFew {
            what: "pyramid input points",
            need: MIN_INPUT,
            got: n,
        });
    }
    let sizes = level_sizes(n);
    let mut levels = vec![level(pc.points().to_vec(), (0..n).collect())?];
    let mut down = Vec::with_capacity(SCALES - 1);
    let mut up = Vec::with_capacity(SCALES - 1);
    for &m in &sizes[1..] {
        let prev = levels.last().expect("level 0 exists");
        let local = fps(&prev.points, m, 0)?;
        let points: Vec<Point> = local.iter().map(|&i| prev.points[i]).collect();
        let index = local.iter().map(|&i| prev.index[i]).collect();
        down.push(knn_points(&points, &prev.points, NEIGHBORS.min(prev.len()))?);
        up.push(knn_points(&prev.points, &points, 1)?);
        levels.push(level(points, index)?);
    }
    Ok(Pyramid { levels, down, up })
}

impl Pyramid {
    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Level::len).collect()
    }

    /// Selects per-level rows of a per-input-point value.
    pub fn subsample<T: Copy>(&self, k: usize, values: &[T]) -> Vec<T> {
        self.levels[k].index.iter().map(|&i| values[i]).collect()
    }
}
