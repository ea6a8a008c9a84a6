//! Nearest-neighbour queries over a fixed point set.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};

use crate::geometry::Point3;

pub struct SpatialIndex {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl SpatialIndex {
    pub fn new(points: &[Point3]) -> Self {
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&coords).expect("k-d tree construction over finite points");
        Self { tree, len: points.len() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index of and Euclidean distance to the nearest point.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        if self.len == 0 {
            return None;
        }
        let n = self.tree.query(&[q.x, q.y, q.z]).nearest_one::<SquaredEuclidean<f64>>().execute();
        Some((n.item as usize, n.distance.sqrt()))
    }

    /// The `k` nearest points as (index, distance), closest first.
    pub fn nearest_k(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let Some(k) = NonZero::new(k.min(self.len)) else {
            return Vec::new();
        };
        self.tree
            .query(&[q.x, q.y, q.z])
            .nearest_n::<SquaredEuclidean<f64>>(k)
            .execute()
            .into_iter()
            .map(|r| (r.item as usize, r.distance.sqrt()))
            .collect()
    }

    /// Indices of all points within `radius` (inclusive), in ascending index
    /// order.
    pub fn within(&self, q: &Point3, radius: f64) -> Vec<usize> {
        if self.len == 0 {
            return Vec::new();
        }
        let mut hits: Vec<usize> = self
            .tree
            .query(&[q.x, q.y, q.z])
            .within::<SquaredEuclidean<f64>>(radius * radius)
            .unsorted()
            .execute()
            .into_iter()
            .map(|r| r.item as usize)
            .collect();
        hits.sort_unstable();
        hits
    }
}

/// Median distance from each point to its nearest other point; an estimate
/// of the sampling pitch. Zero for fewer than two points.
pub fn median_nn_distance(points: &[Point3]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let index = SpatialIndex::new(points);
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| index.nearest_k(p, 2).into_iter().find(|&(j, _)| j != i).map_or(0.0, |(_, d)| d))
        .collect();
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}
