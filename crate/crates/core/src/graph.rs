//! Supervoxel-style clustering of a point cloud and the cluster adjacency
//! graph built on top of it.
//!
//! Seeds start on a cubic lattice of pitch `seed_resolution` (anchored at the
//! coordinate origin), are snapped to the nearest occupied voxel, and then
//! grow k-means style: each point joins the nearest seed centroid inside the
//! search radius, centroids move to the mean of their members, and the loop
//! repeats until assignments settle.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{centroid, Point3, PointCloud};
use crate::spatial::SpatialIndex;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("cannot cluster an empty cloud")]
    EmptyCloud,
    #[error("invalid cluster parameters: {0}")]
    InvalidParams(String),
    #[error("malformed graph file line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterParams {
    pub voxel_resolution: f64,
    pub seed_resolution: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Weight of normal disagreement in the assignment distance. Only 0 is
    /// supported at present (purely spatial clustering).
    #[serde(default)]
    pub normal_weight: f64,
    /// Clusters smaller than this are dissolved into their neighbours.
    #[serde(default = "default_min_cluster_size")]
    pub min_cluster_size: usize,
}

fn default_max_iters() -> usize {
    10
}

fn default_min_cluster_size() -> usize {
    4
}

impl ClusterParams {
    pub fn new(voxel_resolution: f64, seed_resolution: f64) -> Self {
        Self {
            voxel_resolution,
            seed_resolution,
            max_iters: default_max_iters(),
            normal_weight: 0.0,
            min_cluster_size: default_min_cluster_size(),
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::InvalidParams(m));
        if !(self.voxel_resolution > 0.0 && self.voxel_resolution.is_finite()) {
            return bad(format!("voxel_resolution must be > 0, got {}", self.voxel_resolution));
        }
        if !(self.seed_resolution >= self.voxel_resolution && self.seed_resolution.is_finite()) {
            return bad(format!(
                "seed_resolution ({}) must be >= voxel_resolution ({})",
                self.seed_resolution, self.voxel_resolution
            ));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if self.normal_weight != 0.0 {
            return bad("normal_weight other than 0 is not supported".into());
        }
        Ok(())
    }

    pub fn search_radius(&self) -> f64 {
        3f64.sqrt() * self.seed_resolution
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub centroid: Point3,
    /// Sorted indices into the source cloud.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub clusters: Vec<Cluster>,
}

impl Clustering {
    /// Cluster id of every point.
    pub fn labels(&self, n_points: usize) -> Vec<usize> {
        let mut labels = vec![usize::MAX; n_points];
        for (c, cluster) in self.clusters.iter().enumerate() {
            for &i in &cluster.members {
                labels[i] = c;
            }
        }
        labels
    }
}

type Cell = (i64, i64, i64);

fn cell_of(p: &Point3, pitch: f64) -> Cell {
    ((p.x / pitch).floor() as i64, (p.y / pitch).floor() as i64, (p.z / pitch).floor() as i64)
}

fn cell_centre(c: Cell, pitch: f64) -> Point3 {
    Point3::new((c.0 as f64 + 0.5) * pitch, (c.1 as f64 + 0.5) * pitch, (c.2 as f64 + 0.5) * pitch)
}

/// One seed per occupied seed cell, placed at the centroid of the occupied
/// voxel nearest to the cell centre.
fn initial_seeds(cloud: &PointCloud, params: &ClusterParams) -> Vec<Point3> {
    let mut voxels: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.iter().enumerate() {
        voxels.entry(cell_of(p, params.voxel_resolution)).or_default().push(i);
    }
    let voxel_centroids: Vec<Point3> = voxels
        .values()
        .map(|members| {
            let pts: Vec<Point3> = members.iter().map(|&i| cloud.points()[i]).collect();
            centroid(&pts).expect("voxel has members")
        })
        .collect();

    // Voxels grouped by the seed cell that contains their centroid.
    let mut seed_cells: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    for (v, c) in voxel_centroids.iter().enumerate() {
        seed_cells.entry(cell_of(c, params.seed_resolution)).or_default().push(v);
    }
    seed_cells
        .iter()
        .map(|(&cell, vs)| {
            let centre = cell_centre(cell, params.seed_resolution);
            let best = vs
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    (voxel_centroids[a] - centre)
                        .norm_squared()
                        .total_cmp(&(voxel_centroids[b] - centre).norm_squared())
                })
                .expect("seed cell has voxels");
            voxel_centroids[best]
        })
        .collect()
}

fn assign(cloud: &PointCloud, centroids: &[Point3], radius: Option<f64>) -> Vec<Option<usize>> {
    let index = SpatialIndex::new(centroids);
    cloud
        .iter()
        .map(|p| {
            let (c, d) = index.nearest(p)?;
            match radius {
                Some(r) if d > r => None,
                _ => Some(c),
            }
        })
        .collect()
}

/// Rebuilds clusters from labels, dropping empty ones. Output order follows
/// the order of the previous centroids.
fn regroup(cloud: &PointCloud, labels: &[usize], k: usize) -> Vec<Cluster> {
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(|m| {
            let pts: Vec<Point3> = m.iter().map(|&i| cloud.points()[i]).collect();
            Cluster { centroid: centroid(&pts).expect("non-empty"), members: m }
        })
        .collect()
}

pub fn supervoxel_cluster(cloud: &PointCloud, params: &ClusterParams) -> Result<Clustering, GraphError> {
    if cloud.is_empty() {
        return Err(GraphError::EmptyCloud);
    }
    params.validate()?;
    let radius = params.search_radius();
    let mut centroids = initial_seeds(cloud, params);
    let mut labels: Vec<usize> = Vec::new();

    for _ in 0..params.max_iters {
        let within = assign(cloud, &centroids, Some(radius));
        // Orphans go to the nearest centroid regardless of distance.
        let fallback = if within.iter().any(Option::is_none) { assign(cloud, &centroids, None) } else { Vec::new() };
        let new_labels: Vec<usize> =
            within.iter().enumerate().map(|(i, l)| l.or_else(|| fallback[i]).expect("at least one centroid")).collect();
        let clusters = regroup(cloud, &new_labels, centroids.len());
        let normalized = regroup_labels(&clusters, cloud.len());
        let stable = normalized == labels;
        centroids = clusters.iter().map(|c| c.centroid).collect();
        labels = normalized;
        if stable {
            break;
        }
    }

    let mut clusters = regroup(cloud, &labels, centroids.len());
    dissolve_small(cloud, &mut clusters, params.min_cluster_size);
    Ok(Clustering { clusters })
}

fn regroup_labels(clusters: &[Cluster], n: usize) -> Vec<usize> {
    Clustering { clusters: clusters.to_vec() }.labels(n)
}

/// Reassigns the points of undersized clusters to the nearest surviving
/// centroid. Leaves a single cluster alone whatever its size.
fn dissolve_small(cloud: &PointCloud, clusters: &mut Vec<Cluster>, min_size: usize) {
    if clusters.len() <= 1 || clusters.iter().all(|c| c.members.len() >= min_size) {
        return;
    }
    let keep: Vec<Point3> = clusters.iter().filter(|c| c.members.len() >= min_size).map(|c| c.centroid).collect();
    if keep.is_empty() {
        let members: Vec<usize> = (0..cloud.len()).collect();
        let c = centroid(cloud.points()).expect("non-empty cloud");
        *clusters = vec![Cluster { centroid: c, members }];
        return;
    }
    let labels: Vec<usize> = assign(cloud, &keep, None).into_iter().map(|l| l.expect("non-empty")).collect();
    *clusters = regroup(cloud, &labels, keep.len());
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub centroid: Point3,
    pub members: Vec<usize>,
    pub synthetic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// Always `a < b`.
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

/// Undirected graph over cluster centroids. Edges are kept sorted by
/// `(a, b)` with `a < b` and no duplicates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterGraph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
}

impl ClusterGraph {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_synthetic(&self) -> usize {
        self.vertices.iter().filter(|v| v.synthetic).count()
    }

    fn edge(&self, a: usize, b: usize) -> Edge {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        let length = (self.vertices[a].centroid - self.vertices[b].centroid).norm();
        Edge { a, b, length }
    }

    fn normalize_edges(&mut self) {
        self.edges.sort_by_key(|e| (e.a, e.b));
        self.edges.dedup_by_key(|e| (e.a, e.b));
    }

    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for e in &self.edges {
            adj[e.a].push(e.b);
            adj[e.b].push(e.a);
        }
        adj
    }

    /// Component id per vertex, numbered in order of lowest vertex index.
    pub fn components(&self) -> Vec<usize> {
        let adj = self.neighbours();
        let mut comp = vec![usize::MAX; self.vertices.len()];
        let mut next = 0;
        for start in 0..self.vertices.len() {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &adj[v] {
                    if comp[w] == usize::MAX {
                        comp[w] = next;
                        queue.push_back(w);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn n_components(&self) -> usize {
        self.components().iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn is_connected(&self) -> bool {
        self.n_components() <= 1
    }

    /// Text form: `v <id> <x> <y> <z> <n_members> <0|1>` then
    /// `e <id1> <id2> <length>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.vertices.iter().enumerate() {
            let c = v.centroid;
            writeln!(out, "v {i} {:.12e} {:.12e} {:.12e} {} {}", c.x, c.y, c.z, v.members.len(), u8::from(v.synthetic))
                .unwrap();
        }
        for e in &self.edges {
            writeln!(out, "e {} {} {:.12e}", e.a, e.b, e.length).unwrap();
        }
        out
    }

    /// Parses the text form. Member lists are not stored in the file, so
    /// vertices come back with empty member sets.
    pub fn from_text(text: &str) -> Result<(ClusterGraph, Vec<usize>), GraphError> {
        let mut graph = ClusterGraph::default();
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let bad = |m: &str| GraphError::Malformed { line: line_no, message: m.to_string() };
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.first().copied() {
                None => continue,
                Some("v") if f.len() == 7 => {
                    let id: usize = f[1].parse().map_err(|_| bad("bad vertex id"))?;
                    if id != graph.vertices.len() {
                        return Err(bad("vertex ids must be consecutive from 0"));
                    }
                    let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad coordinate"));
                    let centroid = Point3::new(num(f[2])?, num(f[3])?, num(f[4])?);
                    counts.push(f[5].parse().map_err(|_| bad("bad member count"))?);
                    let synthetic = match f[6] {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad("synthetic flag must be 0 or 1")),
                    };
                    graph.vertices.push(Vertex { centroid, members: Vec::new(), synthetic });
                }
                Some("e") if f.len() == 4 => {
                    let a: usize = f[1].parse().map_err(|_| bad("bad edge endpoint"))?;
                    let b: usize = f[2].parse().map_err(|_| bad("bad edge endpoint"))?;
                    let length: f64 = f[3].parse().map_err(|_| bad("bad edge length"))?;
                    if a.max(b) >= graph.vertices.len() || a == b {
                        return Err(bad("edge endpoint out of range"));
                    }
                    graph.edges.push(Edge { a: a.min(b), b: a.max(b), length });
                }
                _ => return Err(bad("expected a 'v' or 'e' record")),
            }
        }
        graph.normalize_edges();
        Ok((graph, counts))
    }
}

/// Links two clusters when some pair of their member points lies within
/// `adjacency_radius`.
pub fn build_adjacency(clustering: &Clustering, cloud: &PointCloud, adjacency_radius: f64) -> ClusterGraph {
    let labels = clustering.labels(cloud.len());
    let index = SpatialIndex::new(cloud.points());
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (i, p) in cloud.iter().enumerate() {
        let li = labels[i];
        for j in index.within(p, adjacency_radius) {
            let lj = labels[j];
            if li < lj {
                pairs.insert((li, lj));
            }
        }
    }
    let mut graph = ClusterGraph {
        vertices: clustering
            .clusters
            .iter()
            .map(|c| Vertex { centroid: c.centroid, members: c.members.clone(), synthetic: false })
            .collect(),
        edges: Vec::new(),
    };
    graph.edges = pairs.into_iter().map(|(a, b)| graph.edge(a, b)).collect();
    graph
}

/// Adds one synthetic vertex per connected component (at the mean of the
/// component's centroids), anchors it to the component vertex nearest to it,
/// and links all synthetic vertices pairwise. Connected graphs are returned
/// unchanged.
pub fn connect_components(g: &ClusterGraph) -> ClusterGraph {
    let comp = g.components();
    let n_comp = comp.iter().copied().max().map_or(0, |m| m + 1);
    if n_comp <= 1 {
        return g.clone();
    }
    let mut out = g.clone();
    let mut by_comp: HashMap<usize, Vec<usize>> = HashMap::new();
    for (v, &c) in comp.iter().enumerate() {
        by_comp.entry(c).or_default().push(v);
    }
    let first_synthetic = out.vertices.len();
    for c in 0..n_comp {
        let verts = &by_comp[&c];
        let centres: Vec<Point3> = verts.iter().map(|&v| g.vertices[v].centroid).collect();
        let centre = centroid(&centres).expect("component is non-empty");
        let anchor = verts
            .iter()
            .copied()
            .min_by(|&a, &b| {
                (g.vertices[a].centroid - centre)
                    .norm_squared()
                    .total_cmp(&(g.vertices[b].centroid - centre).norm_squared())
            })
            .expect("component is non-empty");
        out.vertices.push(Vertex { centroid: centre, members: Vec::new(), synthetic: true });
        let s = out.vertices.len() - 1;
        out.edges.push(out.edge(anchor, s));
    }
    for s in first_synthetic..out.vertices.len() {
        for t in s + 1..out.vertices.len() {
            out.edges.push(out.edge(s, t));
        }
    }
    out.normalize_edges();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudgen::seeded_rng;
    use rand::Rng;

    fn blob(centre: Point3, n: usize, size: f64, seed: u64) -> Vec<Point3> {
        let mut rng = seeded_rng(seed, 0);
        (0..n)
            .map(|_| {
                centre
                    + nalgebra::Vector3::new(
                        rng.random_range(0.0..size),
                        rng.random_range(0.0..size),
                        rng.random_range(0.0..size),
                    )
            })
            .collect()
    }

    fn check_partition(clustering: &Clustering, n: usize) {
        let mut seen = vec![false; n];
        for c in &clustering.clusters {
            for &i in &c.members {
                assert!(!seen[i], "index {i} in two clusters");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn single_cell_gives_one_cluster() {
        let cloud = PointCloud::new(blob(Point3::new(0.1, 0.1, 0.1), 200, 0.5, 1)).unwrap();
        let clustering = supervoxel_cluster(&cloud, &ClusterParams::new(0.1, 1.0)).unwrap();
        assert_eq!(clustering.clusters.len(), 1);
        assert_eq!(clustering.clusters[0].members.len(), 200);
    }

    #[test]
    fn separated_blobs_never_share_a_cluster() {
        let mut pts = blob(Point3::new(0.0, 0.0, 0.0), 400, 1.0, 1);
        pts.extend(blob(Point3::new(100.0, 0.0, 0.0), 400, 1.0, 2));
        let cloud = PointCloud::new(pts).unwrap();
        let clustering = supervoxel_cluster(&cloud, &ClusterParams::new(0.25, 2.0)).unwrap();
        check_partition(&clustering, cloud.len());
        for c in &clustering.clusters {
            let first_blob = c.members[0] < 400;
            assert!(c.members.iter().all(|&i| (i < 400) == first_blob));
        }
    }

    #[test]
    fn centroids_are_member_means() {
        let cloud = crate::cloudgen::gen_valve_shell(&Default::default()).unwrap();
        let params = ClusterParams::new(1.0, 8.0);
        let clustering = supervoxel_cluster(&cloud, &params).unwrap();
        check_partition(&clustering, cloud.len());
        for c in &clustering.clusters {
            let pts: Vec<Point3> = c.members.iter().map(|&i| cloud.points()[i]).collect();
            assert!((centroid(&pts).unwrap() - c.centroid).norm() < 1e-9);
            assert!(c.members.len() >= params.min_cluster_size);
        }
        assert_eq!(clustering, supervoxel_cluster(&cloud, &params).unwrap());
    }

    #[test]
    fn empty_cloud_and_bad_params() {
        assert_eq!(
            supervoxel_cluster(&PointCloud::default(), &ClusterParams::new(1.0, 2.0)),
            Err(GraphError::EmptyCloud)
        );
        let cloud = PointCloud::new(vec![Point3::origin()]).unwrap();
        assert!(supervoxel_cluster(&cloud, &ClusterParams::new(2.0, 1.0)).is_err());
        assert!(supervoxel_cluster(&cloud, &ClusterParams::new(0.0, 1.0)).is_err());
    }

    fn two_cluster_graph(gap: f64) -> ClusterGraph {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(-1.0, 0.0, 0.0),
            Point3::new(gap, 0.0, 0.0),
            Point3::new(gap + 1.0, 0.0, 0.0),
        ];
        let cloud = PointCloud::new(pts).unwrap();
        let clustering = Clustering {
            clusters: vec![
                Cluster { centroid: Point3::new(-0.5, 0.0, 0.0), members: vec![0, 1] },
                Cluster { centroid: Point3::new(gap + 0.5, 0.0, 0.0), members: vec![2, 3] },
            ],
        };
        build_adjacency(&clustering, &cloud, 1.0)
    }

    #[test]
    fn adjacency_radius_contract() {
        let near = two_cluster_graph(0.5);
        assert_eq!(near.edges.len(), 1);
        assert!((near.edges[0].length - 1.5).abs() < 1e-12);
        assert!(two_cluster_graph(10.0).edges.is_empty());

        let cloud = PointCloud::new(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]).unwrap();
        let single =
            Clustering { clusters: vec![Cluster { centroid: Point3::new(0.5, 0.0, 0.0), members: vec![0, 1] }] };
        let g = build_adjacency(&single, &cloud, 5.0);
        assert_eq!((g.vertices.len(), g.edges.len()), (1, 0));
    }

    fn graph_from(points: &[(f64, f64)], edges: &[(usize, usize)]) -> ClusterGraph {
        let mut g = ClusterGraph {
            vertices: points
                .iter()
                .map(|&(x, y)| Vertex { centroid: Point3::new(x, y, 0.0), members: vec![0], synthetic: false })
                .collect(),
            edges: Vec::new(),
        };
        g.edges = edges.iter().map(|&(a, b)| g.edge(a, b)).collect();
        g.normalize_edges();
        g
    }

    #[test]
    fn connected_graph_unchanged() {
        let g = graph_from(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], &[(0, 1), (1, 2)]);
        assert_eq!(connect_components(&g), g);
    }

    #[test]
    fn two_components_patched() {
        let g = graph_from(&[(0.0, 0.0), (1.0, 0.0), (10.0, 0.0), (11.0, 0.0)], &[(0, 1), (2, 3)]);
        let c = connect_components(&g);
        assert_eq!(c.n_synthetic(), 2);
        assert_eq!(c.edges.len(), g.edges.len() + 1 + 2);
        assert!(c.is_connected());
        for v in c.vertices.iter().filter(|v| v.synthetic) {
            assert!(v.members.is_empty());
        }
        for e in &c.edges {
            let d = (c.vertices[e.a].centroid - c.vertices[e.b].centroid).norm();
            assert!((d - e.length).abs() < 1e-9);
        }
    }

    #[test]
    fn three_components_patched() {
        let g = graph_from(&[(0.0, 0.0), (5.0, 0.0), (9.0, 0.0), (10.0, 0.0)], &[(2, 3)]);
        let c = connect_components(&g);
        assert_eq!(c.n_synthetic(), 3);
        assert_eq!(c.edges.len(), 1 + 3 + 3);
        assert!(c.is_connected());
    }

    #[test]
    fn text_round_trip() {
        let g = graph_from(&[(0.0, 0.0), (1.0, 2.0), (3.0, 0.5)], &[(0, 1), (1, 2)]);
        let (back, counts) = ClusterGraph::from_text(&g.to_text()).unwrap();
        assert_eq!(counts, vec![1, 1, 1]);
        assert_eq!(back.edges.len(), 2);
        for (a, b) in back.vertices.iter().zip(&g.vertices) {
            assert!((a.centroid - b.centroid).norm() < 1e-9);
        }
        assert!(ClusterGraph::from_text("v 0 1 2 3\n").is_err());
        assert!(ClusterGraph::from_text("e 0 1 1.0\n").is_err());
    }
}
