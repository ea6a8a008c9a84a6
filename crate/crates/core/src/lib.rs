//! Point-cloud registration by graph matching.
//!
//! Clouds are clustered into supervoxels, the clusters become vertices of a
//! graph described by ESF histograms, the two graphs are matched with a
//! Frank-Wolfe solver and the matched centroids give a rigid transform after
//! RANSAC. A trimmed ICP baseline and a benchmark harness sit alongside.

// Parameter checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod cloudgen;
pub mod features;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod matcher;
pub mod pipeline;
pub mod spatial;

pub use geometry::{Point3, PointCloud, RigidTransform};
