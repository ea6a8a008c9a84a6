//! Graph matching as a quadratic program over the relaxed assignment
//! polytope `{0 ≤ x ≤ 1, row sums ≤ 1, column sums ≤ 1}`.
//!
//! The objective is `f(X) = vec(X)ᵀ D vec(X)` with D held in factored form
//! (see [`SimilarityMatrix`]):
//!
//! ```text
//! f(X) = Σ_ij vertex_sim[i][j]·x_ij² + 2·Σ_terms value·x[g1][h1]·x[g2][h2]
//! ```

mod brute;
mod frank_wolfe;
mod lap;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

pub use brute::{brute_force_match, BRUTE_FORCE_MAX};
pub use frank_wolfe::{
    line_search, linear_oracle, solve_frank_wolfe, solve_frank_wolfe_observed, IterateEvent, RestartReport,
    SolveOutcome, SolverParams, SolverReport,
};
pub use lap::max_weight_matching;

use crate::features::SimilarityMatrix;

/// Slack allowed on the row/column sum constraints.
pub const FEASIBILITY_TOL: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("dimension mismatch: D is {d_rows}x{d_cols}, X is {x_rows}x{x_cols}")]
    DimensionMismatch { d_rows: usize, d_cols: usize, x_rows: usize, x_cols: usize },
    #[error("assignment matrix violates constraints: {0}")]
    Infeasible(String),
    #[error("brute force limited to n, m <= {max}; got {n}x{m}")]
    TooLarge { n: usize, m: usize, max: usize },
    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),
}

/// A point of the relaxed assignment polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    x: DMatrix<f64>,
}

impl AssignmentMatrix {
    pub fn new(x: DMatrix<f64>) -> Result<Self, MatchError> {
        check_feasible(&x, FEASIBILITY_TOL)?;
        Ok(Self { x })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self { x: DMatrix::zeros(n, m) }
    }

    /// Indicator matrix of a matching.
    pub fn from_matching(n: usize, m: usize, matching: &Matching) -> Self {
        let mut x = DMatrix::zeros(n, m);
        for p in &matching.pairs {
            x[(p.g, p.h)] = 1.0;
        }
        Self { x }
    }

    pub(crate) fn from_trusted(x: DMatrix<f64>) -> Self {
        Self { x }
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.x.ncols()
    }

    /// Largest violation of the box, row and column constraints.
    pub fn max_violation(&self) -> f64 {
        violation(&self.x)
    }

    /// Fraction of entries within 1e-6 of 0 or 1.
    pub fn integrality(&self) -> f64 {
        if self.x.is_empty() {
            return 1.0;
        }
        let near = self.x.iter().filter(|&&v| v.abs() <= 1e-6 || (v - 1.0).abs() <= 1e-6).count();
        near as f64 / self.x.len() as f64
    }
}

fn violation(x: &DMatrix<f64>) -> f64 {
    let box_v = x.iter().map(|&v| (-v).max(v - 1.0)).fold(0.0, f64::max);
    let row_v = x.row_iter().map(|r| r.sum() - 1.0).fold(0.0, f64::max);
    let col_v = x.column_iter().map(|c| c.sum() - 1.0).fold(0.0, f64::max);
    box_v.max(row_v).max(col_v)
}

fn check_feasible(x: &DMatrix<f64>, tol: f64) -> Result<(), MatchError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MatchError::Infeasible("non-finite entry".into()));
    }
    let v = violation(x);
    if v > tol {
        return Err(MatchError::Infeasible(format!("max violation {v:e}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchedPair {
    pub g: usize,
    pub h: usize,
    pub score: f64,
}

/// Partial injective map from vertices of G to vertices of H.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
}

impl Matching {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_injective(&self) -> bool {
        let mut gs: Vec<usize> = self.pairs.iter().map(|p| p.g).collect();
        let mut hs: Vec<usize> = self.pairs.iter().map(|p| p.h).collect();
        gs.sort_unstable();
        hs.sort_unstable();
        gs.windows(2).all(|w| w[0] != w[1]) && hs.windows(2).all(|w| w[0] != w[1])
    }
}

fn check_dims(d: &SimilarityMatrix, x: &DMatrix<f64>) -> Result<(), MatchError> {
    if (d.n(), d.m()) != x.shape() {
        return Err(MatchError::DimensionMismatch {
            d_rows: d.n(),
            d_cols: d.m(),
            x_rows: x.nrows(),
            x_cols: x.ncols(),
        });
    }
    Ok(())
}

/// `vec(x)ᵀ D vec(x)` for any n×m matrix, feasible or not.
pub(crate) fn quadratic_form(d: &SimilarityMatrix, x: &DMatrix<f64>) -> f64 {
    let vertex: f64 = d.vertex_sim.iter().zip(x.iter()).map(|(s, v)| s * v * v).sum();
    let edges: f64 = d.edge_sim.iter().map(|t| t.value * x[(t.g1, t.h1)] * x[(t.g2, t.h2)]).sum();
    vertex + 2.0 * edges
}

pub(crate) fn gradient_of(d: &SimilarityMatrix, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = d.vertex_sim.component_mul(x) * 2.0;
    for t in &d.edge_sim {
        g[(t.g1, t.h1)] += 2.0 * t.value * x[(t.g2, t.h2)];
        g[(t.g2, t.h2)] += 2.0 * t.value * x[(t.g1, t.h1)];
    }
    g
}

pub fn objective_value(d: &SimilarityMatrix, x: &AssignmentMatrix) -> Result<f64, MatchError> {
    check_dims(d, &x.x)?;
    Ok(quadratic_form(d, &x.x))
}

pub fn objective_gradient(d: &SimilarityMatrix, x: &AssignmentMatrix) -> Result<DMatrix<f64>, MatchError> {
    check_dims(d, &x.x)?;
    Ok(gradient_of(d, &x.x))
}

/// Objective of the indicator matrix of `matching`.
pub fn matching_objective(d: &SimilarityMatrix, matching: &Matching) -> f64 {
    quadratic_form(d, &AssignmentMatrix::from_matching(d.n(), d.m(), matching).x)
}

/// Rounds a relaxed solution to an injective matching: maximum-weight
/// bipartite matching on `x`, keeping pairs with `x ≥ accept_threshold`.
pub fn extract_permutation(x: &AssignmentMatrix, accept_threshold: f64) -> Matching {
    let pairs = max_weight_matching(&x.x)
        .into_iter()
        .filter(|&(g, h)| x.x[(g, h)] >= accept_threshold)
        .map(|(g, h)| MatchedPair { g, h, score: x.x[(g, h)] })
        .collect();
    Matching { pairs }
}
