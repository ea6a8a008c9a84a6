//! Frank-Wolfe (conditional gradient) ascent with exact line search and
//! random restarts.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gradient_of, max_weight_matching, quadratic_form, AssignmentMatrix, MatchError};
use crate::cloudgen::seeded_rng;
use crate::features::SimilarityMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverParams {
    pub max_iters: usize,
    pub fw_gap_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self { max_iters: 500, fw_gap_tol: 1e-6, restarts: 8, seed: 0 }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<(), MatchError> {
        if self.max_iters == 0 || self.restarts == 0 || !(self.fw_gap_tol > 0.0) {
            return Err(MatchError::InvalidParams("max_iters, restarts and fw_gap_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestartReport {
    pub objective: f64,
    pub iterations: usize,
    pub fw_gap: f64,
    pub integrality: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverReport {
    pub restarts: Vec<RestartReport>,
    pub best_restart: usize,
}

impl SolverReport {
    pub fn best(&self) -> &RestartReport {
        &self.restarts[self.best_restart]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("restart objective iterations fw_gap integrality\n");
        for (i, r) in self.restarts.iter().enumerate() {
            out.push_str(&format!(
                "{i} {:.9} {} {:.3e} {:.4}{}\n",
                r.objective,
                r.iterations,
                r.fw_gap,
                r.integrality,
                if i == self.best_restart { " *" } else { "" }
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub x: AssignmentMatrix,
    pub objective: f64,
    pub report: SolverReport,
}

/// One accepted iterate, passed to the observer of
/// [`solve_frank_wolfe_observed`]. `iteration == 0` is the starting point.
pub struct IterateEvent<'a> {
    pub restart: usize,
    pub iteration: usize,
    pub x: &'a DMatrix<f64>,
    pub objective: f64,
}

/// Polytope vertex maximising `⟨grad, S⟩`: a partial permutation matrix over
/// the positive entries of `grad`.
pub fn linear_oracle(grad: &DMatrix<f64>) -> AssignmentMatrix {
    let mut s = DMatrix::zeros(grad.nrows(), grad.ncols());
    for (g, h) in max_weight_matching(grad) {
        s[(g, h)] = 1.0;
    }
    AssignmentMatrix::from_trusted(s)
}

/// Step size maximising `f(x + γ(s − x))` over `γ ∈ [0, 1]`.
///
/// Along the segment `f = aγ² + bγ + c` with `a = f(s − x)` and
/// `b = ⟨∇f(x), s − x⟩`.
pub fn line_search(d: &SimilarityMatrix, x: &AssignmentMatrix, s: &AssignmentMatrix) -> f64 {
    let dir = s.as_matrix() - x.as_matrix();
    step_along(d, &dir, &gradient_of(d, x.as_matrix()))
}

fn step_along(d: &SimilarityMatrix, dir: &DMatrix<f64>, grad: &DMatrix<f64>) -> f64 {
    if dir.amax() == 0.0 {
        return 0.0;
    }
    let a = quadratic_form(d, dir);
    let b = grad.dot(dir);
    if a < 0.0 {
        (-b / (2.0 * a)).clamp(0.0, 1.0)
    } else if a + b > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn uniform_start(n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, m, 1.0 / n.max(m).max(1) as f64)
}

/// Random convex combination of a few random partial permutation matrices.
fn random_start(n: usize, m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let k = n.max(m);
    let parts = 3;
    let weights: Vec<f64> = (0..parts).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = weights.iter().sum();
    let mut x = DMatrix::zeros(n, m);
    for w in weights {
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(rng);
        for (g, &h) in perm.iter().enumerate().take(n) {
            if h < m {
                x[(g, h)] += w / total;
            }
        }
    }
    x
}

struct RestartRun {
    x: DMatrix<f64>,
    report: RestartReport,
}

fn run_restart(
    d: &SimilarityMatrix,
    mut x: DMatrix<f64>,
    params: &SolverParams,
    restart: usize,
    observe: &mut dyn FnMut(&IterateEvent<'_>),
) -> RestartRun {
    let mut objective = quadratic_form(d, &x);
    observe(&IterateEvent { restart, iteration: 0, x: &x, objective });
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iters {
        let grad = gradient_of(d, &x);
        let s = linear_oracle(&grad);
        let dir = s.as_matrix() - &x;
        gap = grad.dot(&dir);
        if gap <= params.fw_gap_tol {
            converged = true;
            break;
        }
        let gamma = step_along(d, &dir, &grad);
        if gamma == 0.0 {
            break;
        }
        let next = &x + &dir * gamma;
        let next_objective = quadratic_form(d, &next);
        // Exact line search cannot decrease f; a lower value is rounding.
        if next_objective < objective {
            break;
        }
        x = next;
        objective = next_objective;
        iterations += 1;
        observe(&IterateEvent { restart, iteration: iterations, x: &x, objective });
    }
    let integrality = AssignmentMatrix::from_trusted(x.clone()).integrality();
    RestartRun { x, report: RestartReport { objective, iterations, fw_gap: gap, integrality, converged } }
}

/// Frank-Wolfe with restarts; returns the best final iterate over restarts.
/// The first restart starts from the uniform matrix `1/max(n, m)`, the rest
/// from random feasible points.
pub fn solve_frank_wolfe(d: &SimilarityMatrix, params: &SolverParams) -> Result<SolveOutcome, MatchError> {
    solve_frank_wolfe_observed(d, params, |_| {})
}

pub fn solve_frank_wolfe_observed(
    d: &SimilarityMatrix,
    params: &SolverParams,
    mut observe: impl FnMut(&IterateEvent<'_>),
) -> Result<SolveOutcome, MatchError> {
    params.validate()?;
    let (n, m) = (d.n(), d.m());
    let mut rng = seeded_rng(params.seed, 4);
    let mut best: Option<(usize, DMatrix<f64>, f64)> = None;
    let mut reports = Vec::with_capacity(params.restarts);
    for restart in 0..params.restarts {
        let start = if restart == 0 { uniform_start(n, m) } else { random_start(n, m, &mut rng) };
        let run = run_restart(d, start, params, restart, &mut observe);
        let better = best.as_ref().is_none_or(|(_, _, obj)| run.report.objective > *obj);
        if better {
            best = Some((restart, run.x, run.report.objective));
        }
        reports.push(run.report);
    }
    let (best_restart, x, objective) = best.expect("at least one restart");
    Ok(SolveOutcome {
        x: AssignmentMatrix::from_trusted(x),
        objective,
        report: SolverReport { restarts: reports, best_restart },
    })
}
