//! Exhaustive search over partial injective maps. Test oracle only.

use super::{MatchError, MatchedPair, Matching};
use crate::features::{EdgePairTerm, SimilarityMatrix};

pub const BRUTE_FORCE_MAX: usize = 7;

struct Search<'a> {
    d: &'a SimilarityMatrix,
    /// Edge terms grouped by their larger row index, so a term is scored once
    /// both of its rows are assigned.
    terms_by_row: Vec<Vec<EdgePairTerm>>,
    map: Vec<Option<usize>>,
    used: Vec<bool>,
    best: f64,
    best_map: Vec<Option<usize>>,
}

impl Search<'_> {
    fn row_gain(&self, row: usize) -> f64 {
        let mut gain = 0.0;
        if let Some(h) = self.map[row] {
            gain += self.d.vertex_sim[(row, h)];
        }
        for t in &self.terms_by_row[row] {
            if self.map[t.g1] == Some(t.h1) && self.map[t.g2] == Some(t.h2) {
                gain += 2.0 * t.value;
            }
        }
        gain
    }

    fn run(&mut self, row: usize, acc: f64) {
        if row == self.map.len() {
            if acc > self.best {
                self.best = acc;
                self.best_map = self.map.clone();
            }
            return;
        }
        self.map[row] = None;
        let gain = self.row_gain(row);
        self.run(row + 1, acc + gain);
        for h in 0..self.used.len() {
            if self.used[h] {
                continue;
            }
            self.used[h] = true;
            self.map[row] = Some(h);
            let gain = self.row_gain(row);
            self.run(row + 1, acc + gain);
            self.map[row] = None;
            self.used[h] = false;
        }
    }
}

/// A matching maximising the objective over all partial injections.
/// Limited to `n, m ≤ 7`.
pub fn brute_force_match(d: &SimilarityMatrix) -> Result<Matching, MatchError> {
    let (n, m) = (d.n(), d.m());
    if n > BRUTE_FORCE_MAX || m > BRUTE_FORCE_MAX {
        return Err(MatchError::TooLarge { n, m, max: BRUTE_FORCE_MAX });
    }
    let mut terms_by_row = vec![Vec::new(); n];
    for t in &d.edge_sim {
        terms_by_row[t.g1.max(t.g2)].push(*t);
    }
    let mut search =
        Search { d, terms_by_row, map: vec![None; n], used: vec![false; m], best: 0.0, best_map: vec![None; n] };
    search.run(0, 0.0);
    let pairs =
        search.best_map.iter().enumerate().filter_map(|(g, h)| h.map(|h| MatchedPair { g, h, score: 1.0 })).collect();
    Ok(Matching { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudgen::seeded_rng;
    use crate::matcher::matching_objective;
    use crate::matcher::tests::random_instance;
    use nalgebra::DMatrix;
    use rand::seq::SliceRandom;
    use rand::Rng;

    #[test]
    fn single_vertex() {
        let d = SimilarityMatrix::new(DMatrix::from_element(1, 1, 0.7), Vec::new());
        let m = brute_force_match(&d).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!((m.pairs[0].g, m.pairs[0].h), (0, 0));
    }

    #[test]
    fn all_zero_allows_empty() {
        let d = SimilarityMatrix::new(DMatrix::zeros(3, 3), Vec::new());
        let m = brute_force_match(&d).unwrap();
        assert_eq!(matching_objective(&d, &m), 0.0);
    }

    #[test]
    fn beats_random_matchings() {
        let d = random_instance(3, 3, 0.7, 5);
        let best = matching_objective(&d, &brute_force_match(&d).unwrap());
        let mut rng = seeded_rng(8, 0);
        for _ in 0..50 {
            let mut cols: Vec<usize> = (0..3).collect();
            cols.shuffle(&mut rng);
            let pairs = (0..3)
                .filter(|_| rng.random::<f64>() < 0.7)
                .map(|g| MatchedPair { g, h: cols[g], score: 1.0 })
                .collect();
            let m = Matching { pairs };
            assert!(matching_objective(&d, &m) <= best + 1e-12);
        }
    }

    #[test]
    fn incremental_scoring_matches_direct() {
        let d = random_instance(5, 4, 0.5, 11);
        let m = brute_force_match(&d).unwrap();
        assert!(m.is_injective());
        // Recompute directly from the quadratic form.
        let direct = matching_objective(&d, &m);
        let mut s = 0.0;
        for p in &m.pairs {
            s += d.vertex_sim[(p.g, p.h)];
        }
        for t in &d.edge_sim {
            let on = |g: usize, h: usize| m.pairs.iter().any(|p| p.g == g && p.h == h);
            if on(t.g1, t.h1) && on(t.g2, t.h2) {
                s += 2.0 * t.value;
            }
        }
        assert!((direct - s).abs() < 1e-12);
    }

    #[test]
    fn size_limit() {
        let d = SimilarityMatrix::new(DMatrix::zeros(8, 2), Vec::new());
        assert!(matches!(brute_force_match(&d), Err(MatchError::TooLarge { .. })));
    }
}
