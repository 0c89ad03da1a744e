//! Enumeration of ℤ-magic squares whose entries all lie in a value set
//! inside `[0, N]`: the primes for the census, every integer for the
//! repeated-entry statistics.
//!
//! The search runs over the skeleton values `y` rather than the basis
//! coordinates `x`; with a unimodular skeleton the two lattices agree and
//! every skeleton value is itself an entry, so it ranges over the value set
//! directly. The remaining forms prune by interval propagation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact_linalg::{solve_exact, IntMatrix, RatMatrix, Rational};
use crate::magic_forms::FormSystem;
use num_integer::Integer;
use num_traits::{ToPrimitive, Zero};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CensusError {
    #[error("skeleton submatrix is not unimodular")]
    NonUnimodularSkeleton,
    #[error("budget of {budget} search nodes exceeded; resume from top-level index {}", token.next_index)]
    BudgetExceeded { budget: u64, token: ResumeToken },
    #[error("resume token belongs to another system or bound")]
    TokenMismatch,
}

/// `table[v]` is true iff `v` is prime, for `0 ≤ v ≤ n`.
pub fn sieve_primes(n: u64) -> Vec<bool> {
    let n = n as usize;
    let mut table = vec![true; n + 1];
    table[0] = false;
    if n >= 1 {
        table[1] = false;
    }
    let mut i = 2;
    while i * i <= n {
        if table[i] {
            for j in (i * i..=n).step_by(i) {
                table[j] = false;
            }
        }
        i += 1;
    }
    table
}

pub fn primes_up_to(n: u64) -> Vec<u64> {
    sieve_primes(n).iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| i as u64).collect()
}

/// Which values in `[0, N]` an entry may take.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntrySet {
    Primes,
    All,
}

/// Precomputed search over skeleton values.
#[derive(Clone, Debug)]
pub struct SquareSearch {
    bound: i64,
    allowed: Vec<bool>,
    candidates: Vec<i64>,
    /// Form values as integer combinations of skeleton values.
    weights: Vec<Vec<i64>>,
    /// Skeleton-value coordinate assigned at each level.
    order: Vec<usize>,
    /// Per level, non-skeleton forms touching that level's coordinate.
    touches: Vec<Vec<(usize, i64)>>,
    /// Per level, forms whose last coordinate is fixed there.
    completes: Vec<Vec<usize>>,
    /// `rem[level][form]`: range of the contribution of levels `level..`.
    rem: Vec<Vec<(i64, i64)>>,
    checked: Vec<usize>,
}

/// Totals from one search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub total: u128,
    pub distinct: u128,
    pub nodes: u64,
}

impl std::ops::AddAssign for Tally {
    fn add_assign(&mut self, o: Tally) {
        self.total += o.total;
        self.distinct += o.distinct;
        self.nodes += o.nodes;
    }
}

fn skeleton_weights(sys: &FormSystem) -> Result<Vec<Vec<i64>>, CensusError> {
    let d = sys.d();
    let b = RatMatrix::from(&IntMatrix::from_rows(
        &sys.skeleton_form_indices().iter().map(|&i| sys.form(i).coefficients.clone()).collect::<Vec<_>>(),
    ));
    // inverse columns: B x = e_k
    let mut inv = vec![vec![Rational::zero(); d]; d];
    for k in 0..d {
        let e: Vec<Rational> = (0..d).map(|i| Rational::from_integer(i64::from(i == k).into())).collect();
        let x = solve_exact(&b, &e).ok().flatten().ok_or(CensusError::NonUnimodularSkeleton)?;
        for j in 0..d {
            inv[j][k] = x[j].clone();
        }
    }
    sys.rows()
        .iter()
        .map(|r| {
            (0..d)
                .map(|k| {
                    let w: Rational = (0..d).map(|j| &inv[j][k] * Rational::from_integer(r[j].into())).sum();
                    if w.is_integer() {
                        w.to_integer().to_i64().ok_or(CensusError::NonUnimodularSkeleton)
                    } else {
                        Err(CensusError::NonUnimodularSkeleton)
                    }
                })
                .collect()
        })
        .collect()
}

impl SquareSearch {
    pub fn new(sys: &FormSystem, bound: u64, entries: EntrySet) -> Result<Self, CensusError> {
        let weights = skeleton_weights(sys)?;
        let d = sys.d();
        let t = sys.t();
        let allowed = match entries {
            EntrySet::Primes => sieve_primes(bound),
            EntrySet::All => vec![true; bound as usize + 1],
        };
        let candidates: Vec<i64> = (0..=bound as i64).filter(|&v| allowed[v as usize]).collect();
        let skeleton = sys.skeleton_form_indices();
        let checked: Vec<usize> = (0..t).filter(|f| !skeleton.contains(f)).collect();

        let mut order = Vec::with_capacity(d);
        let mut fixed = vec![false; d];
        while order.len() < d {
            let score = |v: usize| {
                let mut completes = 0;
                let mut touches = 0;
                for &f in &checked {
                    if weights[f][v] == 0 {
                        continue;
                    }
                    touches += 1;
                    if (0..d).all(|j| j == v || fixed[j] || weights[f][j] == 0) {
                        completes += 1;
                    }
                }
                (completes, touches, std::cmp::Reverse(v))
            };
            let v = (0..d).filter(|&v| !fixed[v]).max_by_key(|&v| score(v)).unwrap();
            fixed[v] = true;
            order.push(v);
        }

        let touches = order
            .iter()
            .map(|&v| checked.iter().filter(|&&f| weights[f][v] != 0).map(|&f| (f, weights[f][v])).collect())
            .collect();
        let mut completes = vec![Vec::new(); d];
        for &f in &checked {
            if let Some(level) = (0..d).rev().find(|&l| weights[f][order[l]] != 0) {
                completes[level].push(f);
            }
        }
        let (cmin, cmax) = (candidates.first().copied().unwrap_or(0), candidates.last().copied().unwrap_or(0));
        let mut rem = vec![vec![(0i64, 0i64); t]; d + 1];
        for level in (0..d).rev() {
            for f in 0..t {
                let w = weights[f][order[level]];
                let (lo, hi) = rem[level + 1][f];
                rem[level][f] = if w >= 0 { (lo + w * cmin, hi + w * cmax) } else { (lo + w * cmax, hi + w * cmin) };
            }
        }
        Ok(SquareSearch { bound: bound as i64, allowed, candidates, weights, order, touches, completes, rem, checked })
    }

    fn top_candidates(&self) -> Vec<i64> {
        let partial = vec![0i64; self.weights.len()];
        let (lo, hi) = self.range(0, &partial);
        self.slice(lo, hi).to_vec()
    }

    fn slice(&self, lo: i64, hi: i64) -> &[i64] {
        let a = self.candidates.partition_point(|&c| c < lo);
        let b = self.candidates.partition_point(|&c| c <= hi);
        if a < b {
            &self.candidates[a..b]
        } else {
            &[]
        }
    }

    fn range(&self, level: usize, partial: &[i64]) -> (i64, i64) {
        let lo_val = self.candidates.first().copied().unwrap_or(1);
        let hi_val = self.candidates.last().copied().unwrap_or(0);
        let (mut lo, mut hi) = (lo_val, hi_val);
        for &(f, w) in &self.touches[level] {
            let (rlo, rhi) = self.rem[level + 1][f];
            let a = lo_val - partial[f] - rhi;
            let b = hi_val - partial[f] - rlo;
            let (l, h) = if w > 0 {
                (Integer::div_ceil(&a, &w), Integer::div_floor(&b, &w))
            } else {
                (Integer::div_ceil(&b, &w), Integer::div_floor(&a, &w))
            };
            lo = lo.max(l);
            hi = hi.min(h);
        }
        (lo, hi)
    }

    fn admissible(&self, v: i64) -> bool {
        (0..=self.bound).contains(&v) && self.allowed[v as usize]
    }

    /// Visits every square whose top-level skeleton value is `top`, passing
    /// the form values.
    pub fn visit_from(&self, top: i64, visit: &mut impl FnMut(&[i64])) -> u64 {
        let t = self.weights.len();
        let mut partial = vec![0i64; t];
        let mut nodes = 0;
        if self.place(0, top, &mut partial) {
            self.descend(1, &mut partial, visit, &mut nodes);
        }
        nodes + 1
    }

    fn place(&self, level: usize, value: i64, partial: &mut [i64]) -> bool {
        let v = self.order[level];
        for (f, p) in partial.iter_mut().enumerate() {
            *p += self.weights[f][v] * value;
        }
        self.completes[level].iter().all(|&f| self.admissible(partial[f]))
    }

    fn unplace(&self, level: usize, value: i64, partial: &mut [i64]) {
        let v = self.order[level];
        for (f, p) in partial.iter_mut().enumerate() {
            *p -= self.weights[f][v] * value;
        }
    }

    fn descend(&self, level: usize, partial: &mut Vec<i64>, visit: &mut impl FnMut(&[i64]), nodes: &mut u64) {
        if level == self.order.len() {
            visit(partial);
            return;
        }
        let (lo, hi) = self.range(level, partial);
        for &c in self.slice(lo, hi) {
            *nodes += 1;
            if self.place(level, c, partial) {
                self.descend(level + 1, partial, visit, nodes);
            }
            self.unplace(level, c, partial);
        }
    }

    fn tally_from(&self, top: i64) -> Tally {
        let mut tally = Tally::default();
        let mut scratch = Vec::with_capacity(self.weights.len());
        tally.nodes = self.visit_from(top, &mut |vals| {
            tally.total += 1;
            scratch.clear();
            scratch.extend_from_slice(vals);
            scratch.sort_unstable();
            if scratch.windows(2).all(|w| w[0] != w[1]) {
                tally.distinct += 1;
            }
        });
        tally
    }

    /// Every admissible square, as form values, in search order.
    pub fn collect(&self) -> Vec<Vec<i64>> {
        let mut out = Vec::new();
        for top in self.top_candidates() {
            self.visit_from(top, &mut |vals| out.push(vals.to_vec()));
        }
        out
    }

    pub fn checked_forms(&self) -> &[usize] {
        &self.checked
    }
}

/// Progress of an interrupted census.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResumeToken {
    pub system: String,
    pub bound: u64,
    pub next_index: usize,
    pub tally: Tally,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusResult {
    pub n: Option<usize>,
    #[serde(rename = "N")]
    pub bound: u64,
    pub total_count: u128,
    pub distinct_entries_count: u128,
    pub predicted: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CensusOptions {
    /// Maximum search nodes before stopping with a resume token.
    pub budget: Option<u64>,
    /// Top-level values processed per parallel batch.
    pub batch: Option<usize>,
    /// Singular constant for the asymptotic prediction.
    pub singular_constant: Option<f64>,
}

/// `𝔖 · N^d / (ln N)^t`.
pub fn asymptotic_prediction(constant: f64, bound: f64, d: usize, t: usize) -> f64 {
    constant * bound.powi(d as i32) / bound.ln().powi(t as i32)
}

fn run(sys: &FormSystem, bound: u64, start: usize, mut tally: Tally, opts: &CensusOptions) -> Result<CensusResult, CensusError> {
    let search = SquareSearch::new(sys, bound, EntrySet::Primes)?;
    let tops = search.top_candidates();
    let batch = opts.batch.unwrap_or(64).max(1);
    let mut index = start;
    while index < tops.len() {
        if let Some(budget) = opts.budget {
            if tally.nodes >= budget {
                let token = ResumeToken { system: sys.content_hash(), bound, next_index: index, tally };
                return Err(CensusError::BudgetExceeded { budget, token });
            }
        }
        let end = (index + batch).min(tops.len());
        let part = tops[index..end].par_iter().map(|&top| search.tally_from(top)).reduce(Tally::default, |mut a, b| {
            a += b;
            a
        });
        tally += part;
        index = end;
    }
    let predicted = opts
        .singular_constant
        .filter(|_| bound >= 3)
        .map(|c| asymptotic_prediction(c, bound as f64, sys.d(), sys.t()));
    Ok(CensusResult {
        n: sys.side(),
        bound,
        total_count: tally.total,
        distinct_entries_count: tally.distinct,
        predicted,
        ratio: predicted.map(|p| tally.total as f64 / p),
    })
}

/// Counts the squares of the system with every entry a prime `≤ N`, and
/// those among them with pairwise distinct entries.
pub fn census(sys: &FormSystem, bound: u64, opts: &CensusOptions) -> Result<CensusResult, CensusError> {
    run(sys, bound, 0, Tally::default(), opts)
}

pub fn census_resume(sys: &FormSystem, token: &ResumeToken, opts: &CensusOptions) -> Result<CensusResult, CensusError> {
    if token.system != sys.content_hash() {
        return Err(CensusError::TokenMismatch);
    }
    run(sys, token.bound, token.next_index, token.tally, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatStats {
    #[serde(rename = "N")]
    pub bound: u64,
    pub total: u128,
    pub distinct: u128,
    pub repeated: u128,
    /// `repeated / max(N, 1)^(d−1)`.
    pub ratio: f64,
}

/// Squares with entries in `[0, N]` that repeat some entry, scaled by
/// `N^(d−1)`.
pub fn repeated_entry_bound_check(sys: &FormSystem, bound: u64) -> Result<RepeatStats, CensusError> {
    let search = SquareSearch::new(sys, bound, EntrySet::All)?;
    let tally = search.top_candidates().par_iter().map(|&top| search.tally_from(top)).reduce(Tally::default, |mut a, b| {
        a += b;
        a
    });
    let repeated = tally.total - tally.distinct;
    let scale = (bound.max(1) as f64).powi(sys.d() as i32 - 1);
    Ok(RepeatStats { bound, total: tally.total, distinct: tally.distinct, repeated, ratio: repeated as f64 / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magic_forms::build_system;

    #[test]
    fn sieve_examples() {
        assert_eq!(primes_up_to(10), vec![2, 3, 5, 7]);
        assert_eq!(primes_up_to(2), vec![2]);
        assert!(primes_up_to(1).is_empty());
        assert!(primes_up_to(0).is_empty());
        assert_eq!(primes_up_to(1_000_000).len(), 78498);
    }

    #[test]
    fn sieve_agrees_with_trial_division() {
        let table = sieve_primes(5000);
        for (v, &p) in table.iter().enumerate() {
            assert_eq!(p, crate::exact_linalg::is_prime_u64(v as u64), "{v}");
        }
    }

    #[test]
    fn tiny_censuses() {
        let sys = build_system(3).unwrap();
        let r = census(&sys, 2, &CensusOptions::default()).unwrap();
        assert_eq!((r.total_count, r.distinct_entries_count), (1, 0));
        let r = census(&sys, 1, &CensusOptions::default()).unwrap();
        assert_eq!(r.total_count, 0);
        let r = census(&sys, 0, &CensusOptions::default()).unwrap();
        assert_eq!(r.total_count, 0);
    }

    #[test]
    fn all_entries_reproduce_lattice_counts() {
        let s3 = build_system(3).unwrap();
        let e3 = [1u128, 2, 7, 12, 25, 38, 63, 88];
        for (n, &e) in e3.iter().enumerate() {
            let search = SquareSearch::new(&s3, n as u64, EntrySet::All).unwrap();
            assert_eq!(search.collect().len() as u128, e);
        }
        let s4 = build_system(4).unwrap();
        assert_eq!(repeated_entry_bound_check(&s4, 2).unwrap().total, 621);
    }

    #[test]
    fn small_bound_repeats() {
        let sys = build_system(3).unwrap();
        let zero = repeated_entry_bound_check(&sys, 0).unwrap();
        assert_eq!((zero.total, zero.repeated), (1, 1));
        assert_eq!(zero.ratio, 1.0);
        let two = repeated_entry_bound_check(&sys, 2).unwrap();
        assert_eq!((two.total, two.distinct, two.repeated), (7, 0, 7));
    }

    #[test]
    fn budget_and_resume_give_the_same_totals() {
        let sys = build_system(3).unwrap();
        let full = census(&sys, 500, &CensusOptions::default()).unwrap();
        let opts = CensusOptions { budget: Some(200), batch: Some(3), singular_constant: None };
        let mut attempt = census(&sys, 500, &opts);
        let mut rounds = 0;
        let result = loop {
            match attempt {
                Ok(r) => break r,
                Err(CensusError::BudgetExceeded { token, .. }) => {
                    rounds += 1;
                    let more = CensusOptions { budget: Some(token.tally.nodes + 200), ..opts };
                    attempt = census_resume(&sys, &token, &more);
                }
                Err(e) => panic!("{e}"),
            }
        };
        assert!(rounds > 1);
        assert_eq!(result, full);
    }

    #[test]
    fn foreign_token_is_rejected() {
        let s3 = build_system(3).unwrap();
        let s4 = build_system(4).unwrap();
        let token = ResumeToken { system: s3.content_hash(), bound: 5, next_index: 0, tally: Tally::default() };
        assert_eq!(census_resume(&s4, &token, &CensusOptions::default()), Err(CensusError::TokenMismatch));
    }

    #[test]
    fn prediction_is_reported_with_a_constant() {
        let sys = build_system(3).unwrap();
        let opts = CensusOptions { singular_constant: Some(25.818), ..Default::default() };
        let r = census(&sys, 100, &opts).unwrap();
        let p = r.predicted.unwrap();
        assert!((p - 25.818 * 1e6 / 100f64.ln().powi(9)).abs() < 1e-9 * p);
        assert!((r.ratio.unwrap() - r.total_count as f64 / p).abs() < 1e-12);
    }

    #[test]
    fn counted_squares_are_closed_under_symmetry() {
        use crate::magic_forms::Square;
        use std::collections::BTreeSet;
        let sys = build_system(3).unwrap();
        let search = SquareSearch::new(&sys, 400, EntrySet::Primes).unwrap();
        let squares: BTreeSet<Vec<i64>> = search.collect().into_iter().collect();
        assert!(!squares.is_empty());
        for cells in &squares {
            let sq = Square::from_cells(3, cells.clone());
            assert!(sq.is_magic());
            assert_eq!(sq.magic_sum(), Some(3 * sq.get(1, 1)));
            for image in sq.dihedral_images() {
                assert!(squares.contains(image.cells()), "{cells:?}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn census_is_monotone(a in 0u64..300, b in 0u64..300) {
                let sys = build_system(3).unwrap();
                let (lo, hi) = (a.min(b), a.max(b));
                let x = census(&sys, lo, &CensusOptions::default()).unwrap();
                let y = census(&sys, hi, &CensusOptions::default()).unwrap();
                prop_assert!(x.total_count <= y.total_count);
                prop_assert!(x.distinct_entries_count <= y.distinct_entries_count);
                prop_assert!(y.distinct_entries_count <= y.total_count);
            }
        }
    }
}
