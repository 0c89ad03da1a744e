//! Local factors `β_p = E_{m ∈ ℤ_p^d} Π_i Λ_p(ψ_i(m))`, where `Λ_p(0) = 0` and
//! `Λ_p(b) = p/(p−1)` otherwise.
//!
//! The number of `m ∈ ℤ_p^d` with no form vanishing is, by
//! inclusion–exclusion over subsets `S` of forms,
//! `Σ_S (−1)^|S| p^(d − rank_p S)`. Once `p` exceeds every Hermite pivot of
//! every subset matrix, mod-p ranks equal rational ranks and the count is a
//! fixed integer polynomial in `p`.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_traits::{One, Pow, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact_linalg::{
    bigint_serde, hermite_normal_form, hnf_pivots, is_prime_u64, next_prime_after, rational_serde, IntMatrix, ModSpanBasis,
    Rational, SpanBasis,
};
use crate::magic_forms::FormSystem;

/// Largest number of forms for subset enumeration.
pub const MAX_SUBSET_FORMS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LocalError {
    #[error("{0} is not prime")]
    NotPrime(u64),
    #[error("subset enumeration limited to t <= {MAX_SUBSET_FORMS}, got t = {0}")]
    TooManyForms(usize),
}

/// Counts of `k`-subsets of forms by the rank of their coefficient matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankSpectrum {
    pub t: usize,
    pub d: usize,
    /// `None` for ranks over ℚ, `Some(p)` for ranks over `𝔽_p`.
    pub modulus: Option<u64>,
    /// `by_size[k]` maps rank to the number of `k`-subsets with that rank.
    pub by_size: Vec<BTreeMap<usize, u64>>,
}

impl RankSpectrum {
    pub fn count(&self, size: usize, rank: usize) -> u64 {
        self.by_size.get(size).and_then(|m| m.get(&rank)).copied().unwrap_or(0)
    }

    /// `Σ_{k,r} (−1)^k N_{k,r} p^(d−r)`.
    pub fn inclusion_exclusion(&self, p: u64) -> BigInt {
        let p = BigInt::from(p);
        let mut total = BigInt::zero();
        for (k, ranks) in self.by_size.iter().enumerate() {
            for (&r, &n) in ranks {
                let term = BigInt::from(n) * Pow::pow(&p, (self.d - r) as u32);
                if k % 2 == 0 {
                    total += term;
                } else {
                    total -= term;
                }
            }
        }
        total
    }
}

fn guard(sys: &FormSystem) -> Result<(), LocalError> {
    if sys.t() > MAX_SUBSET_FORMS {
        Err(LocalError::TooManyForms(sys.t()))
    } else {
        Ok(())
    }
}

trait Basis: Clone + Send + Sync {
    fn add(&mut self, v: &[i64]);
    fn dim(&self) -> usize;
}

impl Basis for SpanBasis {
    fn add(&mut self, v: &[i64]) {
        self.insert(v);
    }
    fn dim(&self) -> usize {
        self.rank()
    }
}

impl Basis for ModSpanBasis {
    fn add(&mut self, v: &[i64]) {
        self.insert(v);
    }
    fn dim(&self) -> usize {
        self.rank()
    }
}

/// Visits every nonempty subset in lexicographic DFS order, extending the
/// parent's basis by one row, and tallies (size, rank).
fn spectrum_with<B: Basis>(rows: &[Vec<i64>], empty: B) -> Vec<BTreeMap<usize, u64>> {
    fn go<B: Basis>(rows: &[Vec<i64>], start: usize, size: usize, basis: &B, tally: &mut Vec<Vec<u64>>) {
        for j in start..rows.len() {
            let mut next = basis.clone();
            next.add(&rows[j]);
            tally[size + 1][next.dim()] += 1;
            go(rows, j + 1, size + 1, &next, tally);
        }
    }
    let t = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let tallies: Vec<Vec<Vec<u64>>> = (0..t)
        .into_par_iter()
        .map(|first| {
            let mut tally = vec![vec![0u64; d + 1]; t + 1];
            let mut b = empty.clone();
            b.add(&rows[first]);
            tally[1][b.dim()] += 1;
            go(rows, first + 1, 1, &b, &mut tally);
            tally
        })
        .collect();
    let mut by_size = vec![BTreeMap::new(); t + 1];
    by_size[0].insert(0, 1);
    for tally in tallies {
        for (k, ranks) in tally.iter().enumerate() {
            for (r, &n) in ranks.iter().enumerate() {
                if n > 0 {
                    *by_size[k].entry(r).or_insert(0) += n;
                }
            }
        }
    }
    by_size
}

/// Rational ranks of all subsets of forms, by size. Size 0 holds the empty
/// set with rank 0.
pub fn rank_spectrum(sys: &FormSystem) -> Result<RankSpectrum, LocalError> {
    guard(sys)?;
    Ok(RankSpectrum { t: sys.t(), d: sys.d(), modulus: None, by_size: spectrum_with(&sys.rows(), SpanBasis::new()) })
}

/// Ranks over `𝔽_p` of all subsets of forms, by size.
pub fn rank_spectrum_mod_p(sys: &FormSystem, p: u64) -> Result<RankSpectrum, LocalError> {
    guard(sys)?;
    if !is_prime_u64(p) {
        return Err(LocalError::NotPrime(p));
    }
    Ok(RankSpectrum {
        t: sys.t(),
        d: sys.d(),
        modulus: Some(p),
        by_size: spectrum_with(&sys.rows(), ModSpanBasis::new(p, sys.d())),
    })
}

/// Largest Hermite pivot over all subset matrices. The HNF of a subset is
/// computed from its parent's HNF with the new row appended, which spans
/// the same lattice.
pub fn max_hnf_pivot(sys: &FormSystem) -> Result<BigInt, LocalError> {
    guard(sys)?;
    fn go(rows: &[Vec<i64>], start: usize, parent: &[Vec<BigInt>], d: usize) -> BigInt {
        let mut best = BigInt::zero();
        for j in start..rows.len() {
            let mut stacked: Vec<Vec<BigInt>> = parent.to_vec();
            stacked.push(rows[j].iter().map(|&c| BigInt::from(c)).collect());
            let n = stacked.len();
            let h = hermite_normal_form(&IntMatrix::from_big_rows(stacked, d));
            let pivots = hnf_pivots(&h);
            if let Some(m) = pivots.iter().max() {
                best = best.max(m.clone());
            }
            let kept: Vec<Vec<BigInt>> = h.to_rows().into_iter().take(n).filter(|r| r.iter().any(|x| !x.is_zero())).collect();
            best = best.max(go(rows, j + 1, &kept, d));
        }
        best
    }
    let rows = sys.rows();
    let d = sys.d();
    Ok((0..rows.len())
        .into_par_iter()
        .map(|first| {
            let row: Vec<BigInt> = rows[first].iter().map(|&c| BigInt::from(c)).collect();
            let h = hermite_normal_form(&IntMatrix::from_big_rows(vec![row], d));
            let start = hnf_pivots(&h).into_iter().max().unwrap_or_default();
            start.max(go(&rows, first + 1, &h.to_rows(), d))
        })
        .reduce(BigInt::zero, |a, b| a.max(b)))
}

/// The first prime beyond every Hermite pivot of every subset matrix.
pub fn stability_threshold(sys: &FormSystem) -> Result<u64, LocalError> {
    let m = max_hnf_pivot(sys)?.to_u64().expect("pivot fits u64");
    Ok(next_prime_after(m))
}

/// `count(p) = P(p)` for every prime `p ≥ p₀`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StableLocalPolynomial {
    /// Coefficients of `P`, constant term first; degree `d`.
    #[serde(with = "bigint_serde::vec")]
    pub coefficients: Vec<BigInt>,
    pub p0: u64,
}

impl StableLocalPolynomial {
    pub fn eval(&self, p: u64) -> BigInt {
        let p = BigInt::from(p);
        self.coefficients.iter().rev().fold(BigInt::zero(), |acc, c| acc * &p + c)
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// Human-readable form in the variable `p`, highest power first.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, c) in self.coefficients.iter().enumerate().rev() {
            if c.is_zero() {
                continue;
            }
            let mag = c.abs();
            if out.is_empty() {
                if c.is_negative() {
                    out.push('-');
                }
            } else {
                out.push_str(if c.is_negative() { " - " } else { " + " });
            }
            let coef = if mag.is_one() && k > 0 { String::new() } else { mag.to_string() };
            out.push_str(&match k {
                0 => coef,
                1 => format!("{coef}p"),
                _ => format!("{coef}p^{k}"),
            });
        }
        if out.is_empty() {
            out.push('0');
        }
        out
    }
}

/// Assembles the stable polynomial from the rational rank spectrum.
pub fn stable_polynomial(sys: &FormSystem) -> Result<StableLocalPolynomial, LocalError> {
    let spectrum = rank_spectrum(sys)?;
    let p0 = stability_threshold(sys)?;
    Ok(polynomial_from_spectrum(&spectrum, p0))
}

pub fn polynomial_from_spectrum(spectrum: &RankSpectrum, p0: u64) -> StableLocalPolynomial {
    let d = spectrum.d;
    let mut coefficients = vec![BigInt::zero(); d + 1];
    for (k, ranks) in spectrum.by_size.iter().enumerate() {
        for (&r, &n) in ranks {
            let n = BigInt::from(n);
            if k % 2 == 0 {
                coefficients[d - r] += n;
            } else {
                coefficients[d - r] -= n;
            }
        }
    }
    StableLocalPolynomial { coefficients, p0 }
}

/// The two leading coefficients of the stable polynomial without subset
/// enumeration: `p^d` from the empty set, and `p^(d−1)` equal to minus the
/// number of distinct directions among the forms (each class of mutually
/// proportional forms contributes `Σ_{k≥1} (−1)^k C(g,k) = −1`).
pub fn leading_coefficients(sys: &FormSystem) -> (BigInt, BigInt) {
    let mut directions: Vec<Vec<i64>> = sys
        .forms()
        .iter()
        .map(|f| {
            let g = f.coefficients.iter().fold(0i64, |g, &c| num_integer::gcd(g, c));
            let lead = f.coefficients.iter().find(|&&c| c != 0).copied().unwrap_or(1);
            let s = if lead < 0 { -g } else { g };
            f.coefficients.iter().map(|c| c / s).collect()
        })
        .collect();
    directions.sort();
    directions.dedup();
    (BigInt::one(), -BigInt::from(directions.len()))
}

/// Number of `m ∈ ℤ_p^d` at which no form vanishes modulo `p`.
pub fn nonvanishing_count(sys: &FormSystem, p: u64) -> Result<BigInt, LocalError> {
    Ok(rank_spectrum_mod_p(sys, p)?.inclusion_exclusion(p))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalFactor {
    pub p: u64,
    #[serde(with = "bigint_serde")]
    pub nonvanishing_count: BigInt,
    #[serde(with = "rational_serde")]
    pub beta: Rational,
}

/// `β_p = count / p^d · (p/(p−1))^t`.
pub fn beta_from_count(count: &BigInt, p: u64, d: usize, t: usize) -> Rational {
    let pb = BigInt::from(p);
    let num = count * Pow::pow(&pb, t as u32);
    let den = Pow::pow(&pb, d as u32) * Pow::pow(&(pb - 1u32), t as u32);
    Rational::new(num, den)
}

/// Exact `β_p` by mod-p inclusion–exclusion.
pub fn local_factor(sys: &FormSystem, p: u64) -> Result<LocalFactor, LocalError> {
    let count = nonvanishing_count(sys, p)?;
    let beta = beta_from_count(&count, p, sys.d(), sys.t());
    Ok(LocalFactor { p, nonvanishing_count: count, beta })
}

/// Precomputed data for repeated local factors of one system: primes below
/// `p₀` use mod-p inclusion–exclusion, the rest the stable polynomial.
#[derive(Clone, Debug)]
pub struct LocalFactorTable {
    pub d: usize,
    pub t: usize,
    pub spectrum: RankSpectrum,
    pub polynomial: StableLocalPolynomial,
    rows: Vec<Vec<i64>>,
}

impl LocalFactorTable {
    pub fn new(sys: &FormSystem) -> Result<Self, LocalError> {
        let spectrum = rank_spectrum(sys)?;
        let p0 = stability_threshold(sys)?;
        let polynomial = polynomial_from_spectrum(&spectrum, p0);
        Ok(LocalFactorTable { d: sys.d(), t: sys.t(), spectrum, polynomial, rows: sys.rows() })
    }

    pub fn p0(&self) -> u64 {
        self.polynomial.p0
    }

    pub fn count(&self, p: u64) -> Result<BigInt, LocalError> {
        if !is_prime_u64(p) {
            return Err(LocalError::NotPrime(p));
        }
        if p >= self.p0() {
            return Ok(self.polynomial.eval(p));
        }
        let by_size = spectrum_with(&self.rows, ModSpanBasis::new(p, self.d));
        Ok(RankSpectrum { t: self.t, d: self.d, modulus: Some(p), by_size }.inclusion_exclusion(p))
    }

    pub fn local_factor(&self, p: u64) -> Result<LocalFactor, LocalError> {
        let count = self.count(p)?;
        let beta = beta_from_count(&count, p, self.d, self.t);
        Ok(LocalFactor { p, nonvanishing_count: count, beta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magic_forms::build_system;

    fn q(n: i64, d: i64) -> Rational {
        Rational::new(n.into(), d.into())
    }

    /// Oracle: scan `ℤ_p^d`.
    fn brute_nonvanishing(sys: &FormSystem, p: u64) -> u64 {
        let d = sys.d();
        let p = p as i64;
        let mut m = vec![0i64; d];
        let mut total = 0;
        loop {
            if sys.forms().iter().all(|f| f.eval(&m).rem_euclid(p) != 0) {
                total += 1;
            }
            let mut k = 0;
            loop {
                if k == d {
                    return total;
                }
                m[k] += 1;
                if m[k] < p {
                    break;
                }
                m[k] = 0;
                k += 1;
            }
        }
    }

    #[test]
    fn three_by_three_spectrum() {
        let sys = build_system(3).unwrap();
        let s = rank_spectrum(&sys).unwrap();
        assert_eq!(s.by_size[1], BTreeMap::from([(1, 9)]));
        assert_eq!(s.by_size[3], BTreeMap::from([(2, 8), (3, 76)]));
        for k in 0..=9 {
            let total: u64 = s.by_size[k].values().sum();
            let binom = (0..k as u64).fold(1u64, |acc, i| acc * (9 - i) / (i + 1));
            assert_eq!(total, binom);
        }
    }

    #[test]
    fn hnf_threshold_examples() {
        let s3 = build_system(3).unwrap();
        assert_eq!(max_hnf_pivot(&s3).unwrap(), BigInt::from(4));
        assert_eq!(stability_threshold(&s3).unwrap(), 5);
        let unimodular = FormSystem::new(None, vec![vec![1, 0], vec![0, 1]], vec![1, 2], vec![1, 1]).unwrap();
        assert_eq!(stability_threshold(&unimodular).unwrap(), 2);
    }

    #[test]
    fn three_by_three_polynomial() {
        let sys = build_system(3).unwrap();
        let poly = stable_polynomial(&sys).unwrap();
        let c: Vec<BigInt> = [-20, 28, -9, 1].iter().map(|&x| BigInt::from(x)).collect();
        assert_eq!(poly.coefficients, c);
        assert_eq!(poly.p0, 5);
        assert_eq!(poly.render(), "p^3 - 9p^2 + 28p - 20");
        assert_eq!(poly.eval(7), BigInt::from(78));
        assert_eq!(nonvanishing_count(&sys, 7).unwrap(), BigInt::from(78));
        assert_eq!(leading_coefficients(&sys), (BigInt::one(), BigInt::from(-9)));
    }

    #[test]
    fn three_by_three_small_primes() {
        let sys = build_system(3).unwrap();
        assert_eq!(nonvanishing_count(&sys, 2).unwrap(), BigInt::from(1));
        assert_eq!(nonvanishing_count(&sys, 3).unwrap(), BigInt::from(2));
        assert_eq!(nonvanishing_count(&sys, 5).unwrap(), BigInt::from(20));
        assert_eq!(brute_nonvanishing(&sys, 5), 20);
        assert_eq!(local_factor(&sys, 2).unwrap().beta, q(64, 1));
        assert_eq!(local_factor(&sys, 3).unwrap().beta, q(729, 256));
        assert_eq!(local_factor(&sys, 5).unwrap().beta, q(78125, 65536));
        assert_eq!(nonvanishing_count(&sys, 4), Err(LocalError::NotPrime(4)));
    }

    #[test]
    fn inclusion_exclusion_matches_scan_for_three() {
        let sys = build_system(3).unwrap();
        for p in [2u64, 3, 5, 7, 11, 13] {
            assert_eq!(nonvanishing_count(&sys, p).unwrap(), BigInt::from(brute_nonvanishing(&sys, p)), "p = {p}");
        }
    }

    #[test]
    fn table_switches_to_polynomial() {
        let sys = build_system(3).unwrap();
        let table = LocalFactorTable::new(&sys).unwrap();
        for p in [2u64, 3, 5, 7, 11, 101] {
            assert_eq!(table.count(p).unwrap(), nonvanishing_count(&sys, p).unwrap());
        }
        assert_eq!(table.count(9), Err(LocalError::NotPrime(9)));
    }

    #[test]
    fn beta_is_close_to_one_for_large_primes() {
        let sys = build_system(3).unwrap();
        let table = LocalFactorTable::new(&sys).unwrap();
        let mut worst = Rational::zero();
        for p in (5u64..2000).filter(|&p| is_prime_u64(p)) {
            let b = table.local_factor(p).unwrap().beta;
            assert!(b > Rational::zero());
            let scaled = (b - Rational::one()).abs() * Rational::from_integer((p * p).into());
            if p > 100 {
                assert!(scaled <= worst, "p = {p}");
            }
            worst = worst.max(scaled);
        }
        assert!(worst < q(100, 1));
    }

    #[test]
    fn guards() {
        let s5 = build_system(5).unwrap();
        assert_eq!(rank_spectrum(&s5), Err(LocalError::TooManyForms(25)));
        assert_eq!(leading_coefficients(&s5), (BigInt::one(), BigInt::from(-25)));
    }

    #[test]
    fn proportional_forms_share_a_direction() {
        let sys = FormSystem::new(None, vec![vec![1, 0], vec![0, 1], vec![-1, 2]], vec![1, 2], vec![1, 1]).unwrap();
        assert_eq!(leading_coefficients(&sys).1, BigInt::from(-3));
        let poly = stable_polynomial(&sys).unwrap();
        assert_eq!(poly.coefficients[1], BigInt::from(-3));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_system() -> impl Strategy<Value = FormSystem> {
            prop::collection::vec(prop::collection::vec(-3i64..=3, 2), 1..5).prop_map(|extra| {
                let mut rows = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
                for e in extra {
                    rows.push(vec![e[0], e[1], 1 - e[0] - e[1]]);
                }
                FormSystem::new(None, rows, vec![1, 2, 3], vec![1, 1, 1]).unwrap()
            })
        }

        proptest! {
            #[test]
            fn inclusion_exclusion_matches_scan(sys in small_system(), p in prop::sample::select(vec![2u64, 3, 5, 7, 11])) {
                prop_assert_eq!(nonvanishing_count(&sys, p).unwrap(), BigInt::from(brute_nonvanishing(&sys, p)));
            }

            #[test]
            fn polynomial_holds_from_threshold(sys in small_system()) {
                let poly = stable_polynomial(&sys).unwrap();
                prop_assert_eq!(poly.coefficients[3].clone(), BigInt::one());
                prop_assert_eq!(poly.coefficients[2].clone(), leading_coefficients(&sys).1);
                for p in (poly.p0..poly.p0 + 30).filter(|&p| is_prime_u64(p)) {
                    prop_assert_eq!(poly.eval(p), BigInt::from(brute_nonvanishing(&sys, p)));
                }
            }

            #[test]
            fn spectrum_sizes_are_binomial(sys in small_system()) {
                let s = rank_spectrum(&sys).unwrap();
                let t = sys.t() as u64;
                let mut binom = 1u64;
                for k in 0..=sys.t() {
                    prop_assert_eq!(s.by_size[k].values().sum::<u64>(), binom);
                    prop_assert!(s.by_size[k].keys().all(|&r| r <= k.min(sys.d())));
                    binom = binom * (t - k as u64) / (k as u64 + 1);
                }
            }
        }
    }
}
