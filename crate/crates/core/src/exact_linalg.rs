//! Exact integer and rational linear algebra.
//!
//! Everything here is arbitrary precision and floating-point free. Two
//! incremental helpers, [`SpanBasis`] and [`ModSpanBasis`], back the hot
//! loops of the subset-rank and partition searches; they work on small
//! machine integers and are cross-checked against the big-integer routines
//! in the tests.

use std::fmt;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact rational number, always kept in lowest terms with a positive
/// denominator.
pub type Rational = BigRational;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinalgError {
    #[error("{0} is not prime")]
    NotPrime(u64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("duplicate abscissa {0}")]
    DuplicateAbscissa(BigInt),
    #[error("interpolation of degree {degree} needs {} points, got {got}", degree + 1)]
    WrongPointCount { degree: usize, got: usize },
}

/// Dense integer matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<BigInt>,
}

impl IntMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        IntMatrix { rows, cols, entries: vec![BigInt::zero(); rows * cols] }
    }

    pub fn identity(size: usize) -> Self {
        let mut m = Self::zeros(size, size);
        for i in 0..size {
            m.set(i, i, BigInt::one());
        }
        m
    }

    /// Builds a matrix from rows of machine integers.
    ///
    /// Panics if the rows are ragged.
    pub fn from_rows<R: AsRef<[i64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut entries = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            entries.extend(r.iter().map(|&x| BigInt::from(x)));
        }
        IntMatrix { rows: rows.len(), cols, entries }
    }

    /// Builds a matrix with an explicit column count, so that empty row
    /// lists still carry their width.
    pub fn from_big_rows(rows: Vec<Vec<BigInt>>, cols: usize) -> Self {
        let mut entries = Vec::with_capacity(rows.len() * cols);
        let n = rows.len();
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            entries.extend(r);
        }
        IntMatrix { rows: n, cols, entries }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> &BigInt {
        &self.entries[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: BigInt) {
        self.entries[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[BigInt] {
        &self.entries[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<BigInt>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Rows converted to `i64`; `None` if any entry does not fit.
    pub fn to_i64_rows(&self) -> Option<Vec<Vec<i64>>> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|x| x.to_i64()).collect())
            .collect()
    }

    /// The submatrix formed by the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let rows = idx.iter().map(|&i| self.row(i).to_vec()).collect();
        Self::from_big_rows(rows, self.cols)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c).clone());
            }
        }
        t
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: &[BigInt]) -> Vec<BigInt> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(Zero::is_zero)
    }
}

impl fmt::Display for IntMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            let row: Vec<String> = self.row(r).iter().map(|x| x.to_string()).collect();
            writeln!(f, "[{}]", row.join(", "))?;
        }
        Ok(())
    }
}

/// Dense rational matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RatMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Rational>,
}

impl RatMatrix {
    pub fn from_rows(rows: Vec<Vec<Rational>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            entries.extend(r);
        }
        RatMatrix { rows: n, cols, entries }
    }

    pub fn identity(size: usize) -> Self {
        let rows = (0..size)
            .map(|i| {
                (0..size)
                    .map(|j| if i == j { Rational::one() } else { Rational::zero() })
                    .collect()
            })
            .collect();
        Self::from_rows(rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> &Rational {
        &self.entries[r * self.cols + c]
    }
}

impl From<&IntMatrix> for RatMatrix {
    fn from(m: &IntMatrix) -> Self {
        RatMatrix {
            rows: m.rows,
            cols: m.cols,
            entries: m.entries.iter().map(|x| Rational::from_integer(x.clone())).collect(),
        }
    }
}

/// Rank over the rationals by fraction-free (Bareiss) elimination.
pub fn rank_over_rationals(m: &IntMatrix) -> usize {
    let (rows, cols) = (m.rows, m.cols);
    let mut a = m.to_rows();
    let mut rank = 0;
    let mut prev = BigInt::one();
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let Some(p) = (rank..rows).find(|&i| !a[i][col].is_zero()) else {
            continue;
        };
        a.swap(p, rank);
        let (head, tail) = a.split_at_mut(rank + 1);
        let pivot_row = &head[rank];
        for row in tail.iter_mut() {
            let factor = row[col].clone();
            for j in col + 1..cols {
                let num = &pivot_row[col] * &row[j] - &factor * &pivot_row[j];
                debug_assert!((&num % &prev).is_zero(), "Bareiss division must be exact");
                row[j] = num / &prev;
            }
            row[col] = BigInt::zero();
        }
        prev = a[rank][col].clone();
        rank += 1;
    }
    rank
}

/// Row-style Hermite normal form under unimodular row operations.
///
/// Each nonzero row starts with a positive pivot strictly right of the pivot
/// above it; entries above a pivot lie in `[0, pivot)`. Zero rows are kept at
/// the bottom so the shape is preserved.
pub fn hermite_normal_form(m: &IntMatrix) -> IntMatrix {
    let (rows, cols) = (m.rows, m.cols);
    let mut a = m.to_rows();
    let mut pr = 0;
    for col in 0..cols {
        if pr == rows {
            break;
        }
        loop {
            let Some(k) = (pr..rows)
                .filter(|&i| !a[i][col].is_zero())
                .min_by(|&i, &j| a[i][col].abs().cmp(&a[j][col].abs()))
            else {
                break;
            };
            a.swap(k, pr);
            let mut clean = true;
            let (head, tail) = a.split_at_mut(pr + 1);
            let pivot_row = &head[pr];
            for row in tail.iter_mut() {
                if row[col].is_zero() {
                    continue;
                }
                let q = &row[col] / &pivot_row[col];
                if !q.is_zero() {
                    for j in col..cols {
                        row[j] -= &q * &pivot_row[j];
                    }
                }
                if !row[col].is_zero() {
                    clean = false;
                }
            }
            if clean {
                break;
            }
        }
        if a[pr][col].is_zero() {
            continue;
        }
        if a[pr][col].is_negative() {
            for x in a[pr].iter_mut() {
                *x = -&*x;
            }
        }
        let (head, tail) = a.split_at_mut(pr);
        let pivot_row = &tail[0];
        for row in head.iter_mut() {
            let q = row[col].div_floor(&pivot_row[col]);
            if !q.is_zero() {
                for j in col..cols {
                    row[j] -= &q * &pivot_row[j];
                }
            }
        }
        pr += 1;
    }
    IntMatrix::from_big_rows(a, cols)
}

/// Pivot entries (first nonzero of each nonzero row) of a matrix already in
/// Hermite normal form.
pub fn hnf_pivots(h: &IntMatrix) -> Vec<BigInt> {
    (0..h.rows)
        .filter_map(|r| h.row(r).iter().find(|x| !x.is_zero()).cloned())
        .collect()
}

/// Deterministic primality test by trial division; adequate for the
/// moduli used here (well below 2^40).
pub fn is_prime_u64(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    if n % 2 == 0 {
        return n == 2;
    }
    let mut f = 3u64;
    while f.saturating_mul(f) <= n {
        if n % f == 0 {
            return false;
        }
        f += 2;
    }
    true
}

/// Smallest prime strictly greater than `n`.
pub fn next_prime_after(n: u64) -> u64 {
    let mut c = n + 1;
    while !is_prime_u64(c) {
        c += 1;
    }
    c
}

fn reduce_mod(x: &BigInt, p: u64) -> u64 {
    x.mod_floor(&BigInt::from(p)).to_u64().expect("residue fits in u64")
}

/// Rank of `m` with entries reduced modulo the prime `p`.
pub fn rank_mod_p(m: &IntMatrix, p: u64) -> Result<usize, LinalgError> {
    if !is_prime_u64(p) {
        return Err(LinalgError::NotPrime(p));
    }
    let mut basis = ModSpanBasis::new(p, m.cols);
    for r in 0..m.rows {
        let row: Vec<u64> = m.row(r).iter().map(|x| reduce_mod(x, p)).collect();
        basis.insert_residues(row);
    }
    Ok(basis.rank())
}

/// Solves `a x = b` exactly. Returns `Ok(None)` when `a` is singular.
pub fn solve_exact(a: &RatMatrix, b: &[Rational]) -> Result<Option<Vec<Rational>>, LinalgError> {
    if a.rows != a.cols {
        return Err(LinalgError::DimensionMismatch(format!(
            "coefficient matrix is {}x{}, expected square",
            a.rows, a.cols
        )));
    }
    if b.len() != a.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "right-hand side has {} entries, matrix has {} rows",
            b.len(),
            a.rows
        )));
    }
    let n = a.rows;
    let mut aug: Vec<Vec<Rational>> = (0..n)
        .map(|r| {
            let mut row: Vec<Rational> = (0..n).map(|c| a.get(r, c).clone()).collect();
            row.push(b[r].clone());
            row
        })
        .collect();
    for col in 0..n {
        let Some(p) = (col..n).find(|&i| !aug[i][col].is_zero()) else {
            return Ok(None);
        };
        aug.swap(p, col);
        let inv = aug[col][col].recip();
        for x in aug[col].iter_mut() {
            *x *= &inv;
        }
        let pivot_row = aug[col].clone();
        for (i, row) in aug.iter_mut().enumerate() {
            if i == col || row[col].is_zero() {
                continue;
            }
            let f = row[col].clone();
            for (x, y) in row.iter_mut().zip(&pivot_row).skip(col) {
                *x -= &f * y;
            }
        }
    }
    Ok(Some(aug.into_iter().map(|mut r| r.pop().unwrap()).collect()))
}

/// Coefficients (constant term first) of the unique polynomial of degree at
/// most `degree` through the given points.
pub fn interpolate_poly(points: &[(BigInt, Rational)], degree: usize) -> Result<Vec<Rational>, LinalgError> {
    if points.len() != degree + 1 {
        return Err(LinalgError::WrongPointCount { degree, got: points.len() });
    }
    for (i, (x, _)) in points.iter().enumerate() {
        if points[..i].iter().any(|(y, _)| y == x) {
            return Err(LinalgError::DuplicateAbscissa(x.clone()));
        }
    }
    let xs: Vec<Rational> = points.iter().map(|(x, _)| Rational::from_integer(x.clone())).collect();
    // Newton divided differences, in place.
    let mut dd: Vec<Rational> = points.iter().map(|(_, y)| y.clone()).collect();
    for level in 1..=degree {
        for i in (level..=degree).rev() {
            dd[i] = (&dd[i] - &dd[i - 1]) / (&xs[i] - &xs[i - level]);
        }
    }
    // Horner expansion of the Newton form into monomial coefficients.
    let mut coeffs = vec![Rational::zero(); degree + 1];
    for i in (0..=degree).rev() {
        // coeffs <- coeffs * (x - xs[i]) + dd[i]
        let mut next = vec![Rational::zero(); degree + 1];
        for k in 0..degree {
            next[k + 1] += &coeffs[k];
            next[k] -= &coeffs[k] * &xs[i];
        }
        next[0] += &dd[i];
        coeffs = next;
    }
    Ok(coeffs)
}

/// Evaluates a polynomial given constant-term-first coefficients.
pub fn eval_poly(coeffs: &[Rational], x: &Rational) -> Rational {
    coeffs.iter().rev().fold(Rational::zero(), |acc, c| acc * x + c)
}

/// Least common multiple of a sequence of integers (1 for an empty one).
pub fn lcm_all<'a>(xs: impl IntoIterator<Item = &'a BigInt>) -> BigInt {
    xs.into_iter().fold(BigInt::one(), |acc, x| acc.lcm(x))
}

/// Renders a rational as `"p/q"`, or `"k"` when it is an integer.
pub fn format_rational(q: &Rational) -> String {
    q.to_string()
}

/// Parses `"p/q"` or `"k"`.
pub fn parse_rational(s: &str) -> Option<Rational> {
    let s = s.trim();
    match s.split_once('/') {
        Some((n, d)) => {
            let n: BigInt = n.trim().parse().ok()?;
            let d: BigInt = d.trim().parse().ok()?;
            if d.is_zero() {
                return None;
            }
            Some(Rational::new(n, d))
        }
        None => s.parse::<BigInt>().ok().map(Rational::from_integer),
    }
}

/// Serde adapters that render big integers as decimal strings.
pub mod bigint_serde {
    use num_bigint::BigInt;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigInt, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigInt, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| D::Error::custom(format!("bad integer {s:?}")))
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[BigInt], s: S) -> Result<S::Ok, S::Error> {
            let strs: Vec<String> = v.iter().map(BigInt::to_string).collect();
            serde::Serialize::serialize(&strs, s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigInt>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| s.parse().map_err(|_| D::Error::custom(format!("bad integer {s:?}"))))
                .collect()
        }
    }
}

/// Serde adapters that render rationals as `"p/q"` strings.
pub mod rational_serde {
    use super::{format_rational, parse_rational, Rational};
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(q: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_rational(q))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let s = String::deserialize(d)?;
        parse_rational(&s).ok_or_else(|| D::Error::custom(format!("bad rational {s:?}")))
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(v: &[Rational], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for q in v {
                seq.serialize_element(&format_rational(q))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Rational>, D::Error> {
            let v = Vec::<String>::deserialize(d)?;
            v.iter()
                .map(|s| parse_rational(s).ok_or_else(|| D::Error::custom(format!("bad rational {s:?}"))))
                .collect()
        }
    }

    pub mod vec_vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[Vec<Rational>], s: S) -> Result<S::Ok, S::Error> {
            let strs: Vec<Vec<String>> = v.iter().map(|r| r.iter().map(format_rational).collect()).collect();
            serde::Serialize::serialize(&strs, s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<Rational>>, D::Error> {
            let v = Vec::<Vec<String>>::deserialize(d)?;
            v.iter()
                .map(|r| {
                    r.iter()
                        .map(|s| parse_rational(s).ok_or_else(|| D::Error::custom(format!("bad rational {s:?}"))))
                        .collect()
                })
                .collect()
        }
    }
}

fn gcd_i128(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Incrementally grown row-echelon basis of a rational row space, kept as
/// primitive integer rows.
///
/// Intended for small coefficient vectors; arithmetic is checked and an
/// overflow panics rather than returning a wrong answer.
#[derive(Clone, Debug, Default)]
pub struct SpanBasis {
    rows: Vec<(usize, Vec<i128>)>,
}

impl SpanBasis {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rank(&self) -> usize {
        self.rows.len()
    }

    fn reduce(&self, v: &mut [i128]) {
        for (p, b) in &self.rows {
            let x = v[*p];
            if x == 0 {
                continue;
            }
            let bp = b[*p];
            let mut g = 0i128;
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi = vi
                    .checked_mul(bp)
                    .and_then(|l| bi.checked_mul(x).and_then(|r| l.checked_sub(r)))
                    .expect("span basis entry overflow");
                g = gcd_i128(g, *vi);
            }
            if g > 1 {
                v.iter_mut().for_each(|vi| *vi /= g);
            }
        }
    }

    /// Whether `v` lies in the span of the inserted rows.
    pub fn contains(&self, v: &[i64]) -> bool {
        let mut w: Vec<i128> = v.iter().map(|&x| x as i128).collect();
        self.reduce(&mut w);
        w.iter().all(|&x| x == 0)
    }

    /// Adds `v`; returns `true` if the rank increased.
    pub fn insert(&mut self, v: &[i64]) -> bool {
        let mut w: Vec<i128> = v.iter().map(|&x| x as i128).collect();
        self.reduce(&mut w);
        let Some(p) = w.iter().position(|&x| x != 0) else {
            return false;
        };
        let g = w.iter().fold(0, |g, &x| gcd_i128(g, x));
        let s = if w[p] < 0 { -g } else { g };
        w.iter_mut().for_each(|x| *x /= s);
        let at = self.rows.partition_point(|(q, _)| *q < p);
        self.rows.insert(at, (p, w));
        true
    }
}

/// Row-echelon basis over the field with `p` elements, rows normalized to a
/// unit pivot.
#[derive(Clone, Debug)]
pub struct ModSpanBasis {
    p: u64,
    width: usize,
    rows: Vec<(usize, Vec<u64>)>,
}

impl ModSpanBasis {
    pub fn new(p: u64, width: usize) -> Self {
        ModSpanBasis { p, width, rows: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.rows.len()
    }

    fn mulmod(&self, a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % self.p as u128) as u64
    }

    fn inv(&self, a: u64) -> u64 {
        // Fermat; p is prime.
        let mut result = 1u64;
        let mut base = a % self.p;
        let mut e = self.p - 2;
        while e > 0 {
            if e & 1 == 1 {
                result = self.mulmod(result, base);
            }
            base = self.mulmod(base, base);
            e >>= 1;
        }
        result
    }

    /// Reduces an integer row modulo `p`.
    pub fn residues(&self, v: &[i64]) -> Vec<u64> {
        v.iter().map(|&x| x.rem_euclid(self.p as i64) as u64).collect()
    }

    fn reduce(&self, w: &mut [u64]) {
        for (piv, b) in &self.rows {
            let x = w[*piv];
            if x == 0 {
                continue;
            }
            for (wi, bi) in w.iter_mut().zip(b) {
                let sub = self.mulmod(x, *bi);
                *wi = (*wi + self.p - sub) % self.p;
            }
        }
    }

    /// Adds a row already reduced into `[0, p)`; returns `true` if the rank
    /// increased.
    pub fn insert_residues(&mut self, mut w: Vec<u64>) -> bool {
        debug_assert_eq!(w.len(), self.width);
        self.reduce(&mut w);
        let Some(piv) = w.iter().position(|&x| x != 0) else {
            return false;
        };
        let inv = self.inv(w[piv]);
        for x in w.iter_mut() {
            *x = self.mulmod(*x, inv);
        }
        let at = self.rows.partition_point(|(q, _)| *q < piv);
        self.rows.insert(at, (piv, w));
        true
    }

    pub fn insert(&mut self, v: &[i64]) -> bool {
        let w = self.residues(v);
        self.insert_residues(w)
    }
}
