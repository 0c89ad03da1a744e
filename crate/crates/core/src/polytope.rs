//! Vertices of `K(1) = {x : 0 ≤ ψ_i(x) ≤ 1 for all i}`.
//!
//! A vertex is the unique solution of `d` tight constraints. Since the two
//! slabs of one form are parallel, the search runs over `d`-subsets of forms
//! and a 0/1 side for each, which for the 4×4 system is 12870 · 256 systems.

use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact_linalg::{bigint_serde, lcm_all, rank_over_rationals, rational_serde, IntMatrix, RatMatrix, Rational};
use crate::magic_forms::FormSystem;

/// Largest dimension accepted by [`enumerate_vertices`].
pub const MAX_VERTEX_DIMENSION: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolytopeError {
    #[error("vertex enumeration limited to d <= {MAX_VERTEX_DIMENSION}, got d = {0}")]
    DimensionTooLarge(usize),
    #[error("point has {got} coordinates, system has d = {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vertex {
    #[serde(with = "rational_serde::vec")]
    pub coordinates: Vec<Rational>,
}

impl Vertex {
    pub fn denominators(&self) -> impl Iterator<Item = &BigInt> {
        self.coordinates.iter().map(|q| q.denom())
    }
}

/// Vertices in lexicographic order together with their denominator lcm.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexSet {
    pub vertices: Vec<Vertex>,
    #[serde(with = "bigint_serde")]
    pub denominator_lcm: BigInt,
}

impl VertexSet {
    pub fn from_vertices(vertices: impl IntoIterator<Item = Vertex>) -> Self {
        let vertices: Vec<Vertex> = vertices.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let denominator_lcm = lcm_all(vertices.iter().flat_map(Vertex::denominators));
        VertexSet { vertices, denominator_lcm }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Least common multiple of every coordinate denominator.
pub fn denominator_lcm(vs: &VertexSet) -> BigInt {
    lcm_all(vs.vertices.iter().flat_map(Vertex::denominators))
}

fn combinations(t: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, t: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..=t - (k - cur.len()) {
            cur.push(i);
            go(i + 1, t, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= t {
        go(0, t, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

/// Integer matrix `M` and positive `L` with `B⁻¹ = M / L`, or `None` if `B`
/// is singular.
fn scaled_inverse(b: &IntMatrix) -> Option<(Vec<Vec<i64>>, i64)> {
    let d = b.rows();
    let rm = RatMatrix::from(b);
    let mut a: Vec<Vec<Rational>> = (0..d)
        .map(|r| {
            let mut row: Vec<Rational> = (0..d).map(|c| rm.get(r, c).clone()).collect();
            row.extend((0..d).map(|c| if c == r { Rational::one() } else { Rational::zero() }));
            row
        })
        .collect();
    for col in 0..d {
        let p = (col..d).find(|&r| !a[r][col].is_zero())?;
        a.swap(p, col);
        let inv = a[col][col].recip();
        for x in a[col].iter_mut() {
            *x *= &inv;
        }
        let pivot = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r == col || row[col].is_zero() {
                continue;
            }
            let f = row[col].clone();
            for (x, y) in row.iter_mut().zip(&pivot) {
                *x -= &f * y;
            }
        }
    }
    let l = lcm_all(a.iter().flat_map(|row| row[d..].iter().map(|q| q.denom())));
    let m = a
        .iter()
        .map(|row| {
            row[d..]
                .iter()
                .map(|q| (q * Rational::from_integer(l.clone())).to_integer().to_i64().expect("small adjugate"))
                .collect()
        })
        .collect();
    Some((m, l.to_i64().expect("small determinant")))
}

fn vertices_of_subset(rows: &[Vec<i64>], subset: &[usize]) -> Vec<Vertex> {
    let d = subset.len();
    let b = IntMatrix::from_rows(&subset.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>());
    let Some((m, l)) = scaled_inverse(&b) else {
        return Vec::new();
    };
    // ψ_k(M b / L) · L = w_k · b
    let others: Vec<Vec<i64>> = (0..rows.len())
        .filter(|k| !subset.contains(k))
        .map(|k| (0..d).map(|j| (0..d).map(|r| rows[k][r] * m[r][j]).sum()).collect())
        .collect();
    let mut found = Vec::new();
    for sides in 0u32..(1 << d) {
        let bit = |j: usize| i64::from((sides >> j) & 1 == 1);
        let inside = others.iter().all(|w| {
            let v: i64 = (0..d).map(|j| w[j] * bit(j)).sum();
            (0..=l).contains(&v)
        });
        if inside {
            let coordinates = (0..d)
                .map(|r| {
                    let num: i64 = (0..d).map(|j| m[r][j] * bit(j)).sum();
                    Rational::new(num.into(), l.into())
                })
                .collect();
            found.push(Vertex { coordinates });
        }
    }
    found
}

/// Exact vertex set of `K(1)` for the system.
pub fn enumerate_vertices(sys: &FormSystem) -> Result<VertexSet, PolytopeError> {
    let d = sys.d();
    if d > MAX_VERTEX_DIMENSION {
        return Err(PolytopeError::DimensionTooLarge(d));
    }
    let rows = sys.rows();
    let found: BTreeSet<Vertex> = combinations(sys.t(), d)
        .par_iter()
        .map(|s| vertices_of_subset(&rows, s).into_iter().collect::<BTreeSet<_>>())
        .reduce(BTreeSet::new, |mut a, mut b| {
            a.append(&mut b);
            a
        });
    Ok(VertexSet::from_vertices(found))
}

fn check_dimension(sys: &FormSystem, x: &[Rational]) -> Result<(), PolytopeError> {
    if x.len() != sys.d() {
        Err(PolytopeError::DimensionMismatch { expected: sys.d(), got: x.len() })
    } else {
        Ok(())
    }
}

/// Whether `0 ≤ ψ_i(x) ≤ N` for every form.
pub fn contains(sys: &FormSystem, x: &[Rational], n: u64) -> Result<bool, PolytopeError> {
    check_dimension(sys, x)?;
    let upper = Rational::from_integer(n.into());
    Ok(sys.forms().iter().all(|f| {
        let v = f.eval_rational(x);
        !v.is_negative() && v <= upper
    }))
}

/// Rank of the constraints of `K(1)` that are tight at `x`.
pub fn tight_rank(sys: &FormSystem, x: &[Rational]) -> Result<usize, PolytopeError> {
    check_dimension(sys, x)?;
    let tight: Vec<Vec<i64>> = sys
        .forms()
        .iter()
        .filter(|f| {
            let v = f.eval_rational(x);
            v.is_zero() || v.is_one()
        })
        .map(|f| f.coefficients.clone())
        .collect();
    if tight.is_empty() {
        return Ok(0);
    }
    Ok(rank_over_rationals(&IntMatrix::from_rows(&tight)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_linalg::solve_exact;
    use crate::magic_forms::build_system;

    fn q(n: i64, d: i64) -> Rational {
        Rational::new(n.into(), d.into())
    }

    fn ints(v: &[i64]) -> Vec<Rational> {
        v.iter().map(|&x| q(x, 1)).collect()
    }

    /// Oracle: every choice of d constraints from the 2t bounding
    /// hyperplanes, solved directly.
    fn brute_force_vertices(sys: &FormSystem) -> BTreeSet<Vertex> {
        let d = sys.d();
        let mut out = BTreeSet::new();
        for subset in combinations(2 * sys.t(), d) {
            let a = RatMatrix::from(&IntMatrix::from_rows(
                &subset.iter().map(|&h| sys.form(h / 2).coefficients.clone()).collect::<Vec<_>>(),
            ));
            let b: Vec<Rational> = subset.iter().map(|&h| q((h % 2) as i64, 1)).collect();
            if let Ok(Some(x)) = solve_exact(&a, &b) {
                if contains(sys, &x, 1).unwrap() {
                    out.insert(Vertex { coordinates: x });
                }
            }
        }
        out
    }

    #[test]
    fn three_by_three_vertices_match_oracle() {
        let sys = build_system(3).unwrap();
        let vs = enumerate_vertices(&sys).unwrap();
        let oracle: Vec<Vertex> = brute_force_vertices(&sys).into_iter().collect();
        assert_eq!(vs.vertices, oracle);
        assert_eq!(vs.denominator_lcm, BigInt::from(2));
        assert_eq!(denominator_lcm(&vs), BigInt::from(2));
        let has = |v: Vec<Rational>| vs.vertices.contains(&Vertex { coordinates: v });
        assert!(has(ints(&[0, 0, 0])));
        assert!(has(ints(&[1, 0, 0])));
        assert!(has(vec![q(1, 2), q(1, 2), q(0, 1)]));
        assert!(!has(vec![q(1, 2), q(0, 1), q(0, 1)]));
    }

    #[test]
    fn unit_square_has_integer_vertices() {
        let sys = FormSystem::new(None, vec![vec![1, 0], vec![0, 1]], vec![1, 2], vec![1, 1]).unwrap();
        let vs = enumerate_vertices(&sys).unwrap();
        assert_eq!(vs.len(), 4);
        assert_eq!(vs.denominator_lcm, BigInt::from(1));
    }

    #[test]
    fn containment_examples() {
        let s3 = build_system(3).unwrap();
        assert_eq!(contains(&s3, &ints(&[1, 0, 0]), 1), Ok(true));
        assert_eq!(contains(&s3, &ints(&[1, 1, 1]), 1), Ok(false));
        assert_eq!(contains(&s3, &ints(&[1, 1, 1]), 3), Ok(false));
        assert_eq!(contains(&s3, &ints(&[3, 1, 1]), 6), Ok(true));
        assert_eq!(
            contains(&s3, &ints(&[1, 0]), 1),
            Err(PolytopeError::DimensionMismatch { expected: 3, got: 2 })
        );
    }

    #[test]
    fn large_dimension_is_refused() {
        let s5 = build_system(5).unwrap();
        assert_eq!(enumerate_vertices(&s5), Err(PolytopeError::DimensionTooLarge(15)));
    }

    #[test]
    fn half_unit_point_is_interior() {
        let s4 = build_system(4).unwrap();
        let half = vec![q(1, 2); 8];
        assert_eq!(contains(&s4, &half, 1), Ok(true));
        assert_eq!(tight_rank(&s4, &half), Ok(0));
    }

    #[test]
    fn combination_counts() {
        assert_eq!(combinations(16, 8).len(), 12870);
        assert_eq!(combinations(9, 3).len(), 84);
        assert_eq!(combinations(3, 0), vec![Vec::<usize>::new()]);
    }
}
