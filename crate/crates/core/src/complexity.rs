//! Cauchy–Schwarz complexity of a system of linear forms.
//!
//! Form `ψ_i` has i-complexity at most `s` when the other `t − 1` forms split
//! into `s + 1` sets none of whose ℚ-spans contains `ψ_i`. Small systems are
//! searched exhaustively; the elephant systems (`n ≥ 5`) are certified with
//! explicit two-block partitions.

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact_linalg::{IntMatrix, SpanBasis};
use crate::magic_forms::{FormSystem, LinearForm};

/// Largest `t` accepted by the exhaustive partition search.
pub const EXHAUSTIVE_MAX_FORMS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ComplexityError {
    #[error("malformed partition: {0}")]
    MalformedPartition(String),
    #[error("t = {t} forms exceeds the exhaustive limit of {EXHAUSTIVE_MAX_FORMS}; use certificate mode")]
    TooManyForms { t: usize },
    #[error("certificate mode needs an elephant system (n >= 5)")]
    NoCertificateMode,
    #[error("nontrivial forms admit no unit-pivot reduction")]
    NoUnitReduction,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCertificate {
    pub form_index: usize,
    pub blocks: Vec<Vec<usize>>,
}

impl PartitionCertificate {
    /// The `s` this certificate witnesses.
    pub fn bound(&self) -> usize {
        self.blocks.len().saturating_sub(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityMode {
    Exhaustive,
    Certificate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// `None` when some form has infinite i-complexity.
    pub complexity: Option<usize>,
    pub mode: ComplexityMode,
    pub certificates: Vec<PartitionCertificate>,
    /// A form whose i-complexity equals the reported complexity.
    pub lower_bound_witness: Option<usize>,
}

/// Whether `target` is a ℚ-linear combination of `set`.
///
/// All forms in this crate are homogeneous, so the affine span is taken to be
/// the linear span.
pub fn in_affine_span<'a>(target: &LinearForm, set: impl IntoIterator<Item = &'a LinearForm>) -> bool {
    let mut basis = SpanBasis::new();
    for f in set {
        basis.insert(&f.coefficients);
    }
    basis.contains(&target.coefficients)
}

/// Whether the certificate's blocks keep its form out of every block's span.
pub fn verify_certificate(sys: &FormSystem, cert: &PartitionCertificate) -> Result<bool, ComplexityError> {
    let t = sys.t();
    let i = cert.form_index;
    if i >= t {
        return Err(ComplexityError::MalformedPartition(format!("form index {i} out of range")));
    }
    let mut seen = vec![false; t];
    seen[i] = true;
    for block in &cert.blocks {
        if block.is_empty() {
            return Err(ComplexityError::MalformedPartition("empty block".into()));
        }
        for &j in block {
            if j >= t || seen[j] {
                return Err(ComplexityError::MalformedPartition(format!("index {j} repeated or out of range")));
            }
            seen[j] = true;
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(ComplexityError::MalformedPartition("blocks do not cover the other forms".into()));
    }
    let target = sys.form(i);
    Ok(cert.blocks.iter().all(|b| !in_affine_span(target, b.iter().map(|&j| sys.form(j)))))
}

struct PartitionSearch<'a> {
    sys: &'a FormSystem,
    target: &'a [i64],
    others: Vec<usize>,
    max_blocks: usize,
    blocks: Vec<(Vec<usize>, SpanBasis)>,
}

impl PartitionSearch<'_> {
    fn run(&mut self, k: usize) -> bool {
        if k == self.others.len() {
            return true;
        }
        let j = self.others[k];
        let coeffs = &self.sys.form(j).coefficients;
        for b in 0..self.blocks.len() {
            let saved = self.blocks[b].1.clone();
            self.blocks[b].1.insert(coeffs);
            if !self.blocks[b].1.contains(self.target) {
                self.blocks[b].0.push(j);
                if self.run(k + 1) {
                    return true;
                }
                self.blocks[b].0.pop();
            }
            self.blocks[b].1 = saved;
        }
        if self.blocks.len() < self.max_blocks {
            let mut span = SpanBasis::new();
            span.insert(coeffs);
            if !span.contains(self.target) {
                self.blocks.push((vec![j], span));
                if self.run(k + 1) {
                    return true;
                }
                self.blocks.pop();
            }
        }
        false
    }
}

/// Searches partitions of the other forms into at most `max_blocks` sets.
fn find_partition(sys: &FormSystem, i: usize, max_blocks: usize) -> Option<PartitionCertificate> {
    let others: Vec<usize> = (0..sys.t()).filter(|&j| j != i).collect();
    if others.is_empty() {
        return Some(PartitionCertificate { form_index: i, blocks: vec![] });
    }
    let mut search = PartitionSearch {
        sys,
        target: &sys.form(i).coefficients,
        others,
        max_blocks,
        blocks: Vec::new(),
    };
    search.run(0).then(|| PartitionCertificate {
        form_index: i,
        blocks: search.blocks.into_iter().map(|(b, _)| b).collect(),
    })
}

fn guard(sys: &FormSystem) -> Result<(), ComplexityError> {
    if sys.t() > EXHAUSTIVE_MAX_FORMS {
        Err(ComplexityError::TooManyForms { t: sys.t() })
    } else {
        Ok(())
    }
}

/// Least `s ≤ s_max` with a valid partition into `s + 1` sets, with its
/// certificate.
pub fn i_complexity_certificate(
    sys: &FormSystem,
    i: usize,
    s_max: usize,
) -> Result<Option<PartitionCertificate>, ComplexityError> {
    guard(sys)?;
    if i >= sys.t() {
        return Err(ComplexityError::MalformedPartition(format!("form index {i} out of range")));
    }
    Ok((0..=s_max).find_map(|s| find_partition(sys, i, s + 1)))
}

/// Least `s ≤ s_max` for which form `i` has i-complexity at most `s`.
pub fn i_complexity(sys: &FormSystem, i: usize, s_max: usize) -> Result<Option<usize>, ComplexityError> {
    Ok(i_complexity_certificate(sys, i, s_max)?.map(|c| c.bound()))
}

/// Complexity of the whole system with per-form certificates.
pub fn system_complexity(sys: &FormSystem) -> Result<ComplexityReport, ComplexityError> {
    if sys.t() <= EXHAUSTIVE_MAX_FORMS {
        let s_max = sys.t().saturating_sub(2);
        let mut certificates = Vec::with_capacity(sys.t());
        let mut worst: Option<(usize, usize)> = None;
        for i in 0..sys.t() {
            match i_complexity_certificate(sys, i, s_max)? {
                Some(c) => {
                    let s = c.bound();
                    if worst.map_or(true, |(w, _)| s > w) {
                        worst = Some((s, i));
                    }
                    certificates.push(c);
                }
                None => {
                    return Ok(ComplexityReport {
                        complexity: None,
                        mode: ComplexityMode::Exhaustive,
                        certificates,
                        lower_bound_witness: Some(i),
                    })
                }
            }
        }
        return Ok(ComplexityReport {
            complexity: worst.map(|(s, _)| s),
            mode: ComplexityMode::Exhaustive,
            certificates,
            lower_bound_witness: worst.map(|(_, i)| i),
        });
    }
    let certificates = elephant_certificates(sys)?;
    for c in &certificates {
        if !verify_certificate(sys, c)? {
            return Ok(ComplexityReport {
                complexity: None,
                mode: ComplexityMode::Certificate,
                certificates,
                lower_bound_witness: None,
            });
        }
    }
    // t forms in d < t variables are dependent, so some form lies in the span
    // of the others and needs at least two blocks.
    let witness = (0..sys.t()).find(|&i| in_affine_span(sys.form(i), sys.forms().iter().enumerate().filter(|(j, _)| *j != i).map(|(_, f)| f)));
    Ok(ComplexityReport {
        complexity: witness.map(|_| 1),
        mode: ComplexityMode::Certificate,
        certificates,
        lower_bound_witness: witness,
    })
}

/// The two-block partitions for an elephant system: trivial forms other
/// than the n-th split into trivial and nontrivial; the n-th trivial form and
/// each nontrivial form put the first and third trivial forms with the
/// nontrivial ones (dropping the first nontrivial form for the n-th trivial
/// form).
pub fn elephant_certificates(sys: &FormSystem) -> Result<Vec<PartitionCertificate>, ComplexityError> {
    let n = match sys.side() {
        Some(n) if n >= 5 => n,
        _ => return Err(ComplexityError::NoCertificateMode),
    };
    let trivial = sys.skeleton_form_indices();
    let nontrivial = sys.nontrivial_form_indices();
    let (first, third, nth) = (trivial[0], trivial[2], trivial[n - 1]);
    let first_nontrivial = nontrivial[0];
    let without = |v: &[usize], drop: &[usize]| -> Vec<usize> { v.iter().copied().filter(|j| !drop.contains(j)).collect() };

    let mut certs = Vec::with_capacity(sys.t());
    for i in 0..sys.t() {
        let blocks = if i == nth {
            let mut a = vec![first, third];
            a.extend(without(&nontrivial, &[first_nontrivial]));
            let mut b = without(&trivial, &[first, third, nth]);
            b.push(first_nontrivial);
            vec![a, b]
        } else if trivial.contains(&i) {
            vec![without(&trivial, &[i]), nontrivial.clone()]
        } else {
            let mut a = vec![first, third];
            a.extend(without(&nontrivial, &[i]));
            vec![a, without(&trivial, &[first, third])]
        };
        let blocks = blocks
            .into_iter()
            .map(|mut b| {
                b.sort_unstable();
                b
            })
            .collect();
        certs.push(PartitionCertificate { form_index: i, blocks });
    }
    Ok(certs)
}

/// Integer Gauss–Jordan reduction of the nontrivial coefficient block using
/// only ±1 pivots, so that `2n` columns become distinct standard basis
/// columns. Rows are the nontrivial forms in cell order.
pub fn row_reduce_nontrivial(sys: &FormSystem) -> Result<IntMatrix, ComplexityError> {
    match sys.side() {
        Some(n) if n >= 5 => {}
        _ => return Err(ComplexityError::NoCertificateMode),
    }
    let rows: Vec<Vec<BigInt>> = sys
        .nontrivial_form_indices()
        .iter()
        .map(|&i| sys.form(i).coefficients.iter().map(|&c| BigInt::from(c)).collect())
        .collect();
    let mut pivots = Vec::new();
    let reduced = unit_reduce(rows, 0, &mut pivots).ok_or(ComplexityError::NoUnitReduction)?;
    Ok(IntMatrix::from_big_rows(reduced, sys.d()))
}

fn unit_reduce(rows: Vec<Vec<BigInt>>, r: usize, pivots: &mut Vec<usize>) -> Option<Vec<Vec<BigInt>>> {
    if r == rows.len() {
        return Some(rows);
    }
    let candidates: Vec<usize> = (0..rows[r].len()).filter(|&c| rows[r][c].abs().is_one()).collect();
    for c in candidates {
        let mut next = rows.clone();
        if next[r][c].is_negative() {
            for x in next[r].iter_mut() {
                *x = -&*x;
            }
        }
        let pivot_row = next[r].clone();
        for (k, row) in next.iter_mut().enumerate() {
            if k == r || row[c].is_zero() {
                continue;
            }
            let f = row[c].clone();
            for (x, p) in row.iter_mut().zip(&pivot_row) {
                *x -= &f * p;
            }
        }
        pivots.push(c);
        if let Some(done) = unit_reduce(next, r + 1, pivots) {
            return Some(done);
        }
        pivots.pop();
    }
    None
}

/// Columns of `m` that are standard basis columns, as (column, row of the 1).
pub fn unit_columns(m: &IntMatrix) -> Vec<(usize, usize)> {
    (0..m.cols())
        .filter_map(|c| {
            let nz: Vec<usize> = (0..m.rows()).filter(|&r| !m.get(r, c).is_zero()).collect();
            (nz.len() == 1 && m.get(nz[0], c).is_one()).then(|| (c, nz[0]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_linalg::rank_over_rationals;
    use crate::magic_forms::build_system;

    fn form(c: &[i64]) -> LinearForm {
        LinearForm { cell: 0, coefficients: c.to_vec() }
    }

    fn index_of(sys: &FormSystem, c: &[i64]) -> usize {
        sys.forms().iter().position(|f| f.coefficients == c).unwrap()
    }

    #[test]
    fn span_examples() {
        let t = form(&[1, 0, 0]);
        assert!(in_affine_span(&t, &[form(&[1, 0, 1]), form(&[1, 0, -1])]));
        assert!(!in_affine_span(&t, &[form(&[1, 1, 0]), form(&[1, 0, 1])]));
        assert!(in_affine_span(&t, &[form(&[2, 3, 4]), t.clone()]));
        assert!(!in_affine_span(&t, &[]));
    }

    #[test]
    fn printed_three_by_three_certificates_verify() {
        let sys = build_system(3).unwrap();
        let table: [([i64; 3], [[[i64; 3]; 2]; 4]); 9] = [
            ([1, 1, 0], [[[1, 0, 0], [1, 0, 1]], [[1, -1, 0], [1, 0, -1]], [[1, 1, 1], [1, -1, 1]], [[1, 1, -1], [1, -1, -1]]]),
            ([1, -1, -1], [[[1, 1, 0], [1, -1, 0]], [[1, 0, 1], [1, 0, -1]], [[1, 0, 0], [1, -1, 1]], [[1, 1, -1], [1, 1, 1]]]),
            ([1, 0, 1], [[[1, 0, 0], [1, 1, 0]], [[1, -1, 0], [1, 0, -1]], [[1, 1, 1], [1, -1, -1]], [[1, -1, 1], [1, 1, -1]]]),
            ([1, -1, 1], [[[1, 1, 0], [1, -1, 0]], [[1, 0, 1], [1, 0, -1]], [[1, 1, 1], [1, 1, -1]], [[1, -1, -1], [1, 0, 0]]]),
            ([1, 0, 0], [[[1, 1, 0], [1, 0, 1]], [[1, -1, 0], [1, 0, -1]], [[1, 1, 1], [1, -1, 1]], [[1, 1, -1], [1, -1, -1]]]),
            ([1, 1, -1], [[[1, 1, 0], [1, -1, 0]], [[1, 0, 1], [1, 0, -1]], [[1, 1, 1], [1, -1, 1]], [[1, -1, -1], [1, 0, 0]]]),
            ([1, 0, -1], [[[1, 0, 0], [1, 1, 0]], [[1, -1, 0], [1, 0, 1]], [[1, 1, 1], [1, -1, -1]], [[1, -1, 1], [1, 1, -1]]]),
            ([1, 1, 1], [[[1, 1, 0], [1, -1, 0]], [[1, 0, 1], [1, 0, -1]], [[1, 0, 0], [1, -1, 1]], [[1, 1, -1], [1, -1, -1]]]),
            ([1, -1, 0], [[[1, 0, 0], [1, 0, 1]], [[1, 1, 0], [1, 0, -1]], [[1, 1, 1], [1, -1, 1]], [[1, 1, -1], [1, -1, -1]]]),
        ];
        for (target, blocks) in table {
            let cert = PartitionCertificate {
                form_index: index_of(&sys, &target),
                blocks: blocks.iter().map(|b| b.iter().map(|f| index_of(&sys, f)).collect()).collect(),
            };
            assert_eq!(verify_certificate(&sys, &cert), Ok(true), "{target:?}");
        }
    }

    #[test]
    fn single_block_fails_for_centre_form() {
        let sys = build_system(3).unwrap();
        let cert = PartitionCertificate { form_index: 4, blocks: vec![vec![0, 1, 2, 3, 5, 6, 7, 8]] };
        assert_eq!(verify_certificate(&sys, &cert), Ok(false));
    }

    #[test]
    fn malformed_partitions_are_rejected() {
        let sys = build_system(3).unwrap();
        let bad = [
            PartitionCertificate { form_index: 4, blocks: vec![vec![0, 1, 2, 3, 5, 6, 7]] },
            PartitionCertificate { form_index: 4, blocks: vec![vec![0, 1, 2, 3, 4, 5, 6, 7, 8]] },
            PartitionCertificate { form_index: 4, blocks: vec![vec![0, 1, 2, 3], vec![3, 5, 6, 7, 8]] },
            PartitionCertificate { form_index: 4, blocks: vec![vec![0, 1, 2, 3, 5, 6, 7, 8], vec![]] },
            PartitionCertificate { form_index: 9, blocks: vec![] },
        ];
        for c in bad {
            assert!(matches!(verify_certificate(&sys, &c), Err(ComplexityError::MalformedPartition(_))));
        }
    }

    #[test]
    fn centre_form_needs_four_blocks() {
        let sys = build_system(3).unwrap();
        let i = index_of(&sys, &[1, 0, 0]);
        assert_eq!(i_complexity(&sys, i, 2), Ok(None));
        assert_eq!(i_complexity(&sys, i, 7), Ok(Some(3)));
    }

    #[test]
    fn independent_pair_has_complexity_zero() {
        let sys = FormSystem::new(None, vec![vec![1, 0], vec![0, 1]], vec![1, 2], vec![1, 1]).unwrap();
        assert_eq!(i_complexity(&sys, 0, 3), Ok(Some(0)));
        assert_eq!(i_complexity(&sys, 1, 3), Ok(Some(0)));
    }

    #[test]
    fn proportional_forms_have_infinite_complexity() {
        let sys = FormSystem::new(None, vec![vec![1, 0], vec![0, 1], vec![1, 0]], vec![1, 2], vec![1, 1]).unwrap();
        let report = system_complexity(&sys).unwrap();
        assert_eq!(report.complexity, None);
        assert_eq!(report.lower_bound_witness, Some(0));
    }

    #[test]
    fn small_system_complexities() {
        let r3 = system_complexity(&build_system(3).unwrap()).unwrap();
        assert_eq!(r3.complexity, Some(3));
        assert_eq!(r3.mode, ComplexityMode::Exhaustive);
        let r4 = system_complexity(&build_system(4).unwrap()).unwrap();
        assert_eq!(r4.complexity, Some(1));
        assert_eq!(i_complexity(&build_system(4).unwrap(), 0, 5), Ok(Some(1)));
        for r in [&r3, &r4] {
            for c in &r.certificates {
                assert_eq!(verify_certificate(&build_system(if r.certificates.len() == 9 { 3 } else { 4 }).unwrap(), c), Ok(true));
            }
        }
    }

    #[test]
    fn exhaustive_guard() {
        let sys = build_system(5).unwrap();
        assert_eq!(i_complexity(&sys, 0, 1), Err(ComplexityError::TooManyForms { t: 25 }));
    }

    #[test]
    fn elephant_systems_have_complexity_one() {
        for n in 5..=8 {
            let sys = build_system(n).unwrap();
            let report = system_complexity(&sys).unwrap();
            assert_eq!(report.complexity, Some(1), "n = {n}");
            assert_eq!(report.mode, ComplexityMode::Certificate);
            assert_eq!(report.certificates.len(), n * n);
            assert!(report.certificates.iter().all(|c| verify_certificate(&sys, c) == Ok(true)));
        }
    }

    #[test]
    fn nth_trivial_certificate_needs_the_dropped_form() {
        let sys = build_system(5).unwrap();
        let certs = elephant_certificates(&sys).unwrap();
        let mut c = certs[4].clone();
        assert_eq!(verify_certificate(&sys, &c), Ok(true));
        // moving the first nontrivial form back into the first block breaks it
        c.blocks[1].retain(|&j| j != 9);
        c.blocks[0].push(9);
        assert_eq!(verify_certificate(&sys, &c), Ok(false));
    }

    #[test]
    fn nontrivial_block_reduces_to_unit_columns() {
        for n in 5..=8 {
            let sys = build_system(n).unwrap();
            let m = row_reduce_nontrivial(&sys).unwrap();
            assert_eq!(m.rows(), 2 * n);
            let units = unit_columns(&m);
            let mut rows_hit: Vec<usize> = units.iter().map(|&(_, r)| r).collect();
            rows_hit.sort_unstable();
            rows_hit.dedup();
            assert_eq!(rows_hit.len(), 2 * n, "n = {n}");
            let nontrivial = sys.coefficient_matrix().select_rows(&sys.nontrivial_form_indices());
            assert_eq!(rank_over_rationals(&nontrivial), 2 * n);
        }
        assert_eq!(row_reduce_nontrivial(&build_system(4).unwrap()), Err(ComplexityError::NoCertificateMode));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Naive oracle: assign each other form to one of exactly `s + 1`
        /// nonempty blocks, checking spans from scratch.
        fn naive_i_complexity(rows: &[Vec<i64>], i: usize, s_max: usize) -> Option<usize> {
            let forms: Vec<LinearForm> = rows.iter().map(|r| form(r)).collect();
            let others: Vec<usize> = (0..forms.len()).filter(|&j| j != i).collect();
            (0..=s_max).find(|&s| assign(&forms, i, &others, &mut vec![Vec::new(); s + 1], 0))
        }

        fn assign(forms: &[LinearForm], i: usize, others: &[usize], blocks: &mut Vec<Vec<usize>>, k: usize) -> bool {
            if k == others.len() {
                return blocks.iter().all(|b| !b.is_empty());
            }
            for b in 0..blocks.len() {
                blocks[b].push(others[k]);
                let ok = !in_affine_span(&forms[i], blocks[b].iter().map(|&j| &forms[j]));
                if ok && assign(forms, i, others, blocks, k + 1) {
                    return true;
                }
                blocks[b].pop();
            }
            false
        }

        proptest! {
            #[test]
            fn complexity_invariant_under_permutation_and_scaling(
                perm in Just((0..9usize).collect::<Vec<_>>()).prop_shuffle(),
                scale in prop::collection::vec(prop_oneof![-3i64..=-1, 1i64..=3], 9),
                i in 0usize..9,
            ) {
                let base = build_system(3).unwrap();
                let rows: Vec<Vec<i64>> = perm
                    .iter()
                    .map(|&k| base.form(k).coefficients.iter().map(|c| c * scale[k]).collect())
                    .collect();
                let expected = i_complexity(&base, perm[i], 7).unwrap();
                prop_assert_eq!(naive_i_complexity(&rows, i, 7), expected);
            }
        }
    }
}
