//! Linear-form systems describing n×n integer magic squares.
//!
//! A [`FormSystem`] maps a parameter vector `x ∈ ℤ^d`, `d = n² − 2n`, to the
//! `n²` cells of a magic square. Column `j` of its coefficient matrix, read
//! as a square, is the `j`-th basis square. For `n = 3` and `n = 4` the bases
//! are fixed tables; for `n ≥ 5` they come from the elephant skeleton
//! completed by [`complete_skeleton`].

use std::fmt;

use num_bigint::BigInt;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exact_linalg::{rank_over_rationals, IntMatrix, RatMatrix, Rational};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormsError {
    #[error("side length must be at least {min}, got {n}")]
    SideTooSmall { n: usize, min: usize },
    #[error("expected {expected} skeleton values, got {got}")]
    WrongValueCount { expected: usize, got: usize },
    #[error("invalid form system: {0}")]
    InvalidSystem(String),
}

/// One linear form `ψ_i`, identified by the (1-based, row-major) cell it
/// produces. Constant terms are identically zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinearForm {
    pub cell: usize,
    pub coefficients: Vec<i64>,
}

impl LinearForm {
    pub fn eval(&self, x: &[i64]) -> i64 {
        self.coefficients.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn eval_rational(&self, x: &[Rational]) -> Rational {
        self.coefficients
            .iter()
            .zip(x)
            .filter(|(c, _)| **c != 0)
            .map(|(c, v)| v * Rational::from_integer(BigInt::from(*c)))
            .sum()
    }

    /// Index of the single nonzero coefficient if the form is a standard
    /// basis vector.
    pub fn standard_basis_index(&self) -> Option<usize> {
        let mut nz = self.coefficients.iter().enumerate().filter(|(_, c)| **c != 0);
        match (nz.next(), nz.next()) {
            (Some((j, 1)), None) => Some(j),
            _ => None,
        }
    }
}

/// A system `Ψ = (ψ_1, …, ψ_t)` of homogeneous integer linear forms in `d`
/// variables.
///
/// Invariants enforced at construction: every form is nonzero, all forms
/// have `d` coefficients, the skeleton has `d` distinct cells, and every form
/// evaluates to 1 at the unit point, and the skeleton forms are linearly
/// independent (so the skeleton values determine the parameters).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SystemRecord", into = "SystemRecord")]
pub struct FormSystem {
    n: Option<usize>,
    d: usize,
    forms: Vec<LinearForm>,
    skeleton: Vec<usize>,
    unit_point: Vec<i64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SystemRecord {
    n: Option<usize>,
    d: usize,
    t: usize,
    skeleton: Vec<usize>,
    unit_point: Vec<i64>,
    coefficients: Vec<Vec<i64>>,
}

impl From<FormSystem> for SystemRecord {
    fn from(s: FormSystem) -> Self {
        SystemRecord {
            n: s.n,
            d: s.d,
            t: s.forms.len(),
            coefficients: s.rows(),
            skeleton: s.skeleton,
            unit_point: s.unit_point,
        }
    }
}

impl TryFrom<SystemRecord> for FormSystem {
    type Error = FormsError;

    fn try_from(r: SystemRecord) -> Result<Self, FormsError> {
        if r.coefficients.len() != r.t {
            return Err(FormsError::InvalidSystem(format!(
                "t = {} but {} coefficient rows",
                r.t,
                r.coefficients.len()
            )));
        }
        if r.coefficients.iter().any(|row| row.len() != r.d) {
            return Err(FormsError::InvalidSystem(format!("rows must have d = {} entries", r.d)));
        }
        FormSystem::new(r.n, r.coefficients, r.skeleton, r.unit_point)
    }
}

impl FormSystem {
    /// Builds a system from coefficient rows; row `i` becomes the form of
    /// cell `i + 1`. `skeleton` lists, per variable, the cell that carries it.
    pub fn new(
        n: Option<usize>,
        rows: Vec<Vec<i64>>,
        skeleton: Vec<usize>,
        unit_point: Vec<i64>,
    ) -> Result<Self, FormsError> {
        let d = unit_point.len();
        if rows.is_empty() {
            return Err(FormsError::InvalidSystem("no forms".into()));
        }
        if let Some(n) = n {
            if rows.len() != n * n || d != n * n - 2 * n {
                return Err(FormsError::InvalidSystem(format!(
                    "side {n} needs {} forms in {} variables",
                    n * n,
                    n * n - 2 * n
                )));
            }
        }
        let forms: Vec<LinearForm> = rows
            .into_iter()
            .enumerate()
            .map(|(i, coefficients)| LinearForm { cell: i + 1, coefficients })
            .collect();
        for f in &forms {
            if f.coefficients.len() != d {
                return Err(FormsError::InvalidSystem(format!("form {} has wrong length", f.cell)));
            }
            if f.coefficients.iter().all(|&c| c == 0) {
                return Err(FormsError::InvalidSystem(format!("form {} is zero", f.cell)));
            }
            if f.eval(&unit_point) != 1 {
                return Err(FormsError::InvalidSystem(format!("form {} is not 1 at the unit point", f.cell)));
            }
        }
        let mut sorted = skeleton.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if skeleton.len() != d || sorted.len() != d || sorted.iter().any(|&c| c == 0 || c > forms.len()) {
            return Err(FormsError::InvalidSystem("skeleton must name d distinct cells".into()));
        }
        let skeleton_rows: Vec<Vec<i64>> = skeleton.iter().map(|&c| forms[c - 1].coefficients.clone()).collect();
        if rank_over_rationals(&IntMatrix::from_rows(&skeleton_rows)) != d {
            return Err(FormsError::InvalidSystem("skeleton forms must be linearly independent".into()));
        }
        Ok(FormSystem { n, d, forms, skeleton, unit_point })
    }

    /// Side length, or `None` for systems that do not describe magic squares.
    pub fn side(&self) -> Option<usize> {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn t(&self) -> usize {
        self.forms.len()
    }

    pub fn forms(&self) -> &[LinearForm] {
        &self.forms
    }

    pub fn form(&self, i: usize) -> &LinearForm {
        &self.forms[i]
    }

    /// Skeleton cells (1-based) in variable order.
    pub fn skeleton(&self) -> &[usize] {
        &self.skeleton
    }

    pub fn unit_point(&self) -> &[i64] {
        &self.unit_point
    }

    pub fn rows(&self) -> Vec<Vec<i64>> {
        self.forms.iter().map(|f| f.coefficients.clone()).collect()
    }

    /// The `t × d` coefficient matrix.
    pub fn coefficient_matrix(&self) -> IntMatrix {
        IntMatrix::from_rows(&self.rows())
    }

    /// Form indices (0-based) of the skeleton cells, in variable order.
    pub fn skeleton_form_indices(&self) -> Vec<usize> {
        self.skeleton.iter().map(|c| c - 1).collect()
    }

    /// Form indices (0-based) of the cells outside the skeleton, ascending.
    pub fn nontrivial_form_indices(&self) -> Vec<usize> {
        (0..self.t()).filter(|i| !self.skeleton.contains(&(i + 1))).collect()
    }

    pub fn eval(&self, x: &[i64]) -> Vec<i64> {
        self.forms.iter().map(|f| f.eval(x)).collect()
    }

    /// Evaluates the system and arranges the values as a square.
    pub fn square(&self, x: &[i64]) -> Option<Square> {
        let n = self.n?;
        Some(Square::from_cells(n, self.eval(x)))
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("form system serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// An n×n integer array, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Square {
    n: usize,
    cells: Vec<i64>,
}

impl Square {
    pub fn from_cells(n: usize, cells: Vec<i64>) -> Self {
        assert_eq!(cells.len(), n * n);
        Square { n, cells }
    }

    pub fn side(&self) -> usize {
        self.n
    }

    /// 0-based row and column.
    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.cells[r * self.n + c]
    }

    pub fn cells(&self) -> &[i64] {
        &self.cells
    }

    /// Common line sum if every row, column and both diagonals agree.
    pub fn magic_sum(&self) -> Option<i64> {
        let n = self.n;
        let s: i64 = (0..n).map(|c| self.get(0, c)).sum();
        let rows = (0..n).all(|r| (0..n).map(|c| self.get(r, c)).sum::<i64>() == s);
        let cols = (0..n).all(|c| (0..n).map(|r| self.get(r, c)).sum::<i64>() == s);
        let diag: i64 = (0..n).map(|i| self.get(i, i)).sum();
        let anti: i64 = (0..n).map(|i| self.get(i, n - 1 - i)).sum();
        (rows && cols && diag == s && anti == s).then_some(s)
    }

    pub fn is_magic(&self) -> bool {
        self.magic_sum().is_some()
    }

    pub fn has_distinct_entries(&self) -> bool {
        let mut v = self.cells.clone();
        v.sort_unstable();
        v.windows(2).all(|w| w[0] != w[1])
    }

    /// The eight images under the dihedral group of the square.
    pub fn dihedral_images(&self) -> Vec<Square> {
        let n = self.n;
        let maps: [fn(usize, usize, usize) -> (usize, usize); 8] = [
            |r, c, _| (r, c),
            |r, c, n| (c, n - 1 - r),
            |r, c, n| (n - 1 - r, n - 1 - c),
            |r, c, n| (n - 1 - c, r),
            |r, c, n| (r, n - 1 - c),
            |r, c, n| (n - 1 - r, c),
            |r, c, _| (c, r),
            |r, c, n| (n - 1 - c, n - 1 - r),
        ];
        maps.iter()
            .map(|m| {
                let mut cells = vec![0; n * n];
                for r in 0..n {
                    for c in 0..n {
                        let (r2, c2) = m(r, c, n);
                        cells[r2 * n + c2] = self.get(r, c);
                    }
                }
                Square { n, cells }
            })
            .collect()
    }
}

impl fmt::Display for Square {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|c| format!("{:>4}", self.get(r, c))).collect();
            writeln!(f, "{}", row.join(""))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintLabel {
    /// Row `i` sums like row `i + 1` (1-based).
    RowPair(usize),
    /// Column `i` sums like column `i + 1` (1-based).
    ColumnPair(usize),
    /// Main diagonal sums like the anti-diagonal.
    Diagonals,
    /// Main diagonal sums like the first column.
    DiagonalFirstColumn,
}

/// The `2n × n²` matrix `A` with `A x = 0` exactly on magic squares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintMatrix {
    pub n: usize,
    pub matrix: IntMatrix,
    pub labels: Vec<ConstraintLabel>,
}

impl ConstraintMatrix {
    /// Whether `cells` satisfies every constraint.
    pub fn annihilates(&self, cells: &[i64]) -> bool {
        let v: Vec<BigInt> = cells.iter().map(|&x| BigInt::from(x)).collect();
        self.matrix.mul_vec(&v).iter().all(Zero::is_zero)
    }

    /// Whether `cells` satisfies constraint row `k` (0-based).
    pub fn satisfies_row(&self, k: usize, cells: &[i64]) -> bool {
        let s: BigInt = self.matrix.row(k).iter().zip(cells).map(|(a, &x)| a * x).sum();
        s.is_zero()
    }
}

fn check_side(n: usize, min: usize) -> Result<(), FormsError> {
    if n < min {
        Err(FormsError::SideTooSmall { n, min })
    } else {
        Ok(())
    }
}

pub fn build_constraint_matrix(n: usize) -> Result<ConstraintMatrix, FormsError> {
    check_side(n, 3)?;
    let t = n * n;
    let cell = |r: usize, c: usize| r * n + c;
    let mut rows: Vec<Vec<i64>> = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for i in 0..n - 1 {
        let mut row = vec![0; t];
        for c in 0..n {
            row[cell(i, c)] += 1;
            row[cell(i + 1, c)] -= 1;
        }
        rows.push(row);
        labels.push(ConstraintLabel::RowPair(i + 1));
    }
    for i in 0..n - 1 {
        let mut row = vec![0; t];
        for r in 0..n {
            row[cell(r, i)] += 1;
            row[cell(r, i + 1)] -= 1;
        }
        rows.push(row);
        labels.push(ConstraintLabel::ColumnPair(i + 1));
    }
    let mut diag = vec![0; t];
    for i in 0..n {
        diag[cell(i, i)] += 1;
        diag[cell(i, n - 1 - i)] -= 1;
    }
    rows.push(diag);
    labels.push(ConstraintLabel::Diagonals);
    let mut first = vec![0; t];
    for i in 0..n {
        first[cell(i, 0)] += 1;
        first[cell(i, i)] -= 1;
    }
    rows.push(first);
    labels.push(ConstraintLabel::DiagonalFirstColumn);
    Ok(ConstraintMatrix { n, matrix: IntMatrix::from_rows(&rows), labels })
}

/// Vectors `v_1, …, v_2n` where `v_k` satisfies constraint rows `1..k` of
/// `A` and violates row `k`: the row-prefix vectors, the column-prefix
/// vectors, the off-diagonal vector and the two-diagonal vector.
pub fn certificate_vectors(n: usize) -> Result<Vec<Vec<i64>>, FormsError> {
    check_side(n, 3)?;
    let t = n * n;
    let mut out = Vec::with_capacity(2 * n);
    for i in 1..n {
        out.push((0..t).map(|k| i64::from(k < i * n)).collect());
    }
    for i in 1..n {
        out.push((0..t).map(|k| i64::from(k % n < i)).collect());
    }
    out.push((0..t).map(|k| i64::from(k / n != k % n)).collect());
    let mut d = vec![0; t];
    for i in 0..n {
        d[i * n + i] += 1;
        d[i * n + (n - 1 - i)] += 1;
    }
    out.push(d);
    Ok(out)
}

/// Elephant skeleton cells (1-based, row-major) for `n ≥ 5`: the first row,
/// rows `2..n−2` without their last cell, and row `n−1` without cells `2`,
/// `n−2` and `n`.
pub fn elephant_skeleton(n: usize) -> Result<Vec<usize>, FormsError> {
    check_side(n, 5)?;
    let mut cells = Vec::with_capacity(n * n - 2 * n);
    cells.extend(1..=n);
    for r in 2..=n - 2 {
        cells.extend((1..n).map(|c| (r - 1) * n + c));
    }
    let r = n - 1;
    cells.extend((1..=n).filter(|&c| c != 2 && c != n - 2 && c != n).map(|c| (r - 1) * n + c));
    Ok(cells)
}

/// Completes integer values on the elephant skeleton to the unique magic
/// square extending them.
pub fn complete_skeleton(n: usize, values: &[i64]) -> Result<Square, FormsError> {
    let skeleton = elephant_skeleton(n)?;
    if values.len() != skeleton.len() {
        return Err(FormsError::WrongValueCount { expected: skeleton.len(), got: values.len() });
    }
    let mut g: Vec<Option<i64>> = vec![None; n * n];
    for (&cell, &v) in skeleton.iter().zip(values) {
        g[cell - 1] = Some(v);
    }
    let at = |g: &[Option<i64>], r: usize, c: usize| g[r * n + c].expect("cell determined in fill order");
    let s: i64 = (0..n).map(|c| at(&g, 0, c)).sum();
    let last = n - 1;

    // Closes row r at column c from the other cells of the row.
    let close_row = |g: &mut Vec<Option<i64>>, r: usize, c: usize| {
        let rest: i64 = (0..n).filter(|&k| k != c).map(|k| at(g, r, k)).sum();
        g[r * n + c] = Some(s - rest);
    };
    let close_col = |g: &mut Vec<Option<i64>>, r: usize, c: usize| {
        let rest: i64 = (0..n).filter(|&k| k != r).map(|k| at(g, k, c)).sum();
        g[r * n + c] = Some(s - rest);
    };

    for r in 1..=n - 3 {
        close_row(&mut g, r, last);
    }
    let mut bottom_cols = vec![0];
    bottom_cols.extend(2..=n - 4);
    bottom_cols.push(n - 2);
    for c in bottom_cols {
        close_col(&mut g, last, c);
    }
    let diag: i64 = (0..last).map(|i| at(&g, i, i)).sum();
    g[last * n + last] = Some(s - diag);
    let anti: i64 = (0..n).filter(|&i| i != n - 2).map(|i| at(&g, i, last - i)).sum();
    g[(n - 2) * n + 1] = Some(s - anti);
    close_col(&mut g, n - 2, last);
    close_col(&mut g, last, 1);
    close_row(&mut g, n - 2, n - 3);
    close_col(&mut g, last, n - 3);
    let by_row: i64 = s - (0..n).filter(|&k| k != n - 3).map(|k| at(&g, last, k)).sum::<i64>();
    assert_eq!(by_row, at(&g, last, n - 3), "row and column completion of the final cell disagree");

    let square = Square::from_cells(n, g.into_iter().map(|v| v.expect("all cells filled")).collect());
    debug_assert!(square.is_magic());
    Ok(square)
}

const SYSTEM_3: [[i64; 3]; 9] = [
    [1, 1, 0],
    [1, -1, -1],
    [1, 0, 1],
    [1, -1, 1],
    [1, 0, 0],
    [1, 1, -1],
    [1, 0, -1],
    [1, 1, 1],
    [1, -1, 0],
];

const SYSTEM_4: [[i64; 8]; 16] = [
    [1, 0, 0, 0, 0, 0, 0, 0],
    [0, 1, 0, 0, 0, 0, 0, 0],
    [0, 0, 1, 0, 0, 0, 0, 0],
    [0, 0, 0, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 0, 0, 0],
    [0, 0, 0, 0, 0, 1, 0, 0],
    [0, 0, 0, 0, 0, 0, 1, 0],
    [1, 1, 1, 1, -1, -1, -1, 0],
    [0, 0, 0, 0, 0, 0, 0, 1],
    [1, 0, 0, -1, 1, 0, -1, 1],
    [0, 1, 1, 2, -1, -1, 0, -1],
    [0, 0, 0, 0, 0, 1, 1, -1],
    [0, 1, 1, 1, -1, 0, 0, -1],
    [0, 0, 1, 2, -1, -1, 1, -1],
    [1, 0, -1, -1, 1, 1, -1, 1],
    [0, 0, 0, -1, 1, 0, 0, 1],
];

/// The linear-form system for n×n magic squares.
///
/// `n = 3` uses the parameters `(a, b, c)` of the centre/corner
/// parametrization; `n = 4` the fixed 16 × 8 table; `n ≥ 5` the elephant
/// basis.
pub fn build_system(n: usize) -> Result<FormSystem, FormsError> {
    check_side(n, 3)?;
    match n {
        3 => FormSystem::new(Some(3), SYSTEM_3.iter().map(|r| r.to_vec()).collect(), vec![5, 1, 3], vec![1, 0, 0]),
        4 => FormSystem::new(
            Some(4),
            SYSTEM_4.iter().map(|r| r.to_vec()).collect(),
            vec![1, 2, 3, 4, 5, 6, 7, 9],
            vec![1; 8],
        ),
        _ => {
            let skeleton = elephant_skeleton(n)?;
            let d = skeleton.len();
            let mut rows = vec![vec![0i64; d]; n * n];
            let mut unit = vec![0i64; d];
            for j in 0..d {
                unit[j] = 1;
                let sq = complete_skeleton(n, &unit)?;
                unit[j] = 0;
                for (i, v) in sq.cells().iter().enumerate() {
                    rows[i][j] = *v;
                }
            }
            FormSystem::new(Some(n), rows, skeleton, vec![1; d])
        }
    }
}

/// Checks that the system's columns form a ℤ-basis of the n×n integer magic
/// squares: every column is magic, the columns are independent, and the
/// skeleton rows form a unimodular matrix (for `n ≥ 4`, distinct standard
/// basis vectors), so integer skeleton values force integer parameters.
pub fn verify_z_basis(sys: &FormSystem) -> bool {
    let Some(n) = sys.side() else {
        return false;
    };
    if n < 3 || sys.t() != n * n || sys.d() != n * n - 2 * n {
        return false;
    }
    let Ok(a) = build_constraint_matrix(n) else {
        return false;
    };
    let rows = sys.rows();
    for j in 0..sys.d() {
        let col: Vec<i64> = rows.iter().map(|r| r[j]).collect();
        if !a.annihilates(&col) {
            return false;
        }
    }
    if rank_over_rationals(&sys.coefficient_matrix()) != sys.d() {
        return false;
    }
    let skel = sys.skeleton_form_indices();
    if n >= 4 {
        let mut seen = vec![false; sys.d()];
        for &i in &skel {
            match sys.form(i).standard_basis_index() {
                Some(j) if !seen[j] => seen[j] = true,
                _ => return false,
            }
        }
    }
    let sub = sys.coefficient_matrix().select_rows(&skel);
    determinant(&sub).abs() == BigInt::from(1)
}

fn determinant(m: &IntMatrix) -> BigInt {
    // Small square matrices only; exact via rational elimination.
    let rm = RatMatrix::from(m);
    let n = rm.rows();
    let mut a: Vec<Vec<Rational>> = (0..n).map(|r| (0..n).map(|c| rm.get(r, c).clone()).collect()).collect();
    let mut det = Rational::from_integer(1.into());
    for col in 0..n {
        let Some(p) = (col..n).find(|&i| !a[i][col].is_zero()) else {
            return BigInt::zero();
        };
        if p != col {
            a.swap(p, col);
            det = -det;
        }
        det *= &a[col][col];
        let pivot = a[col].clone();
        for row in a.iter_mut().skip(col + 1) {
            if row[col].is_zero() {
                continue;
            }
            let f = &row[col] / &pivot[col];
            for (x, y) in row.iter_mut().zip(&pivot).skip(col) {
                *x -= &f * y;
            }
        }
    }
    det.to_integer()
}
