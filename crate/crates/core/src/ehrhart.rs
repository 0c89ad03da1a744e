//! Lattice-point counts of the dilates `K(N) = {x : 0 ≤ ψ_i(x) ≤ N}` and
//! their Ehrhart quasipolynomial.
//!
//! Counting is a depth-first search over the `d` parameters with interval
//! propagation. When the last parameter enters every form with coefficient
//! ±1, the last two levels are summed in closed form: for fixed outer
//! values the admissible range of the last parameter is the gap between a
//! minimum of lines and a maximum of lines in the second-to-last one, a
//! concave piecewise-linear function summed piece by piece.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact_linalg::{eval_poly, interpolate_poly, rational_serde, LinalgError, RatMatrix, Rational};
use crate::magic_forms::FormSystem;

#[derive(Debug, Error)]
pub enum EhrhartError {
    #[error("interior counts need N >= 1, got {0}")]
    InteriorTooSmall(i64),
    #[error("interpolation needs a direct count at N = {needed}, budget allows N <= {budget}")]
    BudgetExceeded { needed: u64, budget: u64 },
    #[error("period must be positive")]
    ZeroPeriod,
    #[error("residue classes disagree on the leading coefficient")]
    BranchDisagreement,
    #[error("skeleton submatrix is singular; the polytope is unbounded")]
    Unbounded,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("count cache: {0}")]
    Io(#[from] io::Error),
    #[error("count cache: {0}")]
    Json(#[from] serde_json::Error),
}

/// Most distinct slopes the closed-form pair handles.
const MAX_SLOPES: usize = 8;

#[derive(Clone, Debug)]
struct PairPlan {
    /// Lines bounding the last variable, grouped by slope in the
    /// second-to-last variable. Each member is (form, coefficient ±1 of the
    /// last variable); slope 0 always comes first and carries the box.
    groups: Vec<(i64, Vec<(usize, i64)>)>,
}

/// Precomputed search plan for one system: variable order and the forms
/// each level constrains.
#[derive(Clone, Debug)]
pub struct Counter {
    t: usize,
    order: Vec<usize>,
    /// Per level, forms with a nonzero coefficient on that level's variable.
    terms: Vec<Vec<(usize, i64)>>,
    /// Per variable, its range as a rational multiple of the form bounds,
    /// `x_j = Σ_k inv[j][k] · y_k` with `y = skeleton values`.
    inverse: Vec<Vec<Rational>>,
    pair: Option<PairPlan>,
    redundant: Vec<bool>,
}

struct Bounds<'a> {
    lo: i64,
    hi: i64,
    boxes: Vec<(i64, i64)>,
    /// `rem_lo[level][form]`: least contribution of variables at `level..`.
    rem_lo: Vec<Vec<i64>>,
    rem_hi: Vec<Vec<i64>>,
    counter: &'a Counter,
}

impl Counter {
    /// Builds a plan with the default variable order.
    pub fn new(sys: &FormSystem) -> Result<Self, EhrhartError> {
        let order = default_order(sys);
        Self::with_order(sys, order, true)
    }

    /// Builds a plan with an explicit variable order (a permutation of
    /// `0..d`); `closed_pair` enables the closed-form last two levels when
    /// the order allows it.
    pub fn with_order(sys: &FormSystem, order: Vec<usize>, closed_pair: bool) -> Result<Self, EhrhartError> {
        let d = sys.d();
        let mut check = order.clone();
        check.sort_unstable();
        assert_eq!(check, (0..d).collect::<Vec<_>>(), "order must permute the variables");

        let skel = sys.coefficient_matrix().select_rows(&sys.skeleton_form_indices());
        let inverse = invert(&RatMatrix::from(&skel)).ok_or(EhrhartError::Unbounded)?;

        let rows = sys.rows();
        let terms: Vec<Vec<(usize, i64)>> = order
            .iter()
            .map(|&v| (0..sys.t()).filter(|&f| rows[f][v] != 0).map(|f| (f, rows[f][v])).collect())
            .collect();

        // A skeleton form that is a coordinate with coordinate box [lo, hi]
        // adds nothing beyond the box.
        let mut redundant = vec![false; sys.t()];
        for (k, &f) in sys.skeleton_form_indices().iter().enumerate() {
            if let Some(j) = sys.form(f).standard_basis_index() {
                let only_k = inverse[j].iter().enumerate().all(|(i, q)| if i == k { q == &Rational::from_integer(1.into()) } else { q.is_zero() });
                redundant[f] = only_k;
            }
        }

        let pair = (closed_pair && d >= 2).then(|| {
            let v = order[d - 1];
            let u = order[d - 2];
            let ok = (0..sys.t()).all(|f| redundant[f] || rows[f][v].abs() <= 1);
            let mut groups: Vec<(i64, Vec<(usize, i64)>)> = vec![(0, Vec::new())];
            for f in (0..sys.t()).filter(|&f| !redundant[f] && rows[f][v] != 0) {
                let c = rows[f][v];
                let slope = -c * rows[f][u];
                match groups.iter_mut().find(|g| g.0 == slope) {
                    Some(g) => g.1.push((f, c)),
                    None => groups.push((slope, vec![(f, c)])),
                }
            }
            (ok && groups.len() <= MAX_SLOPES).then_some(PairPlan { groups })
        });
        let terms = terms.into_iter().map(|ts| ts.into_iter().filter(|&(f, _)| !redundant[f]).collect()).collect();
        Ok(Counter { t: sys.t(), order, terms, inverse, pair: pair.flatten(), redundant })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn uses_closed_pair(&self) -> bool {
        self.pair.is_some()
    }

    fn bounds(&self, lo: i64, hi: i64) -> Bounds<'_> {
        let d = self.order.len();
        let boxes: Vec<(i64, i64)> = self
            .order
            .iter()
            .map(|&v| {
                let (mut a, mut b) = (Rational::zero(), Rational::zero());
                for q in &self.inverse[v] {
                    let x = q * Rational::from_integer(lo.into());
                    let y = q * Rational::from_integer(hi.into());
                    if x < y {
                        a += x;
                        b += y;
                    } else {
                        a += y;
                        b += x;
                    }
                }
                (a.ceil().to_integer().to_i64().unwrap(), b.floor().to_integer().to_i64().unwrap())
            })
            .collect();
        let mut rem_lo = vec![vec![0i64; self.t]; d + 1];
        let mut rem_hi = vec![vec![0i64; self.t]; d + 1];
        for level in (0..d).rev() {
            rem_lo[level] = rem_lo[level + 1].clone();
            rem_hi[level] = rem_hi[level + 1].clone();
            let (bl, bh) = boxes[level];
            for &(f, c) in &self.terms[level] {
                rem_lo[level][f] += (c * bl).min(c * bh);
                rem_hi[level][f] += (c * bl).max(c * bh);
            }
        }
        Bounds { lo, hi, boxes, rem_lo, rem_hi, counter: self }
    }

    /// Number of integer points with `lo ≤ ψ_i(x) ≤ hi` for every form.
    pub fn count_between(&self, lo: i64, hi: i64) -> u128 {
        if lo > hi {
            return 0;
        }
        let b = self.bounds(lo, hi);
        let d = self.order.len();
        if d == 0 {
            return 1;
        }
        let p = vec![0i64; self.t];
        let Some((l, u)) = b.range(0, &p) else {
            return 0;
        };
        if d == 1 {
            return (u - l + 1) as u128;
        }
        if d == 2 && self.pair.is_some() {
            return b.pair_sum(l, u, &p);
        }
        (l..=u)
            .into_par_iter()
            .map(|x| {
                let mut p = vec![0i64; self.t];
                for &(f, c) in &self.terms[0] {
                    p[f] += c * x;
                }
                b.descend(1, &mut p)
            })
            .sum()
    }

    /// `E(N)`, the number of integer points of the `N`-th dilate.
    pub fn count(&self, n: u64) -> u128 {
        self.count_between(0, n as i64)
    }

    #[doc(hidden)]
    pub fn is_redundant(&self, form: usize) -> bool {
        self.redundant[form]
    }
}

impl Bounds<'_> {
    #[inline]
    fn range(&self, level: usize, p: &[i64]) -> Option<(i64, i64)> {
        let (mut l, mut u) = self.boxes[level];
        let rl = &self.rem_lo[level + 1];
        let rh = &self.rem_hi[level + 1];
        for &(f, c) in &self.counter.terms[level] {
            let a = self.lo - p[f] - rh[f];
            let b = self.hi - p[f] - rl[f];
            match c {
                1 => {
                    l = l.max(a);
                    u = u.min(b);
                }
                -1 => {
                    l = l.max(-b);
                    u = u.min(-a);
                }
                c if c > 0 => {
                    l = l.max(Integer::div_ceil(&a, &c));
                    u = u.min(Integer::div_floor(&b, &c));
                }
                c => {
                    l = l.max(Integer::div_ceil(&b, &c));
                    u = u.min(Integer::div_floor(&a, &c));
                }
            }
            if l > u {
                return None;
            }
        }
        Some((l, u))
    }

    fn descend(&self, level: usize, p: &mut [i64]) -> u128 {
        let d = self.boxes.len();
        let Some((l, u)) = self.range(level, p) else {
            return 0;
        };
        if level == d - 1 {
            return (u - l + 1) as u128;
        }
        if level == d - 2 && self.counter.pair.is_some() {
            return self.pair_sum(l, u, p);
        }
        let terms = &self.counter.terms[level];
        for &(f, c) in terms {
            p[f] += c * l;
        }
        let mut total = 0u128;
        let mut x = l;
        loop {
            total += self.descend(level + 1, p);
            if x == u {
                break;
            }
            x += 1;
            for &(f, c) in terms {
                p[f] += c;
            }
        }
        for &(f, c) in terms {
            p[f] -= c * u;
        }
        total
    }

    /// Σ over `x ∈ [l, u]` of the number of admissible last values, where `x`
    /// is the second-to-last variable.
    fn pair_sum(&self, l: i64, u: i64, p: &[i64]) -> u128 {
        let pair = self.counter.pair.as_ref().expect("pair plan");
        let d = self.boxes.len();
        let (vl, vh) = self.boxes[d - 1];
        // For slope group k the last variable v satisfies
        // lower[k] + s_k x ≤ v ≤ upper[k] + s_k x.
        let g_len = pair.groups.len();
        let mut slope = [0i64; MAX_SLOPES];
        let mut lower = [i64::MIN; MAX_SLOPES];
        let mut upper = [i64::MAX; MAX_SLOPES];
        lower[0] = vl;
        upper[0] = vh;
        for (k, (s, members)) in pair.groups.iter().enumerate() {
            slope[k] = *s;
            for &(f, c) in members {
                let pf = p[f];
                let (dn, up) = if c == 1 { (self.lo - pf, self.hi - pf) } else { (pf - self.hi, pf - self.lo) };
                lower[k] = lower[k].max(dn);
                upper[k] = upper[k].min(up);
            }
        }
        let g = |x: i64| -> i64 {
            let mut up = i64::MAX;
            let mut dn = i64::MIN;
            for k in 0..g_len {
                up = up.min(slope[k] * x + upper[k]);
                dn = dn.max(slope[k] * x + lower[k]);
            }
            up - dn + 1
        };
        let mut cuts = [0i64; 2 + 2 * MAX_SLOPES * MAX_SLOPES];
        let mut n_cuts = 2;
        cuts[0] = l;
        cuts[1] = u + 1;
        for i in 0..g_len {
            for j in i + 1..g_len {
                let ds = slope[i] - slope[j];
                for (a, b) in [(lower[i], lower[j]), (upper[i], upper[j])] {
                    if a == i64::MIN || b == i64::MIN || a == i64::MAX || b == i64::MAX {
                        continue;
                    }
                    let x = Integer::div_floor(&(b - a), &ds);
                    for c in [x, x + 1] {
                        if c > l && c <= u {
                            cuts[n_cuts] = c;
                            n_cuts += 1;
                        }
                    }
                }
            }
        }
        let cuts = &mut cuts[..n_cuts];
        cuts.sort_unstable();
        let mut total: i128 = 0;
        let mut prev = cuts[0];
        for &next in &cuts[1..] {
            if next == prev {
                continue;
            }
            let (a, e) = (prev, next - 1);
            prev = next;
            let ga = g(a) as i128;
            if a == e {
                total += ga.max(0);
                continue;
            }
            let ge = g(e) as i128;
            let len = (e - a) as i128;
            total += positive_linear_sum(ga, (ge - ga) / len, len);
        }
        total as u128
    }
}

/// Σ_{k=0}^{len} max(0, g0 + s·k) for integers.
fn positive_linear_sum(g0: i128, s: i128, len: i128) -> i128 {
    let (k_lo, k_hi) = if s == 0 {
        if g0 <= 0 {
            return 0;
        }
        (0, len)
    } else if s > 0 {
        // g0 + s k ≥ 1
        (Integer::div_ceil(&(1 - g0), &s).max(0), len)
    } else {
        (0, Integer::div_floor(&(g0 - 1), &(-s)).min(len))
    };
    if k_lo > k_hi {
        return 0;
    }
    let count = k_hi - k_lo + 1;
    count * (2 * g0 + s * (k_lo + k_hi)) / 2
}

fn invert(m: &RatMatrix) -> Option<Vec<Vec<Rational>>> {
    let d = m.rows();
    let mut a: Vec<Vec<Rational>> = (0..d)
        .map(|r| {
            let mut row: Vec<Rational> = (0..d).map(|c| m.get(r, c).clone()).collect();
            row.extend((0..d).map(|c| Rational::from_integer(BigInt::from(u8::from(c == r)))));
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
            if r != col && !row[col].is_zero() {
                let f = row[col].clone();
                for (x, y) in row.iter_mut().zip(&pivot) {
                    *x -= &f * y;
                }
            }
        }
    }
    Some(a.into_iter().map(|row| row[d..].to_vec()).collect())
}

/// Default variable order.
///
/// The last variable is one whose coefficients are all in {−1, 0, 1} and
/// that meets the fewest forms, so the closed-form pair applies and its
/// range is wide. The second-to-last meets the fewest forms among the rest.
/// The remaining variables are taken greedily, each time the one completing
/// the most forms and, on ties, touching the most forms.
pub fn default_order(sys: &FormSystem) -> Vec<usize> {
    let d = sys.d();
    let rows = sys.rows();
    let support = |v: usize| -> Vec<usize> {
        (0..sys.t()).filter(|&f| rows[f][v] != 0 && rows[f].iter().filter(|&&c| c != 0).count() > 1).collect()
    };
    let mut free: Vec<usize> = (0..d).collect();
    let mut tail = Vec::new();
    if d >= 2 {
        let unit: Vec<usize> = free.iter().copied().filter(|&v| rows.iter().all(|r| r[v].abs() <= 1)).collect();
        let pool = if unit.is_empty() { free.clone() } else { unit };
        let last = *pool.iter().min_by_key(|&&v| (support(v).len(), std::cmp::Reverse(v))).unwrap();
        free.retain(|&v| v != last);
        let second = *free.iter().min_by_key(|&&v| (support(v).len(), std::cmp::Reverse(v))).unwrap();
        free.retain(|&v| v != second);
        tail = vec![second, last];
    }
    let mut head = Vec::new();
    let mut assigned = vec![false; d];
    while !free.is_empty() {
        let score = |v: usize| {
            let mut completes = 0;
            let mut touches = 0;
            for r in &rows {
                if r[v] == 0 {
                    continue;
                }
                touches += 1;
                if (0..d).all(|j| j == v || r[j] == 0 || assigned[j]) {
                    completes += 1;
                }
            }
            (completes, touches, std::cmp::Reverse(v))
        };
        let best = *free.iter().max_by_key(|&&v| score(v)).unwrap();
        assigned[best] = true;
        head.push(best);
        free.retain(|&v| v != best);
    }
    head.extend(tail);
    head
}

/// `E(N)` for the system.
pub fn count_points(sys: &FormSystem, n: u64) -> u128 {
    Counter::new(sys).expect("bounded system").count(n)
}

/// Number of integer points with `0 < ψ_i(x) < N` for every form, via the
/// shift by the unit point (`ψ_i(u) = 1`), which turns them into the points
/// of the `(N − 2)`-th dilate. For `N = 1` there are none.
pub fn interior_count(sys: &FormSystem, n: i64) -> Result<u128, EhrhartError> {
    match n {
        n if n < 1 => Err(EhrhartError::InteriorTooSmall(n)),
        1 => Ok(0),
        n => Ok(count_points(sys, (n - 2) as u64)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Direct,
    Reciprocity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountEntry {
    pub count: i128,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CountLine {
    n: Option<usize>,
    #[serde(rename = "N")]
    abscissa: i64,
    count: i128,
    provenance: Provenance,
    system: String,
}

/// Values `E(N)` of one system, keyed by abscissa. Negative abscissae come
/// from reciprocity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountTable {
    pub n: Option<usize>,
    pub system_hash: String,
    pub dimension: usize,
    pub entries: BTreeMap<i64, CountEntry>,
}

impl CountTable {
    pub fn new(sys: &FormSystem) -> Self {
        CountTable { n: sys.side(), system_hash: sys.content_hash(), dimension: sys.d(), entries: BTreeMap::new() }
    }

    pub fn get(&self, abscissa: i64) -> Option<i128> {
        self.entries.get(&abscissa).map(|e| e.count)
    }

    pub fn insert_direct(&mut self, n: u64, count: u128) {
        self.entries.insert(n as i64, CountEntry { count: count as i128, provenance: Provenance::Direct });
    }

    /// Counts `E(N)` directly unless already present.
    pub fn ensure_direct(&mut self, counter: &Counter, n: u64) -> i128 {
        if let Some(v) = self.get(n as i64) {
            return v;
        }
        let c = counter.count(n);
        self.insert_direct(n, c);
        c as i128
    }

    /// `E(−N) = (−1)^d · E(N − 2)` for `N ≥ 2` and `E(−1) = 0`, recorded with
    /// reciprocity provenance. Needs `E(N − 2)` in the table.
    pub fn mirror(&mut self, n: u64) -> Option<i128> {
        let value = match n {
            0 => return None,
            1 => 0,
            n => {
                let base = self.get(n as i64 - 2)?;
                if self.dimension % 2 == 0 {
                    base
                } else {
                    -base
                }
            }
        };
        self.entries.insert(-(n as i64), CountEntry { count: value, provenance: Provenance::Reciprocity });
        Some(value)
    }

    /// Direct entries at `N ≥ 0` in increasing order.
    pub fn direct_values(&self) -> Vec<(u64, u128)> {
        self.entries
            .range(0..)
            .filter(|(_, e)| e.provenance == Provenance::Direct)
            .map(|(&k, e)| (k as u64, e.count as u128))
            .collect()
    }

    /// Appends the direct entries to a JSON-lines file.
    pub fn append_jsonl(&self, path: &Path) -> Result<(), EhrhartError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let known = Self::read_lines(path).unwrap_or_default();
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        for (&abscissa, e) in &self.entries {
            if e.provenance != Provenance::Direct {
                continue;
            }
            if known.iter().any(|l| l.system == self.system_hash && l.abscissa == abscissa) {
                continue;
            }
            let line = CountLine {
                n: self.n,
                abscissa,
                count: e.count,
                provenance: e.provenance,
                system: self.system_hash.clone(),
            };
            writeln!(file, "{}", serde_json::to_string(&line)?)?;
        }
        Ok(())
    }

    fn read_lines(path: &Path) -> Result<Vec<CountLine>, EhrhartError> {
        let file = File::open(path)?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    /// Loads the direct entries for this table's system from a JSON-lines
    /// file; a missing file loads nothing.
    pub fn load_jsonl(&mut self, path: &Path) -> Result<usize, EhrhartError> {
        if !path.exists() {
            return Ok(0);
        }
        let mut loaded = 0;
        for l in Self::read_lines(path)? {
            if l.system == self.system_hash && l.provenance == Provenance::Direct && l.abscissa >= 0 {
                self.entries.insert(l.abscissa, CountEntry { count: l.count, provenance: Provenance::Direct });
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

/// Cache file for a system inside a cache directory.
pub fn cache_path(dir: &Path, sys: &FormSystem) -> PathBuf {
    dir.join(format!("counts-{}.jsonl", &sys.content_hash()[..16]))
}

/// A quasipolynomial of degree `d` and period `m`; branch `r` holds the
/// coefficients (constant term first) used when `N ≡ r (mod m)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quasipolynomial {
    pub degree: usize,
    pub period: usize,
    #[serde(with = "rational_serde::vec_vec")]
    pub coefficients: Vec<Vec<Rational>>,
}

impl Quasipolynomial {
    pub fn eval(&self, n: i64) -> Rational {
        let r = n.rem_euclid(self.period as i64) as usize;
        eval_poly(&self.coefficients[r], &Rational::from_integer(n.into()))
    }

    pub fn branch(&self, residue: usize) -> &[Rational] {
        &self.coefficients[residue]
    }
}

/// The leading coefficient shared by every branch.
pub fn volume(qp: &Quasipolynomial) -> Result<Rational, EhrhartError> {
    let lead = |b: &Vec<Rational>| b.get(qp.degree).cloned().unwrap_or_else(Rational::zero);
    let first = lead(&qp.coefficients[0]);
    if qp.coefficients.iter().any(|b| lead(b) != first) {
        return Err(EhrhartError::BranchDisagreement);
    }
    Ok(first)
}

/// Cost of knowing `E(a)`: the largest direct count it needs.
fn abscissa_cost(a: i64) -> u64 {
    match a {
        a if a >= 0 => a as u64,
        -1 => 0,
        a => (-a - 2) as u64,
    }
}

/// Abscissae per residue class, `degree + 1` each, chosen cheapest first
/// (ties toward nonnegative values), and the largest direct count needed.
pub fn plan_abscissae(degree: usize, period: usize) -> (Vec<Vec<i64>>, u64) {
    let mut plan = Vec::with_capacity(period);
    let mut max_cost = 0;
    for r in 0..period as i64 {
        let m = period as i64;
        let mut picked = Vec::with_capacity(degree + 1);
        let mut cost = 0u64;
        while picked.len() < degree + 1 {
            let mut here: Vec<i64> = vec![cost as i64];
            if cost == 0 {
                here.push(-1);
            }
            here.push(-(cost as i64) - 2);
            for a in here {
                if a.rem_euclid(m) == r && picked.len() < degree + 1 {
                    picked.push(a);
                    max_cost = max_cost.max(abscissa_cost(a));
                }
            }
            cost += 1;
        }
        picked.sort_unstable();
        plan.push(picked);
    }
    (plan, max_cost)
}

/// Interpolates the Ehrhart quasipolynomial of period `period`, counting
/// directly only up to the largest value the abscissa plan needs and
/// filling the rest by reciprocity. Counts already in `table` are reused.
pub fn interpolate_quasipolynomial(
    sys: &FormSystem,
    period: usize,
    table: &mut CountTable,
    budget: Option<u64>,
) -> Result<Quasipolynomial, EhrhartError> {
    if period == 0 {
        return Err(EhrhartError::ZeroPeriod);
    }
    let degree = sys.d();
    let (plan, needed) = plan_abscissae(degree, period);
    if let Some(b) = budget {
        if needed > b {
            return Err(EhrhartError::BudgetExceeded { needed, budget: b });
        }
    }
    let counter = Counter::new(sys)?;
    let mut coefficients = Vec::with_capacity(period);
    for abscissae in &plan {
        let mut points = Vec::with_capacity(abscissae.len());
        for &a in abscissae {
            let value = if a >= 0 {
                table.ensure_direct(&counter, a as u64)
            } else {
                let m = (-a) as u64;
                if m >= 2 {
                    table.ensure_direct(&counter, m - 2);
                }
                table.mirror(m).expect("base count present")
            };
            points.push((BigInt::from(a), Rational::from_integer(value.into())));
        }
        coefficients.push(interpolate_poly(&points, degree)?);
    }
    Ok(Quasipolynomial { degree, period, coefficients })
}

/// Points `u/2` and `u/2 + e_j/(2n)` whose affine hull shows `K(1)` is
/// full-dimensional.
pub fn nonzero_volume_witness(sys: &FormSystem) -> Vec<Vec<Rational>> {
    let scale = BigInt::from(2 * sys.side().unwrap_or(sys.d()).max(1));
    let half: Vec<Rational> = sys.unit_point().iter().map(|&u| Rational::new(u.into(), 2.into())).collect();
    let mut out = vec![half.clone()];
    for j in 0..sys.d() {
        let mut p = half.clone();
        p[j] += Rational::new(1.into(), scale.clone());
        out.push(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magic_forms::build_system;
    use crate::polytope::contains;

    /// Oracle: scan the full box from the skeleton inverse.
    fn brute_count(sys: &FormSystem, lo: i64, hi: i64) -> u128 {
        let d = sys.d();
        let skel = sys.coefficient_matrix().select_rows(&sys.skeleton_form_indices());
        let inv = invert(&RatMatrix::from(&skel)).unwrap();
        let boxes: Vec<(i64, i64)> = inv
            .iter()
            .map(|row| {
                let mut a = Rational::zero();
                let mut b = Rational::zero();
                for q in row {
                    let x = q * Rational::from_integer(lo.into());
                    let y = q * Rational::from_integer(hi.into());
                    a += x.clone().min(y.clone());
                    b += x.max(y);
                }
                (a.ceil().to_integer().to_i64().unwrap(), b.floor().to_integer().to_i64().unwrap())
            })
            .collect();
        let mut x: Vec<i64> = boxes.iter().map(|b| b.0).collect();
        if boxes.iter().any(|b| b.0 > b.1) {
            return 0;
        }
        let mut total = 0;
        loop {
            if sys.forms().iter().all(|f| (lo..=hi).contains(&f.eval(&x))) {
                total += 1;
            }
            let mut k = 0;
            loop {
                if k == d {
                    return total;
                }
                if x[k] < boxes[k].1 {
                    x[k] += 1;
                    break;
                }
                x[k] = boxes[k].0;
                k += 1;
            }
        }
    }

    #[test]
    fn three_by_three_counts() {
        let sys = build_system(3).unwrap();
        let expected = [1u128, 2, 7, 12, 25, 38, 63, 88];
        for (n, &e) in expected.iter().enumerate() {
            assert_eq!(count_points(&sys, n as u64), e);
            assert_eq!(brute_count(&sys, 0, n as i64), e);
        }
    }

    #[test]
    fn four_by_four_small_counts_match_oracle() {
        let sys = build_system(4).unwrap();
        for n in 0..=3u64 {
            assert_eq!(count_points(&sys, n), brute_count(&sys, 0, n as i64), "N = {n}");
        }
        assert_eq!(count_points(&sys, 1), 34);
    }

    #[test]
    fn closed_pair_matches_plain_search() {
        for n in [3, 4, 5] {
            let sys = build_system(n).unwrap();
            let fast = Counter::new(&sys).unwrap();
            let plain = Counter::with_order(&sys, fast.order().to_vec(), false).unwrap();
            assert!(!plain.uses_closed_pair());
            let top = if n == 5 { 2 } else { 6 };
            for big_n in 0..=top {
                assert_eq!(fast.count(big_n), plain.count(big_n), "n = {n}, N = {big_n}");
            }
        }
    }

    #[test]
    fn interior_counts() {
        let s3 = build_system(3).unwrap();
        let s4 = build_system(4).unwrap();
        assert_eq!(interior_count(&s4, 3).unwrap(), 34);
        assert_eq!(interior_count(&s3, 1).unwrap(), 0);
        assert_eq!(interior_count(&s4, 1).unwrap(), 0);
        assert_eq!(interior_count(&s3, 2).unwrap(), 1);
        assert_eq!(brute_count(&s3, 1, 1), 1);
        assert!(matches!(interior_count(&s3, 0), Err(EhrhartError::InteriorTooSmall(0))));
        for n in 2..6 {
            assert_eq!(interior_count(&s3, n).unwrap(), brute_count(&s3, 1, n - 1));
        }
    }

    #[test]
    fn count_between_uses_general_bounds() {
        let s3 = build_system(3).unwrap();
        let c = Counter::new(&s3).unwrap();
        for (lo, hi) in [(1, 4), (2, 7), (-3, 3), (5, 4)] {
            assert_eq!(c.count_between(lo, hi), brute_count(&s3, lo, hi), "[{lo}, {hi}]");
        }
    }

    #[test]
    fn three_by_three_quasipolynomial() {
        let sys = build_system(3).unwrap();
        let mut table = CountTable::new(&sys);
        let qp = interpolate_quasipolynomial(&sys, 2, &mut table, None).unwrap();
        let q = |a: i64, b: i64| Rational::new(a.into(), b.into());
        assert_eq!(qp.branch(0), &[q(1, 1), q(4, 3), q(1, 2), q(1, 6)]);
        assert_eq!(qp.branch(1), &[q(1, 2), q(5, 6), q(1, 2), q(1, 6)]);
        assert_eq!(volume(&qp).unwrap(), q(1, 6));
        for n in 0..12 {
            assert_eq!(qp.eval(n), Rational::from_integer(count_points(&sys, n as u64).into()));
        }
    }

    #[test]
    fn unit_square_quasipolynomial() {
        let sys = FormSystem::new(None, vec![vec![1, 0], vec![0, 1]], vec![1, 2], vec![1, 1]).unwrap();
        let mut table = CountTable::new(&sys);
        let qp = interpolate_quasipolynomial(&sys, 1, &mut table, None).unwrap();
        let one = Rational::from_integer(1.into());
        assert_eq!(qp.coefficients, vec![vec![one.clone(), Rational::from_integer(2.into()), one.clone()]]);
        assert_eq!(volume(&qp).unwrap(), one);
    }

    #[test]
    fn abscissa_plan_for_four_by_four() {
        let (plan, needed) = plan_abscissae(8, 6);
        assert_eq!(needed, 26);
        let mut all: Vec<i64> = plan.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all.len(), 54);
        assert!(all.iter().all(|&a| (-28..=26).contains(&a)));
        for (r, class) in plan.iter().enumerate() {
            assert!(class.iter().all(|a| a.rem_euclid(6) == r as i64));
        }
        let (_, needed3) = plan_abscissae(3, 2);
        assert_eq!(needed3, 3);
    }

    #[test]
    fn budget_is_enforced() {
        let sys = build_system(4).unwrap();
        let mut table = CountTable::new(&sys);
        assert!(matches!(
            interpolate_quasipolynomial(&sys, 6, &mut table, Some(8)),
            Err(EhrhartError::BudgetExceeded { needed: 26, budget: 8 })
        ));
    }

    #[test]
    fn branch_disagreement_is_reported() {
        let one = Rational::from_integer(1.into());
        let qp = Quasipolynomial {
            degree: 1,
            period: 2,
            coefficients: vec![vec![one.clone(), one.clone()], vec![one.clone(), one.clone() + one.clone()]],
        };
        assert!(matches!(volume(&qp), Err(EhrhartError::BranchDisagreement)));
    }

    #[test]
    fn table_round_trips_through_jsonl() {
        let sys = build_system(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = cache_path(dir.path(), &sys);
        let mut table = CountTable::new(&sys);
        let counter = Counter::new(&sys).unwrap();
        for n in 0..5 {
            table.ensure_direct(&counter, n);
        }
        table.mirror(4);
        table.append_jsonl(&path).unwrap();
        table.append_jsonl(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        let mut back = CountTable::new(&sys);
        assert_eq!(back.load_jsonl(&path).unwrap(), 5);
        assert_eq!(back.direct_values(), table.direct_values());
        let other = build_system(4).unwrap();
        let mut unrelated = CountTable::new(&other);
        assert_eq!(unrelated.load_jsonl(&path).unwrap(), 0);
    }

    #[test]
    fn reciprocity_sign_follows_dimension() {
        let s3 = build_system(3).unwrap();
        let mut t = CountTable::new(&s3);
        t.insert_direct(1, 2);
        assert_eq!(t.mirror(3), Some(-2));
        assert_eq!(t.mirror(1), Some(0));
        assert_eq!(t.entries[&-3].provenance, Provenance::Reciprocity);
    }

    #[test]
    fn volume_witness_points_lie_in_k1() {
        for n in 3..=6 {
            let sys = build_system(n).unwrap();
            for p in nonzero_volume_witness(&sys) {
                assert_eq!(contains(&sys, &p, 1), Ok(true), "n = {n}");
            }
        }
    }

    #[test]
    fn positive_linear_sum_oracle() {
        for g0 in -6i128..6 {
            for s in -3i128..=3 {
                for len in 0i128..7 {
                    let direct: i128 = (0..=len).map(|k| (g0 + s * k).max(0)).sum();
                    assert_eq!(positive_linear_sum(g0, s, len), direct, "{g0} {s} {len}");
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_system() -> impl Strategy<Value = FormSystem> {
            // three coordinates plus a few extra forms with unit sum, so the
            // all-ones point is the unit point
            (prop::collection::vec(prop::collection::vec(-2i64..=2, 2), 1..4)).prop_map(|extra| {
                let mut rows = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
                for e in extra {
                    let last = 1 - e[0] - e[1];
                    rows.push(vec![e[0], e[1], last]);
                }
                FormSystem::new(None, rows, vec![1, 2, 3], vec![1, 1, 1]).unwrap()
            })
        }

        proptest! {
            #[test]
            fn counter_matches_box_scan(sys in small_system(), n in 0i64..5, perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
                let expected = brute_count(&sys, 0, n);
                let fast = Counter::with_order(&sys, perm.clone(), true).unwrap();
                let plain = Counter::with_order(&sys, perm, false).unwrap();
                prop_assert_eq!(fast.count(n as u64), expected);
                prop_assert_eq!(plain.count(n as u64), expected);
            }
        }
    }
}
