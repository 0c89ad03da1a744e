//! The constant `𝔖 = vol(K(1)) · Π_p β_p`.
//!
//! Primes below the stability threshold enter exactly through the
//! exceptional prefactor. The stable factors are multiplied in fixed-point
//! integer arithmetic up to a cutoff, and the remaining tail is bounded by
//! `|β_p − 1| ≤ C/p²` with `C` measured on `[p₀, 10³]` together with
//! `Σ_{p>P} 1/p² ≤ 2.52/(P ln P)`, which follows from
//! `π(x) < 1.25506 x / ln x`.

use std::fmt;

use num_bigint::BigInt;
use num_traits::{One, Pow, Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact_linalg::{is_prime_u64, rational_serde, Rational};
use crate::local_factors::{LocalError, LocalFactorTable};
use crate::magic_forms::FormSystem;
use crate::prime_census::primes_up_to;

/// Extra decimal digits carried beyond the requested precision.
pub const GUARD_DIGITS: u32 = 15;
/// Largest requested precision.
pub const MAX_PRECISION: u32 = 200;
/// Upper end of the range on which the tail constant is measured.
pub const TAIL_SAMPLE_END: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SeriesError {
    #[error(transparent)]
    Local(#[from] LocalError),
    #[error("precision must lie in 1..={MAX_PRECISION}, got {0}")]
    Precision(u32),
    #[error("volume must be positive")]
    Volume,
}

/// A decimal `mantissa · 10^(−scale)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decimal {
    pub mantissa: BigInt,
    pub scale: u32,
}

impl Decimal {
    pub fn to_f64(&self) -> f64 {
        self.to_string().parse().unwrap_or(f64::NAN)
    }

    /// Rounds half away from zero to `digits` decimals.
    pub fn round(&self, digits: u32) -> Decimal {
        if digits >= self.scale {
            return self.clone();
        }
        let div: BigInt = Pow::pow(&BigInt::from(10), self.scale - digits);
        let half: BigInt = &div / 2;
        let mag: BigInt = (self.mantissa.abs() + half) / div;
        let mantissa = if self.mantissa.is_negative() { -mag } else { mag };
        Decimal { mantissa, scale: digits }
    }

    fn from_rational(q: &Rational, scale: u32) -> Decimal {
        let mantissa = q.numer() * Pow::pow(&BigInt::from(10), scale) / q.denom();
        Decimal { mantissa, scale }
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let digits = self.mantissa.abs().to_string();
        let scale = self.scale as usize;
        let padded = if digits.len() <= scale { format!("{}{}", "0".repeat(scale + 1 - digits.len()), digits) } else { digits };
        let (int, frac) = padded.split_at(padded.len() - scale);
        let sign = if self.mantissa.is_negative() { "-" } else { "" };
        if scale == 0 {
            write!(f, "{sign}{int}")
        } else {
            write!(f, "{sign}{int}.{frac}")
        }
    }
}

impl Serialize for Decimal {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Decimal {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (int, frac) = s.split_once('.').unwrap_or((&s, ""));
        let mantissa = format!("{int}{frac}").parse().map_err(serde::de::Error::custom)?;
        Ok(Decimal { mantissa, scale: frac.len() as u32 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularSeriesResult {
    pub n: Option<usize>,
    pub d: usize,
    pub t: usize,
    #[serde(with = "rational_serde")]
    pub volume: Rational,
    #[serde(with = "rational_serde")]
    pub exceptional_prefactor: Rational,
    pub p0: u64,
    pub tail_cutoff: u64,
    /// `Π_{p₀ ≤ p ≤ P} β_p`.
    pub truncated_product: Decimal,
    /// `max |β_p − 1| p²` over primes in `[p₀, 10³]`.
    pub tail_constant: f64,
    /// Bound on `|𝔖 − value|`.
    pub tail_error_estimate: f64,
    pub value: Decimal,
    pub precision: u32,
}

impl SingularSeriesResult {
    /// `𝔖 · N^d / (ln N)^t`.
    pub fn predicted_count(&self, bound: f64) -> f64 {
        crate::prime_census::asymptotic_prediction(self.value.to_f64(), bound, self.d, self.t)
    }
}

/// `volume · Π_{p<p₀} β_p`, exact.
pub fn exceptional_prefactor(table: &LocalFactorTable, volume: &Rational) -> Result<Rational, SeriesError> {
    if !volume.is_positive() {
        return Err(SeriesError::Volume);
    }
    let mut out = volume.clone();
    for p in (2..table.p0()).filter(|&p| is_prime_u64(p)) {
        out *= table.local_factor(p)?.beta;
    }
    Ok(out)
}

/// `C = max |β_p − 1| p²` over primes `p₀ ≤ p ≤ 10³`.
pub fn tail_constant(table: &LocalFactorTable) -> Result<Rational, SeriesError> {
    let mut c = Rational::zero();
    for p in (table.p0()..=TAIL_SAMPLE_END.max(table.p0())).filter(|&p| is_prime_u64(p)) {
        let r = (table.local_factor(p)?.beta - Rational::one()).abs() * Rational::from_integer(BigInt::from(p * p));
        c = c.max(r);
    }
    Ok(c)
}

/// Upper bound for `Σ_{p>P} 1/p²`.
pub fn prime_square_tail(cutoff: u64) -> f64 {
    let p = cutoff.max(2) as f64;
    2.52 / (p * p.ln())
}

/// Fixed-point product of `β_p` over `primes`, starting from `10^scale`.
fn stable_product(table: &LocalFactorTable, primes: &[u64], scale: &BigInt) -> BigInt {
    let (d, t) = (table.d as u32, table.t as u32);
    let mut acc = scale.clone();
    for &p in primes {
        let pb = BigInt::from(p);
        let num = table.polynomial.eval(p) * Pow::pow(&pb, t);
        let den = Pow::pow(&pb, d) * Pow::pow(&(pb - 1u32), t);
        acc = acc * num / den;
    }
    acc
}

/// `𝔖` for a system with known volume, using stable primes up to
/// `p_max` split over `shards` contiguous ranges.
pub fn singular_constant_sharded(
    sys: &FormSystem,
    volume: &Rational,
    p_max: u64,
    precision: u32,
    shards: usize,
) -> Result<SingularSeriesResult, SeriesError> {
    if precision == 0 || precision > MAX_PRECISION {
        return Err(SeriesError::Precision(precision));
    }
    let table = LocalFactorTable::new(sys)?;
    let prefactor = exceptional_prefactor(&table, volume)?;
    let work = precision + GUARD_DIGITS;
    let scale = Pow::pow(&BigInt::from(10), work);

    let primes: Vec<u64> = primes_up_to(p_max).into_iter().filter(|&p| p >= table.p0()).collect();
    let chunk = primes.len().div_ceil(shards.max(1)).max(1);
    let parts: Vec<BigInt> = primes.par_chunks(chunk).map(|ps| stable_product(&table, ps, &scale)).collect();
    let product = parts.into_iter().fold(scale.clone(), |acc, part| acc * part / &scale);

    let value = prefactor.numer() * &product / prefactor.denom();
    let c = tail_constant(&table)?.to_f64().unwrap_or(f64::INFINITY);
    let tail_sum = c * prime_square_tail(p_max.max(table.p0() - 1));
    let value = Decimal { mantissa: value, scale: work };
    let tail_error_estimate = value.to_f64() * tail_sum.exp_m1();
    Ok(SingularSeriesResult {
        n: sys.side(),
        d: sys.d(),
        t: sys.t(),
        volume: volume.clone(),
        exceptional_prefactor: prefactor,
        p0: table.p0(),
        tail_cutoff: p_max,
        truncated_product: Decimal { mantissa: product, scale: work }.round(precision),
        tail_constant: c,
        tail_error_estimate,
        value: value.round(precision),
        precision,
    })
}

pub fn singular_constant(
    sys: &FormSystem,
    volume: &Rational,
    p_max: u64,
    precision: u32,
) -> Result<SingularSeriesResult, SeriesError> {
    singular_constant_sharded(sys, volume, p_max, precision, 1)
}

/// The exact prefactor as a decimal, for display next to the fraction.
pub fn prefactor_decimal(q: &Rational, digits: u32) -> Decimal {
    Decimal::from_rational(q, digits + 1).round(digits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magic_forms::build_system;

    fn q(n: i64, d: i64) -> Rational {
        Rational::new(n.into(), d.into())
    }

    #[test]
    fn decimal_display_and_rounding() {
        let x = Decimal { mantissa: BigInt::from(25818449), scale: 6 };
        assert_eq!(x.to_string(), "25.818449");
        assert_eq!(x.round(3).to_string(), "25.818");
        assert_eq!(Decimal { mantissa: BigInt::from(-5), scale: 3 }.to_string(), "-0.005");
        assert_eq!(Decimal { mantissa: BigInt::from(12), scale: 0 }.to_string(), "12");
        assert_eq!(Decimal { mantissa: BigInt::from(1995), scale: 3 }.round(2).to_string(), "2.00");
        let json = serde_json::to_string(&x).unwrap();
        assert_eq!(serde_json::from_str::<Decimal>(&json).unwrap(), x);
    }

    #[test]
    fn three_by_three_prefactor() {
        let sys = build_system(3).unwrap();
        let table = LocalFactorTable::new(&sys).unwrap();
        let pre = exceptional_prefactor(&table, &q(1, 6)).unwrap();
        assert_eq!(pre, q(243, 8));
        assert_eq!(&pre / q(1, 6), table.local_factor(2).unwrap().beta * table.local_factor(3).unwrap().beta);
        assert_eq!(exceptional_prefactor(&table, &q(0, 1)), Err(SeriesError::Volume));
    }

    #[test]
    fn cutoff_below_threshold_gives_prefactor() {
        let sys = build_system(3).unwrap();
        let r = singular_constant(&sys, &q(1, 6), 4, 6).unwrap();
        assert_eq!(r.value.to_string(), "30.375000");
        assert_eq!(r.truncated_product.to_string(), "1.000000");
    }

    #[test]
    fn shards_agree_within_precision() {
        let sys = build_system(3).unwrap();
        let a = singular_constant_sharded(&sys, &q(1, 6), 20_000, 20, 1).unwrap();
        let b = singular_constant_sharded(&sys, &q(1, 6), 20_000, 20, 7).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn doubling_the_cutoff_stays_inside_the_tail_bound() {
        let sys = build_system(3).unwrap();
        for p in [1000u64, 5000] {
            let a = singular_constant(&sys, &q(1, 6), p, 12).unwrap();
            let b = singular_constant(&sys, &q(1, 6), 2 * p, 12).unwrap();
            assert!((a.value.to_f64() - b.value.to_f64()).abs() <= a.tail_error_estimate);
        }
    }

    #[test]
    fn precision_is_validated() {
        let sys = build_system(3).unwrap();
        assert_eq!(singular_constant(&sys, &q(1, 6), 10, 0), Err(SeriesError::Precision(0)));
        assert_eq!(singular_constant(&sys, &q(1, 6), 10, 500), Err(SeriesError::Precision(500)));
    }

    #[test]
    fn prime_tail_bound_holds() {
        let primes = primes_up_to(2_000_000);
        for cutoff in [10u64, 100, 1000, 10_000] {
            let partial: f64 = primes.iter().filter(|&&p| p > cutoff).map(|&p| 1.0 / (p as f64 * p as f64)).sum();
            assert!(partial < prime_square_tail(cutoff), "{cutoff}");
        }
    }
}
