//! Exact finite exponential sums.
//!
//! An [`ExpSum`] is a value `Σ q_i · exp(-λ_i)` with rational coefficients
//! `q_i` and rational rates `λ_i`. Sums, differences and products are exact.
//! The exponential of a rational is a single term, so softmax scores built
//! from rational weights are represented exactly no matter how large they
//! are. Distinct rational rates give linearly independent exponentials, so a
//! value is zero exactly when its canonical term list is empty.
//!
//! Two operations are not closed over this representation and fall back to
//! a deterministic truncation:
//!
//! * the reciprocal of a multi-term value expands `1/(1+x)` to
//!   [`SERIES_ORDER`] when the subleading terms are at least [`SERIES_GAP`]
//!   below the leading one, and otherwise collapses the leading cluster to a
//!   double-precision coefficient;
//! * the exponential of a value with non-rational exponent does the same.
//!
//! In the attention layers built by this crate every score is rational and
//! every softmax denominator has gaps in the thousands, so the truncation
//! error is below `exp(-4·gap)` relative.

use std::cmp::Ordering;
use std::fmt;
use std::hash::Hash;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Rate gap beyond which a subleading term counts as exponentially small.
pub const SERIES_GAP: f64 = 40.0;
/// Highest power kept when expanding `1/(1+x)` or `exp(x)` in a small `x`.
pub const SERIES_ORDER: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Term {
    coef: BigRational,
    rate: BigRational,
}

/// A finite sum `Σ q_i · exp(-λ_i)` kept in canonical form: rates strictly
/// increasing, no zero coefficients.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct ExpSum {
    terms: Vec<Term>,
}

fn ln_bigint(n: &BigInt) -> f64 {
    let bits = n.bits();
    if bits <= 1000 {
        n.abs().to_f64().unwrap_or(f64::INFINITY).ln()
    } else {
        let shift = bits - 64;
        let top: BigInt = n.abs() >> shift;
        top.to_f64().unwrap_or(f64::INFINITY).ln() + shift as f64 * std::f64::consts::LN_2
    }
}

/// Natural log of `|q|` for nonzero `q`, valid far outside the f64 range.
pub fn ln_abs_rational(q: &BigRational) -> f64 {
    ln_bigint(q.numer()) - ln_bigint(q.denom())
}

pub(crate) fn ratio_to_f64(q: &BigRational) -> f64 {
    if q.is_zero() {
        return 0.0;
    }
    match q.to_f64() {
        Some(v) if v.is_finite() && v != 0.0 => v,
        _ => {
            let s = if q.is_negative() { -1.0 } else { 1.0 };
            s * ln_abs_rational(q).exp()
        }
    }
}

/// Exact rational from a finite double.
pub fn rational_from_f64(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite value required for exact conversion")
}

fn normalize(mut terms: Vec<Term>) -> Vec<Term> {
    terms.sort_by(|a, b| a.rate.cmp(&b.rate));
    let mut out: Vec<Term> = Vec::with_capacity(terms.len());
    for t in terms {
        match out.last_mut() {
            Some(last) if last.rate == t.rate => last.coef += t.coef,
            _ => out.push(t),
        }
    }
    out.retain(|t| !t.coef.is_zero());
    out
}

impl ExpSum {
    pub fn from_rational(q: BigRational) -> Self {
        if q.is_zero() {
            return Self::default();
        }
        ExpSum { terms: vec![Term { coef: q, rate: BigRational::zero() }] }
    }

    pub fn from_int(n: i64) -> Self {
        Self::from_rational(BigRational::from_integer(BigInt::from(n)))
    }

    /// Exact value of a finite double. Panics on NaN or infinity.
    pub fn from_f64(x: f64) -> Self {
        Self::from_rational(rational_from_f64(x))
    }

    /// `coef · exp(-rate)` as a single term.
    pub fn term(coef: BigRational, rate: BigRational) -> Self {
        if coef.is_zero() {
            return Self::default();
        }
        ExpSum { terms: vec![Term { coef, rate }] }
    }

    /// `exp(q)` for rational `q`, exact.
    pub fn exp_rational(q: &BigRational) -> Self {
        Self::term(BigRational::one(), -q.clone())
    }

    pub fn is_zero_value(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    /// Coefficient of the `exp(0)` term: the ordinary rational part.
    pub fn main_part(&self) -> BigRational {
        self.terms
            .iter()
            .find(|t| t.rate.is_zero())
            .map(|t| t.coef.clone())
            .unwrap_or_else(BigRational::zero)
    }

    /// True when the value is a plain rational.
    pub fn is_rational(&self) -> bool {
        self.terms.iter().all(|t| t.rate.is_zero())
    }

    /// Leading (largest-magnitude scale) coefficient and rate.
    pub fn leading(&self) -> Option<(&BigRational, &BigRational)> {
        self.terms.first().map(|t| (&t.coef, &t.rate))
    }

    /// Terms as `(coefficient, rate)` pairs in canonical order.
    pub fn terms(&self) -> impl Iterator<Item = (&BigRational, &BigRational)> {
        self.terms.iter().map(|t| (&t.coef, &t.rate))
    }

    fn tail_bound(&self) -> f64 {
        let lead = &self.terms[0];
        let l0 = ln_abs_rational(&lead.coef);
        self.terms[1..]
            .iter()
            .map(|t| {
                let gap = ratio_to_f64(&(&t.rate - &lead.rate));
                (ln_abs_rational(&t.coef) - l0 - gap).exp()
            })
            .sum()
    }

    /// `Σ q_i exp(-(λ_i - base))` in double precision.
    fn eval_relative(&self, base: &BigRational) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let rel = &t.rate - base;
                let s = if t.coef.is_negative() { -1.0 } else { 1.0 };
                if rel.is_zero() {
                    ratio_to_f64(&t.coef)
                } else {
                    s * (ln_abs_rational(&t.coef) - ratio_to_f64(&rel)).exp()
                }
            })
            .sum()
    }

    pub fn signum_i8(&self) -> i8 {
        let Some(lead) = self.terms.first() else { return 0 };
        let lead_sign = if lead.coef.is_negative() { -1 } else { 1 };
        if self.terms.len() == 1 || self.tail_bound() < 0.5 {
            return lead_sign;
        }
        let v = self.eval_relative(&lead.rate);
        if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            lead_sign
        }
    }

    pub fn abs(&self) -> Self {
        if self.signum_i8() < 0 {
            -self
        } else {
            self.clone()
        }
    }

    /// Nearest double; underflows to zero and overflows to infinity.
    pub fn to_f64(&self) -> f64 {
        self.eval_relative(&BigRational::zero())
    }

    /// Natural log of the absolute value, finite even when the value itself
    /// is far outside the double range. Returns `-inf` for zero.
    pub fn ln_abs(&self) -> f64 {
        let Some(lead) = self.terms.first() else { return f64::NEG_INFINITY };
        let base = ln_abs_rational(&lead.coef) - ratio_to_f64(&lead.rate);
        if self.terms.len() == 1 {
            return base;
        }
        let rel = self.eval_relative(&lead.rate) / ratio_to_f64(&lead.coef);
        base + rel.abs().ln()
    }

    /// Decimal scientific notation, e.g. `3.1e-22481`, usable at any scale.
    pub fn to_sci_string(&self) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let log10 = self.ln_abs() / std::f64::consts::LN_10;
        let exp = log10.floor();
        let mantissa = 10f64.powf(log10 - exp);
        let sign = if self.signum_i8() < 0 { "-" } else { "" };
        format!("{sign}{mantissa:.6}e{}", exp as i64)
    }

    /// A single-term value in `(0, |self|]`; zero for zero.
    pub fn lower_bound_abs(&self) -> Self {
        let Some(lead) = self.terms.first() else { return Self::default() };
        let factor = if self.terms.len() == 1 {
            BigRational::one()
        } else {
            let tau = self.tail_bound();
            if tau < 0.25 {
                rational_from_f64(1.0 - 2.0 * tau - 1e-12)
            } else {
                let rel = self.eval_relative(&lead.rate).abs() / ratio_to_f64(&lead.coef).abs();
                rational_from_f64(rel * (1.0 - 1e-9))
            }
        };
        Self::term(lead.coef.abs() * factor, lead.rate.clone())
    }

    /// A single-term value in `(0, sqrt(|self|)]`.
    pub fn sqrt_lower_bound(&self) -> Self {
        let lb = self.lower_bound_abs();
        let Some(t) = lb.terms.first() else { return Self::default() };
        let ln_q = ln_abs_rational(&t.coef);
        let half = (0.5 * ln_q).exp();
        let coef = if half.is_finite() && half > 1e-300 {
            rational_from_f64(half * (1.0 - 1e-12))
        } else {
            // Fold the out-of-range magnitude into the rate.
            let shift = rational_from_f64((0.5 * ln_q).round());
            let rem = (0.5 * ln_q - ratio_to_f64(&shift)).exp();
            return Self::term(
                rational_from_f64(rem * (1.0 - 1e-12)),
                &t.rate / BigRational::from_integer(2.into()) - shift,
            );
        };
        Self::term(coef, &t.rate / BigRational::from_integer(2.into()))
    }

    fn scale_term(&self, coef: &BigRational, rate: &BigRational) -> Self {
        ExpSum {
            terms: self
                .terms
                .iter()
                .map(|t| Term { coef: &t.coef * coef, rate: &t.rate + rate })
                .collect(),
        }
    }

    /// Splits `self / lead` into a rational cluster value and a far tail.
    fn split_cluster(&self) -> (BigRational, BigRational, ExpSum) {
        let lead = &self.terms[0];
        let mut near = ExpSum::default();
        let mut far = Vec::new();
        for t in &self.terms {
            let rel = &t.rate - &lead.rate;
            if ratio_to_f64(&rel) < SERIES_GAP {
                near.terms.push(Term { coef: t.coef.clone(), rate: rel });
            } else {
                far.push(Term { coef: t.coef.clone(), rate: rel });
            }
        }
        let c = if near.terms.len() == 1 {
            near.terms[0].coef.clone()
        } else {
            rational_from_f64(near.to_f64())
        };
        (c, lead.rate.clone(), ExpSum { terms: far })
    }

    /// Reciprocal; exact for single terms.
    pub fn recip(&self) -> Self {
        assert!(!self.terms.is_empty(), "division by exact zero");
        if self.terms.len() == 1 {
            let t = &self.terms[0];
            return Self::term(t.coef.recip(), -t.rate.clone());
        }
        let (c, rate, far) = self.split_cluster();
        assert!(!c.is_zero(), "reciprocal of a value that cancels to zero");
        let inv_c = c.recip();
        // 1/(c + far) = (1/c) Σ (-far/c)^n
        let x = -far.scale_term(&inv_c, &BigRational::zero());
        let mut sum = ExpSum::one();
        let mut power = ExpSum::one();
        for _ in 0..SERIES_ORDER {
            power = &power * &x;
            if power.is_zero_value() {
                break;
            }
            sum = &sum + &power;
        }
        sum.scale_term(&inv_c, &-rate)
    }

    /// Exponential; exact when the exponent is rational.
    pub fn exp(&self) -> Self {
        let mut main = BigRational::zero();
        let mut small = ExpSum::default();
        for t in &self.terms {
            if t.rate.is_zero() {
                main += &t.coef;
            } else if ratio_to_f64(&t.rate) < SERIES_GAP {
                let v = ExpSum { terms: vec![t.clone()] }.to_f64();
                assert!(v.is_finite(), "exponent too large for an exponential sum");
                main += rational_from_f64(v);
            } else {
                small.terms.push(t.clone());
            }
        }
        let mut series = ExpSum::one();
        let mut power = ExpSum::one();
        let mut fact = BigRational::one();
        for n in 1..=SERIES_ORDER {
            if small.terms.is_empty() {
                break;
            }
            power = &power * &small;
            fact *= BigRational::from_integer(BigInt::from(n as i64));
            series = &series + &power.scale_term(&fact.recip(), &BigRational::zero());
        }
        series.scale_term(&BigRational::one(), &-main)
    }

    pub fn max_ref<'a>(&'a self, other: &'a Self) -> &'a Self {
        if self >= other {
            self
        } else {
            other
        }
    }
}

impl fmt::Debug for ExpSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for ExpSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (n, t) in self.terms.iter().enumerate() {
            if n > 0 {
                write!(f, " + ")?;
            }
            if t.rate.is_zero() {
                write!(f, "{}", t.coef)?;
            } else {
                write!(f, "({})·exp(-({}))", t.coef, t.rate)?;
            }
        }
        Ok(())
    }
}

impl PartialOrd for ExpSum {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some((self - other).signum_i8().cmp(&0))
    }
}

impl Neg for &ExpSum {
    type Output = ExpSum;
    fn neg(self) -> ExpSum {
        ExpSum {
            terms: self
                .terms
                .iter()
                .map(|t| Term { coef: -t.coef.clone(), rate: t.rate.clone() })
                .collect(),
        }
    }
}

impl Neg for ExpSum {
    type Output = ExpSum;
    fn neg(mut self) -> ExpSum {
        for t in &mut self.terms {
            t.coef = -std::mem::take(&mut t.coef);
        }
        self
    }
}

impl Add for &ExpSum {
    type Output = ExpSum;
    fn add(self, rhs: &ExpSum) -> ExpSum {
        if rhs.terms.is_empty() {
            return self.clone();
        }
        if self.terms.is_empty() {
            return rhs.clone();
        }
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::with_capacity(self.terms.len() + rhs.terms.len());
        while i < self.terms.len() && j < rhs.terms.len() {
            let (a, b) = (&self.terms[i], &rhs.terms[j]);
            match a.rate.cmp(&b.rate) {
                Ordering::Less => {
                    out.push(a.clone());
                    i += 1;
                }
                Ordering::Greater => {
                    out.push(b.clone());
                    j += 1;
                }
                Ordering::Equal => {
                    let c = &a.coef + &b.coef;
                    if !c.is_zero() {
                        out.push(Term { coef: c, rate: a.rate.clone() });
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.terms[i..]);
        out.extend_from_slice(&rhs.terms[j..]);
        ExpSum { terms: out }
    }
}

impl Sub for &ExpSum {
    type Output = ExpSum;
    fn sub(self, rhs: &ExpSum) -> ExpSum {
        self + &(-rhs)
    }
}

impl Mul for &ExpSum {
    type Output = ExpSum;
    fn mul(self, rhs: &ExpSum) -> ExpSum {
        if self.terms.is_empty() || rhs.terms.is_empty() {
            return ExpSum::default();
        }
        if rhs.terms.len() == 1 {
            return self.scale_term(&rhs.terms[0].coef, &rhs.terms[0].rate);
        }
        if self.terms.len() == 1 {
            return rhs.scale_term(&self.terms[0].coef, &self.terms[0].rate);
        }
        let mut out = Vec::with_capacity(self.terms.len() * rhs.terms.len());
        for a in &self.terms {
            for b in &rhs.terms {
                out.push(Term { coef: &a.coef * &b.coef, rate: &a.rate + &b.rate });
            }
        }
        ExpSum { terms: normalize(out) }
    }
}

impl Div for &ExpSum {
    type Output = ExpSum;
    fn div(self, rhs: &ExpSum) -> ExpSum {
        self * &rhs.recip()
    }
}

macro_rules! owned_ops {
    ($($tr:ident $m:ident),*) => {$(
        impl $tr for ExpSum {
            type Output = ExpSum;
            fn $m(self, rhs: ExpSum) -> ExpSum { (&self).$m(&rhs) }
        }
        impl $tr<&ExpSum> for ExpSum {
            type Output = ExpSum;
            fn $m(self, rhs: &ExpSum) -> ExpSum { (&self).$m(rhs) }
        }
    )*};
}
owned_ops!(Add add, Sub sub, Mul mul, Div div);

impl Zero for ExpSum {
    fn zero() -> Self {
        Self::default()
    }
    fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }
}

impl One for ExpSum {
    fn one() -> Self {
        Self::from_rational(BigRational::one())
    }
}

impl From<i64> for ExpSum {
    fn from(n: i64) -> Self {
        Self::from_int(n)
    }
}

impl From<BigRational> for ExpSum {
    fn from(q: BigRational) -> Self {
        Self::from_rational(q)
    }
}

impl Serialize for ExpSum {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<(String, String)> =
            self.terms.iter().map(|t| (t.coef.to_string(), t.rate.to_string())).collect();
        pairs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ExpSum {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let pairs: Vec<(String, String)> = Vec::deserialize(d)?;
        let mut terms = Vec::with_capacity(pairs.len());
        for (c, r) in pairs {
            let coef: BigRational = c.parse().map_err(D::Error::custom)?;
            let rate: BigRational = r.parse().map_err(D::Error::custom)?;
            terms.push(Term { coef, rate });
        }
        Ok(ExpSum { terms: normalize(terms) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn exp_of_rational_is_single_term() {
        let e = ExpSum::from_rational(q(-500_000, 1)).exp();
        assert_eq!(e.term_count(), 1);
        assert!((e.ln_abs() + 500_000.0).abs() < 1e-9);
        assert_eq!(e.to_f64(), 0.0);
        assert_eq!(e.signum_i8(), 1);
    }

    #[test]
    fn tiny_differences_are_not_lost() {
        let one = ExpSum::one();
        let tiny = ExpSum::term(q(3, 1), q(100_000, 1));
        let a = &one + &tiny;
        assert!(a > one);
        assert_eq!(&(&a - &one) - &tiny, ExpSum::zero());
    }

    #[test]
    fn recip_of_single_term_is_exact() {
        let x = ExpSum::term(q(3, 7), q(12345, 2));
        assert_eq!(&x * &x.recip(), ExpSum::one());
    }

    #[test]
    fn recip_series_matches_leading_orders() {
        // 1/(1 + e^{-100}) = 1 - e^{-100} + e^{-200} - e^{-300} + O(e^{-400})
        let x = &ExpSum::one() + &ExpSum::term(q(1, 1), q(100, 1));
        let r = x.recip();
        let expect: Vec<(BigRational, BigRational)> = vec![
            (q(1, 1), q(0, 1)),
            (q(-1, 1), q(100, 1)),
            (q(1, 1), q(200, 1)),
            (q(-1, 1), q(300, 1)),
        ];
        let got: Vec<_> = r.terms().map(|(c, l)| (c.clone(), l.clone())).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn near_scale_values_behave_like_floats() {
        let a = ExpSum::from_f64(0.3).exp();
        let b = ExpSum::from_f64(0.5).exp();
        let s = &a + &b;
        assert!((s.to_f64() - (0.3f64.exp() + 0.5f64.exp())).abs() < 1e-14);
        let r = (&a / &s).to_f64();
        assert!((r - 0.3f64.exp() / (0.3f64.exp() + 0.5f64.exp())).abs() < 1e-14);
    }

    #[test]
    fn lower_bounds_are_below() {
        let x = &ExpSum::term(q(5, 1), q(1000, 1)) - &ExpSum::term(q(1, 1), q(1100, 1));
        let lb = x.lower_bound_abs();
        assert!(lb <= x);
        assert!(lb > ExpSum::zero());
        let sq = &x * &x;
        let root = sq.sqrt_lower_bound();
        assert!(root <= x);
        assert!((root.ln_abs() - x.ln_abs()).abs() < 1e-9);
    }

    #[test]
    fn sci_string_formats_extreme_values() {
        let x = ExpSum::term(q(2, 1), q(100_000, 1));
        let s = x.to_sci_string();
        assert!(s.ends_with("e-43430"), "{s}");
    }

    #[test]
    fn serde_round_trip() {
        let x = &ExpSum::from_f64(1.25) + &ExpSum::term(q(-3, 4), q(77, 3));
        let json = serde_json::to_string(&x).unwrap();
        let back: ExpSum = serde_json::from_str(&json).unwrap();
        assert_eq!(back, x);
    }
}
