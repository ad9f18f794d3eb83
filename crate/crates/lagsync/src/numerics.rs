//! Signed fractional powers, odd-ratio exponents, vector norms, and
//! randomized oracles for the three power-sum inequalities the stability
//! proofs lean on.

use nalgebra::DVector;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("exponent must be strictly positive, got {0}")]
    NonPositiveExponent(f64),
    #[error("`{0}` is not a ratio of two odd integers")]
    NotOddRatio(String),
    #[error("exponent {got} outside required range {requirement}")]
    ExponentOutOfRange { got: f64, requirement: &'static str },
}

/// An exponent stored exactly as a ratio of two odd integers.
///
/// Powers with odd-ratio exponents are well-defined odd functions on all of
/// R, which is what lets the controller apply them to signed coordinates.
/// The numerator carries the sign; the denominator is positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OddRational {
    num: i64,
    den: i64,
}

impl OddRational {
    pub fn new(num: i64, den: i64) -> Result<Self, NumericsError> {
        if den == 0 {
            return Err(NumericsError::NotOddRatio(format!("{num}/{den}")));
        }
        let (mut num, mut den) = if den < 0 { (-num, -den) } else { (num, den) };
        let g = gcd(num.unsigned_abs(), den.unsigned_abs()) as i64;
        if g > 1 {
            num /= g;
            den /= g;
        }
        if num.rem_euclid(2) == 0 || den.rem_euclid(2) == 0 {
            return Err(NumericsError::NotOddRatio(format!("{num}/{den}")));
        }
        Ok(Self { num, den })
    }

    pub fn num(&self) -> i64 {
        self.num
    }

    pub fn den(&self) -> i64 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn ratio(&self) -> Ratio<i64> {
        Ratio::new(self.num, self.den)
    }

    /// Reciprocal; stays odd-ratio by construction.
    pub fn recip(&self) -> Result<Self, NumericsError> {
        Self::new(self.den, self.num)
    }

    /// Parse `"7/9"` or a bare odd integer like `"3"`.
    pub fn parse(s: &str) -> Result<Self, NumericsError> {
        let s = s.trim();
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (
                n.trim()
                    .parse::<i64>()
                    .map_err(|_| NumericsError::NotOddRatio(s.to_string()))?,
                d.trim()
                    .parse::<i64>()
                    .map_err(|_| NumericsError::NotOddRatio(s.to_string()))?,
            ),
            None => (
                s.parse::<i64>()
                    .map_err(|_| NumericsError::NotOddRatio(s.to_string()))?,
                1,
            ),
        };
        Self::new(n, d)
    }
}

impl std::fmt::Display for OddRational {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl Serialize for OddRational {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for OddRational {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        OddRational::parse(&s).map_err(serde::de::Error::custom)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// sign(x)|x|^p for scalar x. Maps 0 to 0 so negative bases never hit a
/// fractional power through `f64::powf`. Caller guarantees p > 0.
#[inline]
pub fn spow(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if x < 0.0 {
        -(-x).powf(p)
    } else {
        x.powf(p)
    }
}

/// Element-wise sign-preserving power sig^p(x).
pub fn sigpow(x: &DVector<f64>, p: f64) -> Result<DVector<f64>, NumericsError> {
    if p <= 0.0 {
        return Err(NumericsError::NonPositiveExponent(p));
    }
    Ok(x.map(|v| spow(v, p)))
}

/// L1 and L2 norms of a vector, bundled because the Lyapunov algebra uses
/// both and the L1 >= L2 ordering is a cheap self-check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSet {
    pub l1: f64,
    pub l2: f64,
}

pub fn norms(x: &DVector<f64>) -> NormSet {
    NormSet {
        l1: x.iter().map(|v| v.abs()).sum(),
        l2: x.norm(),
    }
}

/// Slacks of the power-sum sandwich. For p in (0,1]:
/// (sum |xi|)^p <= sum |xi|^p <= n^{1-p} (sum |xi|)^p,
/// and the reversed sandwich for p > 1. Both slacks are nonnegative exactly
/// when the inequality chain holds.
pub fn oracle_lemma1(xs: &[f64], p: f64) -> (f64, f64) {
    assert!(!xs.is_empty(), "oracle_lemma1 needs a nonempty sample");
    let n = xs.len() as f64;
    let sum_abs: f64 = xs.iter().map(|x| x.abs()).sum();
    let sum_pow: f64 = xs.iter().map(|x| x.abs().powf(p)).sum();
    let pow_sum = sum_abs.powf(p);
    if p <= 1.0 {
        (sum_pow - pow_sum, n.powf(1.0 - p) * pow_sum - sum_pow)
    } else {
        (pow_sum - sum_pow, n.powf(p - 1.0) * sum_pow - pow_sum)
    }
}

/// Slack of |xi^p - xj^p| <= 2^{1-p} |xi - xj|^p for odd-ratio p in (0,1],
/// powers taken sign-preserving.
pub fn oracle_lemma2(xi: f64, xj: f64, p: OddRational) -> Result<f64, NumericsError> {
    let pv = p.value();
    if pv <= 0.0 || pv > 1.0 {
        return Err(NumericsError::ExponentOutOfRange {
            got: pv,
            requirement: "(0, 1]",
        });
    }
    Ok(2f64.powf(1.0 - pv) * (xi - xj).abs().powf(pv) - (spow(xi, pv) - spow(xj, pv)).abs())
}

/// Slack of Young's inequality with parameter r:
/// |xi|^c |xj|^d <= (c/(c+d)) r |xi|^{c+d} + (d/(c+d)) r^{-c/d} |xj|^{c+d}.
pub fn oracle_lemma3(xi: f64, xj: f64, c: f64, d: f64, r: f64) -> Result<f64, NumericsError> {
    for v in [c, d, r] {
        if v <= 0.0 {
            return Err(NumericsError::NonPositiveExponent(v));
        }
    }
    let s = c + d;
    Ok(c / s * r * xi.abs().powf(s) + d / s * r.powf(-c / d) * xj.abs().powf(s)
        - xi.abs().powf(c) * xj.abs().powf(d))
}
