//! Exact rational arithmetic helpers shared by every module.
//!
//! Money and probability are `BigRational` throughout: every f64 input is a
//! dyadic rational and converts losslessly, and the audits demand exact
//! comparisons. Floats only appear in Monte Carlo summaries.

use num_bigint::{BigInt, Sign};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Q = BigRational;

/// Rational from an integer pair.
pub fn q(numer: i64, denom: i64) -> Q {
    Q::new(BigInt::from(numer), BigInt::from(denom))
}

pub fn q_int(n: i64) -> Q {
    Q::from_integer(BigInt::from(n))
}

pub fn q_zero() -> Q {
    Q::zero()
}

pub fn q_one() -> Q {
    Q::one()
}

pub fn q_half() -> Q {
    q(1, 2)
}

/// 2^-k.
pub fn q_pow2(k: i64) -> Q {
    if k >= 0 {
        Q::new(BigInt::one() << (k as usize), BigInt::one())
    } else {
        Q::new(BigInt::one(), BigInt::one() << ((-k) as usize))
    }
}

/// Exact conversion; every finite f64 is a dyadic rational.
pub fn q_from_f64(x: f64) -> Option<Q> {
    Q::from_float(x)
}

pub fn q_to_f64(x: &Q) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Parse "p/q", "p", or a decimal float literal.
pub fn parse_q(s: &str) -> Result<Q, String> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let n: BigInt = num.trim().parse().map_err(|e| format!("bad numerator: {e}"))?;
        let d: BigInt = den.trim().parse().map_err(|e| format!("bad denominator: {e}"))?;
        if d.is_zero() {
            return Err("zero denominator".into());
        }
        Ok(Q::new(n, d))
    } else if let Ok(n) = s.parse::<BigInt>() {
        Ok(Q::from_integer(n))
    } else {
        let f: f64 = s.parse().map_err(|e| format!("bad number: {e}"))?;
        q_from_f64(f).ok_or_else(|| format!("non-finite number {s}"))
    }
}

pub fn format_q(x: &Q) -> String {
    if x.denom().is_one() {
        x.numer().to_string()
    } else {
        format!("{}/{}", x.numer(), x.denom())
    }
}

/// True iff the denominator is a power of two (reduced form).
pub fn is_dyadic(x: &Q) -> bool {
    let d = x.denom();
    if d.sign() != Sign::Plus {
        return d.is_one();
    }
    d.magnitude().count_ones() == 1
}

/// Exponent k such that x = m / 2^k in lowest terms, if dyadic.
pub fn dyadic_exponent(x: &Q) -> Option<u64> {
    if !is_dyadic(x) {
        return None;
    }
    Some(x.denom().magnitude().trailing_zeros().unwrap_or(0))
}

/// Fractional-part bit of `x` at 1-indexed position `k` after the binary
/// point, i.e. bit k of the usual expansion floor(x·2^k) mod 2. Defined for
/// any rational in [0, 1).
pub fn frac_bit(x: &Q, k: u64) -> bool {
    let shifted = x.numer() << (k as usize);
    let digit = shifted / x.denom();
    digit.bit(0)
}

/// Canonical binary expansion of a probability.
///
/// Dyadic p in [0,1) gets the terminating expansion (implicit zero tail);
/// p = 1 is the all-ones expansion. Both conventions are valid for the
/// streaming compilers; one is fixed for determinism.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoordBits {
    pub bits: Vec<bool>,
    pub all_ones: bool,
}

impl CoordBits {
    /// Expansion of a dyadic rational in [0, 1]; None if out of range or
    /// non-dyadic.
    pub fn from_dyadic(p: &Q) -> Option<CoordBits> {
        if p.is_negative() || p > &q_one() {
            return None;
        }
        if p == &q_one() {
            return Some(CoordBits { bits: Vec::new(), all_ones: true });
        }
        let k = dyadic_exponent(p)?;
        let bits = (1..=k).map(|i| frac_bit(p, i)).collect();
        Some(CoordBits { bits, all_ones: false })
    }

    /// Bit at 0-indexed round r.
    pub fn bit(&self, r: usize) -> bool {
        if self.all_ones {
            true
        } else {
            self.bits.get(r).copied().unwrap_or(false)
        }
    }

    /// Value of the first `r` bits as a rational.
    pub fn prefix_value(&self, r: usize) -> Q {
        let mut v = q_zero();
        for i in 0..r {
            if self.bit(i) {
                v += q_pow2(-(i as i64 + 1));
            }
        }
        v
    }

    /// Rounds after which only the implicit tail remains.
    pub fn len(&self) -> usize {
        if self.all_ones {
            0
        } else {
            self.bits.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Lebesgue measure of the union of the dyadic 2^-r intervals containing the
/// canonical r-bit prefixes of `coords`. This is exactly the probability that
/// a uniform τ still matches some coordinate after r rounds of the streaming
/// protocols.
pub fn survival_measure(coords: &[Q], r: u64) -> Q {
    let mut starts: Vec<BigInt> = coords
        .iter()
        .map(|p| {
            if p == &q_one() {
                (BigInt::one() << (r as usize)) - BigInt::one()
            } else {
                (p.numer() << (r as usize)) / p.denom()
            }
        })
        .collect();
    starts.sort();
    starts.dedup();
    q_int(starts.len() as i64) * q_pow2(-(r as i64))
}

/// Exact expected number of Chance rounds for a streaming protocol over the
/// given coordinate vector: Σ_{r≥0} survival_measure(coords, r), with the
/// geometric tail summed in closed form once every expansion has ended.
pub fn expected_rounds_exact(coords: &[Q]) -> Q {
    assert!(!coords.is_empty(), "at least one coordinate");
    let max_len = coords
        .iter()
        .map(|p| if p == &q_one() { 0 } else { dyadic_exponent(p).expect("dyadic coordinate") })
        .max()
        .unwrap();
    let mut total = q_zero();
    for r in 0..=max_len {
        total += survival_measure(coords, r);
    }
    // Past max_len every prefix interval start is frozen (p itself, or
    // 1 - 2^-r for the all-ones coordinate, which can no longer collide),
    // so the union has a fixed count d and measure d·2^-r.
    let mut distinct: Vec<&Q> = coords.iter().collect();
    distinct.sort();
    distinct.dedup();
    let d = distinct.len() as i64;
    total += q_int(d) * q_pow2(-(max_len as i64));
    total
}

/// Serde adapter: accepts a JSON float or a "p/q" string, emits "p/q" when
/// the value is not exactly representable, a float otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct QNum(pub Q);

impl Serialize for QNum {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let f = q_to_f64(&self.0);
        match q_from_f64(f) {
            Some(back) if back == self.0 => ser.serialize_f64(f),
            _ => ser.serialize_str(&format_q(&self.0)),
        }
    }
}

impl<'de> Deserialize<'de> for QNum {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
            Int(i64),
        }
        match Raw::deserialize(de)? {
            Raw::Num(f) => q_from_f64(f)
                .map(QNum)
                .ok_or_else(|| serde::de::Error::custom("non-finite number")),
            Raw::Int(n) => Ok(QNum(q_int(n))),
            Raw::Str(s) => parse_q(&s).map(QNum).map_err(serde::de::Error::custom),
        }
    }
}

/// Smallest w with 2^w >= n, for fixed-width binary encodings.
pub fn ceil_log2(n: u64) -> u32 {
    assert!(n >= 1);
    64 - (n - 1).leading_zeros().min(64)
}
