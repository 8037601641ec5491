use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{FromPrimitive, One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use super::PheError;

/// Default number of fractional bits for encoded reals.
pub const DEFAULT_FRAC_BITS: u32 = 40;

/// A real number on the base-2 lattice: `mantissa * 2^-exponent`.
///
/// Arithmetic between fixed-point values is exact; only [`FixedPoint::encode`]
/// and [`FixedPoint::rescale`] to a coarser grid round (half to even).
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPoint {
    pub mantissa: BigInt,
    pub exponent: u32,
}

impl fmt::Debug for FixedPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}·2^-{} (≈{})", self.mantissa, self.exponent, self.decode())
    }
}

impl FixedPoint {
    pub fn new(mantissa: BigInt, exponent: u32) -> Self {
        FixedPoint { mantissa, exponent }
    }

    pub fn zero(exponent: u32) -> Self {
        FixedPoint::new(BigInt::zero(), exponent)
    }

    pub fn from_i128(mantissa: i128, exponent: u32) -> Self {
        FixedPoint::new(BigInt::from(mantissa), exponent)
    }

    pub fn encode(x: f64, frac_bits: u32) -> Result<Self, PheError> {
        if !x.is_finite() {
            return Err(PheError::NonFinite(x.to_string()));
        }
        let scaled = x * pow2(frac_bits as i32);
        if !scaled.is_finite() {
            return Err(PheError::Overflow(format!("{x} does not fit {frac_bits} fractional bits")));
        }
        let mantissa = BigInt::from_f64(scaled.round_ties_even())
            .ok_or_else(|| PheError::NonFinite(x.to_string()))?;
        Ok(FixedPoint::new(mantissa, frac_bits))
    }

    pub fn decode(&self) -> f64 {
        let m = self.mantissa.to_f64().unwrap_or(f64::NAN);
        // split the scale so that exponents above 1023 stay representable
        let mut v = m;
        let mut e = self.exponent as i32;
        while e > 0 {
            let step = e.min(1000);
            v *= pow2(-step);
            e -= step;
        }
        v
    }

    pub fn is_zero(&self) -> bool {
        self.mantissa.is_zero()
    }

    /// Re-express on the grid with the given exponent. Moving to a finer grid
    /// is exact; moving to a coarser one rounds half to even.
    pub fn rescale(&self, exponent: u32) -> FixedPoint {
        match exponent.cmp(&self.exponent) {
            Ordering::Equal => self.clone(),
            Ordering::Greater => {
                FixedPoint::new(&self.mantissa << (exponent - self.exponent), exponent)
            }
            Ordering::Less => {
                let shift = self.exponent - exponent;
                FixedPoint::new(div_pow2_half_even(&self.mantissa, shift), exponent)
            }
        }
    }

    pub fn add(&self, other: &FixedPoint) -> FixedPoint {
        let e = self.exponent.max(other.exponent);
        FixedPoint::new(self.rescale(e).mantissa + other.rescale(e).mantissa, e)
    }

    pub fn sub(&self, other: &FixedPoint) -> FixedPoint {
        let e = self.exponent.max(other.exponent);
        FixedPoint::new(self.rescale(e).mantissa - other.rescale(e).mantissa, e)
    }

    pub fn mul(&self, other: &FixedPoint) -> FixedPoint {
        FixedPoint::new(&self.mantissa * &other.mantissa, self.exponent + other.exponent)
    }

    pub fn neg(&self) -> FixedPoint {
        FixedPoint::new(-&self.mantissa, self.exponent)
    }

    /// Bit length of `|mantissa|`.
    pub fn bits(&self) -> u64 {
        self.mantissa.magnitude().bits()
    }
}

pub(crate) fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// `round_half_even(m / 2^shift)`.
pub(crate) fn div_pow2_half_even(m: &BigInt, shift: u32) -> BigInt {
    if shift == 0 {
        return m.clone();
    }
    let d = BigInt::one() << shift;
    let (q, r) = m.div_mod_floor(&d);
    let twice = &r << 1u32;
    match twice.cmp(&d) {
        Ordering::Less => q,
        Ordering::Greater => q + 1,
        Ordering::Equal => {
            if q.is_odd() {
                q + 1
            } else {
                q
            }
        }
    }
}
