//! Scalar abstraction used by every numeric kernel in the crate.
//!
//! All simulation and estimation code is written against [`Real`], which is
//! implemented for `f32` and `f64`. Besides the usual `num-traits` surface it
//! carries the constants that drive [`Scaled`], the extended-exponent state
//! representation: critical chains drift to `|x| ~ exp(O(sqrt(n)))`, far past
//! the native exponent range after a few million steps.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Number of binary orders of magnitude moved per rescaling chunk.
    const CHUNK_BITS: i32;
    /// A scaled mantissa above `2^HIGH_BITS` is moved down one chunk.
    const HIGH_BITS: i32;
    /// A mantissa below `2^LOW_BITS` with a positive chunk count is moved up.
    /// Must exceed the mantissa width so that additive O(1) terms are below
    /// half an ulp whenever the chunk count is positive.
    const LOW_BITS: i32;
    /// `2^HIGH_BITS`, `2^LOW_BITS`, `2^CHUNK_BITS` and `2^-CHUNK_BITS`.
    const HIGH: Self;
    const LOW: Self;
    const CHUNK_UP: Self;
    const CHUNK_DOWN: Self;

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Uniform draw on `[0, 1)`.
    fn unit<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Literal conversion; every `f64` is representable (possibly rounded).
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    /// Exact power of two, `2^e` (flushes to zero below the subnormal range).
    #[inline]
    fn pow2(e: i32) -> Self {
        Self::c(2.0).powi(e)
    }
}

impl Real for f64 {
    const CHUNK_BITS: i32 = 500;
    const HIGH_BITS: i32 = 600;
    const LOW_BITS: i32 = 56;
    const HIGH: f64 = f64::from_bits(((1023 + 600) as u64) << 52);
    const LOW: f64 = f64::from_bits(((1023 + 56) as u64) << 52);
    const CHUNK_UP: f64 = f64::from_bits(((1023 + 500) as u64) << 52);
    const CHUNK_DOWN: f64 = f64::from_bits(((1023 - 500) as u64) << 52);

    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    #[inline]
    fn unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
}

impl Real for f32 {
    const CHUNK_BITS: i32 = 48;
    const HIGH_BITS: i32 = 96;
    const LOW_BITS: i32 = 26;
    const HIGH: f32 = f32::from_bits(((127 + 96) as u32) << 23);
    const LOW: f32 = f32::from_bits(((127 + 26) as u32) << 23);
    const CHUNK_UP: f32 = f32::from_bits(((127 + 48) as u32) << 23);
    const CHUNK_DOWN: f32 = f32::from_bits(((127 - 48) as u32) << 23);

    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    #[inline]
    fn unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
}

/// How a chain state is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateRange {
    /// Mantissa plus a chunked binary exponent; never overflows in practice.
    #[default]
    Extended,
    /// Plain scalar; leaving the representable range aborts the run.
    Native,
}

/// A real number `mantissa * 2^(chunks * CHUNK_BITS)`.
///
/// Rescaling is by exact powers of two, so arithmetic on a `Scaled` value
/// rounds exactly like a float with an unbounded exponent would. While
/// `chunks > 0` the mantissa is at least `2^LOW_BITS` in magnitude, so adding
/// an O(1) innovation term cannot change it beyond rounding.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scaled<F> {
    mantissa: F,
    chunks: i32,
}

impl<F: Real> Scaled<F> {
    #[inline]
    pub fn new(x: F) -> Self {
        Self { mantissa: x, chunks: 0 }.normalized()
    }

    #[inline]
    pub fn mantissa(self) -> F {
        self.mantissa
    }

    #[inline]
    pub fn chunks(self) -> i32 {
        self.chunks
    }

    /// The value as a plain scalar; infinite when out of native range.
    #[inline]
    pub fn value(self) -> F {
        if self.chunks == 0 {
            self.mantissa
        } else {
            let mut v = self.mantissa;
            for _ in 0..self.chunks {
                v *= F::CHUNK_UP;
            }
            v
        }
    }

    #[inline]
    pub fn ln_abs(self) -> F {
        let base = self.mantissa.abs().ln();
        if self.chunks == 0 {
            base
        } else {
            base + F::usize(self.chunks as usize) * F::usize(F::CHUNK_BITS as usize) * F::LN_2()
        }
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.mantissa.is_finite()
    }

    #[inline]
    pub fn is_sign_negative(self) -> bool {
        self.mantissa < F::zero()
    }

    #[inline]
    fn normalized(mut self) -> Self {
        let mag = self.mantissa.abs();
        if mag > F::HIGH && mag.is_finite() {
            self.mantissa *= F::CHUNK_DOWN;
            self.chunks += 1;
        } else if self.chunks > 0 && mag < F::LOW {
            self.mantissa *= F::CHUNK_UP;
            self.chunks -= 1;
        }
        self
    }

    /// Scales an additive term down to this value's chunk.
    #[inline]
    fn align(self, t: F) -> F {
        match self.chunks {
            0 => t,
            1 => t * F::CHUNK_DOWN,
            _ => t * F::CHUNK_DOWN * F::CHUNK_DOWN,
        }
    }

    /// `a * self + b`.
    #[inline]
    pub fn mul_add(self, a: F, b: F, range: StateRange) -> Self {
        let m = a * self.mantissa + self.align(b);
        let out = Self { mantissa: m, chunks: self.chunks };
        match range {
            StateRange::Extended => out.normalized(),
            StateRange::Native => out,
        }
    }

    /// `a * self`.
    #[inline]
    pub fn scale(self, a: F, range: StateRange) -> Self {
        let out = Self { mantissa: a * self.mantissa, chunks: self.chunks };
        match range {
            StateRange::Extended => out.normalized(),
            StateRange::Native => out,
        }
    }

    /// `max(self, c)`.
    #[inline]
    pub fn max_scalar(self, c: F) -> Self {
        if self.chunks == 0 {
            Self { mantissa: self.mantissa.max(c), chunks: 0 }
        } else if self.mantissa > F::zero() {
            self
        } else {
            Self { mantissa: c, chunks: 0 }
        }
    }

    #[inline]
    pub fn max(self, other: Self) -> Self {
        if self.total_cmp(&other) == Ordering::Less {
            other
        } else {
            self
        }
    }

    /// Exact ordering of the represented reals (NaN sorts last).
    pub fn total_cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.mantissa, other.mantissa);
        let sa = a < F::zero();
        let sb = b < F::zero();
        if a == F::zero() && b == F::zero() {
            return Ordering::Equal;
        }
        if sa != sb {
            return if sa { Ordering::Less } else { Ordering::Greater };
        }
        let mag = Self::cmp_magnitude(*self, *other);
        if sa {
            mag.reverse()
        } else {
            mag
        }
    }

    fn cmp_magnitude(x: Self, y: Self) -> Ordering {
        let (mx, my) = (x.mantissa.abs(), y.mantissa.abs());
        let ord = match x.chunks.cmp(&y.chunks) {
            Ordering::Equal => mx.partial_cmp(&my),
            Ordering::Greater => {
                if x.chunks - y.chunks >= 2 {
                    Some(Ordering::Greater)
                } else {
                    mx.partial_cmp(&(my * F::CHUNK_DOWN))
                }
            }
            Ordering::Less => {
                if y.chunks - x.chunks >= 2 {
                    Some(Ordering::Less)
                } else {
                    (mx * F::CHUNK_DOWN).partial_cmp(&my)
                }
            }
        };
        ord.unwrap_or(Ordering::Greater)
    }
}

impl<F: Real> PartialOrd for Scaled<F> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.total_cmp(other))
    }
}

impl<F: Real> From<F> for Scaled<F> {
    fn from(x: F) -> Self {
        Self::new(x)
    }
}
