//! Time and percentile primitives shared by every module.
//!
//! Durations and timestamps are integer microseconds. Conversions from
//! floating point round half-up so that a run is reproducible bit for bit
//! on every platform.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A signed duration or timestamp in microseconds.
///
/// Signed so that intermediate budget arithmetic (`x_pt - x_u`) can go
/// negative before it is clamped.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Micros(pub i64);

impl Micros {
    pub const ZERO: Micros = Micros(0);
    pub const MAX: Micros = Micros(i64::MAX);

    pub const fn from_millis(ms: i64) -> Self {
        Micros(ms * 1_000)
    }

    pub const fn from_secs(s: i64) -> Self {
        Micros(s * 1_000_000)
    }

    /// Rounds half-up to the nearest microsecond.
    pub fn from_f64_us(us: f64) -> Self {
        Micros((us + 0.5).floor() as i64)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        Self::from_f64_us(ms * 1_000.0)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        Self::from_f64_us(s * 1_000_000.0)
    }

    pub const fn as_us(self) -> i64 {
        self.0
    }

    pub fn as_f64_us(self) -> f64 {
        self.0 as f64
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    pub fn max(self, other: Micros) -> Micros {
        Micros(self.0.max(other.0))
    }

    pub fn min(self, other: Micros) -> Micros {
        Micros(self.0.min(other.0))
    }

    pub fn saturating_sub(self, other: Micros) -> Micros {
        Micros(self.0.saturating_sub(other.0))
    }
}

impl Add for Micros {
    type Output = Micros;

    fn add(self, rhs: Micros) -> Micros {
        Micros(self.0 + rhs.0)
    }
}

impl AddAssign for Micros {
    fn add_assign(&mut self, rhs: Micros) {
        self.0 += rhs.0;
    }
}

impl Sub for Micros {
    type Output = Micros;

    fn sub(self, rhs: Micros) -> Micros {
        Micros(self.0 - rhs.0)
    }
}

impl fmt::Display for Micros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("percentile {0} is outside the open interval (0, 100)")]
pub struct PercentileOutOfRange(pub f64);

/// A percentile strictly inside (0, 100).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Percentile(f64);

impl Percentile {
    pub fn new(p: f64) -> Result<Self, PercentileOutOfRange> {
        if p > 0.0 && p < 100.0 && p.is_finite() {
            Ok(Percentile(p))
        } else {
            Err(PercentileOutOfRange(p))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The percentile as a probability in (0, 1).
    pub fn fraction(self) -> f64 {
        self.0 / 100.0
    }
}

impl TryFrom<f64> for Percentile {
    type Error = PercentileOutOfRange;

    fn try_from(p: f64) -> Result<Self, Self::Error> {
        Percentile::new(p)
    }
}

impl From<Percentile> for f64 {
    fn from(p: Percentile) -> f64 {
        p.0
    }
}

impl fmt::Display for Percentile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}
