//! Resource quantities and their arithmetic.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// CPU quantity in hundredths of a core.
///
/// Stored as an integer so that offer and allocation bookkeeping is exact.
/// Serialized as a JSON number with at most two decimals (`0.5`, `2`, `1.25`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cpus(u64);

impl Cpus {
    pub const ZERO: Cpus = Cpus(0);

    pub const fn from_centi(centi: u64) -> Self {
        Cpus(centi)
    }

    pub const fn cores(n: u64) -> Self {
        Cpus(n * 100)
    }

    /// Parses a fractional core count. Rejects negative, non-finite and
    /// sub-hundredth values.
    pub fn from_f64(value: f64) -> Result<Self, ResourceError> {
        if !value.is_finite() || value < 0.0 {
            return Err(ResourceError::InvalidCpus(value));
        }
        let scaled = value * 100.0;
        let rounded = scaled.round();
        if (scaled - rounded).abs() > 1e-6 || rounded > u64::MAX as f64 {
            return Err(ResourceError::InvalidCpus(value));
        }
        Ok(Cpus(rounded as u64))
    }

    pub const fn centi(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Cpus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / 100;
        let frac = self.0 % 100;
        if frac == 0 {
            write!(f, "{whole}")
        } else if frac.is_multiple_of(10) {
            write!(f, "{whole}.{}", frac / 10)
        } else {
            write!(f, "{whole}.{frac:02}")
        }
    }
}

impl Serialize for Cpus {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.0.is_multiple_of(100) {
            serializer.serialize_u64(self.0 / 100)
        } else {
            serializer.serialize_f64(self.as_f64())
        }
    }
}

impl<'de> Deserialize<'de> for Cpus {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = f64::deserialize(deserializer)?;
        Cpus::from_f64(value).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResourceError {
    #[error("resource arithmetic overflow")]
    ArithmeticOverflow,
    #[error("insufficient resources: {available} cannot cover {requested}")]
    InsufficientResources {
        available: ResourceVector,
        requested: ResourceVector,
    },
    #[error("cpus must be a finite non-negative multiple of 0.01, got {0}")]
    InvalidCpus(f64),
}

/// A cpus / memory / disk triple. Every capacity, allocation, request and
/// offer in the system is one of these.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceVector {
    pub cpus: Cpus,
    pub mem_mb: u64,
    pub disk_mb: u64,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector {
        cpus: Cpus::ZERO,
        mem_mb: 0,
        disk_mb: 0,
    };

    pub const fn new(cpus: Cpus, mem_mb: u64, disk_mb: u64) -> Self {
        ResourceVector {
            cpus,
            mem_mb,
            disk_mb,
        }
    }

    /// Whole-core convenience constructor.
    pub const fn cores(cores: u64, mem_mb: u64, disk_mb: u64) -> Self {
        ResourceVector::new(Cpus::cores(cores), mem_mb, disk_mb)
    }

    pub fn checked_add(&self, other: &ResourceVector) -> Result<ResourceVector, ResourceError> {
        Ok(ResourceVector {
            cpus: Cpus(
                self.cpus
                    .0
                    .checked_add(other.cpus.0)
                    .ok_or(ResourceError::ArithmeticOverflow)?,
            ),
            mem_mb: self
                .mem_mb
                .checked_add(other.mem_mb)
                .ok_or(ResourceError::ArithmeticOverflow)?,
            disk_mb: self
                .disk_mb
                .checked_add(other.disk_mb)
                .ok_or(ResourceError::ArithmeticOverflow)?,
        })
    }

    /// Componentwise difference; fails if any component would go negative.
    pub fn checked_sub(&self, other: &ResourceVector) -> Result<ResourceVector, ResourceError> {
        match (
            self.cpus.0.checked_sub(other.cpus.0),
            self.mem_mb.checked_sub(other.mem_mb),
            self.disk_mb.checked_sub(other.disk_mb),
        ) {
            (Some(cpus), Some(mem_mb), Some(disk_mb)) => Ok(ResourceVector {
                cpus: Cpus(cpus),
                mem_mb,
                disk_mb,
            }),
            _ => Err(ResourceError::InsufficientResources {
                available: *self,
                requested: *other,
            }),
        }
    }

    /// True iff `self` fits inside `available` in every dimension.
    pub fn fits(&self, available: &ResourceVector) -> bool {
        self.cpus <= available.cpus
            && self.mem_mb <= available.mem_mb
            && self.disk_mb <= available.disk_mb
    }

    pub fn is_zero(&self) -> bool {
        *self == ResourceVector::ZERO
    }

    pub fn any_positive(&self) -> bool {
        !self.is_zero()
    }

    pub fn all_positive(&self) -> bool {
        self.cpus.0 > 0 && self.mem_mb > 0 && self.disk_mb > 0
    }

    /// Saturating sum, for aggregate views where overflow is impossible in
    /// practice (cluster totals).
    pub fn saturating_add(&self, other: &ResourceVector) -> ResourceVector {
        ResourceVector {
            cpus: Cpus(self.cpus.0.saturating_add(other.cpus.0)),
            mem_mb: self.mem_mb.saturating_add(other.mem_mb),
            disk_mb: self.disk_mb.saturating_add(other.disk_mb),
        }
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{{cpus: {}, mem_mb: {}, disk_mb: {}}}",
            self.cpus, self.mem_mb, self.disk_mb
        )
    }
}

impl std::iter::Sum for ResourceVector {
    fn sum<I: Iterator<Item = ResourceVector>>(iter: I) -> Self {
        iter.fold(ResourceVector::ZERO, |acc, r| acc.saturating_add(&r))
    }
}
