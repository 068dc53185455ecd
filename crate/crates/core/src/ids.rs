//! Identifier newtypes.
//!
//! Generated identifiers (jobs, agents, offers, NAT mappings) are sequence
//! numbers rendered with a fixed prefix and zero padding, so lexicographic
//! and numeric order agree. Tenant and cluster identifiers are free-form
//! strings chosen by operators.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed identifier {0:?}")]
pub struct ParseIdError(pub String);

macro_rules! sequence_id {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u64);

        impl $name {
            pub const PREFIX: &'static str = $prefix;
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}{:08}", $prefix, self.0)
            }
        }

        impl FromStr for $name {
            type Err = ParseIdError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.strip_prefix($prefix)
                    .filter(|digits| !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|digits| digits.parse().ok())
                    .map($name)
                    .ok_or_else(|| ParseIdError(s.to_string()))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(deserializer)?;
                raw.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

sequence_id!(
    /// A submitted job.
    JobId,
    "job-"
);
sequence_id!(
    /// A compute agent in the unified registry.
    AgentId,
    "agent-"
);
sequence_id!(
    /// A resource offer.
    OfferId,
    "offer-"
);
sequence_id!(
    /// A NAT mapping on the gateway.
    MappingId,
    "map-"
);

macro_rules! name_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(name: impl Into<String>) -> Self {
                $name(name.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }
    };
}

name_id!(
    /// A tenant, typically a gateway's community account.
    TenantId
);
name_id!(
    /// A cluster (cloud or campus site) contributing agents.
    ClusterId
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_ids_sort_like_numbers() {
        let a = JobId(9).to_string();
        let b = JobId(10).to_string();
        assert_eq!(a, "job-00000009");
        assert!(a < b);
        assert_eq!(b.parse::<JobId>().unwrap(), JobId(10));
    }

    #[test]
    fn rejects_foreign_prefix() {
        assert!("offer-00000001".parse::<JobId>().is_err());
        assert!("job-".parse::<JobId>().is_err());
        assert!("job-12x".parse::<JobId>().is_err());
    }

    #[test]
    fn serde_uses_display_form() {
        let json = serde_json::to_string(&AgentId(3)).unwrap();
        assert_eq!(json, "\"agent-00000003\"");
        let back: AgentId = serde_json::from_str(&json).unwrap();
        assert_eq!(back, AgentId(3));
    }
}
