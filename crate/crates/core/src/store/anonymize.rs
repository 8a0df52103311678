//! Salted, truncated SHA-256 masking of identifier fields.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::event::BehaviorEvent;

/// Event fields that can be masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MaskField {
    UserId,
    SubjectId,
    SubjectName,
    Category,
}

impl FromStr for MaskField {
    type Err = AnonymizationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "user_id" => MaskField::UserId,
            "subject_id" => MaskField::SubjectId,
            "subject_name" => MaskField::SubjectName,
            "category" => MaskField::Category,
            other => return Err(AnonymizationError::UnknownField(other.to_string())),
        })
    }
}

impl fmt::Display for MaskField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskField::UserId => "user_id",
            MaskField::SubjectId => "subject_id",
            MaskField::SubjectName => "subject_name",
            MaskField::Category => "category",
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AnonymizationError {
    #[error("anonymization salt must be non-empty")]
    EmptySalt,
    #[error("field `{0}` cannot be masked")]
    UnknownField(String),
}

#[derive(Debug, Clone)]
pub struct AnonymizationPolicy {
    salt: Vec<u8>,
    fields_to_mask: BTreeSet<MaskField>,
}

impl AnonymizationPolicy {
    /// Masks `user_id` and `subject_id`.
    pub fn new(salt: impl Into<Vec<u8>>) -> Result<Self, AnonymizationError> {
        Self::with_fields(salt, [MaskField::UserId, MaskField::SubjectId])
    }

    pub fn with_fields(
        salt: impl Into<Vec<u8>>,
        fields: impl IntoIterator<Item = MaskField>,
    ) -> Result<Self, AnonymizationError> {
        let salt = salt.into();
        if salt.is_empty() {
            return Err(AnonymizationError::EmptySalt);
        }
        Ok(Self {
            salt,
            fields_to_mask: fields.into_iter().collect(),
        })
    }

    pub fn fields(&self) -> impl Iterator<Item = MaskField> + '_ {
        self.fields_to_mask.iter().copied()
    }

    /// First 16 lowercase hex characters of SHA-256(salt ‖ value).
    pub fn mask(&self, value: &str) -> String {
        let mut h = Sha256::new();
        h.update(&self.salt);
        h.update(value.as_bytes());
        let mut out = hex::encode(h.finalize());
        out.truncate(16);
        out
    }
}

pub fn anonymize_event(event: &BehaviorEvent, policy: &AnonymizationPolicy) -> BehaviorEvent {
    let mut out = event.clone();
    for field in policy.fields() {
        let slot = match field {
            MaskField::UserId => &mut out.user_id,
            MaskField::SubjectId => &mut out.subject_id,
            MaskField::SubjectName => &mut out.subject_name,
            MaskField::Category => &mut out.category,
        };
        *slot = policy.mask(slot);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::event::tests::event;
    use crate::store::event::ContentKind;
    use std::collections::HashSet;

    #[test]
    fn deterministic_and_distinct() {
        let p = AnonymizationPolicy::new("pepper").unwrap();
        assert_eq!(p.mask("u1"), p.mask("u1"));
        assert_ne!(p.mask("u1"), p.mask("u2"));
        let m = p.mask("u1");
        assert_eq!(m.len(), 16);
        assert!(m
            .chars()
            .all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
    }

    #[test]
    fn mask_matches_reference_digest() {
        // printf saltid | sha256sum
        let p = AnonymizationPolicy::new("salt").unwrap();
        assert_eq!(p.mask("id"), "6a267e25e7f7c926");
    }

    #[test]
    fn only_listed_fields_change() {
        let p = AnonymizationPolicy::new("s").unwrap();
        let e = event("u1", "m1", ContentKind::Click, 7);
        let a = anonymize_event(&e, &p);
        assert_ne!(a.user_id, e.user_id);
        assert_ne!(a.subject_id, e.subject_id);
        assert_eq!(a.category, e.category);
        assert_eq!(a.subject_name, e.subject_name);
        assert_eq!(a.timestamp, e.timestamp);
        assert_eq!(a, anonymize_event(&e, &p));
    }

    #[test]
    fn policy_validation() {
        assert_eq!(
            AnonymizationPolicy::new("").unwrap_err(),
            AnonymizationError::EmptySalt
        );
        assert!("price".parse::<MaskField>().is_err());
        assert_eq!(
            "category".parse::<MaskField>().unwrap(),
            MaskField::Category
        );
    }

    #[test]
    fn no_collisions_on_large_id_set() {
        let p = AnonymizationPolicy::new("corpus-salt").unwrap();
        let n = 1_000_000;
        let mut seen = HashSet::with_capacity(n);
        for i in 0..n {
            assert!(
                seen.insert(p.mask(&format!("user-{i}"))),
                "collision at {i}"
            );
        }
    }
}
