use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// What the user interacted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectKind {
    Merchant,
    Product,
}

/// How the user interacted: the exposure → click → order funnel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentKind {
    Click,
    Exposure,
    Order,
}

/// Where in the product surface the interaction happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    AppHomepage,
    MiniProgram,
    Search,
    Other,
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $s),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($s => Ok($ty::$variant),)+
                    other => Err(format!("unknown {} `{}`", stringify!($ty), other)),
                }
            }
        }
    };
}

string_enum!(SubjectKind { Merchant => "merchant", Product => "product" });
string_enum!(ContentKind { Click => "click", Exposure => "exposure", Order => "order" });
string_enum!(Scenario {
    AppHomepage => "app_homepage",
    MiniProgram => "mini_program",
    Search => "search",
    Other => "other",
});

impl Scenario {
    /// Human-readable label used in rendered text.
    pub fn display_name(self) -> &'static str {
        match self {
            Scenario::AppHomepage => "app homepage",
            Scenario::MiniProgram => "mini program",
            Scenario::Search => "search",
            Scenario::Other => "other",
        }
    }
}

/// One heterogeneous interaction: subject × content × scenario × time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorEvent {
    pub user_id: String,
    pub subject_kind: SubjectKind,
    pub subject_id: String,
    pub subject_name: String,
    pub category: String,
    #[serde(default)]
    pub price_minor: Option<i64>,
    pub content_kind: ContentKind,
    pub scenario: Scenario,
    pub timestamp: i64,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// Why an event failed validation. The `Display` text is the reject reason
/// reported by ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum EventViolation {
    #[error("nonpositive timestamp")]
    NonPositiveTimestamp,
    #[error("negative price")]
    NegativePrice,
    #[error("missing order price")]
    MissingOrderPrice,
    #[error("empty user_id")]
    EmptyUserId,
    #[error("empty subject_id")]
    EmptySubjectId,
}

impl BehaviorEvent {
    pub fn validate(&self) -> Result<(), EventViolation> {
        if self.user_id.is_empty() {
            return Err(EventViolation::EmptyUserId);
        }
        if self.subject_id.is_empty() {
            return Err(EventViolation::EmptySubjectId);
        }
        if self.timestamp <= 0 {
            return Err(EventViolation::NonPositiveTimestamp);
        }
        match self.price_minor {
            Some(p) if p < 0 => return Err(EventViolation::NegativePrice),
            None if self.content_kind == ContentKind::Order
                && self.subject_kind == SubjectKind::Product =>
            {
                return Err(EventViolation::MissingOrderPrice)
            }
            _ => {}
        }
        Ok(())
    }

    /// Canonical single-line JSON form. Two events are duplicates iff these
    /// strings are equal.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("BehaviorEvent serialization is infallible")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }

    /// Merchant this event is attributed to: the subject itself for merchant
    /// events, the `merchant_id` attribute for products.
    pub fn merchant_id(&self) -> Option<&str> {
        match self.subject_kind {
            SubjectKind::Merchant => Some(&self.subject_id),
            SubjectKind::Product => self.attributes.get("merchant_id").map(String::as_str),
        }
    }

    pub fn merchant_name(&self) -> Option<&str> {
        match self.subject_kind {
            SubjectKind::Merchant => Some(&self.subject_name),
            SubjectKind::Product => self.attributes.get("merchant_name").map(String::as_str),
        }
    }
}

/// Sequence order: newest first, then `(subject_id, content_kind)` ascending.
/// The canonical line breaks any remaining tie so the order is total.
pub fn sequence_order(a: &BehaviorEvent, b: &BehaviorEvent) -> Ordering {
    b.timestamp
        .cmp(&a.timestamp)
        .then_with(|| a.subject_id.cmp(&b.subject_id))
        .then_with(|| a.content_kind.as_str().cmp(b.content_kind.as_str()))
}

pub const DEFAULT_SEQUENCE_CAP: usize = 300;

/// A user's most recent events, newest first, at most `cap` long.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub user_id: String,
    pub events: Vec<BehaviorEvent>,
    pub cap: usize,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SequenceError {
    #[error("sequence cap must be positive")]
    ZeroCap,
    #[error("event for user `{found}` in sequence of `{expected}`")]
    ForeignEvent { expected: String, found: String },
}

impl BehaviorSequence {
    /// Sorts `events` into sequence order and keeps the newest `cap`.
    pub fn new(
        user_id: impl Into<String>,
        mut events: Vec<BehaviorEvent>,
        cap: usize,
    ) -> Result<Self, SequenceError> {
        let user_id = user_id.into();
        if cap == 0 {
            return Err(SequenceError::ZeroCap);
        }
        if let Some(e) = events.iter().find(|e| e.user_id != user_id) {
            return Err(SequenceError::ForeignEvent {
                expected: user_id,
                found: e.user_id.clone(),
            });
        }
        let mut keyed: Vec<(String, BehaviorEvent)> =
            events.drain(..).map(|e| (e.to_line(), e)).collect();
        keyed.sort_by(|(la, a), (lb, b)| sequence_order(a, b).then_with(|| la.cmp(lb)));
        keyed.truncate(cap);
        Ok(Self {
            user_id,
            events: keyed.into_iter().map(|(_, e)| e).collect(),
            cap,
        })
    }

    pub fn empty(user_id: impl Into<String>, cap: usize) -> Self {
        Self {
            user_id: user_id.into(),
            events: Vec::new(),
            cap: cap.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// SHA-256 over the canonical lines, newline-terminated, in sequence order.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in &self.events {
            h.update(e.to_line().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn event(user: &str, subject: &str, kind: ContentKind, ts: i64) -> BehaviorEvent {
        BehaviorEvent {
            user_id: user.into(),
            subject_kind: SubjectKind::Merchant,
            subject_id: subject.into(),
            subject_name: format!("Shop {subject}"),
            category: "Sichuan".into(),
            price_minor: None,
            content_kind: kind,
            scenario: Scenario::AppHomepage,
            timestamp: ts,
            attributes: BTreeMap::new(),
        }
    }

    #[test]
    fn validation_reasons() {
        let mut e = event("u1", "m1", ContentKind::Click, 0);
        assert_eq!(e.validate(), Err(EventViolation::NonPositiveTimestamp));
        assert_eq!(
            EventViolation::NonPositiveTimestamp.to_string(),
            "nonpositive timestamp"
        );
        e.timestamp = 10;
        assert!(e.validate().is_ok());
        e.subject_kind = SubjectKind::Product;
        e.content_kind = ContentKind::Order;
        assert_eq!(e.validate(), Err(EventViolation::MissingOrderPrice));
        e.price_minor = Some(-1);
        assert_eq!(e.validate(), Err(EventViolation::NegativePrice));
        e.price_minor = Some(0);
        assert!(e.validate().is_ok());
        // merchant orders may omit the price
        e.subject_kind = SubjectKind::Merchant;
        e.price_minor = None;
        assert!(e.validate().is_ok());
    }

    #[test]
    fn unknown_keys_and_bad_enums_rejected() {
        let good = event("u1", "m1", ContentKind::Click, 5).to_line();
        assert!(BehaviorEvent::from_line(&good).is_ok());
        let extra = good.replacen('{', "{\"extra\":1,", 1);
        assert!(BehaviorEvent::from_line(&extra).is_err());
        let bad_enum = good.replace("\"click\"", "\"purchase\"");
        assert!(BehaviorEvent::from_line(&bad_enum).is_err());
    }

    #[test]
    fn wire_format_uses_lowercase_enums() {
        let mut e = event("u1", "m1", ContentKind::Order, 5);
        e.scenario = Scenario::MiniProgram;
        let line = e.to_line();
        assert!(line.contains("\"subject_kind\":\"merchant\""));
        assert!(line.contains("\"content_kind\":\"order\""));
        assert!(line.contains("\"scenario\":\"mini_program\""));
        assert!(line.contains("\"timestamp\":5"));
    }

    #[test]
    fn sequence_orders_newest_first_with_ties() {
        let events = vec![
            event("u", "b", ContentKind::Order, 10),
            event("u", "a", ContentKind::Order, 10),
            event("u", "a", ContentKind::Click, 10),
            event("u", "z", ContentKind::Click, 20),
        ];
        let seq = BehaviorSequence::new("u", events, 300).unwrap();
        let got: Vec<_> = seq
            .events
            .iter()
            .map(|e| (e.timestamp, e.subject_id.as_str(), e.content_kind))
            .collect();
        assert_eq!(
            got,
            vec![
                (20, "z", ContentKind::Click),
                (10, "a", ContentKind::Click),
                (10, "a", ContentKind::Order),
                (10, "b", ContentKind::Order),
            ]
        );
    }

    #[test]
    fn sequence_rejects_foreign_events_and_zero_cap() {
        let events = vec![
            event("u", "a", ContentKind::Click, 1),
            event("v", "a", ContentKind::Click, 1),
        ];
        assert!(matches!(
            BehaviorSequence::new("u", events, 5),
            Err(SequenceError::ForeignEvent { .. })
        ));
        assert_eq!(
            BehaviorSequence::new("u", vec![], 0),
            Err(SequenceError::ZeroCap)
        );
    }
}
