//! Template-based textualization of behavior events.
//!
//! A template matches on `(subject_kind, content_kind, scenario)`, each either
//! a concrete value or the wildcard `"*"`. The most specific match wins; ties
//! go to the earlier registry entry.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::store::{BehaviorEvent, BehaviorSequence, ContentKind, Scenario, SubjectKind};

pub const PLACEHOLDERS: [&str; 5] = ["date", "scenario", "subject_name", "category", "price"];

/// A template match field: a concrete value or `*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot<T> {
    Any,
    Exact(T),
}

impl<T: PartialEq> Slot<T> {
    pub fn matches(&self, value: &T) -> bool {
        match self {
            Slot::Any => true,
            Slot::Exact(v) => v == value,
        }
    }

    fn is_exact(&self) -> bool {
        matches!(self, Slot::Exact(_))
    }
}

impl<T: fmt::Display> Serialize for Slot<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Slot::Any => s.serialize_str("*"),
            Slot::Exact(v) => s.collect_str(v),
        }
    }
}

impl<'de, T> Deserialize<'de> for Slot<T>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "*" {
            Ok(Slot::Any)
        } else {
            s.parse().map(Slot::Exact).map_err(serde::de::Error::custom)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorTemplate {
    pub template_id: String,
    pub subject_kind: Slot<SubjectKind>,
    pub content_kind: Slot<ContentKind>,
    pub scenario: Slot<Scenario>,
    pub pattern: String,
}

impl BehaviorTemplate {
    pub fn matches(&self, e: &BehaviorEvent) -> bool {
        self.subject_kind.matches(&e.subject_kind)
            && self.content_kind.matches(&e.content_kind)
            && self.scenario.matches(&e.scenario)
    }

    pub fn specificity(&self) -> usize {
        [
            self.subject_kind.is_exact(),
            self.content_kind.is_exact(),
            self.scenario.is_exact(),
        ]
        .into_iter()
        .filter(|x| *x)
        .count()
    }

    pub fn is_fallback(&self) -> bool {
        self.specificity() == 0
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let names = placeholders(&self.pattern).map_err(|reason| TemplateError::Malformed {
            template_id: self.template_id.clone(),
            reason,
        })?;
        if let Some(bad) = names.iter().find(|n| !PLACEHOLDERS.contains(&n.as_str())) {
            return Err(TemplateError::UnknownPlaceholder {
                template_id: self.template_id.clone(),
                name: bad.clone(),
            });
        }
        if !names.iter().any(|n| n == "subject_name") {
            return Err(TemplateError::MissingSubjectName(self.template_id.clone()));
        }
        Ok(())
    }
}

/// Names inside `{...}` in order of appearance.
fn placeholders(pattern: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find(['{', '}']) {
        if rest[open..].starts_with('}') {
            return Err(format!(
                "stray `}}` at byte {}",
                pattern.len() - rest.len() + open
            ));
        }
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| "unclosed `{`".to_string())?;
        let name = &after[..close];
        if name.contains('{') {
            return Err("nested `{`".into());
        }
        out.push(name.to_string());
        rest = &after[close + 1..];
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template_id}` uses unknown placeholder `{{{name}}}`")]
    UnknownPlaceholder { template_id: String, name: String },
    #[error("template `{0}` does not contain {{subject_name}}")]
    MissingSubjectName(String),
    #[error("template `{template_id}` is malformed: {reason}")]
    Malformed { template_id: String, reason: String },
    #[error("registry has no full-wildcard fallback template")]
    NoFallback,
    #[error("duplicate template id `{0}`")]
    DuplicateId(String),
    #[error("registry line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("cannot read registry: {0}")]
    Io(String),
}

/// A validated, ordered set of templates with a fallback.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    templates: Vec<BehaviorTemplate>,
}

impl TemplateRegistry {
    pub fn new(templates: Vec<BehaviorTemplate>) -> Result<Self, TemplateError> {
        let mut ids = std::collections::HashSet::new();
        for t in &templates {
            t.validate()?;
            if !ids.insert(t.template_id.as_str()) {
                return Err(TemplateError::DuplicateId(t.template_id.clone()));
            }
        }
        if !templates.iter().any(BehaviorTemplate::is_fallback) {
            return Err(TemplateError::NoFallback);
        }
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[BehaviorTemplate] {
        &self.templates
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TemplateError> {
        let mut templates = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t = serde_json::from_str(line).map_err(|e| TemplateError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            templates.push(t);
        }
        Self::new(templates)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = fs::read_to_string(path)
            .map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> String {
        self.templates
            .iter()
            .map(|t| serde_json::to_string(t).expect("template serializes") + "\n")
            .collect()
    }

    pub fn select(&self, event: &BehaviorEvent) -> &BehaviorTemplate {
        select_template(&self.templates, event).expect("validated registry has a fallback")
    }
}

/// Most specific matching template, ties by registry order. `None` only if
/// the list lacks a fallback and nothing matches.
pub fn select_template<'a>(
    registry: &'a [BehaviorTemplate],
    event: &BehaviorEvent,
) -> Option<&'a BehaviorTemplate> {
    let mut best: Option<&BehaviorTemplate> = None;
    for t in registry.iter().filter(|t| t.matches(event)) {
        if best.is_none_or(|b| t.specificity() > b.specificity()) {
            best = Some(t);
        }
    }
    best
}

pub fn format_date(timestamp: i64) -> String {
    chrono::DateTime::from_timestamp(timestamp, 0)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| "n/a".to_string())
}

/// Minor units as major units with two decimals; absent → `n/a`.
pub fn format_price(price_minor: Option<i64>) -> String {
    match price_minor {
        Some(p) => {
            let sign = if p < 0 { "-" } else { "" };
            let a = p.unsigned_abs();
            format!("{sign}{}.{:02}", a / 100, a % 100)
        }
        None => "n/a".to_string(),
    }
}

pub fn render_event(event: &BehaviorEvent, template: &BehaviorTemplate) -> String {
    let mut out = String::with_capacity(template.pattern.len() + 32);
    let mut rest = template.pattern.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            out.push_str(&rest[open..]);
            return out;
        };
        match &after[..close] {
            "date" => out.push_str(&format_date(event.timestamp)),
            "scenario" => out.push_str(event.scenario.display_name()),
            "subject_name" => out.push_str(&event.subject_name),
            "category" => out.push_str(&event.category),
            "price" => out.push_str(&format_price(event.price_minor)),
            other => {
                out.push('{');
                out.push_str(other);
                out.push('}');
            }
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    ByScenario,
    Flat,
}

pub const SCENARIO_ORDER: [Scenario; 4] = [
    Scenario::AppHomepage,
    Scenario::MiniProgram,
    Scenario::Search,
    Scenario::Other,
];

pub fn section_header(s: Scenario) -> &'static str {
    match s {
        Scenario::AppHomepage => "Behavior on the app homepage:",
        Scenario::MiniProgram => "Behavior in the mini program:",
        Scenario::Search => "Behavior in search:",
        Scenario::Other => "Other behavior:",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Section {
    scenario: Option<Scenario>,
    len: usize,
}

/// A user's rendered behavior. `lines` holds one entry per event; section
/// headers are kept apart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BehaviorText {
    pub user_id: String,
    pub lines: Vec<String>,
    pub section_headers: BTreeMap<Scenario, String>,
    #[serde(skip)]
    sections: Vec<Section>,
    /// Position of each line's event in the source sequence (0 = newest).
    #[serde(skip)]
    recency: Vec<usize>,
}

impl BehaviorText {
    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    fn text_keeping(&self, keep: usize) -> String {
        let mut out = String::new();
        let mut idx = 0;
        for sec in &self.sections {
            let lines: Vec<&str> = (idx..idx + sec.len)
                .filter(|&i| self.recency[i] < keep)
                .map(|i| self.lines[i].as_str())
                .collect();
            idx += sec.len;
            if lines.is_empty() {
                continue;
            }
            if let Some(s) = sec.scenario {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&self.section_headers[&s]);
                out.push('\n');
            }
            for l in lines {
                out.push_str(l);
                out.push('\n');
            }
        }
        out
    }

    /// Headers and lines joined with newlines.
    pub fn to_text(&self) -> String {
        self.text_keeping(usize::MAX)
    }

    /// Like [`to_text`](Self::to_text) but drops the oldest events until the
    /// result has at most `max_chars` characters.
    pub fn to_text_capped(&self, max_chars: usize) -> String {
        let fits = |keep: usize| self.text_keeping(keep).chars().count() <= max_chars;
        let n = self.lines.len();
        if fits(n) {
            return self.text_keeping(n);
        }
        // largest `keep` that fits; text length is monotone in `keep`
        let (mut lo, mut hi) = (0usize, n);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        self.text_keeping(lo)
    }
}

pub fn render_sequence(seq: &BehaviorSequence, registry: &TemplateRegistry) -> BehaviorText {
    render_sequence_with(seq, registry, Grouping::ByScenario)
}

pub fn render_sequence_with(
    seq: &BehaviorSequence,
    registry: &TemplateRegistry,
    grouping: Grouping,
) -> BehaviorText {
    let events = &seq.events[..seq.events.len().min(seq.cap)];
    let mut text = BehaviorText {
        user_id: seq.user_id.clone(),
        lines: Vec::with_capacity(events.len()),
        section_headers: BTreeMap::new(),
        sections: Vec::new(),
        recency: Vec::with_capacity(events.len()),
    };
    let push = |text: &mut BehaviorText, i: usize, e: &BehaviorEvent| {
        text.lines.push(render_event(e, registry.select(e)));
        text.recency.push(i);
    };
    match grouping {
        Grouping::Flat => {
            for (i, e) in events.iter().enumerate() {
                push(&mut text, i, e);
            }
            if !events.is_empty() {
                text.sections.push(Section {
                    scenario: None,
                    len: events.len(),
                });
            }
        }
        Grouping::ByScenario => {
            for s in SCENARIO_ORDER {
                let before = text.lines.len();
                for (i, e) in events.iter().enumerate().filter(|(_, e)| e.scenario == s) {
                    push(&mut text, i, e);
                }
                let len = text.lines.len() - before;
                if len > 0 {
                    text.section_headers
                        .insert(s, section_header(s).to_string());
                    text.sections.push(Section {
                        scenario: Some(s),
                        len,
                    });
                }
            }
        }
    }
    text
}

fn template(
    id: &str,
    subject: Slot<SubjectKind>,
    content: Slot<ContentKind>,
    scenario: Slot<Scenario>,
    pattern: &str,
) -> BehaviorTemplate {
    BehaviorTemplate {
        template_id: id.to_string(),
        subject_kind: subject,
        content_kind: content,
        scenario,
        pattern: pattern.to_string(),
    }
}

/// The shipped registry: for each content kind a search, a product and a
/// merchant template, then the wildcard fallback.
pub fn default_registry() -> TemplateRegistry {
    use ContentKind::*;
    use Slot::{Any, Exact};
    use SubjectKind::*;
    let search = Exact(Scenario::Search);
    let templates = vec![
        template("order_search", Any, Exact(Order), search, "{date} searched and ordered '{subject_name}' (category: {category}, price: {price})"),
        template("order_product", Exact(Product), Exact(Order), Any, "{date} on the {scenario} ordered '{subject_name}' (category: {category}, price: {price})"),
        template("order_merchant", Exact(Merchant), Exact(Order), Any, "{date} on the {scenario} placed an order at '{subject_name}' (category: {category}, price: {price})"),
        template("click_search", Any, Exact(Click), search, "{date} clicked search result '{subject_name}' (category: {category})"),
        template("click_product", Exact(Product), Exact(Click), Any, "{date} on the {scenario} clicked dish '{subject_name}' (category: {category}, price: {price})"),
        template("click_merchant", Exact(Merchant), Exact(Click), Any, "{date} on the {scenario} clicked merchant '{subject_name}' (category: {category})"),
        template("exposure_search", Any, Exact(Exposure), search, "{date} saw search result '{subject_name}' (category: {category})"),
        template("exposure_product", Exact(Product), Exact(Exposure), Any, "{date} on the {scenario} was shown dish '{subject_name}' (category: {category}, price: {price})"),
        template("exposure_merchant", Exact(Merchant), Exact(Exposure), Any, "{date} on the {scenario} was shown merchant '{subject_name}' (category: {category})"),
        template("fallback", Any, Any, Any, "{date} on the {scenario} interacted with '{subject_name}' (category: {category}, price: {price})"),
    ];
    TemplateRegistry::new(templates).expect("default registry is valid")
}
