//! Heterogeneous knowledge fusion: a user's rendered behavior becomes a
//! [`KnowledgeDocument`].
//!
//! Facets are always aggregated locally from the sequence; only the free-form
//! `text` comes from the backend. The mock backend writes that text from a
//! fixed summary template, the HTTP backend asks a chat model.

pub mod chat;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use chat::{BackendError, ChatClient, ChatMessage, ChatRequest, ChatResponse, RetryPolicy};

use crate::concurrency::map_bounded;
use crate::jsonl::{self, JsonlError};
use crate::prompt::{format_price, BehaviorText};
use crate::store::{BehaviorSequence, ContentKind, Scenario};

pub const FUSION_SYSTEM_PROMPT: &str =
    "Summarize this user's dining preferences: top categories, price range, favorite merchants, usage scenarios.";
pub const EMPTY_KNOWLEDGE_TEXT: &str = "no recorded behavior";
pub const DEFAULT_INPUT_CHAR_CAP: usize = 8000;

/// Per-content weights for facet counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorWeights {
    pub order: u64,
    pub click: u64,
    pub exposure: u64,
}

impl Default for BehaviorWeights {
    fn default() -> Self {
        Self {
            order: 10,
            click: 3,
            exposure: 1,
        }
    }
}

impl BehaviorWeights {
    pub fn of(&self, kind: ContentKind) -> u64 {
        match kind {
            ContentKind::Order => self.order,
            ContentKind::Click => self.click,
            ContentKind::Exposure => self.exposure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceStats {
    pub median_minor: i64,
    pub p25_minor: i64,
    pub p75_minor: i64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Facets {
    pub top_categories: Vec<(String, u64)>,
    pub price_stats: Option<PriceStats>,
    pub top_merchants: Vec<(String, u64)>,
    pub scenario_mix: BTreeMap<Scenario, f64>,
}

impl Facets {
    pub fn category_count(&self, name: &str) -> u64 {
        self.top_categories
            .iter()
            .find(|(c, _)| c.eq_ignore_ascii_case(name))
            .map_or(0, |(_, n)| *n)
    }

    pub fn merchant_count(&self, id: &str) -> u64 {
        self.top_merchants
            .iter()
            .find(|(m, _)| m == id)
            .map_or(0, |(_, n)| *n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend_id: String,
    pub model_name: String,
    pub prompt_sha256: String,
    pub sequence_sha256: String,
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeDocument {
    pub user_id: String,
    pub text: String,
    pub facets: Facets,
    pub provenance: Provenance,
}

/// Nearest-rank percentile of sorted, non-empty `values`.
pub fn nearest_rank(sorted: &[i64], percentile: f64) -> i64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn ranked(counts: HashMap<String, u64>) -> Vec<(String, u64)> {
    let mut v: Vec<(String, u64)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

pub fn compute_facets(seq: &BehaviorSequence, weights: &BehaviorWeights) -> Facets {
    let mut categories: HashMap<String, u64> = HashMap::new();
    let mut merchants: HashMap<String, u64> = HashMap::new();
    let mut scenarios: BTreeMap<Scenario, usize> = BTreeMap::new();
    let mut prices = Vec::new();
    for e in &seq.events {
        let w = weights.of(e.content_kind);
        *categories.entry(e.category.clone()).or_default() += w;
        if let Some(m) = e.merchant_id() {
            *merchants.entry(m.to_string()).or_default() += w;
        }
        *scenarios.entry(e.scenario).or_default() += 1;
        if e.content_kind == ContentKind::Order {
            prices.extend(e.price_minor);
        }
    }
    prices.sort_unstable();
    let price_stats = (!prices.is_empty()).then(|| PriceStats {
        median_minor: nearest_rank(&prices, 50.0),
        p25_minor: nearest_rank(&prices, 25.0),
        p75_minor: nearest_rank(&prices, 75.0),
    });
    let total = seq.events.len() as f64;
    let scenario_mix = if seq.events.is_empty() {
        BTreeMap::new()
    } else {
        Scenario::ALL
            .iter()
            .map(|s| (*s, *scenarios.get(s).unwrap_or(&0) as f64 / total))
            .collect()
    };
    Facets {
        top_categories: ranked(categories),
        price_stats,
        top_merchants: ranked(merchants),
        scenario_mix,
    }
}

/// Merchant id → display name as seen in the sequence.
fn merchant_names(seq: &BehaviorSequence) -> HashMap<&str, &str> {
    seq.events
        .iter()
        .filter_map(|e| Some((e.merchant_id()?, e.merchant_name()?)))
        .collect()
}

/// The mock backend's fused text: a fixed template over the facets.
pub fn summary_text(facets: &Facets, seq: &BehaviorSequence) -> String {
    if seq.events.is_empty() {
        return EMPTY_KNOWLEDGE_TEXT.to_string();
    }
    let total: u64 = facets.top_categories.iter().map(|(_, n)| n).sum();
    let cats: Vec<String> = facets
        .top_categories
        .iter()
        .take(3)
        .map(|(c, n)| format!("{c} ({:.0}%)", 100.0 * *n as f64 / total as f64))
        .collect();
    let mut text = format!("Favorite categories: {}.", cats.join(", "));
    match &facets.price_stats {
        Some(p) => text.push_str(&format!(
            " Usual order price: {} to {} (median {}).",
            format_price(Some(p.p25_minor)),
            format_price(Some(p.p75_minor)),
            format_price(Some(p.median_minor))
        )),
        None => text.push_str(" No orders with a known price."),
    }
    let names = merchant_names(seq);
    let merchants: Vec<String> = facets
        .top_merchants
        .iter()
        .take(3)
        .map(|(id, _)| {
            names
                .get(id.as_str())
                .map_or_else(|| id.clone(), |n| format!("{n} ({id})"))
        })
        .collect();
    if !merchants.is_empty() {
        text.push_str(&format!(" Favorite merchants: {}.", merchants.join(", ")));
    }
    let mut mix: Vec<(&Scenario, &f64)> = facets
        .scenario_mix
        .iter()
        .filter(|(_, f)| **f > 0.0)
        .collect();
    mix.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
    let mix: Vec<String> = mix
        .iter()
        .map(|(s, f)| format!("{} {:.0}%", s.display_name(), **f * 100.0))
        .collect();
    text.push_str(&format!(" Active on: {}.", mix.join(", ")));
    text
}

pub fn prompt_sha256() -> String {
    jsonl::sha256_hex(FUSION_SYSTEM_PROMPT.as_bytes())
}

/// Where fused text and recommendations come from.
#[derive(Debug, Clone)]
pub enum Backend {
    /// Deterministic rule-based stand-in.
    Mock { model_name: String },
    Http {
        client: ChatClient,
        model_name: String,
    },
}

impl Backend {
    pub fn mock(model_name: impl Into<String>) -> Self {
        Backend::Mock {
            model_name: model_name.into(),
        }
    }

    pub fn http(client: ChatClient, model_name: impl Into<String>) -> Self {
        Backend::Http {
            client,
            model_name: model_name.into(),
        }
    }

    pub fn backend_id(&self) -> &'static str {
        match self {
            Backend::Mock { .. } => "mock",
            Backend::Http { .. } => "http",
        }
    }

    pub fn model_name(&self) -> &str {
        match self {
            Backend::Mock { model_name } | Backend::Http { model_name, .. } => model_name,
        }
    }

    pub fn is_mock(&self) -> bool {
        matches!(self, Backend::Mock { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub weights: BehaviorWeights,
    /// Characters of behavior text sent to the model.
    pub input_char_cap: usize,
    /// Concurrent backend calls in batch mode.
    pub concurrency: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            weights: BehaviorWeights::default(),
            input_char_cap: DEFAULT_INPUT_CHAR_CAP,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
#[error("fusion failed for user `{user_id}`: {source}")]
pub struct FusionError {
    pub user_id: String,
    #[source]
    pub source: BackendError,
}

fn mock_document(seq: &BehaviorSequence, facets: Facets, model_name: &str) -> KnowledgeDocument {
    KnowledgeDocument {
        user_id: seq.user_id.clone(),
        text: summary_text(&facets, seq),
        facets,
        provenance: Provenance {
            backend_id: "mock".into(),
            model_name: model_name.into(),
            prompt_sha256: prompt_sha256(),
            sequence_sha256: seq.digest(),
            created_at: seq.events.first().map_or(0, |e| e.timestamp),
        },
    }
}

/// Deterministic fusion with default weights. `created_at` is the newest
/// event's timestamp so output is reproducible.
pub fn mock_fuse(text: &BehaviorText, seq: &BehaviorSequence) -> KnowledgeDocument {
    debug_assert_eq!(text.user_id, seq.user_id);
    mock_document(
        seq,
        compute_facets(seq, &BehaviorWeights::default()),
        "mock",
    )
}

pub fn fusion_request(text: &BehaviorText, model_name: &str, config: &FusionConfig) -> ChatRequest {
    ChatRequest::new(
        model_name,
        vec![
            ChatMessage::system(FUSION_SYSTEM_PROMPT),
            ChatMessage::user(text.to_text_capped(config.input_char_cap)),
        ],
    )
}

pub fn fuse(
    text: &BehaviorText,
    seq: &BehaviorSequence,
    backend: &Backend,
    config: &FusionConfig,
) -> Result<KnowledgeDocument, FusionError> {
    let facets = compute_facets(seq, &config.weights);
    match backend {
        Backend::Mock { model_name } => Ok(mock_document(seq, facets, model_name)),
        Backend::Http { client, model_name } => {
            let fused = if seq.events.is_empty() {
                EMPTY_KNOWLEDGE_TEXT.to_string()
            } else {
                let response = client
                    .chat(&fusion_request(text, model_name, config))
                    .map_err(|source| FusionError {
                        user_id: seq.user_id.clone(),
                        source,
                    })?;
                let content = response.content.trim().to_string();
                if content.is_empty() {
                    return Err(FusionError {
                        user_id: seq.user_id.clone(),
                        source: BackendError::Protocol("empty completion".into()),
                    });
                }
                content
            };
            Ok(KnowledgeDocument {
                user_id: seq.user_id.clone(),
                text: fused,
                facets,
                provenance: Provenance {
                    backend_id: "http".into(),
                    model_name: model_name.clone(),
                    prompt_sha256: prompt_sha256(),
                    sequence_sha256: seq.digest(),
                    created_at: chrono::Utc::now().timestamp(),
                },
            })
        }
    }
}

/// Fused text cache keyed by user, prompt, backend/model and sequence digest.
#[derive(Debug, Default)]
pub struct FusionCache {
    entries: Mutex<BTreeMap<String, CacheEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    text: String,
    created_at: i64,
}

impl FusionCache {
    fn key(user_id: &str, backend: &Backend, sequence_sha256: &str) -> String {
        jsonl::sha256_hex(
            format!(
                "{user_id}\n{}\n{}\n{}\n{sequence_sha256}",
                prompt_sha256(),
                backend.backend_id(),
                backend.model_name()
            )
            .as_bytes(),
        )
    }

    pub fn load(path: &Path) -> Result<Self, JsonlError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let entries: Vec<CacheEntry> = jsonl::read_jsonl(path)?;
        Ok(Self {
            entries: Mutex::new(entries.into_iter().map(|e| (e.key.clone(), e)).collect()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), JsonlError> {
        let entries = self.entries.lock().expect("cache poisoned");
        jsonl::write_jsonl(path, entries.values()).map(|_| ())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries
            .lock()
            .expect("cache poisoned")
            .get(key)
            .cloned()
    }

    fn put(&self, doc: &KnowledgeDocument, key: String) {
        self.entries.lock().expect("cache poisoned").insert(
            key.clone(),
            CacheEntry {
                key,
                text: doc.text.clone(),
                created_at: doc.provenance.created_at,
            },
        );
    }
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    /// Sorted by user id.
    pub documents: Vec<KnowledgeDocument>,
    pub failures: Vec<FusionError>,
    pub cache_hits: usize,
}

/// Fuses many users with at most `config.concurrency` backend calls in flight.
pub fn fuse_batch(
    inputs: &[(BehaviorText, BehaviorSequence)],
    backend: &Backend,
    config: &FusionConfig,
    cache: Option<&FusionCache>,
) -> BatchOutcome {
    let results = map_bounded(inputs, config.concurrency, |(text, seq)| {
        let key = cache.map(|_| FusionCache::key(&seq.user_id, backend, &seq.digest()));
        if let (Some(c), Some(k)) = (cache, &key) {
            if let Some(hit) = c.get(k) {
                let mut doc = fuse(text, seq, &Backend::mock(backend.model_name()), config)?;
                doc.text = hit.text;
                doc.provenance.backend_id = backend.backend_id().into();
                doc.provenance.created_at = hit.created_at;
                return Ok((doc, true));
            }
        }
        let doc = fuse(text, seq, backend, config)?;
        if let (Some(c), Some(k)) = (cache, key) {
            c.put(&doc, k);
        }
        Ok((doc, false))
    });
    let mut out = BatchOutcome::default();
    for r in results {
        match r {
            Ok((doc, hit)) => {
                out.cache_hits += hit as usize;
                out.documents.push(doc);
            }
            Err(e) => out.failures.push(e),
        }
    }
    out.documents.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    out.failures.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    out
}

pub fn write_knowledge(path: &Path, docs: &[KnowledgeDocument]) -> Result<String, JsonlError> {
    let mut sorted: Vec<&KnowledgeDocument> = docs.iter().collect();
    sorted.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    jsonl::write_jsonl(path, sorted)
}

pub fn read_knowledge(path: &Path) -> Result<Vec<KnowledgeDocument>, JsonlError> {
    jsonl::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{default_registry, render_sequence};
    use crate::store::{BehaviorEvent, SubjectKind};
    use crate::stub::{StubReply, StubServer};

    fn ev(
        cat: &str,
        kind: ContentKind,
        ts: i64,
        price: Option<i64>,
        merchant: &str,
    ) -> BehaviorEvent {
        BehaviorEvent {
            user_id: "u1".into(),
            subject_kind: SubjectKind::Merchant,
            subject_id: merchant.into(),
            subject_name: format!("{merchant} shop"),
            category: cat.into(),
            price_minor: price,
            content_kind: kind,
            scenario: if ts % 2 == 0 {
                Scenario::AppHomepage
            } else {
                Scenario::Search
            },
            timestamp: ts,
            attributes: BTreeMap::new(),
        }
    }

    fn seq(events: Vec<BehaviorEvent>) -> BehaviorSequence {
        BehaviorSequence::new("u1", events, 300).unwrap()
    }

    #[test]
    fn weighted_category_counts() {
        let mut events: Vec<_> = (0..5)
            .map(|i| ev("Sichuan", ContentKind::Order, 100 + i, Some(1000), "m1"))
            .collect();
        events.extend((0..2).map(|i| ev("Dessert", ContentKind::Click, 200 + i, None, "m2")));
        let f = compute_facets(&seq(events), &BehaviorWeights::default());
        assert_eq!(
            f.top_categories,
            vec![("Sichuan".to_string(), 50), ("Dessert".to_string(), 6)]
        );
        assert_eq!(
            f.top_merchants,
            vec![("m1".to_string(), 50), ("m2".to_string(), 6)]
        );
    }

    #[test]
    fn ties_break_by_name() {
        let events = vec![
            ev("b", ContentKind::Click, 1, None, "x"),
            ev("a", ContentKind::Click, 2, None, "y"),
        ];
        let f = compute_facets(&seq(events), &BehaviorWeights::default());
        assert_eq!(f.top_categories[0].0, "a");
        assert_eq!(f.top_merchants[0].0, "x");
    }

    #[test]
    fn price_quartiles_nearest_rank() {
        let one = compute_facets(
            &seq(vec![ev("a", ContentKind::Order, 1, Some(2000), "m")]),
            &BehaviorWeights::default(),
        );
        assert_eq!(
            one.price_stats,
            Some(PriceStats {
                median_minor: 2000,
                p25_minor: 2000,
                p75_minor: 2000
            })
        );
        let three = compute_facets(
            &seq(vec![
                ev("a", ContentKind::Order, 1, Some(3000), "m"),
                ev("a", ContentKind::Order, 2, Some(1000), "m"),
                ev("a", ContentKind::Order, 3, Some(2000), "m"),
            ]),
            &BehaviorWeights::default(),
        );
        assert_eq!(
            three.price_stats,
            Some(PriceStats {
                median_minor: 2000,
                p25_minor: 1000,
                p75_minor: 3000
            })
        );
    }

    #[test]
    fn clicks_only_has_no_price_stats() {
        let f = compute_facets(
            &seq(vec![ev("a", ContentKind::Click, 1, Some(500), "m")]),
            &BehaviorWeights::default(),
        );
        assert!(f.price_stats.is_none());
        assert_eq!(f.top_categories.len(), 1);
    }

    #[test]
    fn scenario_mix_sums_to_one() {
        let events: Vec<_> = (1..=7)
            .map(|t| ev("a", ContentKind::Click, t, None, "m"))
            .collect();
        let f = compute_facets(&seq(events), &BehaviorWeights::default());
        let total: f64 = f.scenario_mix.values().sum();
        assert!((total - 1.0).abs() <= 1e-9);
        assert!((f.scenario_mix[&Scenario::Search] - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_gives_sentinel() {
        let s = BehaviorSequence::empty("u1", 300);
        let t = render_sequence(&s, &default_registry());
        let doc = mock_fuse(&t, &s);
        assert_eq!(doc.text, EMPTY_KNOWLEDGE_TEXT);
        assert_eq!(doc.facets, Facets::default());
    }

    #[test]
    fn mock_is_deterministic() {
        let s = seq(vec![
            ev("a", ContentKind::Order, 10, Some(900), "m"),
            ev("b", ContentKind::Click, 11, None, "n"),
        ]);
        let t = render_sequence(&s, &default_registry());
        let a = serde_json::to_string(&mock_fuse(&t, &s)).unwrap();
        let b = serde_json::to_string(&mock_fuse(&t, &s)).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("Favorite categories: a"));
    }

    #[test]
    fn http_backend_text_with_local_facets() {
        let stub = StubServer::scripted(vec![StubReply::completion("Loves Sichuan food.")]);
        let client = ChatClient::new(stub.endpoint()).with_api_key("k");
        let backend = Backend::http(client, "glm");
        let s = seq(vec![ev("Sichuan", ContentKind::Order, 10, Some(900), "m")]);
        let t = render_sequence(&s, &default_registry());
        let doc = fuse(&t, &s, &backend, &FusionConfig::default()).unwrap();
        assert_eq!(doc.text, "Loves Sichuan food.");
        assert_eq!(doc.facets, mock_fuse(&t, &s).facets);
        assert_eq!(doc.provenance.backend_id, "http");
        let body = stub.requests()[0].json().unwrap();
        assert_eq!(body["messages"][0]["content"], FUSION_SYSTEM_PROMPT);
        assert_eq!(body["model"], "glm");
    }

    #[test]
    fn batch_reports_failures_and_sorts() {
        let stub = StubServer::with_responder(|_, req| {
            if req.body.contains("Bad") {
                StubReply::status(400, "nope")
            } else {
                StubReply::completion("fine")
            }
        });
        let backend = Backend::http(ChatClient::new(stub.endpoint()), "m");
        let mk = |user: &str, cat: &str| {
            let mut e = ev(cat, ContentKind::Click, 5, None, "m");
            e.user_id = user.into();
            let s = BehaviorSequence::new(user, vec![e], 300).unwrap();
            (render_sequence(&s, &default_registry()), s)
        };
        let inputs = vec![mk("c", "Good"), mk("a", "Good"), mk("b", "Bad")];
        let out = fuse_batch(&inputs, &backend, &FusionConfig::default(), None);
        let users: Vec<_> = out.documents.iter().map(|d| d.user_id.as_str()).collect();
        assert_eq!(users, vec!["a", "c"]);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].user_id, "b");
    }

    #[test]
    fn cache_avoids_repeat_calls() {
        let stub = StubServer::scripted(vec![StubReply::completion("summary")]);
        let backend = Backend::http(ChatClient::new(stub.endpoint()), "m");
        let s = seq(vec![ev("a", ContentKind::Click, 3, None, "m")]);
        let inputs = vec![(render_sequence(&s, &default_registry()), s)];
        let cache = FusionCache::default();
        let first = fuse_batch(&inputs, &backend, &FusionConfig::default(), Some(&cache));
        let second = fuse_batch(&inputs, &backend, &FusionConfig::default(), Some(&cache));
        assert_eq!(stub.requests().len(), 1);
        assert_eq!(second.cache_hits, 1);
        assert_eq!(first.documents, second.documents);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        cache.save(&path).unwrap();
        assert_eq!(FusionCache::load(&path).unwrap().len(), 1);
    }
}
