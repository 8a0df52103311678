//! Recommendation inference: prompt assembly, model call, ranked-list
//! parsing and semantic-feature export.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::catalog::Catalog;
use crate::concurrency::map_bounded;
use crate::fusion::{
    Backend, BackendError, ChatMessage, ChatRequest, Facets, FusionError, KnowledgeDocument,
};
use crate::instructions::{TaskTemplate, Variant};
use crate::jsonl::{self, JsonlError};
use crate::store::{BehaviorSequence, Scenario};
use crate::synth::LabelKind;

/// Mock ranking weights: category match, price proximity, merchant match.
pub const CATEGORY_MATCH_WEIGHT: f64 = 3.0;
pub const PRICE_PROXIMITY_WEIGHT: f64 = 2.0;
pub const MERCHANT_MATCH_WEIGHT: f64 = 1.0;

pub fn format_directive(k: usize) -> String {
    format!("Answer with a numbered list of exactly {k} items.")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecommendedItem {
    pub item_id: Option<String>,
    pub display: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Parsed,
    FuzzyMatched,
    Failed,
}

mod display_list {
    use super::*;

    pub fn serialize<S: Serializer>(items: &[RecommendedItem], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(items.iter().map(|i| &i.display))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<RecommendedItem>, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        Ok(names
            .into_iter()
            .map(|display| RecommendedItem {
                item_id: None,
                display,
            })
            .collect())
    }
}

/// One line of the predictions file; items are written as display strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedRecommendation {
    pub user_id: String,
    pub task_id: String,
    #[serde(with = "display_list")]
    pub items: Vec<RecommendedItem>,
    pub raw_output: String,
    pub parse_status: ParseStatus,
}

impl RankedRecommendation {
    pub fn displays(&self) -> Vec<String> {
        self.items.iter().map(|i| i.display.clone()).collect()
    }
}

/// Something the model can recommend.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub item_id: String,
    pub display: String,
    pub category: Option<String>,
    pub price_minor: Option<i64>,
    pub merchant_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub kind: LabelKind,
    pub items: Vec<Candidate>,
    /// Normalizer for price proximity.
    pub max_price_minor: i64,
}

impl Candidates {
    pub fn for_kind(catalog: &Catalog, kind: LabelKind) -> Self {
        let items = match kind {
            LabelKind::Category => catalog
                .categories
                .iter()
                .map(|c| Candidate {
                    item_id: c.clone(),
                    display: c.clone(),
                    category: Some(c.clone()),
                    price_minor: None,
                    merchant_id: None,
                })
                .collect(),
            LabelKind::Poi | LabelKind::Merchant => catalog
                .merchants
                .iter()
                .map(|m| Candidate {
                    item_id: m.id.clone(),
                    display: m.name.clone(),
                    category: Some(m.category.clone()),
                    price_minor: Some(m.typical_price_minor),
                    merchant_id: Some(m.id.clone()),
                })
                .collect(),
            LabelKind::PriceBand => catalog
                .price_bands
                .iter()
                .map(|b| Candidate {
                    item_id: b.name.clone(),
                    display: b.name.clone(),
                    category: None,
                    price_minor: Some(b.midpoint()),
                    merchant_id: None,
                })
                .collect(),
        };
        Self {
            kind,
            items,
            max_price_minor: catalog.max_price_minor().max(1),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.items.iter().map(|c| c.display.as_str()).collect()
    }

    fn find(&self, display: &str) -> Option<&Candidate> {
        let needle = display.trim().to_lowercase();
        self.items
            .iter()
            .find(|c| c.display.to_lowercase() == needle)
    }
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*\d+[.)]\s+(.+)$").expect("valid regex"))
}

/// Extracts up to `k` distinct items from free-form model output.
///
/// Numbered lines (`1. x`, `2) y`) are taken in order. If there are none and
/// candidates are given, the text is scanned left to right for the longest
/// candidate name starting at each position.
pub fn parse_ranked_list(
    raw: &str,
    k: usize,
    candidates: Option<&Candidates>,
) -> (Vec<RecommendedItem>, ParseStatus) {
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    let mut numbered = false;
    for cap in numbered_line().captures_iter(raw) {
        numbered = true;
        let display = cap[1].trim().to_string();
        if display.is_empty() || !seen.insert(display.to_lowercase()) {
            continue;
        }
        let item_id = candidates
            .and_then(|c| c.find(&display))
            .map(|c| c.item_id.clone());
        items.push(RecommendedItem { item_id, display });
    }
    if numbered {
        items.truncate(k);
        let status = if items.is_empty() {
            ParseStatus::Failed
        } else {
            ParseStatus::Parsed
        };
        return (items, status);
    }
    let Some(cands) = candidates else {
        return (Vec::new(), ParseStatus::Failed);
    };
    let items = fuzzy_scan(raw, cands, k);
    let status = if items.is_empty() {
        ParseStatus::Failed
    } else {
        ParseStatus::FuzzyMatched
    };
    (items, status)
}

fn fuzzy_scan(raw: &str, cands: &Candidates, k: usize) -> Vec<RecommendedItem> {
    let hay = raw.to_lowercase();
    let names: Vec<String> = cands
        .items
        .iter()
        .map(|c| c.display.to_lowercase())
        .collect();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut pos = 0;
    while pos < hay.len() && out.len() < k {
        let rest = &hay[pos..];
        // longest name at this position; earlier catalog entry wins equal lengths
        let best = names
            .iter()
            .enumerate()
            .filter(|(_, n)| !n.is_empty() && rest.starts_with(n.as_str()))
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)));
        match best {
            Some((idx, name)) => {
                if seen.insert(idx) {
                    let c = &cands.items[idx];
                    out.push(RecommendedItem {
                        item_id: Some(c.item_id.clone()),
                        display: c.display.clone(),
                    });
                }
                pos += name.len();
            }
            None => {
                pos += rest.chars().next().map_or(1, char::len_utf8);
            }
        }
    }
    out
}

/// Everything known about one user at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct UserContext {
    pub user_id: String,
    pub variant: Variant,
    /// Model input: knowledge text (full) or behavior text (no_hkf), already capped.
    pub input: String,
    pub facets: Option<Facets>,
    pub sequence: Option<BehaviorSequence>,
}

impl UserContext {
    pub fn from_knowledge(doc: &KnowledgeDocument, input: impl Into<String>) -> Self {
        Self {
            user_id: doc.user_id.clone(),
            variant: Variant::Full,
            input: input.into(),
            facets: Some(doc.facets.clone()),
            sequence: None,
        }
    }

    pub fn from_behavior(seq: BehaviorSequence, input: impl Into<String>) -> Self {
        Self {
            user_id: seq.user_id.clone(),
            variant: Variant::NoHkf,
            input: input.into(),
            facets: None,
            sequence: Some(seq),
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum RecommendError {
    #[error("no {variant} input available for user `{user_id}`")]
    MissingInput {
        user_id: String,
        variant: &'static str,
    },
    #[error(transparent)]
    Backend(#[from] FusionError),
}

pub fn recommendation_prompt(task: &TaskTemplate, k: usize, input: &str) -> String {
    format!(
        "{}\n\n{}\n\n{}",
        task.instruction(k),
        input,
        format_directive(k)
    )
}

fn normalized(count: u64, max: u64) -> f64 {
    if max == 0 {
        0.0
    } else {
        count as f64 / max as f64
    }
}

/// Full-variant mock: score = 3·category match + 2·price proximity + 1·merchant match,
/// each term in [0, 1]. Ties keep candidate order.
pub fn mock_rank_by_facets<'a>(
    facets: &Facets,
    candidates: &'a Candidates,
    k: usize,
) -> Vec<&'a Candidate> {
    let max_cat = facets.top_categories.first().map_or(0, |(_, n)| *n);
    let max_merchant = facets.top_merchants.first().map_or(0, |(_, n)| *n);
    let median = facets.price_stats.map(|p| p.median_minor);
    let mut scored: Vec<(f64, usize)> = candidates
        .items
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cat = c
                .category
                .as_deref()
                .map_or(0.0, |n| normalized(facets.category_count(n), max_cat));
            let price = match (c.price_minor, median) {
                (Some(p), Some(m)) => {
                    (1.0 - (p - m).abs() as f64 / candidates.max_price_minor as f64).max(0.0)
                }
                _ => 0.0,
            };
            let merchant = c.merchant_id.as_deref().map_or(0.0, |id| {
                normalized(facets.merchant_count(id), max_merchant)
            });
            let score = CATEGORY_MATCH_WEIGHT * cat
                + PRICE_PROXIMITY_WEIGHT * price
                + MERCHANT_MATCH_WEIGHT * merchant;
            (score, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored
        .into_iter()
        .take(k)
        .map(|(_, i)| &candidates.items[i])
        .collect()
}

/// No-fusion mock: candidates ordered by how recently the raw sequence touched
/// them; untouched candidates follow in candidate order.
pub fn mock_rank_by_recency<'a>(
    seq: &BehaviorSequence,
    candidates: &'a Candidates,
    k: usize,
) -> Vec<&'a Candidate> {
    let first_seen = |c: &Candidate| -> Option<usize> {
        seq.events.iter().position(|e| match candidates.kind {
            LabelKind::Category => c.category.as_deref() == Some(e.category.as_str()),
            LabelKind::Poi | LabelKind::Merchant => {
                e.merchant_id().is_some() && c.merchant_id.as_deref() == e.merchant_id()
            }
            LabelKind::PriceBand => {
                let band = Catalog::shared()
                    .price_bands
                    .iter()
                    .find(|b| b.name == c.item_id);
                matches!((band, e.price_minor), (Some(b), Some(p)) if b.contains(p))
            }
        })
    };
    let mut ranked: Vec<(usize, usize)> = candidates
        .items
        .iter()
        .enumerate()
        .map(|(i, c)| (first_seen(c).unwrap_or(usize::MAX), i))
        .collect();
    ranked.sort();
    ranked
        .into_iter()
        .take(k)
        .map(|(_, i)| &candidates.items[i])
        .collect()
}

fn numbered(items: &[&Candidate]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}\n", i + 1, c.display))
        .collect()
}

pub fn recommend(
    ctx: &UserContext,
    task: &TaskTemplate,
    k: usize,
    backend: &Backend,
    candidates: Option<&Candidates>,
) -> Result<RankedRecommendation, RecommendError> {
    let missing = || RecommendError::MissingInput {
        user_id: ctx.user_id.clone(),
        variant: ctx.variant.as_str(),
    };
    if ctx.input.trim().is_empty() {
        return Err(missing());
    }
    let raw_output = match backend {
        Backend::Mock { .. } => {
            let fallback;
            let cands = match candidates {
                Some(c) => c,
                None => {
                    fallback = Candidates::for_kind(Catalog::shared(), task.label_kind);
                    &fallback
                }
            };
            let picked = match ctx.variant {
                Variant::Full => {
                    mock_rank_by_facets(ctx.facets.as_ref().ok_or_else(missing)?, cands, k)
                }
                Variant::NoHkf => {
                    mock_rank_by_recency(ctx.sequence.as_ref().ok_or_else(missing)?, cands, k)
                }
            };
            numbered(&picked)
        }
        Backend::Http { client, model_name } => {
            let request = ChatRequest::new(
                model_name,
                vec![ChatMessage::user(recommendation_prompt(
                    task, k, &ctx.input,
                ))],
            );
            client
                .chat(&request)
                .map_err(|source: BackendError| FusionError {
                    user_id: ctx.user_id.clone(),
                    source,
                })?
                .content
        }
    };
    let (items, parse_status) = parse_ranked_list(&raw_output, k, candidates);
    Ok(RankedRecommendation {
        user_id: ctx.user_id.clone(),
        task_id: task.task_id.clone(),
        items,
        raw_output,
        parse_status,
    })
}

#[derive(Debug, Default)]
pub struct InferenceOutcome {
    /// Ordered by `(user_id, task_id)`.
    pub recommendations: Vec<RankedRecommendation>,
    pub failures: Vec<RecommendError>,
}

/// Runs `recommend` for every `(user_id, task)` job with bounded concurrency.
pub fn recommend_batch(
    contexts: &BTreeMap<String, UserContext>,
    jobs: &[(String, TaskTemplate)],
    k: usize,
    backend: &Backend,
    catalog: &Catalog,
    concurrency: usize,
) -> InferenceOutcome {
    let candidate_sets: BTreeMap<LabelKind, Candidates> = LabelKind::ALL
        .into_iter()
        .map(|kind| (kind, Candidates::for_kind(catalog, kind)))
        .collect();
    let results = map_bounded(jobs, concurrency, |(user, task)| {
        let ctx = contexts
            .get(user)
            .ok_or_else(|| RecommendError::MissingInput {
                user_id: user.clone(),
                variant: "any",
            })?;
        recommend(ctx, task, k, backend, candidate_sets.get(&task.label_kind))
    });
    let mut out = InferenceOutcome::default();
    for r in results {
        match r {
            Ok(rec) => out.recommendations.push(rec),
            Err(e) => out.failures.push(e),
        }
    }
    out.recommendations
        .sort_by(|a, b| (&a.user_id, &a.task_id).cmp(&(&b.user_id, &b.task_id)));
    out
}

pub fn write_predictions(path: &Path, recs: &[RankedRecommendation]) -> Result<String, JsonlError> {
    jsonl::write_jsonl(path, recs)
}

pub fn read_predictions(path: &Path) -> Result<Vec<RankedRecommendation>, JsonlError> {
    jsonl::read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemanticFeatureRow {
    pub user_id: String,
    pub feature_names: Vec<String>,
    pub feature_values: Vec<f64>,
}

pub const RR_FEATURES: usize = 3;

/// Feature schema: one-hot of the predicted top category (catalog order),
/// normalized price midpoint, the four scenario fractions, then reciprocal
/// ranks of the top-3 recommended items within the user's own facet ranking.
pub fn feature_names(catalog: &Catalog) -> Vec<String> {
    let mut names: Vec<String> = catalog
        .categories
        .iter()
        .map(|c| format!("pred_category:{c}"))
        .collect();
    names.push("price_midpoint_norm".into());
    names.extend(Scenario::ALL.iter().map(|s| format!("scenario:{s}")));
    names.extend((1..=RR_FEATURES).map(|i| format!("rr_item_{i}")));
    names
}

/// 1-based position of a recommended item in the user's facet ranking.
fn facet_rank(
    item: &RecommendedItem,
    kind: LabelKind,
    facets: &Facets,
    catalog: &Catalog,
) -> Option<usize> {
    match kind {
        LabelKind::Category => facets
            .top_categories
            .iter()
            .position(|(c, _)| c.eq_ignore_ascii_case(item.display.trim())),
        LabelKind::Poi | LabelKind::Merchant => {
            let id = item.item_id.clone().or_else(|| {
                catalog
                    .merchant_by_name(&item.display)
                    .map(|m| m.id.clone())
            })?;
            facets.top_merchants.iter().position(|(m, _)| *m == id)
        }
        LabelKind::PriceBand => {
            let median = facets.price_stats?.median_minor;
            let mut bands: Vec<_> = catalog.price_bands.iter().collect();
            bands.sort_by_key(|b| (b.midpoint() - median).abs());
            bands
                .iter()
                .position(|b| b.name.eq_ignore_ascii_case(item.display.trim()))
        }
    }
    .map(|p| p + 1)
}

#[derive(Debug, Default)]
pub struct FeatureExport {
    pub rows: Vec<SemanticFeatureRow>,
    /// Users with recommendations but no knowledge document.
    pub skipped_users: Vec<String>,
}

/// One row per knowledge document. The user's "primary" recommendation is
/// the first category-task prediction by task id, else the first of any kind.
pub fn export_semantic_features(
    docs: &[KnowledgeDocument],
    recs: &[RankedRecommendation],
    catalog: &Catalog,
    tasks: &[TaskTemplate],
) -> FeatureExport {
    let kinds: BTreeMap<&str, LabelKind> = tasks
        .iter()
        .map(|t| (t.task_id.as_str(), t.label_kind))
        .collect();
    let mut by_user: BTreeMap<&str, Vec<&RankedRecommendation>> = BTreeMap::new();
    for r in recs {
        by_user.entry(r.user_id.as_str()).or_default().push(r);
    }
    let doc_users: HashSet<&str> = docs.iter().map(|d| d.user_id.as_str()).collect();
    let skipped_users: Vec<String> = by_user
        .keys()
        .filter(|u| !doc_users.contains(*u))
        .map(|u| {
            log::warn!("recommendations for `{u}` have no knowledge document; skipped");
            u.to_string()
        })
        .collect();

    let names = feature_names(catalog);
    let max_price = catalog.max_price_minor().max(1) as f64;
    let mut sorted_docs: Vec<&KnowledgeDocument> = docs.iter().collect();
    sorted_docs.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let rows = sorted_docs
        .into_iter()
        .map(|doc| {
            let mut user_recs = by_user
                .get(doc.user_id.as_str())
                .cloned()
                .unwrap_or_default();
            user_recs.sort_by(|a, b| a.task_id.cmp(&b.task_id));
            let kind_of = |r: &RankedRecommendation| kinds.get(r.task_id.as_str()).copied();
            let primary = user_recs
                .iter()
                .find(|r| kind_of(r) == Some(LabelKind::Category))
                .or_else(|| user_recs.first())
                .copied();

            let mut values = vec![0.0; catalog.categories.len()];
            if let Some(r) = primary.filter(|r| kind_of(r) == Some(LabelKind::Category)) {
                if let Some(idx) = r
                    .items
                    .first()
                    .and_then(|i| catalog.category_index(&i.display))
                {
                    values[idx] = 1.0;
                }
            }
            values.push(doc.facets.price_stats.map_or(0.0, |p| {
                (p.p25_minor + p.p75_minor) as f64 / 2.0 / max_price
            }));
            values.extend(
                Scenario::ALL
                    .iter()
                    .map(|s| doc.facets.scenario_mix.get(s).copied().unwrap_or(0.0)),
            );
            for i in 0..RR_FEATURES {
                let rr = primary
                    .and_then(|r| Some((r.items.get(i)?, kind_of(r)?)))
                    .and_then(|(item, kind)| facet_rank(item, kind, &doc.facets, catalog))
                    .map_or(0.0, |rank| 1.0 / rank as f64);
                values.push(rr);
            }
            SemanticFeatureRow {
                user_id: doc.user_id.clone(),
                feature_names: names.clone(),
                feature_values: values,
            }
        })
        .collect();
    FeatureExport {
        rows,
        skipped_users,
    }
}

/// Header `user_id,<feature names>` then one row per user.
pub fn features_csv(rows: &[SemanticFeatureRow], names: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("user_id").chain(names.iter().map(String::as_str));
    w.write_record(header).expect("in-memory write");
    for r in rows {
        let values = r.feature_values.iter().map(f64::to_string);
        w.write_record(std::iter::once(r.user_id.clone()).chain(values))
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
