//! Synthetic Waimai-like behavior with planted, recoverable preferences.
//!
//! Every user orders once per day over the history window. Noise-free orders
//! before the cutoff take their categories from a quota of the planted
//! weights (largest remainder, then shuffled), so the per-category counts
//! track the weights to within one order. After the cutoff, noise-free orders
//! follow a smooth weighted round-robin started fresh at the cutoff: the first
//! one is always the dominant category.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Merchant, MAX_ORDER_PRICE, MIN_ORDER_PRICE};
use crate::store::{BehaviorEvent, ContentKind, Scenario, SubjectKind};

pub const SECONDS_PER_DAY: i64 = 86_400;
/// Labels come from the first order within this many days after the cutoff.
pub const LABEL_HORIZON_DAYS: i64 = 7;
pub const DEFAULT_HORIZON_DAYS: u32 = 28;
const MAX_PREFERRED_CATEGORIES: usize = 4;
const MIN_TOP_WEIGHT_GAP: f64 = 0.1;
/// Chance that a given post-cutoff day has an order.
const FUTURE_ORDER_RATE: f64 = 0.6;

// per order: 5 same-category exposures, 2 same-category clicks, 3 random exposures
const SAME_CATEGORY_EXPOSURES: usize = 5;
const SAME_CATEGORY_CLICKS: usize = 2;
const RANDOM_EXPOSURES: usize = 3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("profile count must be at least 1")]
    NoProfiles,
    #[error("noise rate {0} outside [0, 1)")]
    NoiseRate(f64),
    #[error("horizon must be at least one day")]
    ZeroHorizon,
    #[error("cutoff timestamp {0} leaves no room for history")]
    Cutoff(i64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub user_id: String,
    pub category_weights: BTreeMap<String, f64>,
    pub price_band: (i64, i64),
    pub preferred_merchants: Vec<String>,
    pub noise_rate: f64,
    pub seed: u64,
}

impl SyntheticProfile {
    /// Categories by weight, heaviest first.
    pub fn ranked_categories(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> = self
            .category_weights
            .iter()
            .map(|(k, w)| (k.as_str(), *w))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn top_category(&self) -> &str {
        self.ranked_categories()[0].0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Category,
    Poi,
    Merchant,
    PriceBand,
}

impl LabelKind {
    pub const ALL: [LabelKind; 4] = [
        LabelKind::Category,
        LabelKind::Poi,
        LabelKind::Merchant,
        LabelKind::PriceBand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Category => "category",
            LabelKind::Poi => "poi",
            LabelKind::Merchant => "merchant",
            LabelKind::PriceBand => "price_band",
        }
    }

    /// Task id carried by the raw labels the generator emits.
    pub fn generic_task_id(self) -> &'static str {
        match self {
            LabelKind::Category => "next_category",
            LabelKind::Poi => "next_poi",
            LabelKind::Merchant => "next_merchant_click",
            LabelKind::PriceBand => "next_price_band",
        }
    }
}

impl std::str::FromStr for LabelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LabelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown label kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub user_id: String,
    pub task_id: String,
    pub label_kind: LabelKind,
    pub label_value: String,
    pub cutoff_timestamp: i64,
}

/// Everything generated for one user: history and the label window, plus
/// labels read off the label window.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrace {
    pub cutoff_timestamp: i64,
    pub events: Vec<BehaviorEvent>,
    pub labels: Vec<LabelRecord>,
}

impl SyntheticTrace {
    /// Events strictly before the cutoff; the only part a model may see.
    pub fn history(&self) -> impl Iterator<Item = &BehaviorEvent> {
        self.events
            .iter()
            .filter(move |e| e.timestamp < self.cutoff_timestamp)
    }
}

fn planted_weights(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..m)
            .map(|i| 1.6f64.powi((m - 1 - i) as i32) * (1.0 + 0.2 * rng.gen::<f64>()))
            .collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|r| r / total).collect();
        if m == 1 || w[0] - w[1] >= MIN_TOP_WEIGHT_GAP {
            return w;
        }
    }
}

pub fn generate_profiles(
    n: usize,
    seed: u64,
    noise_rate: f64,
) -> Result<Vec<SyntheticProfile>, SynthError> {
    if n == 0 {
        return Err(SynthError::NoProfiles);
    }
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(SynthError::NoiseRate(noise_rate));
    }
    let catalog = Catalog::shared();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let width = n.to_string().len().max(5);
    let profiles = (0..n)
        .map(|i| {
            let user_seed: u64 = master.gen();
            let mut rng = ChaCha8Rng::seed_from_u64(user_seed);
            let m = rng.gen_range(1..=MAX_PREFERRED_CATEGORIES);
            let picked: Vec<&String> = catalog.categories.choose_multiple(&mut rng, m).collect();
            let weights = planted_weights(&mut rng, m);
            let center = rng.gen_range(1000..=6000i64);
            let half = rng.gen_range(300..=1500i64);
            let mut preferred_merchants = Vec::new();
            for cat in &picked {
                let pool: Vec<&Merchant> = catalog.merchants_in(cat).collect();
                preferred_merchants.extend(pool.choose_multiple(&mut rng, 2).map(|m| m.id.clone()));
            }
            SyntheticProfile {
                user_id: format!("u{i:0width$}"),
                category_weights: picked.into_iter().cloned().zip(weights).collect(),
                price_band: ((center - half).max(MIN_ORDER_PRICE), center + half),
                preferred_merchants,
                noise_rate,
                seed: user_seed,
            }
        })
        .collect();
    Ok(profiles)
}

/// Largest-remainder apportionment of `n` slots over `weights`.
fn apportion(weights: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra)
            .then(weights[b].total_cmp(&weights[a]))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Smooth weighted round-robin over fixed weights.
struct RoundRobin {
    weights: Vec<f64>,
    current: Vec<f64>,
}

impl RoundRobin {
    fn new(weights: Vec<f64>) -> Self {
        let current = vec![0.0; weights.len()];
        Self { weights, current }
    }

    fn next(&mut self) -> usize {
        let total: f64 = self.weights.iter().sum();
        for (c, w) in self.current.iter_mut().zip(&self.weights) {
            *c += w;
        }
        let mut best = 0;
        for i in 1..self.current.len() {
            if self.current[i] > self.current[best] {
                best = i;
            }
        }
        self.current[best] -= total;
        best
    }
}

fn pick_scenario(rng: &mut ChaCha8Rng) -> Scenario {
    match rng.gen_range(0..10) {
        0..=6 => Scenario::AppHomepage,
        7 | 8 => Scenario::MiniProgram,
        _ => Scenario::Search,
    }
}

struct OrderPlan<'a> {
    category: &'a str,
    noisy: bool,
    timestamp: i64,
}

struct EventFactory<'a> {
    catalog: &'a Catalog,
    profile: &'a SyntheticProfile,
}

impl EventFactory<'_> {
    fn merchant_event(
        &self,
        rng: &mut ChaCha8Rng,
        m: &Merchant,
        kind: ContentKind,
        ts: i64,
    ) -> BehaviorEvent {
        BehaviorEvent {
            user_id: self.profile.user_id.clone(),
            subject_kind: SubjectKind::Merchant,
            subject_id: m.id.clone(),
            subject_name: m.name.clone(),
            category: m.category.clone(),
            price_minor: None,
            content_kind: kind,
            scenario: pick_scenario(rng),
            timestamp: ts,
            attributes: BTreeMap::new(),
        }
    }

    fn product_event(
        &self,
        rng: &mut ChaCha8Rng,
        product_idx: usize,
        price: i64,
        kind: ContentKind,
        ts: i64,
    ) -> BehaviorEvent {
        let p = &self.catalog.products[product_idx];
        let m = self
            .catalog
            .merchant(&p.merchant_id)
            .expect("product merchant exists");
        let attributes = BTreeMap::from([
            ("merchant_id".to_string(), m.id.clone()),
            ("merchant_name".to_string(), m.name.clone()),
        ]);
        BehaviorEvent {
            user_id: self.profile.user_id.clone(),
            subject_kind: SubjectKind::Product,
            subject_id: p.id.clone(),
            subject_name: p.name.clone(),
            category: p.category.clone(),
            price_minor: Some(price),
            content_kind: kind,
            scenario: pick_scenario(rng),
            timestamp: ts,
            attributes,
        }
    }

    /// The order's funnel: exposures and clicks in the hour before, then the order.
    fn order_funnel(
        &self,
        rng: &mut ChaCha8Rng,
        plan: &OrderPlan<'_>,
        out: &mut Vec<BehaviorEvent>,
    ) {
        let catalog = self.catalog;
        let in_category: Vec<&Merchant> = catalog.merchants_in(plan.category).collect();
        let merchant = if plan.noisy {
            *in_category.choose(rng).expect("category has merchants")
        } else {
            let preferred: Vec<&Merchant> = self
                .profile
                .preferred_merchants
                .iter()
                .filter_map(|id| catalog.merchant(id))
                .filter(|m| m.category == plan.category)
                .collect();
            let roll: f64 = rng.gen();
            match (preferred.first(), preferred.get(1)) {
                (Some(first), _) if roll < 0.5 => *first,
                (_, Some(second)) if roll < 0.75 => *second,
                _ => *in_category.choose(rng).expect("category has merchants"),
            }
        };
        let products: Vec<usize> = (0..catalog.products.len())
            .filter(|&i| catalog.products[i].merchant_id == merchant.id)
            .collect();
        let product = *products.choose(rng).expect("merchant has products");
        let price = if plan.noisy {
            rng.gen_range(MIN_ORDER_PRICE..=MAX_ORDER_PRICE)
        } else {
            rng.gen_range(self.profile.price_band.0..=self.profile.price_band.1)
        };

        let ts = plan.timestamp;
        let category_products: Vec<usize> = (0..catalog.products.len())
            .filter(|&i| catalog.products[i].category == plan.category)
            .collect();
        for k in 0..SAME_CATEGORY_EXPOSURES {
            let at = ts - rng.gen_range(1800..=3600);
            if k % 2 == 0 {
                let m = *in_category.choose(rng).unwrap();
                out.push(self.merchant_event(rng, m, ContentKind::Exposure, at));
            } else {
                let p = *category_products.choose(rng).unwrap();
                let list = catalog.products[p].list_price_minor;
                out.push(self.product_event(rng, p, list, ContentKind::Exposure, at));
            }
        }
        for _ in 0..RANDOM_EXPOSURES {
            let at = ts - rng.gen_range(1800..=3600);
            let m = catalog.merchants.choose(rng).unwrap();
            out.push(self.merchant_event(rng, m, ContentKind::Exposure, at));
        }
        // browse click, then the click on the merchant ordered from
        let browse = *in_category.choose(rng).unwrap();
        let browse_at = ts - rng.gen_range(901..=1799);
        out.push(self.merchant_event(rng, browse, ContentKind::Click, browse_at));
        debug_assert_eq!(SAME_CATEGORY_CLICKS, 2);
        let click_at = ts - rng.gen_range(60..=900);
        out.push(self.merchant_event(rng, merchant, ContentKind::Click, click_at));
        out.push(self.product_event(rng, product, price, ContentKind::Order, ts));
    }
}

/// Generates `horizon_days` days of history before `cutoff_timestamp` and a
/// label window of [`LABEL_HORIZON_DAYS`] after it.
pub fn generate_events(
    profile: &SyntheticProfile,
    horizon_days: u32,
    cutoff_timestamp: i64,
) -> Result<SyntheticTrace, SynthError> {
    if horizon_days == 0 {
        return Err(SynthError::ZeroHorizon);
    }
    if cutoff_timestamp <= (horizon_days as i64 + 1) * SECONDS_PER_DAY {
        return Err(SynthError::Cutoff(cutoff_timestamp));
    }
    let catalog = Catalog::shared();
    let factory = EventFactory { catalog, profile };
    let mut rng =
        ChaCha8Rng::seed_from_u64(profile.seed ^ (cutoff_timestamp as u64).rotate_left(17));
    let ranked = profile.ranked_categories();
    let weights: Vec<f64> = ranked.iter().map(|(_, w)| *w).collect();

    let day_start = cutoff_timestamp - cutoff_timestamp.rem_euclid(SECONDS_PER_DAY);
    let order_time = |rng: &mut ChaCha8Rng, day: i64| day + rng.gen_range(10 * 3600..21 * 3600);

    let n = horizon_days as usize;
    let noisy: Vec<bool> = (0..n).map(|_| rng.gen_bool(profile.noise_rate)).collect();
    let clean = noisy.iter().filter(|x| !**x).count();
    let mut quota: Vec<usize> = apportion(&weights, clean)
        .into_iter()
        .enumerate()
        .flat_map(|(i, c)| std::iter::repeat_n(i, c))
        .collect();
    quota.shuffle(&mut rng);
    let mut quota = quota.into_iter();

    let mut events = Vec::with_capacity(n * 11 + 80);
    for (d, is_noisy) in noisy.iter().enumerate() {
        let day = day_start - (n - d) as i64 * SECONDS_PER_DAY;
        let category = if *is_noisy {
            catalog.categories.choose(&mut rng).unwrap().as_str()
        } else {
            ranked[quota.next().expect("quota covers every clean order")].0
        };
        let ts = order_time(&mut rng, day).min(cutoff_timestamp - 1);
        factory.order_funnel(
            &mut rng,
            &OrderPlan {
                category,
                noisy: *is_noisy,
                timestamp: ts,
            },
            &mut events,
        );
    }

    let mut rr = RoundRobin::new(weights);
    for d in 0..LABEL_HORIZON_DAYS {
        if !rng.gen_bool(FUTURE_ORDER_RATE) {
            continue;
        }
        let day = day_start + d * SECONDS_PER_DAY;
        let noisy = rng.gen_bool(profile.noise_rate);
        let category = if noisy {
            catalog.categories.choose(&mut rng).unwrap().as_str()
        } else {
            ranked[rr.next()].0
        };
        let ts = order_time(&mut rng, day).max(cutoff_timestamp + 3601);
        factory.order_funnel(
            &mut rng,
            &OrderPlan {
                category,
                noisy,
                timestamp: ts,
            },
            &mut events,
        );
    }
    events.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.subject_id.cmp(&b.subject_id))
    });

    let labels = labels_after_cutoff(catalog, &profile.user_id, &events, cutoff_timestamp);
    Ok(SyntheticTrace {
        cutoff_timestamp,
        events,
        labels,
    })
}

/// Labels from the first order (and first merchant click) inside the label window.
fn labels_after_cutoff(
    catalog: &Catalog,
    user_id: &str,
    events: &[BehaviorEvent],
    cutoff: i64,
) -> Vec<LabelRecord> {
    let window_end = cutoff + LABEL_HORIZON_DAYS * SECONDS_PER_DAY;
    let in_window = |e: &&BehaviorEvent| e.timestamp >= cutoff && e.timestamp < window_end;
    let Some(order) = events
        .iter()
        .filter(in_window)
        .find(|e| e.content_kind == ContentKind::Order)
    else {
        return Vec::new();
    };
    let label = |kind: LabelKind, value: String| LabelRecord {
        user_id: user_id.to_string(),
        task_id: kind.generic_task_id().to_string(),
        label_kind: kind,
        label_value: value,
        cutoff_timestamp: cutoff,
    };
    let mut out = vec![label(LabelKind::Category, order.category.clone())];
    if let Some(name) = order.merchant_name() {
        out.push(label(LabelKind::Poi, name.to_string()));
    }
    if let Some(click) = events
        .iter()
        .filter(in_window)
        .find(|e| e.content_kind == ContentKind::Click && e.subject_kind == SubjectKind::Merchant)
    {
        out.push(label(LabelKind::Merchant, click.subject_name.clone()));
    }
    if let Some(band) = order.price_minor.and_then(|p| catalog.band_for(p)) {
        out.push(label(LabelKind::PriceBand, band.name.clone()));
    }
    out
}

/// Knobs for a whole synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub users: usize,
    pub seed: u64,
    pub noise_rate: f64,
    pub horizon_days: u32,
    /// Test-split cutoff. Train users get a cutoff `train_offset_days` earlier.
    pub cutoff_timestamp: i64,
    pub test_fraction: f64,
    pub train_offset_days: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            users: 100,
            seed: 7,
            noise_rate: 0.1,
            horizon_days: DEFAULT_HORIZON_DAYS,
            cutoff_timestamp: crate::DEFAULT_CUTOFF_TIMESTAMP,
            test_fraction: 0.2,
            train_offset_days: 14,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub profiles: Vec<SyntheticProfile>,
    pub traces: Vec<SyntheticTrace>,
}

impl Corpus {
    /// History events of every user, in user order.
    pub fn history_events(&self) -> Vec<BehaviorEvent> {
        self.traces
            .iter()
            .flat_map(|t| t.history().cloned())
            .collect()
    }

    pub fn labels(&self) -> Vec<LabelRecord> {
        self.traces
            .iter()
            .flat_map(|t| t.labels.iter().cloned())
            .collect()
    }
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus, SynthError> {
    let profiles = generate_profiles(config.users, config.seed, config.noise_rate)?;
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5e1i64 as u64));
    let traces = profiles
        .iter()
        .map(|p| {
            let test = split_rng.gen_bool(config.test_fraction.clamp(0.0, 1.0));
            let cutoff = if test {
                config.cutoff_timestamp
            } else {
                config.cutoff_timestamp - config.train_offset_days as i64 * SECONDS_PER_DAY
            };
            generate_events(p, config.horizon_days, cutoff)
        })
        .collect::<Result<_, _>>()?;
    Ok(Corpus { profiles, traces })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUTOFF: i64 = crate::DEFAULT_CUTOFF_TIMESTAMP;

    fn single_category(noise: f64) -> SyntheticProfile {
        SyntheticProfile {
            user_id: "solo".into(),
            category_weights: BTreeMap::from([("Sichuan".to_string(), 1.0)]),
            price_band: (2000, 3000),
            preferred_merchants: vec!["m000".into()],
            noise_rate: noise,
            seed: 99,
        }
    }

    #[test]
    fn profiles_are_deterministic() {
        let a = serde_json::to_string(&generate_profiles(1, 7, 0.0).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_profiles(1, 7, 0.0).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn profile_count_and_distinct_ids() {
        let ps = generate_profiles(500, 3, 0.2).unwrap();
        assert_eq!(ps.len(), 500);
        let ids: std::collections::HashSet<_> = ps.iter().map(|p| &p.user_id).collect();
        assert_eq!(ids.len(), 500);
    }

    #[test]
    fn weights_normalized_and_distinct() {
        for p in generate_profiles(2000, 11, 0.0).unwrap() {
            let sum: f64 = p.category_weights.values().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "{sum}");
            assert!(!p.category_weights.is_empty() && p.category_weights.len() <= 10);
            let r = p.ranked_categories();
            for w in r.windows(2) {
                assert!(w[0].1 > w[1].1);
            }
            assert!(p.price_band.0 <= p.price_band.1);
        }
    }

    #[test]
    fn argument_errors() {
        assert_eq!(generate_profiles(0, 1, 0.0), Err(SynthError::NoProfiles));
        assert_eq!(
            generate_profiles(1, 1, 1.0),
            Err(SynthError::NoiseRate(1.0))
        );
        let p = single_category(0.0);
        assert_eq!(
            generate_events(&p, 0, CUTOFF).unwrap_err(),
            SynthError::ZeroHorizon
        );
    }

    #[test]
    fn apportion_is_within_one() {
        let w = [0.5, 0.3, 0.2];
        for n in 0..50 {
            let c = apportion(&w, n);
            assert_eq!(c.iter().sum::<usize>(), n);
            for (ci, wi) in c.iter().zip(w) {
                assert!((*ci as f64 - wi * n as f64).abs() < 1.0);
            }
        }
    }

    #[test]
    fn round_robin_starts_with_heaviest() {
        let mut rr = RoundRobin::new(vec![0.5, 0.3, 0.2]);
        let picks: Vec<usize> = (0..10).map(|_| rr.next()).collect();
        assert_eq!(picks[0], 0);
        assert_eq!(picks.iter().filter(|&&i| i == 0).count(), 5);
        assert_eq!(picks.iter().filter(|&&i| i == 1).count(), 3);
    }

    #[test]
    fn degenerate_distribution_orders_one_category() {
        let t = generate_events(&single_category(0.0), 60, CUTOFF).unwrap();
        let orders: Vec<_> = t
            .events
            .iter()
            .filter(|e| e.content_kind == ContentKind::Order)
            .collect();
        assert!(orders.len() >= 60);
        for o in orders {
            assert_eq!(o.category, "Sichuan");
            let p = o.price_minor.unwrap();
            assert!((2000..=3000).contains(&p));
        }
    }

    #[test]
    fn noise_rate_is_reflected_in_orders() {
        let p = single_category(0.5);
        let t = generate_events(&p, 2000, CUTOFF).unwrap();
        let orders: Vec<_> = t
            .history()
            .filter(|e| e.content_kind == ContentKind::Order)
            .collect();
        assert!(orders.len() >= 1000);
        let off = orders
            .iter()
            .filter(|o| o.category != "Sichuan" || !(2000..=3000).contains(&o.price_minor.unwrap()))
            .count();
        let frac = off as f64 / orders.len() as f64;
        assert!((frac - 0.5).abs() <= 0.05, "off-preference fraction {frac}");
    }

    #[test]
    fn category_label_is_first_order_after_cutoff() {
        for p in generate_profiles(50, 5, 0.3).unwrap() {
            let t = generate_events(&p, 28, CUTOFF).unwrap();
            let first = t
                .events
                .iter()
                .find(|e| e.timestamp >= CUTOFF && e.content_kind == ContentKind::Order);
            let label = t
                .labels
                .iter()
                .find(|l| l.label_kind == LabelKind::Category);
            match (first, label) {
                (Some(o), Some(l)) if o.timestamp < CUTOFF + 7 * SECONDS_PER_DAY => {
                    assert_eq!(l.label_value, o.category)
                }
                (_, None) => {}
                other => panic!("label without qualifying order: {other:?}"),
            }
        }
    }

    #[test]
    fn noise_free_argmax_is_recoverable() {
        for p in generate_profiles(300, 21, 0.0).unwrap() {
            let t = generate_events(&p, DEFAULT_HORIZON_DAYS, CUTOFF).unwrap();
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for e in t.history().filter(|e| e.content_kind == ContentKind::Order) {
                *counts.entry(e.category.as_str()).or_default() += 1;
            }
            let max = counts.values().max().unwrap();
            let argmax: Vec<_> = counts
                .iter()
                .filter(|(_, c)| *c == max)
                .map(|(k, _)| *k)
                .collect();
            assert_eq!(argmax, vec![p.top_category()], "user {}", p.user_id);
            // and the next order is the dominant category
            if let Some(l) = t
                .labels
                .iter()
                .find(|l| l.label_kind == LabelKind::Category)
            {
                assert_eq!(l.label_value, p.top_category());
            }
        }
    }

    #[test]
    fn events_are_valid_and_history_precedes_cutoff() {
        for p in generate_profiles(20, 9, 0.4).unwrap() {
            let t = generate_events(&p, 10, CUTOFF).unwrap();
            for e in &t.events {
                e.validate().unwrap();
                assert_eq!(e.user_id, p.user_id);
            }
            assert!(t.history().all(|e| e.timestamp < CUTOFF));
            // exposures ≫ clicks ≫ orders
            let count = |k| t.history().filter(|e| e.content_kind == k).count();
            assert_eq!(count(ContentKind::Order), 10);
            assert_eq!(count(ContentKind::Click), 20);
            assert_eq!(count(ContentKind::Exposure), 80);
        }
    }

    #[test]
    fn corpus_is_byte_identical_across_runs() {
        let cfg = CorpusConfig {
            users: 30,
            ..Default::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        let dump = |c: &Corpus| {
            let mut s = String::new();
            for e in c.history_events() {
                s += &e.to_line();
            }
            for l in c.labels() {
                s += &serde_json::to_string(&l).unwrap();
            }
            s + &serde_json::to_string(&c.profiles).unwrap()
        };
        assert_eq!(dump(&a), dump(&b));
    }
}
