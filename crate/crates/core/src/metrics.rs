//! Hit rate and NDCG over ranked predictions, joined with held-out labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};
use crate::recommender::{ParseStatus, RankedRecommendation};
use crate::synth::LabelRecord;

pub const DEFAULT_KS: [usize; 2] = [5, 10];

/// Trim, collapse internal whitespace, lowercase.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// 1-based position of `label` in `ranked` after normalization.
pub fn hit_rank<S: AsRef<str>>(ranked: &[S], label: &str) -> Option<usize> {
    let label = normalize(label);
    ranked
        .iter()
        .position(|r| normalize(r.as_ref()) == label)
        .map(|p| p + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalCase {
    pub user_id: String,
    pub task_id: String,
    pub label_value: String,
    pub predicted: Vec<String>,
}

impl EvalCase {
    /// Anonymous case, for metric arithmetic only.
    pub fn new(
        predicted: impl IntoIterator<Item = impl Into<String>>,
        label_value: impl Into<String>,
    ) -> Self {
        Self {
            predicted: predicted.into_iter().map(Into::into).collect(),
            label_value: label_value.into(),
            ..Self::default()
        }
    }

    pub fn rank(&self) -> Option<usize> {
        hit_rank(&self.predicted, &self.label_value)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no evaluation cases")]
    Empty,
    #[error("k must be positive")]
    ZeroK,
    #[error("{} prediction(s) have no matching label: {}", .0.len(), .0.iter().map(|(u, t)| format!("{u}/{t}")).collect::<Vec<_>>().join(", "))]
    UnlabeledPredictions(Vec<(String, String)>),
    #[error("duplicate prediction for {0}/{1} in variant `{2}`")]
    DuplicatePrediction(String, String, String),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

fn check(cases: &[EvalCase], k: usize) -> Result<(), EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if cases.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn hr_at_k(cases: &[EvalCase], k: usize) -> Result<f64, EvalError> {
    check(cases, k)?;
    let hits = cases
        .iter()
        .filter(|c| c.rank().is_some_and(|r| r <= k))
        .count();
    Ok(hits as f64 / cases.len() as f64)
}

/// Single relevant item, so IDCG is 1 and each case scores `1 / log2(rank + 1)`.
pub fn ndcg_at_k(cases: &[EvalCase], k: usize) -> Result<f64, EvalError> {
    check(cases, k)?;
    let total: f64 = cases
        .iter()
        .filter_map(EvalCase::rank)
        .filter(|&r| r <= k)
        .map(|r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(total / cases.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    LabelKind,
    Task,
}

impl std::str::FromStr for Grouping {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "label_kind" | "kind" => Ok(Grouping::LabelKind),
            "task" => Ok(Grouping::Task),
            other => Err(format!("unknown grouping `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub group: String,
    pub variant: String,
    pub hr_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub n_cases: usize,
    pub n_parse_failures: usize,
    /// Labels with no prediction; scored as misses.
    pub n_missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub grouping: Grouping,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, group: &str, variant: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.variant == variant)
    }

    /// Fixed-width table: one line per variant, HR/NDCG columns per group.
    pub fn to_table(&self) -> String {
        let groups: Vec<&str> = {
            let mut seen = Vec::new();
            for r in &self.rows {
                if !seen.contains(&r.group.as_str()) {
                    seen.push(r.group.as_str());
                }
            }
            seen
        };
        let variants: Vec<&str> = {
            let mut seen = Vec::new();
            for r in &self.rows {
                if !seen.contains(&r.variant.as_str()) {
                    seen.push(r.variant.as_str());
                }
            }
            seen
        };
        let metric_cols: Vec<String> = self
            .ks
            .iter()
            .flat_map(|k| [format!("HR@{k}"), format!("NDCG@{k}")])
            .collect();
        let col = 9;
        let group_width = metric_cols.len() * (col + 1) - 1;
        let name_width = variants.iter().map(|v| v.len()).max().unwrap_or(0).max(7);

        let mut out = String::new();
        let _ = write!(out, "{:name_width$}", "");
        for g in &groups {
            let _ = write!(out, " | {g:^group_width$}");
        }
        out.push('\n');
        let _ = write!(out, "{:name_width$}", "variant");
        for _ in &groups {
            out.push_str(" |");
            for m in &metric_cols {
                let _ = write!(out, " {m:>col$}");
            }
        }
        out.push('\n');
        let rule_len = out.lines().last().map_or(0, str::len);
        out.push_str(&"-".repeat(rule_len));
        out.push('\n');
        for v in &variants {
            let _ = write!(out, "{v:name_width$}");
            for g in &groups {
                out.push_str(" |");
                match self.row(g, v) {
                    Some(row) => {
                        for k in &self.ks {
                            let _ =
                                write!(out, " {:>col$.4} {:>col$.4}", row.hr_at[k], row.ndcg_at[k]);
                        }
                    }
                    None => {
                        for _ in &metric_cols {
                            let _ = write!(out, " {:>col$}", "-");
                        }
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn group_key(label: &LabelRecord, grouping: Grouping) -> String {
    match grouping {
        Grouping::LabelKind => label.label_kind.as_str().to_string(),
        Grouping::Task => label.task_id.clone(),
    }
}

/// Scores one variant's predictions against the labels. Every prediction
/// must have a label; labels without a prediction count as misses.
pub fn evaluate_variant(
    variant: &str,
    labels: &[LabelRecord],
    predictions: &[RankedRecommendation],
    ks: &[usize],
    grouping: Grouping,
) -> Result<Vec<EvalRow>, EvalError> {
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let label_keys: BTreeSet<(&str, &str)> = labels
        .iter()
        .map(|l| (l.user_id.as_str(), l.task_id.as_str()))
        .collect();
    let mut by_key: BTreeMap<(&str, &str), &RankedRecommendation> = BTreeMap::new();
    let mut unlabeled = Vec::new();
    for p in predictions {
        let key = (p.user_id.as_str(), p.task_id.as_str());
        if !label_keys.contains(&key) {
            unlabeled.push((p.user_id.clone(), p.task_id.clone()));
        } else if by_key.insert(key, p).is_some() {
            return Err(EvalError::DuplicatePrediction(
                p.user_id.clone(),
                p.task_id.clone(),
                variant.to_string(),
            ));
        }
    }
    if !unlabeled.is_empty() {
        return Err(EvalError::UnlabeledPredictions(unlabeled));
    }

    #[derive(Default)]
    struct Acc {
        cases: Vec<EvalCase>,
        failures: usize,
        missing: usize,
    }
    let mut groups: BTreeMap<String, Acc> = BTreeMap::new();
    for l in labels {
        let pred = by_key.get(&(l.user_id.as_str(), l.task_id.as_str()));
        let ranked = pred.map(|p| p.displays()).unwrap_or_default();
        for g in [group_key(l, grouping), "all".to_string()] {
            let acc = groups.entry(g).or_default();
            match pred {
                None => acc.missing += 1,
                Some(p) if p.parse_status == ParseStatus::Failed => acc.failures += 1,
                Some(_) => {}
            }
            acc.cases.push(EvalCase {
                user_id: l.user_id.clone(),
                task_id: l.task_id.clone(),
                label_value: l.label_value.clone(),
                predicted: ranked.clone(),
            });
        }
    }
    let mut rows = Vec::new();
    // "all" goes last
    let mut names: Vec<String> = groups.keys().filter(|g| *g != "all").cloned().collect();
    if groups.contains_key("all") {
        names.push("all".into());
    }
    for g in names {
        let acc = &groups[&g];
        let mut hr_at = BTreeMap::new();
        let mut ndcg_at = BTreeMap::new();
        for &k in ks {
            hr_at.insert(k, hr_at_k(&acc.cases, k)?);
            ndcg_at.insert(k, ndcg_at_k(&acc.cases, k)?);
        }
        rows.push(EvalRow {
            group: g,
            variant: variant.to_string(),
            hr_at,
            ndcg_at,
            n_cases: acc.cases.len(),
            n_parse_failures: acc.failures,
            n_missing: acc.missing,
        });
    }
    Ok(rows)
}

pub fn run_eval(
    labels_path: &Path,
    variants: &[(String, PathBuf)],
    ks: &[usize],
    grouping: Grouping,
) -> Result<EvalReport, EvalError> {
    let labels: Vec<LabelRecord> = jsonl::read_jsonl(labels_path)?;
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rows = Vec::new();
    for (name, path) in variants {
        let preds: Vec<RankedRecommendation> = jsonl::read_jsonl(path)?;
        rows.extend(evaluate_variant(name, &labels, &preds, ks, grouping)?);
    }
    Ok(EvalReport {
        ks: ks.to_vec(),
        grouping,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::LabelKind;
    use proptest::prelude::*;

    /// Independent formulation: DCG summed over every position against the
    /// ideal DCG of a single relevant item at rank one.
    fn brute_ndcg(cases: &[EvalCase], k: usize) -> f64 {
        let mut sum = 0.0;
        for c in cases {
            let mut dcg = 0.0;
            let mut seen_hit = false;
            for (i, item) in c.predicted.iter().take(k).enumerate() {
                let rel = if !seen_hit && normalize(item) == normalize(&c.label_value) {
                    seen_hit = true;
                    1.0
                } else {
                    0.0
                };
                dcg += (2f64.powf(rel) - 1.0) / ((i + 2) as f64).ln() * std::f64::consts::LN_2;
            }
            let idcg = 1.0;
            sum += dcg / idcg;
        }
        sum / cases.len() as f64
    }

    fn brute_hr(cases: &[EvalCase], k: usize) -> f64 {
        let mut hits = 0;
        for c in cases {
            if c.predicted
                .iter()
                .take(k)
                .any(|r| normalize(r) == normalize(&c.label_value))
            {
                hits += 1;
            }
        }
        hits as f64 / cases.len() as f64
    }

    #[test]
    fn worked_examples() {
        let rank3 = [EvalCase::new(["a", "b", "c", "d", "e"], "c")];
        assert_eq!(hr_at_k(&rank3, 5).unwrap(), 1.0);
        assert!((ndcg_at_k(&rank3, 5).unwrap() - 0.5).abs() < 1e-12);
        let top = [EvalCase::new(["x", "y"], "x")];
        assert_eq!(ndcg_at_k(&top, 5).unwrap(), 1.0);
        let miss = [EvalCase::new(["x", "y"], "z")];
        assert_eq!(hr_at_k(&miss, 5).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&miss, 5).unwrap(), 0.0);
        // rank 2: 1/log2(3)
        let second = [EvalCase::new(["x", "y"], "y")];
        assert!((ndcg_at_k(&second, 5).unwrap() - 0.630_929_753_571_457_4).abs() < 1e-12);
        let seventh = [EvalCase::new(["a", "b", "c", "d", "e", "f", "g"], "g")];
        assert_eq!(hr_at_k(&seventh, 5).unwrap(), 0.0);
        assert_eq!(hr_at_k(&seventh, 10).unwrap(), 1.0);
        let sixth = [EvalCase::new(["a", "b", "c", "d", "e", "f"], "f")];
        assert_eq!(ndcg_at_k(&sixth, 5).unwrap(), 0.0);
    }

    #[test]
    fn three_cases_by_hand() {
        let cases = [
            EvalCase::new(["x", "y"], "x"),
            EvalCase::new(["x", "y"], "y"),
            EvalCase::new(["x", "y"], "z"),
        ];
        assert!((hr_at_k(&cases, 5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        // (1 + 1/log2 3) / 3 = (1 + ln2/ln3) / 3
        let expected = (1.0 + std::f64::consts::LN_2 / 3f64.ln()) / 3.0;
        assert!((ndcg_at_k(&cases, 5).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn normalization_applies_to_both_sides() {
        assert_eq!(normalize("  Kung   Pao\tChicken "), "kung pao chicken");
        let c = [EvalCase::new(["  sichuan  "], "SICHUAN")];
        assert_eq!(hr_at_k(&c, 1).unwrap(), 1.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(hr_at_k(&[], 5), Err(EvalError::Empty)));
        assert!(matches!(ndcg_at_k(&[], 5), Err(EvalError::Empty)));
        assert!(matches!(
            hr_at_k(&[EvalCase::new(["a"], "a")], 0),
            Err(EvalError::ZeroK)
        ));
    }

    fn label(user: &str, task: &str, kind: LabelKind, value: &str) -> LabelRecord {
        LabelRecord {
            user_id: user.into(),
            task_id: task.into(),
            label_kind: kind,
            label_value: value.into(),
            cutoff_timestamp: 1,
        }
    }

    fn pred(user: &str, task: &str, items: &[&str]) -> RankedRecommendation {
        RankedRecommendation {
            user_id: user.into(),
            task_id: task.into(),
            items: items
                .iter()
                .map(|d| crate::recommender::RecommendedItem {
                    item_id: None,
                    display: d.to_string(),
                })
                .collect(),
            raw_output: String::new(),
            parse_status: if items.is_empty() {
                ParseStatus::Failed
            } else {
                ParseStatus::Parsed
            },
        }
    }

    #[test]
    fn unlabeled_prediction_is_fatal_and_lists_offenders() {
        let labels = vec![label("u1", "t", LabelKind::Category, "A")];
        let preds = vec![pred("u1", "t", &["A"]), pred("u9", "t", &["A"])];
        let err = evaluate_variant("full", &labels, &preds, &[5], Grouping::LabelKind).unwrap_err();
        assert!(err.to_string().contains("u9/t"), "{err}");
    }

    #[test]
    fn grouping_missing_and_failures() {
        let labels = vec![
            label("u1", "cat", LabelKind::Category, "A"),
            label("u2", "cat", LabelKind::Category, "B"),
            label("u1", "poi", LabelKind::Poi, "Shop"),
            label("u3", "cat", LabelKind::Category, "C"),
        ];
        let preds = vec![
            pred("u1", "cat", &["A"]),
            pred("u2", "cat", &[]),
            pred("u1", "poi", &["Other", "Shop"]),
        ];
        let rows =
            evaluate_variant("full", &labels, &preds, &[5, 10], Grouping::LabelKind).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.group.as_str()).collect();
        assert_eq!(names, vec!["category", "poi", "all"]);
        let cat = &rows[0];
        assert_eq!(
            (cat.n_cases, cat.n_parse_failures, cat.n_missing),
            (3, 1, 1)
        );
        assert!((cat.hr_at[&5] - 1.0 / 3.0).abs() < 1e-12);
        assert!((rows[1].ndcg_at[&5] - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(rows[2].n_cases, 4);
    }

    #[test]
    fn table_has_a_line_per_variant() {
        let labels = vec![label("u1", "cat", LabelKind::Category, "A")];
        let mut rows = evaluate_variant(
            "full",
            &labels,
            &[pred("u1", "cat", &["A"])],
            &[5, 10],
            Grouping::LabelKind,
        )
        .unwrap();
        rows.extend(
            evaluate_variant(
                "no_hkf",
                &labels,
                &[pred("u1", "cat", &["B"])],
                &[5, 10],
                Grouping::LabelKind,
            )
            .unwrap(),
        );
        let report = EvalReport {
            ks: vec![5, 10],
            grouping: Grouping::LabelKind,
            rows,
        };
        let table = report.to_table();
        assert!(table.contains("HR@5") && table.contains("NDCG@10"));
        let full = table.lines().find(|l| l.starts_with("full")).unwrap();
        assert!(full.contains("1.0000"));
        assert!(table.lines().any(|l| l.starts_with("no_hkf")));
        let widths: BTreeSet<usize> = table.lines().skip(1).map(str::len).collect();
        assert_eq!(widths.len(), 1, "{table}");
    }

    fn arb_cases() -> impl Strategy<Value = Vec<EvalCase>> {
        let item = prop::sample::select(vec![
            "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l",
        ]);
        let case =
            (prop::collection::vec(item.clone(), 0..15), item).prop_map(|(mut ranked, label)| {
                let mut seen = BTreeSet::new();
                ranked.retain(|r| seen.insert(*r));
                EvalCase::new(ranked, label)
            });
        prop::collection::vec(case, 1..40)
    }

    proptest! {
        #[test]
        fn ndcg_never_exceeds_hr(cases in arb_cases(), k in 1usize..15) {
            prop_assert!(ndcg_at_k(&cases, k).unwrap() <= hr_at_k(&cases, k).unwrap() + 1e-15);
        }

        #[test]
        fn monotone_in_k(cases in arb_cases(), k in 1usize..14) {
            prop_assert!(hr_at_k(&cases, k).unwrap() <= hr_at_k(&cases, k + 1).unwrap());
            prop_assert!(ndcg_at_k(&cases, k).unwrap() <= ndcg_at_k(&cases, k + 1).unwrap() + 1e-15);
        }

        #[test]
        fn case_order_is_irrelevant(cases in arb_cases(), k in 1usize..15, seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = cases.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(hr_at_k(&cases, k).unwrap(), hr_at_k(&shuffled, k).unwrap());
            prop_assert!((ndcg_at_k(&cases, k).unwrap() - ndcg_at_k(&shuffled, k).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn matches_brute_force(cases in arb_cases(), k in 1usize..15) {
            prop_assert!((hr_at_k(&cases, k).unwrap() - brute_hr(&cases, k)).abs() < 1e-12);
            prop_assert!((ndcg_at_k(&cases, k).unwrap() - brute_ndcg(&cases, k)).abs() < 1e-12);
        }
    }
}
