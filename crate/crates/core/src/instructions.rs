//! Instruction-tuning dataset: `(instruction, input, output)` triples over a
//! registry of recommendation tasks, split by a timestamp cutoff.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::{KnowledgeDocument, EMPTY_KNOWLEDGE_TEXT};
use crate::jsonl::{self, JsonlError};
use crate::prompt::BehaviorText;
use crate::synth::{LabelKind, LabelRecord};

pub const DEFAULT_TASK_COUNT: usize = 20;
pub const K_PLACEHOLDER: &str = "{k}";

/// Whether model inputs are fused knowledge or raw behavior text.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoHkf,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHkf => "no_hkf",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no_hkf" | "no-hkf" => Ok(Variant::NoHkf),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTemplate {
    pub task_id: String,
    pub label_kind: LabelKind,
    /// Contains `{k}`, replaced by the list length.
    pub instruction_text: String,
}

impl TaskTemplate {
    pub fn instruction(&self, k: usize) -> String {
        self.instruction_text.replace(K_PLACEHOLDER, &k.to_string())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("task `{0}` instruction must contain {{k}}")]
    MissingK(String),
    #[error("task registry is empty")]
    NoTasks,
    #[error("no examples to export")]
    Empty,
    #[error(transparent)]
    Io(#[from] JsonlError),
}

pub fn validate_tasks(tasks: &[TaskTemplate]) -> Result<(), DatasetError> {
    if tasks.is_empty() {
        return Err(DatasetError::NoTasks);
    }
    let mut ids = HashSet::new();
    for t in tasks {
        if !ids.insert(&t.task_id) {
            return Err(DatasetError::DuplicateTask(t.task_id.clone()));
        }
        if !t.instruction_text.contains(K_PLACEHOLDER) {
            return Err(DatasetError::MissingK(t.task_id.clone()));
        }
    }
    Ok(())
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskTemplate>, DatasetError> {
    let tasks = jsonl::read_jsonl(path)?;
    validate_tasks(&tasks)?;
    Ok(tasks)
}

fn task(id: &str, kind: LabelKind, text: &str) -> TaskTemplate {
    TaskTemplate {
        task_id: id.to_string(),
        label_kind: kind,
        instruction_text: text.to_string(),
    }
}

/// The shipped task set: 8 category, 6 POI/merchant, 4 price-band and
/// 2 combined-preference instructions.
pub fn default_tasks() -> Vec<TaskTemplate> {
    use LabelKind::*;
    vec![
        task("cat_next_order", Category, "Predict the food category of this user's next order. List the top {k} categories, most likely first."),
        task("cat_preference", Category, "Rank the {k} food categories this user prefers most."),
        task("cat_next_meal", Category, "Based on the user's history, name the {k} categories they are most likely to order for their next meal."),
        task("cat_recommend", Category, "Recommend {k} food categories to this user, best match first."),
        task("cat_craving", Category, "Guess which categories this user is craving right now. Give {k} categories in ranked order."),
        task("cat_homepage_slots", Category, "Choose the {k} categories to show this user first on the app homepage, ranked."),
        task("cat_reorder", Category, "Which categories is this user most likely to order again? Rank {k} of them."),
        task("cat_interest", Category, "Rank {k} categories by how interested this user will be in them tomorrow."),
        task("poi_next_order", Poi, "Predict the merchant this user will order from next. List the top {k} merchants, most likely first."),
        task("poi_recommend", Poi, "Recommend {k} merchants for this user's next order, best match first."),
        task("poi_reorder", Poi, "Which merchants will this user most likely order from again? Rank {k} of them."),
        task("merchant_next_click", Merchant, "Predict the next merchant this user will click. List the top {k} merchants, most likely first."),
        task("merchant_browse", Merchant, "Rank {k} merchants this user is most likely to browse next."),
        task("merchant_interest", Merchant, "Name the {k} merchants that will catch this user's attention next, ranked."),
        task("price_next_order", PriceBand, "Predict the price band of this user's next order. Rank the {k} most likely price bands."),
        task("price_budget", PriceBand, "Estimate this user's typical spend per order. Rank {k} price bands from most to least likely."),
        task("price_preference", PriceBand, "Which price bands does this user prefer? Rank {k} of them."),
        task("price_promotion", PriceBand, "Pick the {k} price bands in which a promotion would most appeal to this user, ranked."),
        task("combo_category_price", Category, "Considering both the categories and the prices this user usually pays, rank the {k} categories they will order next."),
        task("combo_merchant_category", Poi, "Considering the user's favorite categories and merchants together, rank the {k} merchants they will order from next."),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionExample {
    pub example_id: String,
    pub task_id: String,
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub user_id: String,
    pub split: Split,
}

/// The exported record: exactly `{instruction, input, output}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingTriple {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl From<&InstructionExample> for TrainingTriple {
    fn from(e: &InstructionExample) -> Self {
        Self {
            instruction: e.instruction.clone(),
            input: e.input.clone(),
            output: e.output.clone(),
        }
    }
}

fn cap_chars(s: &str, max_chars: usize) -> String {
    match s.char_indices().nth(max_chars) {
        Some((byte, _)) => s[..byte].to_string(),
        None => s.to_string(),
    }
}

/// Per-user model input text for one variant, already cut to the character cap.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UserInputs {
    pub variant: Variant,
    pub texts: BTreeMap<String, String>,
}

impl UserInputs {
    pub fn from_knowledge(docs: &[KnowledgeDocument], max_chars: usize) -> Self {
        Self {
            variant: Variant::Full,
            texts: docs
                .iter()
                .map(|d| (d.user_id.clone(), cap_chars(&d.text, max_chars)))
                .collect(),
        }
    }

    /// Raw behavior text; the oldest events are dropped first to fit.
    pub fn from_behavior(texts: &[BehaviorText], max_chars: usize) -> Self {
        Self {
            variant: Variant::NoHkf,
            texts: texts
                .iter()
                .map(|t| {
                    let capped = t.to_text_capped(max_chars);
                    let text = if capped.trim().is_empty() {
                        EMPTY_KNOWLEDGE_TEXT.to_string()
                    } else {
                        capped
                    };
                    (t.user_id.clone(), text)
                })
                .collect(),
        }
    }

    pub fn get(&self, user_id: &str) -> Option<&str> {
        self.texts.get(user_id).map(String::as_str)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildOutcome {
    /// Ordered by `(user_id, task_id)`.
    pub examples: Vec<InstructionExample>,
    /// Ground truth for every test example, keyed by the task template id.
    pub test_labels: Vec<LabelRecord>,
    /// `(user_id, task_id)` pairs with a label but no input text.
    pub skipped: Vec<(String, String)>,
}

/// One example per `(user, task)` whose label kind the user has a label for.
/// Labels with `cutoff_timestamp < cutoff` go to train, the rest to test.
pub fn build_examples(
    inputs: &UserInputs,
    labels: &[LabelRecord],
    tasks: &[TaskTemplate],
    cutoff_timestamp: i64,
    k: usize,
) -> BuildOutcome {
    let mut by_user: BTreeMap<&str, Vec<&LabelRecord>> = BTreeMap::new();
    for l in labels.iter().filter(|l| !l.label_value.is_empty()) {
        by_user.entry(l.user_id.as_str()).or_default().push(l);
    }
    let mut sorted_tasks: Vec<&TaskTemplate> = tasks.iter().collect();
    sorted_tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));

    let mut out = BuildOutcome::default();
    for (user, mut user_labels) in by_user {
        user_labels.sort_by_key(|l| (l.cutoff_timestamp, l.label_kind));
        for t in &sorted_tasks {
            for l in user_labels.iter().filter(|l| l.label_kind == t.label_kind) {
                let Some(input) = inputs.get(user) else {
                    out.skipped.push((user.to_string(), t.task_id.clone()));
                    continue;
                };
                let split = if l.cutoff_timestamp < cutoff_timestamp {
                    Split::Train
                } else {
                    Split::Test
                };
                out.examples.push(InstructionExample {
                    example_id: format!("{user}/{}/{}", t.task_id, l.cutoff_timestamp),
                    task_id: t.task_id.clone(),
                    instruction: t.instruction(k),
                    input: input.to_string(),
                    output: l.label_value.clone(),
                    user_id: user.to_string(),
                    split,
                });
                if split == Split::Test {
                    out.test_labels.push(LabelRecord {
                        user_id: user.to_string(),
                        task_id: t.task_id.clone(),
                        label_kind: t.label_kind,
                        label_value: l.label_value.clone(),
                        cutoff_timestamp: l.cutoff_timestamp,
                    });
                }
            }
        }
    }
    out
}

/// Keeps at most `per_user` examples per user, chosen by a seeded shuffle.
/// Surviving examples keep their original order.
pub fn sample_per_user(
    examples: &[InstructionExample],
    per_user: usize,
    seed: u64,
) -> Vec<InstructionExample> {
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_user.entry(&e.user_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (_, mut idx) in by_user {
        idx.shuffle(&mut rng);
        idx.truncate(per_user);
        keep.extend(idx);
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| examples[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub train_count: usize,
    pub test_count: usize,
    /// SHA-256 over the train file bytes followed by the test file bytes.
    pub sha256: String,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

/// Writes `train.jsonl` and `test.jsonl` under `dir`, in `(user_id, task_id)` order.
pub fn export_dataset(
    examples: &[InstructionExample],
    dir: &Path,
) -> Result<ExportSummary, DatasetError> {
    if examples.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut ordered: Vec<&InstructionExample> = examples.iter().collect();
    ordered.sort_by(|a, b| {
        (&a.user_id, &a.task_id, &a.example_id).cmp(&(&b.user_id, &b.task_id, &b.example_id))
    });
    let triples = |split: Split| -> Vec<TrainingTriple> {
        ordered
            .iter()
            .filter(|e| e.split == split)
            .map(|e| TrainingTriple::from(*e))
            .collect()
    };
    let train = triples(Split::Train);
    let test = triples(Split::Test);
    let train_text = jsonl::to_jsonl(&train);
    let test_text = jsonl::to_jsonl(&test);
    jsonl::write_file(&dir.join(TRAIN_FILE), &train_text)?;
    jsonl::write_file(&dir.join(TEST_FILE), &test_text)?;
    let mut all = train_text.into_bytes();
    all.extend_from_slice(test_text.as_bytes());
    Ok(ExportSummary {
        train_count: train.len(),
        test_count: test.len(),
        sha256: jsonl::sha256_hex(&all),
    })
}

pub fn read_triples(path: &Path) -> Result<Vec<TrainingTriple>, DatasetError> {
    Ok(jsonl::read_jsonl(path)?)
}

pub fn write_tasks(path: &Path, tasks: &[TaskTemplate]) -> Result<(), DatasetError> {
    jsonl::write_jsonl(path, tasks)?;
    Ok(())
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(jsonl::sha256_hex(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(user: &str, kind: LabelKind, value: &str, cutoff: i64) -> LabelRecord {
        LabelRecord {
            user_id: user.into(),
            task_id: kind.generic_task_id().into(),
            label_kind: kind,
            label_value: value.into(),
            cutoff_timestamp: cutoff,
        }
    }

    fn inputs(users: &[&str]) -> UserInputs {
        UserInputs {
            variant: Variant::Full,
            texts: users
                .iter()
                .map(|u| (u.to_string(), format!("knowledge of {u}")))
                .collect(),
        }
    }

    #[test]
    fn default_registry_has_twenty_valid_tasks() {
        let tasks = default_tasks();
        assert_eq!(tasks.len(), DEFAULT_TASK_COUNT);
        validate_tasks(&tasks).unwrap();
        let count = |k| tasks.iter().filter(|t| t.label_kind == k).count();
        assert_eq!(count(LabelKind::Category), 9);
        assert_eq!(count(LabelKind::Poi) + count(LabelKind::Merchant), 7);
        assert_eq!(count(LabelKind::PriceBand), 4);
        assert!(tasks[0].instruction(5).contains("top 5"));
    }

    #[test]
    fn cardinality_ten_users_two_tasks() {
        let tasks: Vec<_> = default_tasks()
            .into_iter()
            .filter(|t| ["cat_next_order", "poi_next_order"].contains(&t.task_id.as_str()))
            .collect();
        let users: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let refs: Vec<&str> = users.iter().map(String::as_str).collect();
        let labels: Vec<_> = users
            .iter()
            .flat_map(|u| {
                [
                    label(u, LabelKind::Category, "Sichuan", 5),
                    label(u, LabelKind::Poi, "Golden Sichuan House", 5),
                ]
            })
            .collect();
        let out = build_examples(&inputs(&refs), &labels, &tasks, 10, 10);
        assert_eq!(out.examples.len(), 20);
        let keys: Vec<_> = out
            .examples
            .iter()
            .map(|e| (e.user_id.clone(), e.task_id.clone()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn only_matching_label_kinds() {
        let labels = vec![label("u1", LabelKind::Category, "Sichuan", 5)];
        let out = build_examples(&inputs(&["u1"]), &labels, &default_tasks(), 10, 10);
        assert!(out.examples.iter().all(|e| !e.task_id.starts_with("poi")));
        assert_eq!(out.examples.len(), 9);
    }

    #[test]
    fn straddling_cutoff_splits() {
        let labels = vec![
            label("a", LabelKind::Category, "Sichuan", 99),
            label("b", LabelKind::Category, "Dessert", 100),
        ];
        let tasks = &default_tasks()[..1];
        let out = build_examples(&inputs(&["a", "b"]), &labels, tasks, 100, 5);
        assert_eq!(out.examples[0].split, Split::Train);
        assert_eq!(out.examples[1].split, Split::Test);
        assert_eq!(out.test_labels.len(), 1);
        assert_eq!(out.test_labels[0].user_id, "b");
        assert_eq!(out.test_labels[0].task_id, "cat_next_order");
    }

    #[test]
    fn missing_input_is_skipped() {
        let labels = vec![label("ghost", LabelKind::Category, "Sichuan", 5)];
        let out = build_examples(&inputs(&[]), &labels, &default_tasks()[..1], 10, 5);
        assert!(out.examples.is_empty());
        assert_eq!(
            out.skipped,
            vec![("ghost".to_string(), "cat_next_order".to_string())]
        );
    }

    #[test]
    fn export_counts_digest_and_round_trip() {
        let labels = vec![
            label("a", LabelKind::Category, "Sichuan", 5),
            label("b", LabelKind::Category, "Dessert", 5),
            label("c", LabelKind::Category, "BBQ", 50),
        ];
        let out = build_examples(
            &inputs(&["a", "b", "c"]),
            &labels,
            &default_tasks()[..1],
            10,
            5,
        );
        let dir = tempfile::tempdir().unwrap();
        let s1 = export_dataset(&out.examples, dir.path()).unwrap();
        assert_eq!((s1.train_count, s1.test_count), (2, 1));
        let s2 = export_dataset(&out.examples, dir.path()).unwrap();
        assert_eq!(s1.sha256, s2.sha256);
        let train = read_triples(&dir.path().join(TRAIN_FILE)).unwrap();
        let expected: Vec<TrainingTriple> = out
            .examples
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(TrainingTriple::from)
            .collect();
        assert_eq!(train, expected);
        let raw = fs::read_to_string(dir.path().join(TEST_FILE)).unwrap();
        let keys: Vec<String> =
            serde_json::from_str::<serde_json::Value>(raw.lines().next().unwrap())
                .unwrap()
                .as_object()
                .unwrap()
                .keys()
                .cloned()
                .collect();
        assert_eq!(keys, vec!["input", "instruction", "output"]);
    }

    #[test]
    fn export_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_dataset(&[], dir.path()),
            Err(DatasetError::Empty)
        ));
    }

    #[test]
    fn no_hkf_changes_only_input() {
        let labels = vec![
            label("a", LabelKind::Category, "Sichuan", 5),
            label("a", LabelKind::PriceBand, "15 to 30", 50),
        ];
        let full = build_examples(&inputs(&["a"]), &labels, &default_tasks(), 10, 10);
        let raw = UserInputs {
            variant: Variant::NoHkf,
            texts: BTreeMap::from([("a".to_string(), "raw behavior".to_string())]),
        };
        let nohkf = build_examples(&raw, &labels, &default_tasks(), 10, 10);
        assert_eq!(full.examples.len(), nohkf.examples.len());
        for (f, n) in full.examples.iter().zip(&nohkf.examples) {
            assert_eq!(
                (&f.instruction, &f.output, f.split, &f.task_id),
                (&n.instruction, &n.output, n.split, &n.task_id)
            );
            assert_ne!(f.input, n.input);
        }
    }

    #[test]
    fn knowledge_input_is_capped() {
        let doc_text = "x".repeat(9000);
        let capped = cap_chars(&doc_text, 8000);
        assert_eq!(capped.chars().count(), 8000);
        assert_eq!(cap_chars("héllo", 2), "hé");
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let labels: Vec<_> = ["a", "b"]
            .iter()
            .map(|u| label(u, LabelKind::Category, "Sichuan", 5))
            .collect();
        let out = build_examples(&inputs(&["a", "b"]), &labels, &default_tasks(), 10, 10);
        let s1 = sample_per_user(&out.examples, 3, 42);
        let s2 = sample_per_user(&out.examples, 3, 42);
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 6);
    }
}
