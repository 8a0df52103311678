//! Per-user heterogeneous behavior storage.
//!
//! Each user owns one append-only file of canonical JSON lines at
//! `<root>/<h0h1>/<h2h3>/<hex(user_id)>.jsonl`, where `h0..h3` are the first
//! hex digits of SHA-256(user_id).

mod anonymize;
mod event;

pub use anonymize::{anonymize_event, AnonymizationError, AnonymizationPolicy, MaskField};
pub use event::{
    sequence_order, BehaviorEvent, BehaviorSequence, ContentKind, EventViolation, Scenario,
    SequenceError, SubjectKind, DEFAULT_SEQUENCE_CAP,
};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MALFORMED_RECORD: &str = "malformed record";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt partition {path} at line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: usize,
    /// Exact duplicates of events already stored (or earlier in the batch).
    pub duplicates: usize,
    pub reject_reasons: BTreeMap<String, usize>,
}

impl IngestSummary {
    fn reject(&mut self, reason: impl Into<String>) {
        self.rejected += 1;
        *self.reject_reasons.entry(reason.into()).or_default() += 1;
    }

    fn merge(&mut self, other: IngestSummary) {
        self.accepted += other.accepted;
        self.rejected += other.rejected;
        self.duplicates += other.duplicates;
        for (k, v) in other.reject_reasons {
            *self.reject_reasons.entry(k).or_default() += v;
        }
    }
}

/// File-backed behavior store. Safe to share between threads: writes to one
/// user's partition are serialized, everything else runs concurrently.
#[derive(Debug)]
pub struct BehaviorStore {
    root: PathBuf,
    locks: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
}

const INGEST_BATCH: usize = 50_000;

impl BehaviorStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self {
            root,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn partition_path(&self, user_id: &str) -> PathBuf {
        let digest = hex::encode(Sha256::digest(user_id.as_bytes()));
        self.root
            .join(&digest[0..2])
            .join(&digest[2..4])
            .join(format!("{}.jsonl", hex::encode(user_id.as_bytes())))
    }

    fn partition_lock(&self, path: &Path) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table poisoned");
        locks.entry(path.to_path_buf()).or_default().clone()
    }

    /// Validates and appends events. Invalid events are counted, never fatal.
    pub fn ingest_events<I>(&self, records: I) -> Result<IngestSummary, StoreError>
    where
        I: IntoIterator<Item = BehaviorEvent>,
    {
        let mut summary = IngestSummary::default();
        let mut by_user: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut pending = 0;
        for event in records {
            match event.validate() {
                Err(v) => summary.reject(v.to_string()),
                Ok(()) => {
                    by_user
                        .entry(event.user_id.clone())
                        .or_default()
                        .push(event.to_line());
                    pending += 1;
                }
            }
            if pending >= INGEST_BATCH {
                summary.merge(self.append_batch(std::mem::take(&mut by_user))?);
                pending = 0;
            }
        }
        summary.merge(self.append_batch(by_user)?);
        Ok(summary)
    }

    /// Reads line-delimited JSON events. A line that does not parse is
    /// rejected as a malformed record; a read failure is fatal.
    pub fn ingest_reader<R: BufRead>(&self, reader: R) -> Result<IngestSummary, StoreError> {
        self.ingest_reader_with(reader, None)
    }

    /// As [`ingest_reader`](Self::ingest_reader), masking each event first when a policy is given.
    pub fn ingest_reader_with<R: BufRead>(
        &self,
        reader: R,
        policy: Option<&AnonymizationPolicy>,
    ) -> Result<IngestSummary, StoreError> {
        let mut summary = IngestSummary::default();
        let mut batch = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(io_err(Path::new("<input>")))?;
            if line.trim().is_empty() {
                continue;
            }
            match BehaviorEvent::from_line(&line) {
                Ok(e) => batch.push(match policy {
                    Some(p) => anonymize_event(&e, p),
                    None => e,
                }),
                Err(_) => summary.reject(MALFORMED_RECORD),
            }
            if batch.len() >= INGEST_BATCH {
                summary.merge(self.ingest_events(std::mem::take(&mut batch))?);
            }
        }
        summary.merge(self.ingest_events(batch)?);
        Ok(summary)
    }

    pub fn ingest_file(&self, path: &Path) -> Result<IngestSummary, StoreError> {
        let file = File::open(path).map_err(io_err(path))?;
        self.ingest_reader(BufReader::new(file))
    }

    pub fn ingest_file_with(
        &self,
        path: &Path,
        policy: Option<&AnonymizationPolicy>,
    ) -> Result<IngestSummary, StoreError> {
        let file = File::open(path).map_err(io_err(path))?;
        self.ingest_reader_with(BufReader::new(file), policy)
    }

    fn append_batch(
        &self,
        by_user: BTreeMap<String, Vec<String>>,
    ) -> Result<IngestSummary, StoreError> {
        let mut summary = IngestSummary::default();
        for (user, lines) in by_user {
            let path = self.partition_path(&user);
            let lock = self.partition_lock(&path);
            let _guard = lock.lock().expect("partition lock poisoned");
            let mut seen: HashSet<String> = read_lines(&path)?.into_iter().collect();
            let fresh: Vec<&String> = lines.iter().filter(|l| seen.insert((*l).clone())).collect();
            summary.duplicates += lines.len() - fresh.len();
            if fresh.is_empty() {
                continue;
            }
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            let mut buf = String::new();
            for l in &fresh {
                buf.push_str(l);
                buf.push('\n');
            }
            file.write_all(buf.as_bytes()).map_err(io_err(&path))?;
            summary.accepted += fresh.len();
        }
        Ok(summary)
    }

    /// All events stored for `user_id`, in storage order.
    pub fn load_user_events(&self, user_id: &str) -> Result<Vec<BehaviorEvent>, StoreError> {
        let path = self.partition_path(user_id);
        let lines = {
            let lock = self.partition_lock(&path);
            let _guard = lock.lock().expect("partition lock poisoned");
            read_lines(&path)?
        };
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let event = BehaviorEvent::from_line(l).map_err(|e| StoreError::Corrupt {
                    path: path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                if event.user_id != user_id {
                    return Err(StoreError::Corrupt {
                        path: path.clone(),
                        line: i + 1,
                        reason: format!("event belongs to `{}`", event.user_id),
                    });
                }
                Ok(event)
            })
            .collect()
    }

    /// The user's newest `cap` events in sequence order; empty for unknown users.
    pub fn get_user_sequence(
        &self,
        user_id: &str,
        cap: usize,
    ) -> Result<BehaviorSequence, StoreError> {
        let events = self.load_user_events(user_id)?;
        Ok(BehaviorSequence::new(user_id, events, cap)?)
    }

    /// Every user with a partition, sorted.
    pub fn list_users(&self) -> Result<Vec<String>, StoreError> {
        let mut users = Vec::new();
        for l1 in read_dir_sorted(&self.root)? {
            if !l1.is_dir() {
                continue;
            }
            for l2 in read_dir_sorted(&l1)? {
                if !l2.is_dir() {
                    continue;
                }
                for f in read_dir_sorted(&l2)? {
                    let Some(stem) = f
                        .file_name()
                        .and_then(|n| n.to_str())
                        .and_then(|n| n.strip_suffix(".jsonl"))
                    else {
                        continue;
                    };
                    let user = hex::decode(stem)
                        .ok()
                        .and_then(|b| String::from_utf8(b).ok())
                        .ok_or_else(|| StoreError::Corrupt {
                            path: f.clone(),
                            line: 0,
                            reason: "partition name is not hex-encoded UTF-8".into(),
                        })?;
                    users.push(user);
                }
            }
        }
        users.sort();
        Ok(users)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, StoreError> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(entry.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::event::tests::event;
    use super::*;

    fn store() -> (tempfile::TempDir, BehaviorStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = BehaviorStore::open(dir.path().join("store")).unwrap();
        (dir, s)
    }

    #[test]
    fn rejects_invalid_and_keeps_going() {
        let (_d, s) = store();
        let events = vec![
            event("u1", "a", ContentKind::Click, 1),
            event("u1", "b", ContentKind::Click, 2),
            event("u2", "a", ContentKind::Click, 0),
            event("u2", "c", ContentKind::Exposure, 3),
        ];
        let sum = s.ingest_events(events).unwrap();
        assert_eq!(sum.accepted, 3);
        assert_eq!(sum.rejected, 1);
        assert_eq!(sum.reject_reasons["nonpositive timestamp"], 1);
    }

    #[test]
    fn empty_stream() {
        let (_d, s) = store();
        let sum = s.ingest_events(Vec::new()).unwrap();
        assert_eq!((sum.accepted, sum.rejected), (0, 0));
    }

    #[test]
    fn exact_duplicates_stored_once() {
        let (_d, s) = store();
        let e = event("u1", "a", ContentKind::Click, 1);
        assert_eq!(s.ingest_events(vec![e.clone()]).unwrap().accepted, 1);
        let again = s.ingest_events(vec![e.clone(), e.clone()]).unwrap();
        assert_eq!(again.accepted, 0);
        assert_eq!(again.duplicates, 2);
        let rows = fs::read_to_string(s.partition_path("u1")).unwrap();
        assert_eq!(rows.lines().count(), 1);
    }

    #[test]
    fn malformed_lines_counted() {
        let (_d, s) = store();
        let good = event("u1", "a", ContentKind::Click, 1).to_line();
        let input = format!("{good}\nnot json\n{{\"user_id\":\"x\"}}\n\n");
        let sum = s.ingest_reader(input.as_bytes()).unwrap();
        assert_eq!(sum.accepted, 1);
        assert_eq!(sum.reject_reasons[MALFORMED_RECORD], 2);
    }

    #[test]
    fn unreadable_input_is_fatal() {
        let (d, s) = store();
        assert!(matches!(
            s.ingest_file(&d.path().join("missing.jsonl")),
            Err(StoreError::Io { .. })
        ));
    }

    #[test]
    fn retrieval_newest_first_and_unknown_user() {
        let (_d, s) = store();
        s.ingest_events(vec![
            event("u1", "a", ContentKind::Click, 1),
            event("u1", "b", ContentKind::Order, 9),
        ])
        .unwrap();
        let seq = s.get_user_sequence("u1", 300).unwrap();
        assert_eq!(seq.events.len(), 2);
        assert_eq!(seq.events[0].timestamp, 9);
        assert!(s.get_user_sequence("nobody", 300).unwrap().is_empty());
    }

    #[test]
    fn cap_keeps_newest() {
        let (_d, s) = store();
        let events: Vec<_> = (1..=350)
            .map(|t| event("u", &format!("s{t}"), ContentKind::Click, t))
            .collect();
        s.ingest_events(events).unwrap();
        let seq = s.get_user_sequence("u", 300).unwrap();
        assert_eq!(seq.len(), 300);
        assert_eq!(seq.events.first().unwrap().timestamp, 350);
        // boundary: event 51 is the oldest kept, 50 is dropped
        assert_eq!(seq.events.last().unwrap().timestamp, 51);
    }

    #[test]
    fn corrupt_partition_is_an_error() {
        let (_d, s) = store();
        s.ingest_events(vec![event("u1", "a", ContentKind::Click, 1)])
            .unwrap();
        let p = s.partition_path("u1");
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        writeln!(f, "{{garbage").unwrap();
        match s.get_user_sequence("u1", 10) {
            Err(StoreError::Corrupt { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn lists_users_with_odd_ids() {
        let (_d, s) = store();
        s.ingest_events(vec![
            event("b/../x", "a", ContentKind::Click, 1),
            event("a user", "a", ContentKind::Click, 1),
        ])
        .unwrap();
        assert_eq!(
            s.list_users().unwrap(),
            vec!["a user".to_string(), "b/../x".to_string()]
        );
    }

    #[test]
    fn concurrent_writers_same_user() {
        let (_d, s) = store();
        std::thread::scope(|scope| {
            for w in 0..4 {
                let s = &s;
                scope.spawn(move || {
                    let evs: Vec<_> = (1..=50)
                        .map(|t| event("u", &format!("w{w}"), ContentKind::Click, t))
                        .collect();
                    s.ingest_events(evs).unwrap();
                });
            }
        });
        assert_eq!(s.get_user_sequence("u", 1000).unwrap().len(), 200);
    }
}
