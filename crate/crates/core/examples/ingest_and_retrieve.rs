use std::collections::BTreeMap;

use hkfr::store::{BehaviorEvent, BehaviorStore, ContentKind, Scenario, SubjectKind};

fn event(user: &str, ts: i64, kind: ContentKind, name: &str, price: Option<i64>) -> BehaviorEvent {
    BehaviorEvent {
        user_id: user.into(),
        subject_kind: SubjectKind::Product,
        subject_id: format!("p-{name}"),
        subject_name: name.into(),
        category: "Sichuan".into(),
        price_minor: price,
        content_kind: kind,
        scenario: Scenario::AppHomepage,
        timestamp: ts,
        attributes: BTreeMap::new(),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store = BehaviorStore::open(dir.path())?;

    let batch = vec![
        event(
            "alice",
            1_680_000_000,
            ContentKind::Exposure,
            "Mapo Tofu",
            None,
        ),
        event(
            "alice",
            1_680_000_060,
            ContentKind::Click,
            "Mapo Tofu",
            None,
        ),
        event(
            "alice",
            1_680_000_120,
            ContentKind::Order,
            "Mapo Tofu",
            Some(2550),
        ),
        // exact duplicate, suppressed
        event(
            "alice",
            1_680_000_120,
            ContentKind::Order,
            "Mapo Tofu",
            Some(2550),
        ),
        // orders need a price
        event(
            "alice",
            1_680_000_180,
            ContentKind::Order,
            "Dan Dan Noodles",
            None,
        ),
    ];
    let summary = store.ingest_events(batch)?;
    println!("{summary:?}");
    println!("partition: {}", store.partition_path("alice").display());

    let seq = store.get_user_sequence("alice", 300)?;
    for e in &seq.events {
        println!("{} {:>8} {}", e.timestamp, e.content_kind, e.subject_name);
    }
    println!("sequence sha256 {}", seq.digest());
    Ok(())
}
