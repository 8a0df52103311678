use hkfr::catalog::Catalog;
use hkfr::fusion::mock_fuse;
use hkfr::instructions::default_tasks;
use hkfr::prompt::{default_registry, render_sequence};
use hkfr::recommender::{
    export_semantic_features, feature_names, features_csv, parse_ranked_list, recommend,
    Candidates, UserContext,
};
use hkfr::store::BehaviorSequence;
use hkfr::synth::{generate_events, generate_profiles, LabelKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = Catalog::shared();
    let profile = &generate_profiles(1, 21, 0.0)?[0];
    let trace = generate_events(profile, 20, hkfr::DEFAULT_CUTOFF_TIMESTAMP)?;
    let seq = BehaviorSequence::new(&profile.user_id, trace.history().cloned().collect(), 300)?;
    let doc = mock_fuse(&render_sequence(&seq, &default_registry()), &seq);

    let ctx = UserContext::from_knowledge(&doc, doc.text.clone());
    let mut recs = Vec::new();
    for task in default_tasks()
        .iter()
        .filter(|t| t.task_id.starts_with("cat_next") || t.label_kind == LabelKind::Poi)
        .take(2)
    {
        let candidates = Candidates::for_kind(catalog, task.label_kind);
        let rec = recommend(
            &ctx,
            task,
            5,
            &hkfr::fusion::Backend::mock("mock"),
            Some(&candidates),
        )?;
        println!(
            "{}: {:?} ({:?})",
            task.task_id,
            rec.displays(),
            rec.parse_status
        );
        recs.push(rec);
    }

    // free-form output falls back to a catalog scan
    let merchants = Candidates::for_kind(catalog, LabelKind::Poi);
    let first = &catalog.merchants[0].name;
    let second = &catalog.merchants[1].name;
    let raw = format!("You would probably enjoy {second}, or maybe {first}.");
    println!("{:?}", parse_ranked_list(&raw, 5, Some(&merchants)));

    let features = export_semantic_features(&[doc], &recs, catalog, &default_tasks());
    print!("{}", features_csv(&features.rows, &feature_names(catalog)));
    Ok(())
}
