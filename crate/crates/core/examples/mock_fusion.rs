use hkfr::fusion::{compute_facets, fuse, Backend, BehaviorWeights, FusionConfig};
use hkfr::prompt::{default_registry, render_sequence};
use hkfr::store::BehaviorSequence;
use hkfr::synth::{generate_events, generate_profiles};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let profile = &generate_profiles(1, 5, 0.0)?[0];
    let trace = generate_events(profile, 20, hkfr::DEFAULT_CUTOFF_TIMESTAMP)?;
    let seq = BehaviorSequence::new(&profile.user_id, trace.history().cloned().collect(), 300)?;
    let text = render_sequence(&seq, &default_registry());

    let doc = fuse(
        &text,
        &seq,
        &Backend::mock("mock"),
        &FusionConfig::default(),
    )?;
    println!("planted top category: {}", profile.top_category());
    println!("{}", doc.text);
    println!("{}", serde_json::to_string_pretty(&doc.provenance)?);

    // orders only
    let orders_only = BehaviorWeights {
        order: 1,
        click: 0,
        exposure: 0,
    };
    let facets = compute_facets(&seq, &orders_only);
    println!(
        "order counts: {:?}",
        &facets.top_categories[..facets.top_categories.len().min(3)]
    );
    Ok(())
}
