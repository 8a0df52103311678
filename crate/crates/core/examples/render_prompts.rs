use hkfr::prompt::{default_registry, render_sequence, TemplateRegistry};
use hkfr::store::BehaviorSequence;
use hkfr::synth::{generate_events, generate_profiles};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let profile = &generate_profiles(1, 11, 0.0)?[0];
    let trace = generate_events(profile, 2, hkfr::DEFAULT_CUTOFF_TIMESTAMP)?;
    let seq = BehaviorSequence::new(&profile.user_id, trace.history().cloned().collect(), 300)?;

    let registry = default_registry();
    let text = render_sequence(&seq, &registry);
    println!("{}", text.to_text());
    println!("--- capped to 400 chars ---");
    println!("{}", text.to_text_capped(400));

    // a registry is plain JSONL and can be edited and reloaded
    let jsonl = registry.to_jsonl();
    let reloaded = TemplateRegistry::from_jsonl(&jsonl)?;
    println!(
        "--- {} templates, first one ---",
        reloaded.templates().len()
    );
    println!("{}", jsonl.lines().next().unwrap_or_default());
    Ok(())
}
