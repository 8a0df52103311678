use hkfr::store::{anonymize_event, AnonymizationPolicy, MaskField};
use hkfr::synth::{generate_events, generate_profiles};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let profile = &generate_profiles(1, 3, 0.0)?[0];
    let trace = generate_events(profile, 3, hkfr::DEFAULT_CUTOFF_TIMESTAMP)?;
    let original = trace.history().next().expect("history is non-empty");

    let default_policy = AnonymizationPolicy::new("per-deployment salt")?;
    let names_too = AnonymizationPolicy::with_fields(
        "per-deployment salt",
        [
            MaskField::UserId,
            MaskField::SubjectId,
            MaskField::SubjectName,
        ],
    )?;

    println!("original   {}", original.to_line());
    println!(
        "ids masked {}",
        anonymize_event(original, &default_policy).to_line()
    );
    println!(
        "names too  {}",
        anonymize_event(original, &names_too).to_line()
    );
    // same salt and value, same token
    assert_eq!(
        default_policy.mask(&original.user_id),
        names_too.mask(&original.user_id)
    );
    Ok(())
}
