//! Fusion against an OpenAI-compatible endpoint, here a local stub that
//! fails twice before answering.

use hkfr::fusion::{fuse, Backend, ChatClient, FusionConfig};
use hkfr::prompt::{default_registry, render_sequence};
use hkfr::store::BehaviorSequence;
use hkfr::stub::{StubReply, StubServer};
use hkfr::synth::{generate_events, generate_profiles};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = StubServer::scripted(vec![
        StubReply::status(500, "{\"error\":\"overloaded\"}"),
        StubReply::status(429, "{\"error\":\"slow down\"}"),
        StubReply::completion(
            "Loves Sichuan food around 25 per order, mostly from the app homepage.",
        ),
    ]);
    let client = ChatClient::new(server.endpoint()).with_api_key("demo-key");

    let profile = &generate_profiles(1, 9, 0.0)?[0];
    let trace = generate_events(profile, 5, hkfr::DEFAULT_CUTOFF_TIMESTAMP)?;
    let seq = BehaviorSequence::new(&profile.user_id, trace.history().cloned().collect(), 300)?;
    let text = render_sequence(&seq, &default_registry());

    let doc = fuse(
        &text,
        &seq,
        &Backend::http(client, "summary-model"),
        &FusionConfig::default(),
    )?;
    println!("{}", doc.text);
    println!(
        "facets still computed locally: {:?}",
        doc.facets.top_categories.first()
    );

    for r in server.requests() {
        println!(
            "{} {} auth={:?}",
            r.method,
            r.path,
            r.header("authorization")
        );
    }
    Ok(())
}
