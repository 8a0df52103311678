use hkfr::synth::{generate_corpus, CorpusConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(&CorpusConfig {
        users: 5,
        noise_rate: 0.2,
        ..CorpusConfig::default()
    })?;
    for (profile, trace) in corpus.profiles.iter().zip(&corpus.traces) {
        let top: Vec<String> = profile
            .ranked_categories()
            .iter()
            .map(|(c, w)| format!("{c} {w:.2}"))
            .collect();
        println!("{} prefers [{}]", profile.user_id, top.join(", "));
        println!("  {} history events", trace.history().count());
        for l in &trace.labels {
            println!("  {:<10} -> {}", l.label_kind.as_str(), l.label_value);
        }
    }
    Ok(())
}
