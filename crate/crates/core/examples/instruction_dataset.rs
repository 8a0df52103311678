use hkfr::fusion::mock_fuse;
use hkfr::instructions::{
    build_examples, default_tasks, export_dataset, read_triples, UserInputs, TEST_FILE, TRAIN_FILE,
};
use hkfr::prompt::{default_registry, render_sequence};
use hkfr::store::BehaviorSequence;
use hkfr::synth::{generate_corpus, CorpusConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = CorpusConfig {
        users: 20,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg)?;
    let registry = default_registry();
    let docs: Vec<_> = corpus
        .traces
        .iter()
        .zip(&corpus.profiles)
        .map(|(t, p)| {
            let seq = BehaviorSequence::new(&p.user_id, t.history().cloned().collect(), 300)?;
            Ok(mock_fuse(&render_sequence(&seq, &registry), &seq))
        })
        .collect::<Result<_, hkfr::store::SequenceError>>()?;

    let inputs = UserInputs::from_knowledge(&docs, 8000);
    let tasks = default_tasks();
    let out = build_examples(&inputs, &corpus.labels(), &tasks, cfg.cutoff_timestamp, 10);

    let dir = tempfile::tempdir()?;
    let summary = export_dataset(&out.examples, dir.path())?;
    println!(
        "{} tasks, {} train / {} test, sha256 {}",
        tasks.len(),
        summary.train_count,
        summary.test_count,
        summary.sha256
    );

    let train = read_triples(&dir.path().join(TRAIN_FILE))?;
    let test = read_triples(&dir.path().join(TEST_FILE))?;
    println!(
        "first train triple:\n{}",
        serde_json::to_string_pretty(&train[0])?
    );
    println!(
        "{} held-out labels, {} test triples",
        out.test_labels.len(),
        test.len()
    );
    Ok(())
}
