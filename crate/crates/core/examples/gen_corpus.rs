//! Writes the bundled synthetic corpus: `cargo run --example gen_corpus -- OUT [SEED]`.

use redopt_core::dataset::save_dataset;
use redopt_core::synth::{generate_corpus, CorpusConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "fixtures/synthetic20.json".into());
    let seed = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let corpus = generate_corpus(&CorpusConfig {
        seed,
        ..CorpusConfig::default()
    });
    save_dataset(&corpus.dataset, &out).expect("write corpus");
    eprintln!(
        "wrote {} apps, {} reductions, {} survey answers to {out}",
        corpus.dataset.apps.len(),
        corpus.dataset.reduction_count(),
        corpus.dataset.surveys.len()
    );
}
