//! Fixtures shared by the criterion benchmarks.

use seqrec_core::data::{split_chronological, Dataset, SplitSpec};
use seqrec_core::models::{ItemIndex, ModelConfig, Ranker};
use seqrec_core::synth::{generate, SynthSpec};

/// Train and test splits (90/5/5) of a seeded synthetic corpus.
pub fn corpus(n_matches: usize, n_items: usize) -> (Dataset, Dataset) {
    let c = generate(&SynthSpec {
        n_matches,
        n_items,
        seed: 17,
        ..SynthSpec::default()
    })
    .expect("feasible synthetic spec");
    let spec = SplitSpec::from_fractions(0.9, 0.05, 0.05).expect("fractions sum to one");
    let (train, _, test) = split_chronological(&c.dataset, &spec).expect("non-empty parts");
    (train, test)
}

/// Untrained ranker; scoring cost does not depend on the weights.
pub fn ranker(config: ModelConfig, data: &Dataset, l_max: usize) -> Ranker {
    let index = ItemIndex::from_vocab(&data.vocab).expect("non-empty vocabulary");
    Ranker::init(config, index, l_max, 1).expect("valid config")
}
