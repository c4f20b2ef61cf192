//! Shared fixtures for the benchmarks.

use protolens::config::TrainConfig;
use protolens::data::{generate_synthetic, SyntheticSpec};
use protolens::objectives::Example;
use protolens::trainer::initialize;
use protolens::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// An initialized model with the synthetic end-to-end shape and one
/// training batch drawn from the planted-phrase corpus.
pub fn fixture() -> (Model, Vec<Example>, TrainConfig) {
    let cfg = TrainConfig {
        num_prototypes: 4,
        n_gram: 3,
        ..TrainConfig::default()
    };
    let corpus = generate_synthetic(&SyntheticSpec::two_class(64, 0, 1)).expect("synthetic corpus");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = initialize(&cfg, &corpus.train, &mut rng).expect("model");
    let batch = corpus.train[..cfg.batch_size]
        .iter()
        .map(|i| Example::new(&model, &i.text, i.label).expect("example"))
        .collect();
    (model, batch, cfg)
}
