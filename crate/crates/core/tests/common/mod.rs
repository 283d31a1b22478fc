#![allow(dead_code)]

use idnp::config::TrainConfig;
use idnp::corpus::{synth_generate, Dataset, FeedbackKind, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_config() -> TrainConfig {
    TrainConfig {
        window: 4,
        d: 8,
        n_f: 4,
        d_r: 8,
        d_z: 8,
        nc_max: 4,
        n_t: 6,
        batch_size: 4,
        max_epochs: 4,
        ..TrainConfig::default()
    }
}

pub fn small_data(users: usize, seed: u64) -> Dataset {
    let synth = SynthConfig {
        users,
        items: 20,
        seq_len: 12,
        ..SynthConfig::default()
    };
    let data = synth_generate(&synth, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    Dataset::build(&data.interactions, FeedbackKind::Implicit, 12, [0.8, 0.15, 0.05], seed).unwrap()
}
