mod common;

use common::small_config;
use idnp::config::{EvalContextMode, TrainConfig};
use idnp::corpus::{synth_generate, Dataset, FeedbackKind, SynthConfig};
use idnp::evalkit::{eval_cases, evaluate, Ranker};
use idnp::model::Idnp;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(users: usize) -> Dataset {
    let synth = SynthConfig { users, ..SynthConfig::default() };
    let data = synth_generate(&synth, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    Dataset::build(&data.interactions, FeedbackKind::Implicit, 20, [0.8, 0.15, 0.05], 21).unwrap()
}

#[test]
fn random_ranker_matches_hypergeometric_rate() {
    let data = corpus(2000);
    assert_eq!(data.item_count(), 60);
    let cfg = TrainConfig { exclude_seen: false, ..TrainConfig::default() };
    let users: Vec<usize> = (0..data.user_count()).collect();
    let (cases, skipped) = eval_cases(&data, &users, &cfg, false);
    assert_eq!((cases.len(), skipped), (2000, 0));
    let report = evaluate(Ranker::Random { seed: 3, items: 60 }, &cases, &cfg, 1).unwrap();
    let hit = report.get(10).hit;
    assert!((hit - 10.0 / 60.0).abs() <= 0.02, "{hit}");
    assert!((report.get(1).hit - 1.0 / 60.0).abs() <= 0.01);
}

#[test]
fn popularity_beats_random_on_skewed_catalog() {
    let data = corpus(1000);
    let cfg = TrainConfig::default();
    let (cases, _) = eval_cases(&data, &data.validation, &cfg, false);
    let freq = data.item_frequency(&data.train);
    let pop = evaluate(Ranker::Popularity(&freq), &cases, &cfg, 1).unwrap();
    assert!(pop.get(10).hit > 10.0 / 60.0);
}

#[test]
fn worker_count_does_not_change_reports() {
    let data = corpus(120);
    let cfg = TrainConfig {
        eval_context_mode: EvalContextMode::ClampedEpisode,
        ..small_config()
    };
    let model = Idnp::new(&cfg, data.item_count(), data.user_count(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let users: Vec<usize> = (0..data.user_count()).collect();
    let (cases, _) = eval_cases(&data, &users, &cfg, true);
    let one = evaluate(Ranker::Model(&model), &cases, &cfg, 1).unwrap();
    let four = evaluate(Ranker::Model(&model), &cases, &cfg, 4).unwrap();
    assert_eq!(one, four);
    let r1 = evaluate(Ranker::Random { seed: 8, items: 60 }, &cases, &cfg, 1).unwrap();
    let r3 = evaluate(Ranker::Random { seed: 8, items: 60 }, &cases, &cfg, 3).unwrap();
    assert_eq!(r1, r3);
}

#[test]
fn excluded_query_items_never_ranked() {
    let data = corpus(60);
    let cfg = TrainConfig {
        eval_context_mode: EvalContextMode::ClampedEpisode,
        cutoffs: vec![50],
        ..small_config()
    };
    let model = Idnp::new(&cfg, data.item_count(), data.user_count(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let users: Vec<usize> = (0..data.user_count()).collect();
    let (cases, _) = eval_cases(&data, &users, &cfg, false);
    let freq = data.item_frequency(&users);
    for case in &cases {
        for ranker in [Ranker::Model(&model), Ranker::Popularity(&freq), Ranker::Random { seed: 1, items: 60 }] {
            let top = ranker.rank(case, &cfg, 50).unwrap();
            assert_eq!(top.len(), 50);
            assert!(top.iter().all(|i| !case.query.contains(i)));
        }
    }
}
