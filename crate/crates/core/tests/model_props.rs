mod common;

use common::small_config;
use idnp::config::{Divergence, TrainConfig, WassImpl};
use idnp::corpus::{sample_episode, Subsequence, PAD};
use idnp::model::{Idnp, UserRef};
use idnp::trainer::adam_step;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ITEMS: usize = 20;

fn windows(rng: &mut ChaCha8Rng, l: usize, count: usize, pad: usize) -> Vec<Subsequence> {
    (0..count)
        .map(|start| {
            let mut items: Vec<usize> = (0..l).map(|_| rng.random_range(1..=ITEMS)).collect();
            items[..pad.min(l - 1)].fill(PAD);
            Subsequence {
                user: 1,
                start,
                items,
                next_items: vec![rng.random_range(1..=ITEMS)],
                next_rating: None,
            }
        })
        .collect()
}

fn variants() -> Vec<TrainConfig> {
    let base = small_config();
    vec![
        base.clone(),
        TrainConfig { divergence: Divergence::Kl, ..base.clone() },
        TrainConfig { wass_impl: WassImpl::Sinkhorn, sinkhorn_samples: 16, ..base.clone() },
        TrainConfig { np_inference: false, ..base.clone() },
        TrainConfig { attention: false, ..base.clone() },
        TrainConfig { dilation: false, heads: 2, ..base },
    ]
}

#[test]
fn every_parameter_receives_gradient() {
    for cfg in variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Idnp::new(&cfg, ITEMS, 3, &mut rng).unwrap();
        let mut total = model.params.zero_grads();
        for _ in 0..20 {
            let w = windows(&mut rng, cfg.window, 8, 0);
            let n_c = rng.random_range(1..=4);
            let ep = sample_episode(1, w.len(), n_c, cfg.n_t, &mut rng).unwrap();
            let noise = model.draw_noise(&mut rng);
            let (_, g) = model.episode_grads(UserRef::Trained(1), &w, &ep, &noise).unwrap();
            total.add(&g);
        }
        for (id, p) in model.params.iter() {
            let mass: f64 = total.get(id).iter().map(|x| x.abs()).sum();
            assert!(mass > 0.0, "{} receives no gradient ({:?})", p.name, cfg.divergence);
        }
    }
}

#[test]
fn padding_row_stays_zero() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = Idnp::new(&cfg, ITEMS, 3, &mut rng).unwrap();
    let table = model.item_table();
    for _ in 0..30 {
        let w = windows(&mut rng, cfg.window, 6, 2);
        let ep = sample_episode(1, w.len(), 3, cfg.n_t, &mut rng).unwrap();
        let noise = model.draw_noise(&mut rng);
        let (_, g) = model.episode_grads(UserRef::Trained(1), &w, &ep, &noise).unwrap();
        assert!(g.get(table)[..cfg.d].iter().all(|x| *x == 0.0));
        adam_step(&mut model.params, &g, 0.01).unwrap();
    }
    let row = model.params.value(table).row_slice(PAD).to_vec();
    assert_eq!(row, vec![0.0; cfg.d]);
}

#[test]
fn random_episodes_stay_finite() {
    let cfg = TrainConfig { nc_max: 10, n_t: 15, ..small_config() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Idnp::new(&cfg, ITEMS, 3, &mut rng).unwrap();
    for _ in 0..1000 {
        let count = rng.random_range(1..=20);
        let pad = rng.random_range(0..3);
        let w = windows(&mut rng, cfg.window, count, pad);
        let n_c = rng.random_range(1..=10);
        let ep = sample_episode(1, w.len(), n_c, cfg.n_t, &mut rng).unwrap();
        let noise = model.draw_noise(&mut rng);
        let user = if rng.random_bool(0.5) { UserRef::Trained(2) } else { UserRef::Unseen };
        let (report, g) = model.episode_grads(user, &w, &ep, &noise).unwrap();
        assert!(report.total.is_finite() && report.nll >= 0.0 && report.wass >= 0.0);
        assert!(g.is_finite());
    }
}

#[test]
fn frozen_episode_loss_descends() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = Idnp::new(&cfg, ITEMS, 3, &mut rng).unwrap();
    let w = windows(&mut rng, cfg.window, 8, 0);
    let ep = sample_episode(1, w.len(), 3, cfg.n_t, &mut rng).unwrap();
    let noise = model.draw_noise(&mut rng);
    let mut losses = Vec::new();
    for _ in 0..60 {
        let (r, g) = model.episode_grads(UserRef::Trained(1), &w, &ep, &noise).unwrap();
        losses.push(r.total);
        adam_step(&mut model.params, &g, 1e-3).unwrap();
    }
    assert!(losses[59] < losses[0], "{} -> {}", losses[0], losses[59]);
    let rises = losses.windows(2).filter(|p| p[1] > p[0]).count();
    assert!(rises <= 3, "{rises} increases in {losses:?}");
}

#[test]
fn same_seed_same_model() {
    let cfg = small_config();
    let a = Idnp::new(&cfg, ITEMS, 3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let b = Idnp::new(&cfg, ITEMS, 3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let c = Idnp::new(&cfg, ITEMS, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn rebinding_checks_shapes() {
    let cfg = small_config();
    let m = Idnp::new(&cfg, ITEMS, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let again = Idnp::from_params(cfg.clone(), m.params.clone(), vec![0, 1]).unwrap();
    assert_eq!(again.items, ITEMS);
    let wider = TrainConfig { d_r: 16, ..cfg };
    assert!(Idnp::from_params(wider, m.params, vec![]).is_err());
}
