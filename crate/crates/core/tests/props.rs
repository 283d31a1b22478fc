use idnp::config::TrainConfig;
use idnp::corpus::{window, FeedbackKind, UserSequence};
use idnp::decoder::top_k;
use idnp::dynamics::{parameterize, LatentWeights};
use idnp::evalkit::{hit_at_k, ndcg_at_k, recall_at_k};
use idnp::model::{ForwardRequest, Idnp, LatentMode, UserRef};
use idnp::numerics::{sinkhorn, Tape, Tensor};
use idnp::objective::{kl_gaussian, w2_gaussian, DiagGaussian};
use idnp::verify::metric_reference;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gaussian(d: usize) -> impl Strategy<Value = DiagGaussian> {
    (
        prop::collection::vec(-3.0..3.0f64, d),
        prop::collection::vec(0.1..2.0f64, d),
    )
        .prop_map(|(mu, sigma)| DiagGaussian { mu, sigma })
}

fn ranking() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize)> {
    (1usize..40).prop_flat_map(|n| {
        (
            Just((1..=n).collect::<Vec<_>>()).prop_shuffle(),
            prop::collection::btree_set(1..=n, 1..=n.min(6)),
            1..=n + 3,
            0..=n,
        )
            .prop_map(|(perm, truth, k, len)| (perm[..len].to_vec(), truth.into_iter().collect(), k))
    })
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_ordered((ranked, truth, k) in ranking()) {
        let (h, r, g) = (hit_at_k(&ranked, &truth, k), recall_at_k(&ranked, &truth, k), ndcg_at_k(&ranked, &truth, k));
        prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0 + 1e-12).contains(&g));
        prop_assert!(h >= r);
        prop_assert_eq!(h == 0.0, g == 0.0);
        prop_assert_eq!((h, r, g), metric_reference(&ranked, &truth, k));
    }

    #[test]
    fn metrics_grow_with_cutoff((ranked, truth, k) in ranking()) {
        prop_assert!(hit_at_k(&ranked, &truth, k + 1) >= hit_at_k(&ranked, &truth, k));
        prop_assert!(recall_at_k(&ranked, &truth, k + 1) >= recall_at_k(&ranked, &truth, k));
    }

    #[test]
    fn top_k_contract(y in prop::collection::vec(-5.0..5.0f64, 1..50), k in 1usize..60, ex in prop::collection::vec(1usize..50, 0..10)) {
        let t = top_k(&y, k, &ex);
        let avail = (1..=y.len()).filter(|i| !ex.contains(i)).count();
        prop_assert_eq!(t.items.len(), k.min(avail));
        prop_assert_eq!(t.warning.is_some(), k > avail);
        prop_assert!(t.items.iter().all(|i| !ex.contains(i) && *i >= 1 && *i <= y.len()));
        for p in t.items.windows(2) {
            prop_assert!(y[p[0] - 1] > y[p[1] - 1] || (y[p[0] - 1] == y[p[1] - 1] && p[0] < p[1]));
        }
        if let Some(last) = t.items.last() {
            let worst = y[last - 1];
            for i in (1..=y.len()).filter(|i| !ex.contains(i) && !t.items.contains(i)) {
                prop_assert!(y[i - 1] <= worst);
            }
        }
    }

    #[test]
    fn w2_is_a_metric(p in gaussian(4), q in gaussian(4), r in gaussian(4)) {
        prop_assert_eq!(w2_gaussian(&p, &p), 0.0);
        prop_assert_eq!(w2_gaussian(&p, &q), w2_gaussian(&q, &p));
        prop_assert!(w2_gaussian(&p, &r) <= w2_gaussian(&p, &q) + w2_gaussian(&q, &r) + 1e-12);
        prop_assert!(kl_gaussian(&p, &q) >= -1e-12);
    }

    #[test]
    fn sinkhorn_plan_is_a_coupling(pts in prop::collection::vec(-1.0..1.0f64, 2 * 12), lambda in 0.2..2.0f64) {
        let (m, n) = (5, 7);
        let x = &pts[..m * 2];
        let y = &pts[m * 2..m * 2 + n * 2];
        let c: Vec<f64> = (0..m).flat_map(|i| (0..n).map(move |j| (x[2*i]-y[2*j]).powi(2) + (x[2*i+1]-y[2*j+1]).powi(2))).collect();
        let a = vec![1.0 / m as f64; m];
        let b = vec![1.0 / n as f64; n];
        let out = sinkhorn(&a, &b, &Tensor::matrix(m, n, c).unwrap(), lambda, 500).unwrap();
        prop_assert!(out.plan.iter().all(|t| *t >= 0.0));
        prop_assert!(out.residual < 1e-6);
        for j in 0..n {
            let col: f64 = (0..m).map(|i| out.plan[i * n + j]).sum();
            prop_assert!((col - b[j]).abs() < 1e-9);
        }
        prop_assert!(out.objective >= out.cost - 1e-12);
    }

    #[test]
    fn sliding_windows_cover_the_sequence(items in prop::collection::vec(1usize..30, 1..25), l in 1usize..8) {
        let seq = UserSequence { user: 0, items: items.clone(), ratings: None, feedback: FeedbackKind::Implicit };
        let w = window(&seq, l, 1).unwrap();
        if items.len() < l {
            prop_assert_eq!(w.len(), 1);
            prop_assert!(w[0].next_items.is_empty());
        } else {
            prop_assert_eq!(w.len(), items.len() - l + 1);
            for s in &w {
                prop_assert_eq!(&s.items[..], &items[s.start..s.start + l]);
                prop_assert_eq!(s.next_items.first(), items.get(s.start + l));
            }
        }
    }

    #[test]
    fn sigma_stays_in_open_interval(r in prop::collection::vec(-1e8..1e8f64, 3), scale in -1e4..1e4f64) {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut leaf = |rows: usize, cols: usize| {
            let data = idnp::encoder::uniform_tensor(vec![rows, cols], scale.abs() + 1e-3, &mut rng);
            t.leaf(data)
        };
        let w = LatentWeights { w_h: leaf(3, 4), b_h: leaf(1, 4), w_mu: leaf(4, 2), b_mu: leaf(1, 2), w_sigma: leaf(4, 2), b_sigma: leaf(1, 2) };
        let rv = t.leaf(Tensor::row(r));
        let (_, sigma) = parameterize(&mut t, rv, &w).unwrap();
        prop_assert!(t.value(sigma).data().iter().all(|s| *s > 0.1 && *s < 1.0));
    }

    #[test]
    fn config_echo_round_trips(lr in 1e-6..1e-1f64, d in 1usize..128, seed in any::<u64>(), nc in 1usize..10) {
        let cfg = TrainConfig { lr, d, seed, nc_min: nc, nc_max: nc + 1, ..TrainConfig::default() };
        let mut back = TrainConfig::default();
        for line in cfg.echo().lines() {
            let (k, v) = line.split_once('=').unwrap();
            prop_assert!(back.set(k.trim(), v.trim()).unwrap());
        }
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn context_order_is_irrelevant(seed in any::<u64>(), perm in Just((0usize..6).collect::<Vec<_>>()).prop_shuffle()) {
        let cfg = TrainConfig { window: 3, d: 6, n_f: 3, d_r: 6, d_z: 4, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Idnp::new(&cfg, 15, 2, &mut rng).unwrap();
        let windows: Vec<Vec<usize>> = (0..7).map(|i| (0..3).map(|j| 1 + (i * 5 + j * 3 + seed as usize) % 15).collect()).collect();
        let run = |ctx: Vec<usize>| {
            let req = ForwardRequest {
                user: UserRef::Unseen,
                windows: windows.iter().map(Vec::as_slice).collect(),
                context: ctx,
                target: vec![],
                queries: vec![6],
                latent: LatentMode::ContextMean,
            };
            let mut tape = Tape::with_params(&model.params);
            let f = model.forward(&mut tape, &req).unwrap();
            tape.value(f.preds).data().to_vec()
        };
        let a = run((0..6).collect());
        let b = run(perm);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
