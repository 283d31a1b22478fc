//! Self-checks run by `idnp verify`: finite-difference gradients, brute-force
//! oracles, structural invariants of the model and a determinism replay.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Divergence, TrainConfig, WassImpl};
use crate::corpus::{sample_episode, synth_generate, Dataset, Episode, FeedbackKind, Subsequence, SynthConfig};
use crate::decoder::{predict_preferences, reconstruct};
use crate::dynamics::{deterministic_path, parameterize, sample_z, LatentWeights};
use crate::encoder::{multiscale_features, self_attend, AttentionWeights, KernelBank};
use crate::error::Result;
use crate::evalkit::{hit_at_k, ndcg_at_k, recall_at_k};
use crate::model::{ForwardRequest, Idnp, LatentMode, UserRef};
use crate::numerics::{grad_check, mlp2, sdpa, ParamStore, Tape, Tensor, Var};
use crate::objective::{divergence, kl_gaussian, sinkhorn_w2, w2_gaussian, DiagGaussian, DivergenceTerm, LatentVars, SinkhornSettings};
use crate::trainer::{encode_checkpoint, training_windows, Trainer};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-12;
pub const PERMUTATION_TOL: f64 = 1e-9;
pub const DIVERGENCE_TOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Sizes of the full suite.
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seeds: u64,
    pub conv_cases: usize,
    pub metric_cases: usize,
    pub sinkhorn_pairs: usize,
    pub sinkhorn_samples: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seeds: 10,
            conv_cases: 1000,
            metric_cases: 10_000,
            sinkhorn_pairs: 20,
            sinkhorn_samples: 2000,
        }
    }
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CheckResult> {
    vec![
        op_gradients(opts.seeds),
        model_gradients(opts.seeds),
        conv_oracle(opts.conv_cases, 7),
        multiscale_oracle(opts.conv_cases, 8),
        metric_oracle(opts.metric_cases, 9),
        context_permutation(opts.seeds),
        context_sizes(),
        sigma_bounds(),
        divergence_agreement(opts.sinkhorn_pairs, opts.sinkhorn_samples, 11),
        determinism_replay(),
    ]
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

type ScalarFn = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>>;

/// Reduces a matrix output to a scalar through fixed random weights so that
/// every output entry carries a distinct gradient.
fn project(t: &mut Tape<'_>, out: Var, weights: &Tensor) -> Result<Var> {
    let w = t.leaf(weights.clone());
    let m = t.mul(out, w)?;
    Ok(t.sum(m))
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, ScalarFn, Vec<Tensor>)> {
    let mut cases: Vec<(&'static str, ScalarFn, Vec<Tensor>)> = Vec::new();
    let proj = |rng: &mut ChaCha8Rng, r: usize, c: usize| uniform(rng, r, c, -1.0, 1.0);

    let w = proj(rng, 3, 2);
    cases.push((
        "matmul",
        Box::new(move |t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o, &w)
        }),
        vec![uniform(rng, 3, 4, -1.0, 1.0), uniform(rng, 4, 2, -1.0, 1.0)],
    ));
    let w = proj(rng, 3, 2);
    cases.push((
        "matmul_nt",
        Box::new(move |t, v| {
            let o = t.matmul_nt(v[0], v[1])?;
            project(t, o, &w)
        }),
        vec![uniform(rng, 3, 4, -1.0, 1.0), uniform(rng, 2, 4, -1.0, 1.0)],
    ));
    let w = proj(rng, 2, 3);
    cases.push((
        "add_sub_mul",
        Box::new(move |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[2])?;
            let m = t.mul(s, v[1])?;
            project(t, m, &w)
        }),
        (0..3).map(|_| uniform(rng, 2, 3, -1.0, 1.0)).collect(),
    ));
    let w = proj(rng, 3, 2);
    cases.push((
        "add_row_scale_shift",
        Box::new(move |t, v| {
            let a = t.add_row(v[0], v[1])?;
            let a = t.scale(a, -1.7);
            let a = t.add_scalar(a, 0.3);
            project(t, a, &w)
        }),
        vec![uniform(rng, 3, 2, -1.0, 1.0), uniform(rng, 1, 2, -1.0, 1.0)],
    ));
    let w = proj(rng, 3, 4);
    cases.push((
        "relu",
        Box::new(move |t, v| {
            let a = t.relu(v[0]);
            project(t, a, &w)
        }),
        vec![uniform(rng, 3, 4, -1.0, 1.0)],
    ));
    let w = proj(rng, 3, 4);
    cases.push((
        "sigmoid",
        Box::new(move |t, v| {
            let a = t.sigmoid(v[0]);
            project(t, a, &w)
        }),
        vec![uniform(rng, 3, 4, -3.0, 3.0)],
    ));
    let w = proj(rng, 2, 4);
    cases.push((
        "sqrt_pos",
        Box::new(move |t, v| {
            let a = t.sqrt_pos(v[0]);
            project(t, a, &w)
        }),
        vec![uniform(rng, 2, 4, 0.1, 2.0)],
    ));
    let w = proj(rng, 3, 4);
    cases.push((
        "clamp",
        Box::new(move |t, v| {
            let a = t.clamp(v[0], -0.5, 0.5);
            project(t, a, &w)
        }),
        vec![uniform(rng, 3, 4, -1.0, 1.0)],
    ));
    let w = proj(rng, 3, 4);
    cases.push((
        "softmax_rows",
        Box::new(move |t, v| {
            let a = t.softmax_rows(v[0]);
            project(t, a, &w)
        }),
        vec![uniform(rng, 3, 4, -2.0, 2.0)],
    ));
    let w = proj(rng, 5, 2);
    cases.push((
        "concat_slice_repeat",
        Box::new(move |t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            let r = t.repeat_rows(v[2], 2)?;
            let c = t.concat_rows(&[c, r])?;
            let s = t.slice_cols(c, 1, 2)?;
            project(t, s, &w)
        }),
        vec![
            uniform(rng, 3, 2, -1.0, 1.0),
            uniform(rng, 3, 1, -1.0, 1.0),
            uniform(rng, 1, 3, -1.0, 1.0),
        ],
    ));
    let w = proj(rng, 4, 3);
    cases.push((
        "gather",
        Box::new(move |t, v| {
            let g = t.gather(v[0], &[2, 0, 2, 3])?;
            project(t, g, &w)
        }),
        vec![uniform(rng, 4, 3, -1.0, 1.0)],
    ));
    for gap in 0..3 {
        let w = proj(rng, 1, 3);
        cases.push((
            "dilated_conv_max_mean",
            Box::new(move |t, v| {
                let c = t.dilated_conv(v[0], v[1], gap)?;
                let m = t.max_rows(c)?;
                let both = t.concat_rows(&[m, c])?;
                let avg = t.mean_rows(both)?;
                project(t, avg, &w)
            }),
            vec![uniform(rng, 7, 2, -1.0, 1.0), uniform(rng, 2 * 2, 3, -1.0, 1.0)],
        ));
    }
    let targets: Vec<f64> = (0..6).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
    cases.push((
        "bce",
        Box::new(move |t, v| t.bce(v[0], targets.clone())),
        vec![uniform(rng, 2, 3, 0.05, 0.95)],
    ));
    let targets: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
    cases.push((
        "mae",
        Box::new(move |t, v| t.mae(v[0], targets.clone())),
        vec![uniform(rng, 2, 3, 0.0, 1.0)],
    ));
    let gauss = |rng: &mut ChaCha8Rng| {
        vec![
            uniform(rng, 1, 4, -1.0, 1.0),
            uniform(rng, 1, 4, 0.2, 1.5),
            uniform(rng, 1, 4, -1.0, 1.0),
            uniform(rng, 1, 4, 0.2, 1.5),
        ]
    };
    cases.push(("w2_gauss", Box::new(|t, v| t.w2_gauss(v[0], v[1], v[2], v[3])), gauss(rng)));
    cases.push(("kl_gauss", Box::new(|t, v| t.kl_gauss(v[0], v[1], v[2], v[3])), gauss(rng)));
    let w = proj(rng, 4, 5);
    cases.push((
        "sq_dist",
        Box::new(move |t, v| {
            let c = t.sq_dist(v[0], v[1])?;
            project(t, c, &w)
        }),
        vec![uniform(rng, 4, 2, -1.0, 1.0), uniform(rng, 5, 2, -1.0, 1.0)],
    ));
    cases.push((
        "transport_cost",
        Box::new(|t, v| {
            let c = t.sq_dist(v[0], v[1])?;
            t.transport_cost(c, 2.0, 2000)
        }),
        vec![uniform(rng, 4, 2, -1.0, 1.0), uniform(rng, 5, 2, -1.0, 1.0)],
    ));
    let w = proj(rng, 2, 3);
    cases.push((
        "sdpa",
        Box::new(move |t, v| {
            let a = sdpa(t, v[0], v[1], v[2])?;
            project(t, a.output, &w)
        }),
        vec![
            uniform(rng, 2, 4, -1.0, 1.0),
            uniform(rng, 5, 4, -1.0, 1.0),
            uniform(rng, 5, 3, -1.0, 1.0),
        ],
    ));
    let w = proj(rng, 4, 4);
    cases.push((
        "self_attend",
        Box::new(move |t, v| {
            let att = AttentionWeights {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
            };
            let o = self_attend(t, v[0], att, 2)?;
            project(t, o, &w)
        }),
        vec![
            uniform(rng, 4, 3, -1.0, 1.0),
            uniform(rng, 3, 4, -1.0, 1.0),
            uniform(rng, 3, 4, -1.0, 1.0),
            uniform(rng, 3, 4, -1.0, 1.0),
        ],
    ));
    let w = proj(rng, 2, 3);
    cases.push((
        "mlp2",
        Box::new(move |t, v| {
            let o = mlp2(t, v[0], v[1], v[2], v[3], v[4])?;
            project(t, o, &w)
        }),
        vec![
            uniform(rng, 2, 3, -1.0, 1.0),
            uniform(rng, 3, 5, -1.0, 1.0),
            uniform(rng, 1, 5, -1.0, 1.0),
            uniform(rng, 5, 3, -1.0, 1.0),
            uniform(rng, 1, 3, -1.0, 1.0),
        ],
    ));
    let w = proj(rng, 2, 3);
    cases.push((
        "deterministic_path",
        Box::new(move |t, v| {
            let det = deterministic_path(t, v[0], v[1], v[2], v[3], v[4])?;
            project(t, det.r_d, &w)
        }),
        vec![
            uniform(rng, 4, 3, -1.0, 1.0),
            uniform(rng, 4, 3, -1.0, 1.0),
            uniform(rng, 2, 3, -1.0, 1.0),
            uniform(rng, 3, 2, -1.0, 1.0),
            uniform(rng, 3, 2, -1.0, 1.0),
        ],
    ));
    let eps: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
    let w = proj(rng, 1, 3);
    cases.push((
        "latent_parameterize_sample",
        Box::new(move |t, v| {
            let lw = LatentWeights {
                w_h: v[1],
                b_h: v[2],
                w_mu: v[3],
                b_mu: v[4],
                w_sigma: v[5],
                b_sigma: v[6],
            };
            let (mu, sigma) = parameterize(t, v[0], &lw)?;
            let z = sample_z(t, mu, sigma, eps.clone())?;
            project(t, z, &w)
        }),
        vec![
            uniform(rng, 1, 4, -1.0, 1.0),
            uniform(rng, 4, 5, -1.0, 1.0),
            uniform(rng, 1, 5, -1.0, 1.0),
            uniform(rng, 5, 3, -1.0, 1.0),
            uniform(rng, 1, 3, -1.0, 1.0),
            uniform(rng, 5, 3, -1.0, 1.0),
            uniform(rng, 1, 3, -1.0, 1.0),
        ],
    ));
    let w = proj(rng, 2, 6);
    cases.push((
        "decoder",
        Box::new(move |t, v| {
            let d = reconstruct(t, &[v[0], v[1]], v[2], v[3])?;
            let y = predict_preferences(t, d, v[4], v[5], v[6])?;
            project(t, y, &w)
        }),
        vec![
            uniform(rng, 2, 3, -1.0, 1.0),
            uniform(rng, 2, 2, -1.0, 1.0),
            uniform(rng, 5, 4, -1.0, 1.0),
            uniform(rng, 1, 4, -1.0, 1.0),
            uniform(rng, 1, 3, -1.0, 1.0),
            uniform(rng, 7, 6, -1.0, 1.0),
            uniform(rng, 1, 6, -1.0, 1.0),
        ],
    ));
    let cloud = uniform(rng, 6, 3, -1.0, 1.0);
    for (name, term) in [
        ("divergence_kl", DivergenceTerm::Kl),
        ("divergence_w2", DivergenceTerm::W2Closed),
        (
            "divergence_sinkhorn",
            DivergenceTerm::W2Sinkhorn {
                eps: cloud.clone(),
                lambda: 2.0,
                iters: 2000,
            },
        ),
    ] {
        let inputs = vec![
            uniform(rng, 1, 3, -1.0, 1.0),
            uniform(rng, 1, 3, 0.2, 1.5),
            uniform(rng, 1, 3, -1.0, 1.0),
            uniform(rng, 1, 3, 0.2, 1.5),
        ];
        cases.push((
            name,
            Box::new(move |t, v| {
                let target = LatentVars { mu: v[0], sigma: v[1] };
                let context = LatentVars { mu: v[2], sigma: v[3] };
                Ok(divergence(t, &term, target, context)?.expect("divergence term"))
            }),
            inputs,
        ));
    }
    cases
}

/// Central-difference check of every differentiable operation.
pub fn op_gradients(seeds: u64) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let mut worst = (0.0f64, "");
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (name, f, inputs) in op_cases(&mut rng) {
                let err = grad_check(|t, v| f(t, v), &inputs, GRAD_EPS)?;
                if !(err <= worst.0) {
                    worst = (err, name);
                }
            }
        }
        Ok((worst.0 < GRAD_TOL, format!("max rel err {:.2e} ({})", worst.0, worst.1)))
    };
    CheckResult::from_result("op gradients", run())
}

/// Configuration of the tiny model used by the end-to-end checks.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        window: 3,
        d: 4,
        n_f: 2,
        d_r: 4,
        d_z: 4,
        nc_min: 2,
        nc_max: 2,
        n_t: 3,
        ..TrainConfig::default()
    }
}

fn random_windows(rng: &mut ChaCha8Rng, items: usize, window: usize, count: usize, user: usize) -> Vec<Subsequence> {
    (0..count)
        .map(|start| Subsequence {
            user,
            start,
            items: (0..window).map(|_| rng.random_range(1..=items)).collect(),
            next_items: vec![rng.random_range(1..=items)],
            next_rating: Some(rng.random_range(0.0..1.0)),
        })
        .collect()
}

fn episode_value(model: &Idnp, user: UserRef, windows: &[Subsequence], ep: &Episode, noise: &crate::model::EpisodeNoise) -> Result<f64> {
    let mut tape = Tape::with_params(&model.params);
    let (loss, _) = model.episode_loss(&mut tape, user, windows, ep, noise)?;
    Ok(tape.scalar(loss))
}

/// Largest relative error between the tape gradient of one episode loss and
/// central differences over every parameter coordinate.
pub fn episode_grad_error(cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (items, users) = (10, 3);
    let mut model = Idnp::new(cfg, items, users, &mut rng)?;
    let windows = random_windows(&mut rng, items, cfg.window, 6, 1);
    let ep = sample_episode(1, windows.len(), cfg.nc_max, cfg.n_t, &mut rng)?;
    let noise = model.draw_noise(&mut rng);
    let user = UserRef::Trained(1);

    let mut tape = Tape::with_params(&model.params);
    let (loss, _) = model.episode_loss(&mut tape, user, &windows, &ep, &noise)?;
    let grads = tape.backward(loss)?;
    let mut analytic = model.params.zero_grads();
    grads.accumulate(&mut analytic);
    drop(tape);

    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        for i in 0..model.params.value(id).len() {
            let orig = model.params.value(id).data()[i];
            model.params.get_mut(id).value.data_mut()[i] = orig + GRAD_EPS;
            let up = episode_value(&model, user, &windows, &ep, &noise)?;
            model.params.get_mut(id).value.data_mut()[i] = orig - GRAD_EPS;
            let down = episode_value(&model, user, &windows, &ep, &noise)?;
            model.params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * GRAD_EPS);
            let a = analytic.get(id)[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Model variants covered by the end-to-end gradient check.
pub fn tiny_variants() -> Vec<(&'static str, TrainConfig)> {
    let base = tiny_config();
    vec![
        ("full", base.clone()),
        (
            "sinkhorn",
            TrainConfig {
                wass_impl: WassImpl::Sinkhorn,
                sinkhorn_samples: 6,
                sinkhorn_lambda: 0.5,
                sinkhorn_iters: 2000,
                ..base.clone()
            },
        ),
        ("kl", TrainConfig { divergence: Divergence::Kl, ..base.clone() }),
        ("explicit", TrainConfig { feedback: FeedbackKind::Explicit, ..base.clone() }),
        ("two-heads", TrainConfig { heads: 2, ..base.clone() }),
        ("encoder-only", TrainConfig { np_inference: false, ..base.clone() }),
        ("no-attention", TrainConfig { attention: false, dilation: false, ..base }),
    ]
}

pub fn model_gradients(seeds: u64) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let mut worst = (0.0f64, "");
        for seed in 0..seeds {
            for (name, cfg) in tiny_variants() {
                let err = episode_grad_error(&cfg, seed)?;
                if !(err <= worst.0) {
                    worst = (err, name);
                }
            }
        }
        Ok((worst.0 < GRAD_TOL, format!("max rel err {:.2e} ({})", worst.0, worst.1)))
    };
    CheckResult::from_result("end-to-end gradients", run())
}

/// Brute-force dilated convolution. `kernel[(j * d + ch) * c + f]` is tap
/// `j`, input channel `ch`, output channel `f`.
pub fn conv_reference(p: &[f64], len: usize, d: usize, kernel: &[f64], taps: usize, c: usize, gap: usize) -> Vec<Vec<f64>> {
    let span = (taps - 1) * (gap + 1);
    let mut out = Vec::new();
    let mut t = 0;
    while t + span < len {
        let mut row = vec![0.0; c];
        for (f, r) in row.iter_mut().enumerate() {
            for j in 0..taps {
                for ch in 0..d {
                    *r += p[(t + j * (gap + 1)) * d + ch] * kernel[(j * d + ch) * c + f];
                }
            }
        }
        out.push(row);
        t += 1;
    }
    out
}

pub fn conv_oracle(cases: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = || -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let (len, d, c) = (rng.random_range(1..=9), rng.random_range(1..=4), rng.random_range(1..=4));
            let gap = rng.random_range(0..=3);
            let max_taps = (len - 1) / (gap + 1) + 1;
            let taps = rng.random_range(1..=max_taps);
            let p = uniform(&mut rng, len, d, -1.0, 1.0);
            let k = uniform(&mut rng, taps * d, c, -1.0, 1.0);
            let expect = conv_reference(p.data(), len, d, k.data(), taps, c, gap);
            let mut t = Tape::new();
            let (pv, kv) = (t.leaf(p), t.leaf(k));
            let out = t.dilated_conv(pv, kv, gap)?;
            let got = t.value(out);
            if got.rows() != expect.len() || got.cols() != c {
                return Ok((false, format!("shape {:?} vs {}x{c}", got.shape(), expect.len())));
            }
            for (r, row) in expect.iter().enumerate() {
                for (f, e) in row.iter().enumerate() {
                    worst = worst.max((got.get(r, f) - e).abs());
                }
            }
        }
        Ok((worst <= ORACLE_TOL, format!("{cases} cases, max abs diff {worst:.1e}")))
    };
    CheckResult::from_result("dilated conv oracle", run())
}

/// Brute-force interest feature: for each gap, every kernel that fits is
/// convolved, max-pooled, and the pooled rows averaged.
pub fn multiscale_reference(store: &ParamStore, p: &[f64], len: usize, d: usize, n_f: usize, gaps: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for &s in gaps {
        let mut sum = vec![0.0; n_f];
        let mut count = 0;
        let mut h = 1;
        while (h - 1) * (s + 1) < len {
            let id = store.id(&format!("enc.k.s{s}.h{h}")).expect("kernel present");
            let rows = conv_reference(p, len, d, store.value(id).data(), h, n_f, s);
            for (f, acc) in sum.iter_mut().enumerate() {
                *acc += rows.iter().map(|r| r[f]).fold(f64::NEG_INFINITY, f64::max);
            }
            count += 1;
            h += 1;
        }
        out.extend(sum.iter().map(|x| x / count as f64));
    }
    out
}

pub fn multiscale_oracle(cases: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = || -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let (len, d, n_f) = (rng.random_range(1..=8), rng.random_range(1..=4), rng.random_range(1..=3));
            let gaps: Vec<usize> = (0..rng.random_range(1..=3)).collect();
            let mut store = ParamStore::new();
            let bank = KernelBank::init(&mut store, len, d, n_f, &gaps, &mut rng)?;
            let p = uniform(&mut rng, len, d, -1.0, 1.0);
            let expect = multiscale_reference(&store, p.data(), len, d, n_f, &gaps);
            let mut t = Tape::with_params(&store);
            let pv = t.leaf(p);
            let out = multiscale_features(&mut t, pv, &bank)?;
            let got = t.value(out).data();
            if got.len() != expect.len() {
                return Ok((false, format!("width {} vs {}", got.len(), expect.len())));
            }
            for (g, e) in got.iter().zip(&expect) {
                worst = worst.max((g - e).abs());
            }
        }
        Ok((worst <= ORACLE_TOL, format!("{cases} cases, max abs diff {worst:.1e}")))
    };
    CheckResult::from_result("multiscale feature oracle", run())
}

/// Hit, recall and NDCG from one pass over the whole ranking; the ideal DCG
/// is the same scan over a ranking that lists the truth first.
pub fn metric_reference(ranked: &[usize], truth: &[usize], k: usize) -> (f64, f64, f64) {
    let scan = |list: &[usize]| -> (usize, f64) {
        let mut found = 0;
        let mut dcg = 0.0;
        for (pos, item) in list.iter().enumerate() {
            if pos < k && truth.iter().any(|t| t == item) {
                found += 1;
                dcg += 1.0 / ((pos + 2) as f64).log2();
            }
        }
        (found, dcg)
    };
    let (found, dcg) = scan(ranked);
    let (_, ideal) = scan(truth);
    let hit = if found > 0 { 1.0 } else { 0.0 };
    let recall = if truth.is_empty() { 0.0 } else { found as f64 / truth.len() as f64 };
    let ndcg = if ideal > 0.0 { dcg / ideal } else { 0.0 };
    (hit, recall, ndcg)
}

pub fn metric_oracle(cases: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(1..=30);
        let mut pool: Vec<usize> = (1..=n).collect();
        pool.shuffle(&mut rng);
        let ranked = pool[..rng.random_range(0..=n)].to_vec();
        pool.shuffle(&mut rng);
        let truth = pool[..rng.random_range(1..=n.min(5))].to_vec();
        let k = rng.random_range(1..=n + 2);
        let (h, r, g) = metric_reference(&ranked, &truth, k);
        worst = worst
            .max((hit_at_k(&ranked, &truth, k) - h).abs())
            .max((recall_at_k(&ranked, &truth, k) - r).abs())
            .max((ndcg_at_k(&ranked, &truth, k) - g).abs());
    }
    CheckResult::new(
        "metric oracle",
        worst <= ORACLE_TOL,
        format!("{cases} cases, max abs diff {worst:.1e}"),
    )
}

fn small_model(seed: u64) -> Result<(Idnp, ChaCha8Rng)> {
    let cfg = TrainConfig {
        d: 8,
        n_f: 4,
        d_r: 8,
        d_z: 6,
        heads: 2,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Idnp::new(&cfg, 30, 4, &mut rng)?;
    Ok((model, rng))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Latent Gaussian and deterministic context under a shuffled context order.
pub fn context_permutation(seeds: u64) -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let (model, mut rng) = small_model(seed)?;
            let windows = random_windows(&mut rng, model.items, model.cfg.window, 9, 1);
            let nc = rng.random_range(2..=8);
            let context: Vec<usize> = (0..nc).collect();
            let mut shuffled = context.clone();
            while shuffled == context {
                shuffled.shuffle(&mut rng);
            }
            let probe = |ctx: Vec<usize>| -> Result<Vec<Vec<f64>>> {
                let req = ForwardRequest {
                    user: UserRef::Trained(1),
                    windows: windows.iter().map(|w| w.items.as_slice()).collect(),
                    context: ctx,
                    target: Vec::new(),
                    queries: vec![8, 7],
                    latent: LatentMode::ContextMean,
                };
                let mut tape = Tape::with_params(&model.params);
                let f = model.forward(&mut tape, &req)?;
                let lat = f.context_latent.expect("latent path");
                let r_d = f.det_context.expect("deterministic path");
                Ok([lat.mu, lat.sigma, r_d, f.preds]
                    .iter()
                    .map(|v| tape.value(*v).data().to_vec())
                    .collect())
            };
            let (a, b) = (probe(context)?, probe(shuffled)?);
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max(max_diff(x, y));
            }
        }
        Ok((worst <= PERMUTATION_TOL, format!("max abs diff {worst:.1e}")))
    };
    CheckResult::from_result("context permutation invariance", run())
}

/// One trained model serves every context size from 1 to 10.
pub fn context_sizes() -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let (model, mut rng) = small_model(99)?;
        let windows = random_windows(&mut rng, model.items, model.cfg.window, 11, 2);
        let query = windows[10].items.as_slice();
        let mut sigmas = Vec::new();
        for nc in 1..=10 {
            let ctx: Vec<&[usize]> = windows[..nc].iter().map(|w| w.items.as_slice()).collect();
            let p = model.predict(UserRef::Unseen, &ctx, query, LatentMode::ContextMean)?;
            let ok = p.y.len() == model.items && p.y.iter().all(|y| y.is_finite() && (0.0..=1.0).contains(y));
            if !ok {
                return Ok((false, format!("invalid scores at N_c = {nc}")));
            }
            sigmas.push(p.latent.map(|l| l.sigma_norm()).unwrap_or(f64::NAN));
        }
        let finite = sigmas.iter().all(|s| s.is_finite());
        Ok((finite, "N_c 1..=10 produce valid scores".to_string()))
    };
    CheckResult::from_result("context sizes", run())
}

/// Sigma stays inside its open interval for extreme weights and inputs.
pub fn sigma_bounds() -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let (base, mut rng) = small_model(5)?;
        let windows = random_windows(&mut rng, base.items, base.cfg.window, 6, 0);
        let ctx: Vec<&[usize]> = windows[..5].iter().map(|w| w.items.as_slice()).collect();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for scale in [1.0, 1e3, -1e3, 1e6, -1e6] {
            let mut model = base.clone();
            for p in model.params.iter_mut() {
                p.value.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            for nc in [1, 5] {
                let p = model.predict(UserRef::Unseen, &ctx[..nc], &windows[5].items, LatentMode::ContextMean)?;
                for s in p.latent.expect("latent path").sigma {
                    lo = lo.min(s);
                    hi = hi.max(s);
                    if !(s > 0.1 && s < 1.0) {
                        return Ok((false, format!("sigma {s} at weight scale {scale}")));
                    }
                }
            }
        }
        Ok((true, format!("sigma within [{lo:.6}, {hi:.6}]")))
    };
    CheckResult::from_result("sigma bounds", run())
}

/// Sampled entropic estimate against the closed form on random diagonal
/// Gaussians, plus exact zero self-distance.
pub fn divergence_agreement(pairs: usize, samples: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = SinkhornSettings {
        samples,
        lambda: 0.05,
        iters: 200,
    };
    let mut run = || -> Result<(bool, String)> {
        let mut worst = 0.0f64;
        let mut self_ok = true;
        for _ in 0..pairs {
            let d = rng.random_range(1..=8);
            let mut g = || DiagGaussian {
                mu: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                sigma: (0..d).map(|_| rng.random_range(0.2..1.5)).collect(),
            };
            let (p, q) = (g(), g());
            self_ok &= w2_gaussian(&p, &p) == 0.0 && kl_gaussian(&p, &p) == 0.0;
            let exact = w2_gaussian(&p, &q);
            let sampled = sinkhorn_w2(&p, &q, settings, &mut rng)?;
            worst = worst.max((sampled.value - exact).abs() / exact);
        }
        Ok((
            worst < DIVERGENCE_TOL && self_ok,
            format!("{pairs} pairs, max rel err {:.2}%, self distance zero: {self_ok}", 100.0 * worst),
        ))
    };
    CheckResult::from_result("sinkhorn vs closed form", run())
}

/// Loss trace and checkpoint bytes of a short synthetic run.
pub fn replay_run(epochs: usize) -> Result<(Vec<[f64; 4]>, Vec<u8>)> {
    let synth = SynthConfig {
        users: 30,
        items: 20,
        seq_len: 12,
        ..SynthConfig::default()
    };
    let data = synth_generate(&synth, &mut ChaCha8Rng::seed_from_u64(3))?;
    let cfg = TrainConfig {
        window: 4,
        d: 8,
        n_f: 4,
        d_r: 8,
        d_z: 8,
        n_t: 5,
        nc_max: 4,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let ds = Dataset::build(&data.interactions, FeedbackKind::Implicit, 12, cfg.split, cfg.seed)?;
    let users = training_windows(&ds, &cfg)?;
    let mut trainer = Trainer::new(&cfg, &ds)?;
    for _ in 0..epochs {
        trainer.step(&users, &ds, 1)?;
    }
    let trace = trainer.history.iter().map(|h| [h.nll, h.wass, h.total, h.val_ndcg]).collect();
    Ok((trace, encode_checkpoint(&trainer.checkpoint())))
}

pub fn determinism_replay() -> CheckResult {
    let run = || -> Result<(bool, String)> {
        let (a, ca) = replay_run(2)?;
        let (b, cb) = replay_run(2)?;
        let drift = a
            .iter()
            .zip(&b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max);
        let same = a.len() == b.len() && drift <= ORACLE_TOL && ca == cb;
        Ok((same, format!("trace drift {drift:.1e}, checkpoints byte-equal: {}", ca == cb)))
    };
    CheckResult::from_result("determinism replay", run())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_metrics_hand_case() {
        let (h, r, g) = metric_reference(&[4, 2, 9], &[9, 5], 3);
        assert_eq!((h, r), (1.0, 0.5));
        assert!((g - 0.5 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-15);
    }

    #[test]
    fn conv_reference_hand_case() {
        let out = conv_reference(&[1.0, 2.0, 3.0], 3, 1, &[1.0, 1.0], 2, 1, 1);
        assert_eq!(out, vec![vec![4.0]]);
    }

    #[test]
    fn failing_check_formats() {
        let c = CheckResult::new("x", false, "boom");
        assert_eq!(c.line(), "FAIL x: boom");
    }
}
