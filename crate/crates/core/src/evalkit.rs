//! Ranking metrics, held-out evaluation and reference baselines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvalContextMode, TrainConfig};
use crate::corpus::{Dataset, UserSequence};
use crate::decoder::top_k;
use crate::dynamics::standard_normal;
use crate::error::{Error, Result};
use crate::model::{Idnp, LatentMode, UserRef};

fn hits(ranked: &[usize], truth: &[usize], k: usize) -> usize {
    ranked.iter().take(k).filter(|i| truth.contains(i)).count()
}

/// 1 if any of the first `k` ranked items is in `truth`.
pub fn hit_at_k(ranked: &[usize], truth: &[usize], k: usize) -> f64 {
    if hits(ranked, truth, k) > 0 {
        1.0
    } else {
        0.0
    }
}

pub fn recall_at_k(ranked: &[usize], truth: &[usize], k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    hits(ranked, truth, k) as f64 / truth.len() as f64
}

/// Binary-gain NDCG with a `log2(rank + 1)` discount.
pub fn ndcg_at_k(ranked: &[usize], truth: &[usize], k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| truth.contains(i))
        .map(|(r, _)| 1.0 / (r as f64 + 2.0).log2())
        .sum();
    let idcg: f64 = (0..k.min(truth.len())).map(|r| 1.0 / (r as f64 + 2.0).log2()).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// One held-out user: context windows, the query window and the items that
/// followed it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub user: usize,
    pub user_ref: UserRef,
    pub context: Vec<Vec<usize>>,
    pub query: Vec<usize>,
    pub truth: Vec<usize>,
}

/// Builds the evaluation case of `seq`, or `None` when the user has no item
/// after the first window.
pub fn eval_case(seq: &UserSequence, cfg: &TrainConfig, user_ref: UserRef) -> Option<EvalCase> {
    let (l, k, n) = (cfg.window, cfg.basket, seq.items.len());
    if n <= l {
        return None;
    }
    let (q, truth_end) = match cfg.eval_context_mode {
        EvalContextMode::SingleWindow => (0, (l + k).min(n)),
        EvalContextMode::ClampedEpisode => (n.saturating_sub(l + k), n),
    };
    let query = seq.items[q..q + l].to_vec();
    let truth = seq.items[q + l..truth_end].to_vec();
    let context = match cfg.eval_context_mode {
        EvalContextMode::SingleWindow => vec![query.clone()],
        EvalContextMode::ClampedEpisode => {
            let first = (q + 1).saturating_sub(cfg.eval_nc);
            (first..=q).map(|s| seq.items[s..s + l].to_vec()).collect()
        }
    };
    Some(EvalCase {
        user: seq.user,
        user_ref,
        context,
        query,
        truth,
    })
}

/// Cases for `users` of `data`; the second value counts skipped users.
pub fn eval_cases(data: &Dataset, users: &[usize], cfg: &TrainConfig, trained: bool) -> (Vec<EvalCase>, usize) {
    let mut skipped = 0;
    let cases = users
        .iter()
        .filter_map(|u| {
            let r = if trained { UserRef::Trained(*u) } else { UserRef::Unseen };
            let c = eval_case(&data.sequences[*u], cfg, r);
            if c.is_none() {
                skipped += 1;
            }
            c
        })
        .collect();
    (cases, skipped)
}

/// Something that ranks the catalog for a case.
#[derive(Debug, Clone, Copy)]
pub enum Ranker<'a> {
    Model(&'a Idnp),
    /// Uniform random permutation, seeded per user.
    Random { seed: u64, items: usize },
    /// Descending frequency, ties by item index.
    Popularity(&'a [f64]),
}

impl Ranker<'_> {
    /// Top `k` items for `case`, best first.
    pub fn rank(&self, case: &EvalCase, cfg: &TrainConfig, k: usize) -> Result<Vec<usize>> {
        let exclude: &[usize] = if cfg.exclude_seen { &case.query } else { &[] };
        match self {
            Ranker::Model(m) => {
                let ctx: Vec<&[usize]> = case.context.iter().map(Vec::as_slice).collect();
                let latent = if cfg.eval_sample_z {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ case.user as u64);
                    LatentMode::ContextSample(standard_normal(m.cfg.d_z, &mut rng))
                } else {
                    LatentMode::ContextMean
                };
                let p = m.predict(case.user_ref, &ctx, &case.query, latent)?;
                Ok(top_k(&p.y, k, exclude).items)
            }
            Ranker::Random { seed, items } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(case.user as u64);
                let mut order: Vec<usize> = (1..=*items).filter(|i| !exclude.contains(i)).collect();
                order.shuffle(&mut rng);
                order.truncate(k);
                Ok(order)
            }
            Ranker::Popularity(freq) => Ok(top_k(freq, k, exclude).items),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub hit: f64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<usize, MetricSet>,
    pub users: usize,
    pub skipped: usize,
    pub basket: usize,
    pub config: String,
}

impl EvalReport {
    pub fn get(&self, cutoff: usize) -> MetricSet {
        self.metrics.get(&cutoff).copied().unwrap_or_default()
    }

    /// Single-line record with `hit@K`, `recall@K` and `ndcg@K` keys.
    pub fn json_line(&self) -> String {
        let mut obj = serde_json::Map::new();
        for (k, m) in &self.metrics {
            obj.insert(format!("hit@{k}"), m.hit.into());
            obj.insert(format!("recall@{k}"), m.recall.into());
            obj.insert(format!("ndcg@{k}"), m.ndcg.into());
        }
        obj.insert("users".into(), self.users.into());
        obj.insert("skipped".into(), self.skipped.into());
        obj.insert("basket".into(), self.basket.into());
        serde_json::Value::Object(obj).to_string()
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>6}  {:>8}  {:>8}  {:>8}\n", "K", "Hit", "Recall", "NDCG");
        for (k, m) in &self.metrics {
            let _ = writeln!(s, "{k:>6}  {:>8.4}  {:>8.4}  {:>8.4}", m.hit, m.recall, m.ndcg);
        }
        let _ = writeln!(s, "users {}  skipped {}  basket {}", self.users, self.skipped, self.basket);
        s
    }
}

/// Scores every case with `ranker` using up to `workers` threads. Results
/// are reduced in case order, so the report does not depend on `workers`.
pub fn evaluate(ranker: Ranker<'_>, cases: &[EvalCase], cfg: &TrainConfig, workers: usize) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no users to evaluate".into()));
    }
    let depth = cfg.max_cutoff();
    let chunk = cases.len().div_ceil(workers.max(1));
    let ranked: Vec<Vec<usize>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|c| ranker.rank(c, cfg, depth)).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();

    let n = cases.len() as f64;
    let mut metrics = BTreeMap::new();
    for &k in &cfg.cutoffs {
        let mut m = MetricSet::default();
        for (r, c) in ranked.iter().zip(cases) {
            m.hit += hit_at_k(r, &c.truth, k);
            m.recall += recall_at_k(r, &c.truth, k);
            m.ndcg += ndcg_at_k(r, &c.truth, k);
        }
        metrics.insert(
            k,
            MetricSet {
                hit: m.hit / n,
                recall: m.recall / n,
                ndcg: m.ndcg / n,
            },
        );
    }
    Ok(EvalReport {
        metrics,
        users: cases.len(),
        skipped: 0,
        basket: cfg.basket,
        config: cfg.echo(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FeedbackKind;

    #[test]
    fn metric_examples() {
        let (a, b, x, y) = (1, 2, 8, 9);
        assert_eq!(hit_at_k(&[a, x], &[a], 1), 1.0);
        assert_eq!(hit_at_k(&[x, y, a], &[a], 2), 0.0);
        assert_eq!(hit_at_k(&[x, b, y], &[a, b], 3), 1.0);
        assert_eq!(recall_at_k(&[x, b, y], &[a, b], 3), 0.5);
        assert_eq!(recall_at_k(&[b, a, y], &[a, b], 3), 1.0);
        assert_eq!(recall_at_k(&[x, y], &[a, b], 2), 0.0);
        assert_eq!(ndcg_at_k(&[a, x], &[a], 2), 1.0);
        assert!((ndcg_at_k(&[x, a, y], &[a, b], 3) - 0.63093 / 1.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_k(&[x, y], &[a], 2), 0.0);
    }

    fn seq(items: Vec<usize>) -> UserSequence {
        UserSequence {
            user: 3,
            items,
            ratings: None,
            feedback: FeedbackKind::Implicit,
        }
    }

    #[test]
    fn single_window_case() {
        let cfg = TrainConfig {
            window: 3,
            basket: 2,
            ..TrainConfig::default()
        };
        let c = eval_case(&seq(vec![1, 2, 3, 4, 5, 6]), &cfg, UserRef::Unseen).unwrap();
        assert_eq!(c.query, vec![1, 2, 3]);
        assert_eq!(c.context, vec![vec![1, 2, 3]]);
        assert_eq!(c.truth, vec![4, 5]);
        assert!(eval_case(&seq(vec![1, 2, 3]), &cfg, UserRef::Unseen).is_none());
    }

    #[test]
    fn clamped_episode_case() {
        let cfg = TrainConfig {
            window: 2,
            basket: 1,
            eval_nc: 3,
            eval_context_mode: EvalContextMode::ClampedEpisode,
            ..TrainConfig::default()
        };
        let c = eval_case(&seq(vec![1, 2, 3, 4, 5, 6, 7]), &cfg, UserRef::Unseen).unwrap();
        assert_eq!(c.query, vec![5, 6]);
        assert_eq!(c.truth, vec![7]);
        assert_eq!(c.context, vec![vec![3, 4], vec![4, 5], vec![5, 6]]);
        let short = eval_case(&seq(vec![1, 2, 3]), &cfg, UserRef::Unseen).unwrap();
        assert_eq!((short.query, short.truth), (vec![1, 2], vec![3]));
    }

    #[test]
    fn popularity_is_deterministic() {
        let cfg = TrainConfig {
            window: 2,
            cutoffs: vec![1, 2],
            exclude_seen: false,
            ..TrainConfig::default()
        };
        let cases: Vec<EvalCase> = (0..5)
            .map(|u| EvalCase {
                user: u,
                user_ref: UserRef::Unseen,
                context: vec![vec![1, 2]],
                query: vec![1, 2],
                truth: vec![u % 3 + 1],
            })
            .collect();
        let freq = [2.0, 5.0, 5.0];
        let a = evaluate(Ranker::Popularity(&freq), &cases, &cfg, 1).unwrap();
        let b = evaluate(Ranker::Popularity(&freq), &cases, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get(1).hit, 0.4);
        assert!(a.json_line().contains("\"ndcg@2\""));
    }
}
