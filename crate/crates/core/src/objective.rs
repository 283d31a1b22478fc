//! Training objective: per-query likelihood plus a divergence between the
//! target- and context-conditioned latent Gaussians.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::standard_normal;
use crate::error::{Error, Result};
use crate::numerics::{sinkhorn, Tape, Tensor, Var, BCE_CLIP};

/// What one training query should predict.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryTarget {
    /// Implicit feedback: these items were interacted with.
    Items(Vec<usize>),
    /// Explicit feedback: normalized rating of one item.
    Rated { item: usize, rating: f64 },
}

impl QueryTarget {
    /// Dense target over the catalog; entry `c` belongs to item `c + 1`.
    pub fn dense(&self, items: usize) -> Result<Vec<f64>> {
        let mut t = vec![0.0; items];
        let check = |i: usize| {
            if i == 0 || i > items {
                Err(Error::Catalog(format!("target item {i} outside 1..={items}")))
            } else {
                Ok(i - 1)
            }
        };
        match self {
            QueryTarget::Items(v) => {
                for i in v {
                    t[check(*i)?] = 1.0;
                }
            }
            QueryTarget::Rated { item, rating } => {
                if !(0.0..=1.0).contains(rating) {
                    return Err(Error::InvalidArgument(format!("rating {rating} outside [0, 1]")));
                }
                t[check(*item)?] = *rating;
            }
        }
        Ok(t)
    }
}

/// Mean clipped binary cross-entropy over the catalog.
pub fn nll_bce(y: &[f64], targets: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty catalog".into()));
    }
    let t = QueryTarget::Items(targets.to_vec()).dense(y.len())?;
    Ok(y.iter()
        .zip(&t)
        .map(|(p, y)| {
            let q = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        })
        .sum::<f64>()
        / y.len() as f64)
}

/// Mean absolute error against a catalog vector holding `rating` at `item`.
pub fn nll_mae(y: &[f64], item: usize, rating: f64) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty catalog".into()));
    }
    let t = QueryTarget::Rated { item, rating }.dense(y.len())?;
    Ok(y.iter().zip(&t).map(|(p, t)| (p - t).abs()).sum::<f64>() / y.len() as f64)
}

/// Diagonal Gaussian given by means and standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Exact 2-Wasserstein distance between diagonal Gaussians.
pub fn w2_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    (sq(&p.mu, &q.mu) + sq(&p.sigma, &q.sigma)).sqrt()
}

/// `KL(p || q)` for diagonal Gaussians.
pub fn kl_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    (0..p.mu.len())
        .map(|i| {
            let dm = p.mu[i] - q.mu[i];
            (q.sigma[i] / p.sigma[i]).ln() + (p.sigma[i].powi(2) + dm * dm) / (2.0 * q.sigma[i].powi(2)) - 0.5
        })
        .sum()
}

/// Settings of the sample-based Wasserstein estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornSettings {
    pub samples: usize,
    pub lambda: f64,
    pub iters: usize,
}

/// Sample-based estimate of the 2-Wasserstein distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledW2 {
    pub value: f64,
    pub warning: Option<String>,
}

fn sq_dist(x: &[f64], y: &[f64], d: usize) -> Tensor {
    let (n, m) = (x.len() / d, y.len() / d);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..m {
            out[i * m + j] = xi
                .iter()
                .zip(&y[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
    }
    Tensor::matrix(n, m, out).expect("shape")
}

/// Debiased entropic estimate `sqrt(OT(x,y) - OT(x,x)/2 - OT(y,y)/2)` with
/// both sample clouds driven by the same standard-normal draws.
pub fn sinkhorn_w2<R: Rng + ?Sized>(
    p: &DiagGaussian,
    q: &DiagGaussian,
    settings: SinkhornSettings,
    rng: &mut R,
) -> Result<SampledW2> {
    let d = p.mu.len();
    if d == 0 || q.mu.len() != d || p.sigma.len() != d || q.sigma.len() != d {
        return Err(Error::dim("sinkhorn_w2", "mismatched Gaussian dimensions"));
    }
    if settings.samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let eps = standard_normal(settings.samples * d, rng);
    let cloud = |g: &DiagGaussian| -> Vec<f64> {
        eps.iter()
            .enumerate()
            .map(|(i, e)| g.mu[i % d] + g.sigma[i % d] * e)
            .collect()
    };
    let (x, y) = (cloud(p), cloud(q));
    let w = vec![1.0 / settings.samples as f64; settings.samples];
    let ot = |a: &[f64], b: &[f64]| sinkhorn(&w, &w, &sq_dist(a, b, d), settings.lambda, settings.iters);
    let (xy, xx, yy) = (ot(&x, &y)?, ot(&x, &x)?, ot(&y, &y)?);
    let divergence = xy.objective - 0.5 * xx.objective - 0.5 * yy.objective;
    let warning = [xy.warning, xx.warning, yy.warning].into_iter().flatten().next();
    Ok(SampledW2 {
        value: divergence.max(0.0).sqrt(),
        warning,
    })
}

/// Divergence term selected for training.
#[derive(Debug, Clone)]
pub enum DivergenceTerm {
    None,
    Kl,
    W2Closed,
    /// `eps` holds one standard-normal row per sample.
    W2Sinkhorn { eps: Tensor, lambda: f64, iters: usize },
}

/// Latent Gaussian on the tape, as `1 x d_z` rows.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub mu: Var,
    pub sigma: Var,
}

fn cloud(tape: &mut Tape<'_>, g: LatentVars, eps: Var) -> Result<Var> {
    let n = tape.value(eps).rows();
    let mu = tape.repeat_rows(g.mu, n)?;
    let sigma = tape.repeat_rows(g.sigma, n)?;
    let spread = tape.mul(sigma, eps)?;
    tape.add(mu, spread)
}

/// Records the divergence between `target` and `context` on the tape.
pub fn divergence(
    tape: &mut Tape<'_>,
    term: &DivergenceTerm,
    target: LatentVars,
    context: LatentVars,
) -> Result<Option<Var>> {
    let args = (target.mu, target.sigma, context.mu, context.sigma);
    Ok(match term {
        DivergenceTerm::None => None,
        DivergenceTerm::Kl => Some(tape.kl_gauss(args.0, args.1, args.2, args.3)?),
        DivergenceTerm::W2Closed => Some(tape.w2_gauss(args.0, args.1, args.2, args.3)?),
        DivergenceTerm::W2Sinkhorn { eps, lambda, iters } => {
            let e = tape.leaf(eps.clone());
            let x = cloud(tape, target, e)?;
            let y = cloud(tape, context, e)?;
            let mut ot = |a: Var, b: Var| -> Result<Var> {
                let c = tape.sq_dist(a, b)?;
                tape.transport_cost(c, *lambda, *iters)
            };
            let (xy, xx, yy) = (ot(x, y)?, ot(x, x)?, ot(y, y)?);
            let self_terms = tape.add(xx, yy)?;
            let self_terms = tape.scale(self_terms, 0.5);
            let s = tape.sub(xy, self_terms)?;
            Some(tape.sqrt_pos(s))
        }
    })
}

/// Loss decomposition of one episode or an average over several.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub nll: f64,
    pub wass: f64,
    pub total: f64,
    pub per_query: Vec<f64>,
}

/// Likelihood over all query rows of `preds` plus the optional divergence.
pub fn total_loss(
    tape: &mut Tape<'_>,
    preds: Var,
    targets: &[QueryTarget],
    divergence: Option<Var>,
) -> Result<(Var, LossReport)> {
    let (rows, items) = (tape.value(preds).rows(), tape.value(preds).cols());
    if rows != targets.len() || rows == 0 {
        return Err(Error::dim(
            "total_loss",
            format!("{rows} prediction rows vs {} targets", targets.len()),
        ));
    }
    let mut dense = Vec::with_capacity(rows * items);
    let mut per_query = Vec::with_capacity(rows);
    let explicit = matches!(targets[0], QueryTarget::Rated { .. });
    for (r, t) in targets.iter().enumerate() {
        let y = tape.value(preds).row_slice(r);
        per_query.push(match t {
            QueryTarget::Items(v) => nll_bce(y, v)?,
            QueryTarget::Rated { item, rating } => nll_mae(y, *item, *rating)?,
        });
        if explicit != matches!(t, QueryTarget::Rated { .. }) {
            return Err(Error::InvalidArgument("mixed feedback kinds in one batch".into()));
        }
        dense.extend(t.dense(items)?);
    }
    let nll = if explicit {
        tape.mae(preds, dense)?
    } else {
        tape.bce(preds, dense)?
    };
    let (total, wass) = match divergence {
        Some(w) => (tape.add(nll, w)?, tape.scalar(w)),
        None => (nll, 0.0),
    };
    let report = LossReport {
        nll: tape.scalar(nll),
        wass,
        total: tape.scalar(total),
        per_query,
    };
    Ok((total, report))
}
