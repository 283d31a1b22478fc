//! Query-specific deterministic context and the global Gaussian latent.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sdpa, Tape, Tensor, Var};

/// Lower bound of every latent scale.
pub const SIGMA_FLOOR: f64 = 0.1;
/// Width of the latent scale range above the floor.
pub const SIGMA_SPAN: f64 = 0.9;

/// Cross-attention result for a batch of queries.
#[derive(Debug, Clone, Copy)]
pub struct DeterministicContext {
    /// `queries x d_r`.
    pub r_d: Var,
    /// `queries x N_c`; each row sums to one.
    pub weights: Var,
}

/// Attends from each query feature over the context features and mixes the
/// context representations `r_ctx` with the resulting weights.
pub fn deterministic_path(
    tape: &mut Tape<'_>,
    f_ctx: Var,
    r_ctx: Var,
    f_q: Var,
    w_q: Var,
    w_k: Var,
) -> Result<DeterministicContext> {
    if tape.value(f_ctx).rows() == 0 {
        return Err(Error::dim("deterministic_path", "empty context"));
    }
    let q = tape.matmul(f_q, w_q)?;
    let k = tape.matmul(f_ctx, w_k)?;
    let att = sdpa(tape, q, k, r_ctx)?;
    Ok(DeterministicContext {
        r_d: att.output,
        weights: att.weights,
    })
}

/// Mean of the rows of `r_set`.
pub fn latent_summary(tape: &mut Tape<'_>, r_set: Var) -> Result<Var> {
    tape.mean_rows(r_set)
}

#[derive(Debug, Clone, Copy)]
pub struct LatentWeights {
    pub w_h: Var,
    pub b_h: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_sigma: Var,
    pub b_sigma: Var,
}

const SIGMA_LO: f64 = SIGMA_FLOOR * (1.0 + 4.0 * f64::EPSILON);
const SIGMA_HI: f64 = (SIGMA_FLOOR + SIGMA_SPAN) * (1.0 - 4.0 * f64::EPSILON);

/// Gaussian parameters `(mu, sigma)` from a summary row; sigma lies in
/// `(SIGMA_FLOOR, SIGMA_FLOOR + SIGMA_SPAN)`.
pub fn parameterize(tape: &mut Tape<'_>, r_l: Var, w: &LatentWeights) -> Result<(Var, Var)> {
    let h = tape.matmul(r_l, w.w_h)?;
    let h = tape.add_row(h, w.b_h)?;
    let h = tape.relu(h);
    let mu = tape.matmul(h, w.w_mu)?;
    let mu = tape.add_row(mu, w.b_mu)?;
    let s = tape.matmul(h, w.w_sigma)?;
    let s = tape.add_row(s, w.b_sigma)?;
    let s = tape.sigmoid(s);
    let s = tape.scale(s, SIGMA_SPAN);
    let sigma = tape.add_scalar(s, SIGMA_FLOOR);
    // the sigmoid saturates to exactly 0 or 1 for large inputs
    let sigma = tape.clamp(sigma, SIGMA_LO, SIGMA_HI);
    Ok((mu, sigma))
}

/// Reparameterized draw `mu + sigma * eps`; `eps` is a constant.
pub fn sample_z(tape: &mut Tape<'_>, mu: Var, sigma: Var, eps: Vec<f64>) -> Result<Var> {
    let noise = tape.leaf(Tensor::row(eps));
    let spread = tape.mul(sigma, noise)?;
    tape.add(mu, spread)
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentSource {
    Context,
    Target,
}

/// Plain-value snapshot of one latent distribution and its sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
    pub source: LatentSource,
}

impl LatentState {
    pub fn sigma_norm(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}
