//! The full interest-dynamics model: parameters plus the episode forward
//! pass shared by training, evaluation and prediction.

use rand::Rng;

use crate::config::{Divergence, TrainConfig, UnseenUser, WassImpl};
use crate::corpus::{Episode, FeedbackKind, Subsequence, PAD};
use crate::decoder::{predict_preferences, reconstruct};
use crate::dynamics::{
    deterministic_path, latent_summary, parameterize, sample_z, standard_normal, LatentSource, LatentState,
    LatentWeights,
};
use crate::encoder::{
    init_embeddings, multiscale_features, self_attend, stack_embeddings, uniform_tensor, AttentionWeights,
    EmbeddingTables, KernelBank,
};
use crate::error::{Error, Result};
use crate::numerics::{ParamGrads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::objective::{divergence, total_loss, DivergenceTerm, LatentVars, LossReport, QueryTarget};

#[derive(Debug, Clone)]
struct LatentIds {
    w_h: ParamId,
    b_h: ParamId,
    w_mu: ParamId,
    b_mu: ParamId,
    w_sigma: ParamId,
    b_sigma: ParamId,
}

#[derive(Debug, Clone)]
struct ModelIds {
    tables: EmbeddingTables,
    bank: KernelBank,
    att_q: Option<ParamId>,
    att_k: Option<ParamId>,
    att_v: ParamId,
    det_q: Option<ParamId>,
    det_k: Option<ParamId>,
    latent: Option<LatentIds>,
    w_d: ParamId,
    b_d: ParamId,
    w_p: ParamId,
    b_p: ParamId,
}

/// Which user embedding feeds the item scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserRef {
    Trained(usize),
    /// A user without a trained embedding; see [`UnseenUser`].
    Unseen,
}

/// Where the latent sample comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentMode {
    /// Reparameterized draw from the target-conditioned Gaussian.
    TargetSample(Vec<f64>),
    /// The mean of the context-conditioned Gaussian.
    ContextMean,
    /// Reparameterized draw from the context-conditioned Gaussian.
    ContextSample(Vec<f64>),
}

/// Inputs of one forward pass. Indices refer to `windows`.
#[derive(Debug, Clone)]
pub struct ForwardRequest<'a> {
    pub user: UserRef,
    pub windows: Vec<&'a [usize]>,
    pub context: Vec<usize>,
    /// Only needed when the latent is drawn from the target side.
    pub target: Vec<usize>,
    pub queries: Vec<usize>,
    pub latent: LatentMode,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `queries x |I|` probabilities.
    pub preds: Var,
    pub context_latent: Option<LatentVars>,
    pub target_latent: Option<LatentVars>,
    pub z: Option<Var>,
    /// `queries x N_c` cross-attention weights.
    pub det_weights: Option<Var>,
    /// Deterministic context rows `r_d`, one per query.
    pub det_context: Option<Var>,
    /// One `1 x width` feature row per window.
    pub features: Vec<Var>,
}

/// Per-episode random draws, fixed before the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeNoise {
    pub z: Vec<f64>,
    pub transport: Option<Tensor>,
}

/// A single-query prediction in plain values.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub y: Vec<f64>,
    pub latent: Option<LatentState>,
    pub det_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Idnp {
    pub cfg: TrainConfig,
    pub params: ParamStore,
    pub items: usize,
    pub users: usize,
    /// Users whose embeddings were trained; used for the mean fallback.
    pub trained_users: Vec<usize>,
    ids: ModelIds,
}

fn dense<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut R) -> Result<ParamId> {
    store.insert(name, uniform_tensor(vec![rows, cols], 1.0 / (rows as f64).sqrt(), rng))
}

fn bias(store: &mut ParamStore, name: &str, cols: usize) -> Result<ParamId> {
    store.insert(name, Tensor::zeros(vec![1, cols]))
}

impl Idnp {
    /// Fresh model for `items` catalog items (indices `1..=items`) and
    /// `users` users.
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, items: usize, users: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if items == 0 {
            return Err(Error::InvalidArgument("empty catalog".into()));
        }
        let mut s = ParamStore::new();
        let (d, w, d_r, d_z) = (cfg.d, cfg.feature_width(), cfg.d_r, cfg.d_z);
        init_embeddings(&mut s, items, users, d, rng)?;
        KernelBank::init(&mut s, cfg.window, d, cfg.n_f, &cfg.gaps(), rng)?;
        if cfg.attention {
            dense(&mut s, "enc.W_Q", w, d_r, rng)?;
            dense(&mut s, "enc.W_K", w, d_r, rng)?;
        }
        dense(&mut s, "enc.W_V", w, d_r, rng)?;
        let dec_in = if cfg.np_inference {
            dense(&mut s, "det.W_Q", w, d_r, rng)?;
            dense(&mut s, "det.W_K", w, d_r, rng)?;
            dense(&mut s, "lat.W_h", d_r, d_r, rng)?;
            bias(&mut s, "lat.b_h", d_r)?;
            dense(&mut s, "lat.W_mu", d_r, d_z, rng)?;
            bias(&mut s, "lat.b_mu", d_z)?;
            dense(&mut s, "lat.W_sigma", d_r, d_z, rng)?;
            bias(&mut s, "lat.b_sigma", d_z)?;
            d_r + d_z + w
        } else {
            d_r + w
        };
        dense(&mut s, "dec.W_d", dec_in, d, rng)?;
        bias(&mut s, "dec.b_d", d)?;
        dense(&mut s, "dec.W_p", 2 * d, items, rng)?;
        bias(&mut s, "dec.b_p", items)?;
        Self::from_params(cfg.clone(), s, Vec::new())
    }

    /// Rebinds a model to a parameter store, e.g. one read from disk.
    pub fn from_params(cfg: TrainConfig, params: ParamStore, trained_users: Vec<usize>) -> Result<Self> {
        let need = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::Integrity(format!("parameter `{name}` missing")))
        };
        let item = need("enc.item_table")?;
        let user = need("enc.user_table")?;
        let items = params.value(item).rows().saturating_sub(1);
        let users = params.value(user).rows();
        let tables = EmbeddingTables { item, user, d: cfg.d };
        let mut groups = Vec::new();
        for s in cfg.gaps() {
            let n_s = crate::encoder::kernel_plan(cfg.window, s);
            let kernels = (1..=n_s)
                .map(|h| need(&format!("enc.k.s{s}.h{h}")))
                .collect::<Result<Vec<_>>>()?;
            groups.push(crate::encoder::KernelGroup { gap: s, kernels });
        }
        let bank = KernelBank {
            groups,
            window: cfg.window,
            n_f: cfg.n_f,
        };
        let opt = |on: bool, name: &str| if on { need(name).map(Some) } else { Ok(None) };
        let latent = if cfg.np_inference {
            Some(LatentIds {
                w_h: need("lat.W_h")?,
                b_h: need("lat.b_h")?,
                w_mu: need("lat.W_mu")?,
                b_mu: need("lat.b_mu")?,
                w_sigma: need("lat.W_sigma")?,
                b_sigma: need("lat.b_sigma")?,
            })
        } else {
            None
        };
        let ids = ModelIds {
            tables,
            bank,
            att_q: opt(cfg.attention, "enc.W_Q")?,
            att_k: opt(cfg.attention, "enc.W_K")?,
            att_v: need("enc.W_V")?,
            det_q: opt(cfg.np_inference, "det.W_Q")?,
            det_k: opt(cfg.np_inference, "det.W_K")?,
            latent,
            w_d: need("dec.W_d")?,
            b_d: need("dec.b_d")?,
            w_p: need("dec.W_p")?,
            b_p: need("dec.b_p")?,
        };
        let expected_in = cfg.d_r + cfg.feature_width() + if cfg.np_inference { cfg.d_z } else { 0 };
        if params.value(ids.w_d).rows() != expected_in || params.value(ids.w_p).cols() != items {
            return Err(Error::Integrity("parameter shapes do not match the configuration".into()));
        }
        Ok(Self {
            cfg,
            params,
            items,
            users,
            trained_users,
            ids,
        })
    }

    pub fn item_table(&self) -> ParamId {
        self.ids.tables.item
    }

    /// Random draws for one training episode.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> EpisodeNoise {
        let z = standard_normal(self.cfg.d_z, rng);
        let transport = (self.cfg.np_inference
            && self.cfg.divergence == Divergence::Wasserstein
            && self.cfg.wass_impl == WassImpl::Sinkhorn)
            .then(|| {
                let n = self.cfg.sinkhorn_samples;
                Tensor::matrix(n, self.cfg.d_z, standard_normal(n * self.cfg.d_z, rng)).expect("shape")
            });
        EpisodeNoise { z, transport }
    }

    fn user_row(&self, tape: &mut Tape<'_>, user: UserRef) -> Result<Var> {
        let d = self.cfg.d;
        match user {
            UserRef::Trained(u) => {
                let table = tape.param(self.ids.tables.user);
                tape.gather(table, &[u])
            }
            UserRef::Unseen => {
                let table = self.params.value(self.ids.tables.user);
                let mut row = vec![0.0; d];
                if self.cfg.unseen_user == UnseenUser::Mean && !self.trained_users.is_empty() {
                    for u in &self.trained_users {
                        row.iter_mut().zip(table.row_slice(*u)).for_each(|(r, x)| *r += x);
                    }
                    let n = self.trained_users.len() as f64;
                    row.iter_mut().for_each(|r| *r /= n);
                }
                Ok(tape.constant_row(row))
            }
        }
    }

    fn attend(&self, tape: &mut Tape<'_>, f_set: Var) -> Result<Var> {
        let w_v = tape.param(self.ids.att_v);
        match (self.ids.att_q, self.ids.att_k) {
            (Some(q), Some(k)) => {
                let w = AttentionWeights {
                    w_q: tape.param(q),
                    w_k: tape.param(k),
                    w_v,
                };
                self_attend(tape, f_set, w, self.cfg.heads)
            }
            _ => tape.matmul(f_set, w_v),
        }
    }

    fn latent(&self, tape: &mut Tape<'_>, r_set: Var) -> Result<LatentVars> {
        let ids = self.ids.latent.as_ref().expect("latent path enabled");
        let w = LatentWeights {
            w_h: tape.param(ids.w_h),
            b_h: tape.param(ids.b_h),
            w_mu: tape.param(ids.w_mu),
            b_mu: tape.param(ids.b_mu),
            w_sigma: tape.param(ids.w_sigma),
            b_sigma: tape.param(ids.b_sigma),
        };
        let summary = latent_summary(tape, r_set)?;
        let (mu, sigma) = parameterize(tape, summary, &w)?;
        Ok(LatentVars { mu, sigma })
    }

    /// Interest feature row of one window.
    pub fn feature(&self, tape: &mut Tape<'_>, items: &[usize]) -> Result<Var> {
        if items.len() != self.cfg.window {
            return Err(Error::dim(
                "feature",
                format!("window of {} items, model expects {}", items.len(), self.cfg.window),
            ));
        }
        let p = stack_embeddings(tape, &self.ids.tables, items)?;
        multiscale_features(tape, p, &self.ids.bank)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, req: &ForwardRequest<'_>) -> Result<ForwardVars> {
        let n = req.windows.len();
        if req.context.is_empty() || req.queries.is_empty() {
            return Err(Error::InvalidArgument("need at least one context window and one query".into()));
        }
        if let Some(bad) = req.context.iter().chain(&req.target).chain(&req.queries).find(|i| **i >= n) {
            return Err(Error::InvalidArgument(format!("window index {bad} out of {n}")));
        }
        let features = req
            .windows
            .iter()
            .map(|w| self.feature(tape, w))
            .collect::<Result<Vec<_>>>()?;
        let f_all = tape.concat_rows(&features)?;
        let f_q = tape.gather(f_all, &req.queries)?;
        let q = req.queries.len();

        let mut out = ForwardVars {
            preds: f_q,
            context_latent: None,
            target_latent: None,
            z: None,
            det_weights: None,
            det_context: None,
            features,
        };
        let d_q = if self.cfg.np_inference {
            let f_ctx = tape.gather(f_all, &req.context)?;
            let r_ctx = self.attend(tape, f_ctx)?;
            let ctx = self.latent(tape, r_ctx)?;
            out.context_latent = Some(ctx);
            if !req.target.is_empty() {
                let f_tgt = tape.gather(f_all, &req.target)?;
                let r_tgt = self.attend(tape, f_tgt)?;
                out.target_latent = Some(self.latent(tape, r_tgt)?);
            }
            let z = match &req.latent {
                LatentMode::ContextMean => ctx.mu,
                LatentMode::ContextSample(eps) => sample_z(tape, ctx.mu, ctx.sigma, eps.clone())?,
                LatentMode::TargetSample(eps) => {
                    let tgt = out
                        .target_latent
                        .ok_or_else(|| Error::InvalidArgument("target sample needs target windows".into()))?;
                    sample_z(tape, tgt.mu, tgt.sigma, eps.clone())?
                }
            };
            out.z = Some(z);
            let (wq, wk) = (
                tape.param(self.ids.det_q.expect("np path")),
                tape.param(self.ids.det_k.expect("np path")),
            );
            let det = deterministic_path(tape, f_ctx, r_ctx, f_q, wq, wk)?;
            out.det_weights = Some(det.weights);
            out.det_context = Some(det.r_d);
            let zs = tape.repeat_rows(z, q)?;
            let (w_d, b_d) = (tape.param(self.ids.w_d), tape.param(self.ids.b_d));
            reconstruct(tape, &[det.r_d, zs, f_q], w_d, b_d)?
        } else {
            let mut set: Vec<usize> = req
                .context
                .iter()
                .chain(&req.target)
                .chain(&req.queries)
                .copied()
                .collect();
            set.sort_unstable();
            set.dedup();
            let f_set = tape.gather(f_all, &set)?;
            let r_set = self.attend(tape, f_set)?;
            let pos: Vec<usize> = req
                .queries
                .iter()
                .map(|i| set.binary_search(i).expect("query in set"))
                .collect();
            let r_q = tape.gather(r_set, &pos)?;
            let (w_d, b_d) = (tape.param(self.ids.w_d), tape.param(self.ids.b_d));
            reconstruct(tape, &[r_q, f_q], w_d, b_d)?
        };
        let e_u = self.user_row(tape, req.user)?;
        let (w_p, b_p) = (tape.param(self.ids.w_p), tape.param(self.ids.b_p));
        out.preds = predict_preferences(tape, d_q, e_u, w_p, b_p)?;
        Ok(out)
    }

    fn divergence_term(&self, noise: &EpisodeNoise) -> DivergenceTerm {
        match (self.cfg.divergence, self.cfg.wass_impl, &noise.transport) {
            (Divergence::None, ..) => DivergenceTerm::None,
            (Divergence::Kl, ..) => DivergenceTerm::Kl,
            (Divergence::Wasserstein, WassImpl::Sinkhorn, Some(eps)) => DivergenceTerm::W2Sinkhorn {
                eps: eps.clone(),
                lambda: self.cfg.sinkhorn_lambda,
                iters: self.cfg.sinkhorn_iters,
            },
            (Divergence::Wasserstein, ..) => DivergenceTerm::W2Closed,
        }
    }

    /// Records the training loss of one episode on `tape`. Every target
    /// window must carry a next item.
    pub fn episode_loss(
        &self,
        tape: &mut Tape<'_>,
        user: UserRef,
        windows: &[Subsequence],
        episode: &Episode,
        noise: &EpisodeNoise,
    ) -> Result<(Var, LossReport)> {
        let targets = episode
            .target
            .iter()
            .map(|i| training_target(&windows[*i], self.cfg.feedback))
            .collect::<Result<Vec<_>>>()?;
        let req = ForwardRequest {
            user,
            windows: windows.iter().map(|w| w.items.as_slice()).collect(),
            context: episode.context.clone(),
            target: if self.cfg.np_inference { episode.target.clone() } else { Vec::new() },
            queries: episode.target.clone(),
            latent: LatentMode::TargetSample(noise.z.clone()),
        };
        let fwd = self.forward(tape, &req)?;
        let div = match (fwd.target_latent, fwd.context_latent) {
            (Some(t), Some(c)) => divergence(tape, &self.divergence_term(noise), t, c)?,
            _ => None,
        };
        total_loss(tape, fwd.preds, &targets, div)
    }

    /// Loss and parameter gradients of one episode.
    pub fn episode_grads(
        &self,
        user: UserRef,
        windows: &[Subsequence],
        episode: &Episode,
        noise: &EpisodeNoise,
    ) -> Result<(LossReport, ParamGrads)> {
        let mut tape = Tape::with_params(&self.params);
        let (loss, report) = self.episode_loss(&mut tape, user, windows, episode, noise)?;
        let grads = tape.backward(loss)?;
        let mut pg = self.params.zero_grads();
        grads.accumulate(&mut pg);
        let pad = self.ids.tables.item;
        pg.get_mut(pad)[PAD * self.cfg.d..(PAD + 1) * self.cfg.d].fill(0.0);
        Ok((report, pg))
    }

    /// Scores for one query window given context windows.
    pub fn predict(
        &self,
        user: UserRef,
        context: &[&[usize]],
        query: &[usize],
        latent: LatentMode,
    ) -> Result<Prediction> {
        let mut windows: Vec<&[usize]> = context.to_vec();
        windows.push(query);
        let req = ForwardRequest {
            user,
            windows,
            context: (0..context.len()).collect(),
            target: Vec::new(),
            queries: vec![context.len()],
            latent,
        };
        let mut tape = Tape::with_params(&self.params);
        let fwd = self.forward(&mut tape, &req)?;
        let latent = match (fwd.context_latent, fwd.z) {
            (Some(c), Some(z)) => Some(LatentState {
                mu: tape.value(c.mu).data().to_vec(),
                sigma: tape.value(c.sigma).data().to_vec(),
                z: tape.value(z).data().to_vec(),
                source: LatentSource::Context,
            }),
            _ => None,
        };
        Ok(Prediction {
            y: tape.value(fwd.preds).data().to_vec(),
            latent,
            det_weights: fwd.det_weights.map(|w| tape.value(w).data().to_vec()),
        })
    }
}

/// Single next item as a training target.
pub fn training_target(w: &Subsequence, feedback: FeedbackKind) -> Result<QueryTarget> {
    let next = *w
        .next_items
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("window at {} has no next item", w.start)))?;
    Ok(match (feedback, w.next_rating) {
        (FeedbackKind::Explicit, Some(rating)) => QueryTarget::Rated { item: next, rating },
        (FeedbackKind::Explicit, None) => {
            return Err(Error::InvalidArgument("explicit feedback without a rating".into()))
        }
        (FeedbackKind::Implicit, _) => QueryTarget::Items(vec![next]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(np: bool, attention: bool) -> TrainConfig {
        TrainConfig {
            window: 3,
            d: 4,
            n_f: 2,
            d_r: 4,
            d_z: 3,
            nc_max: 2,
            n_t: 3,
            np_inference: np,
            attention,
            ..TrainConfig::default()
        }
    }

    fn windows() -> Vec<Subsequence> {
        (0..4)
            .map(|s| Subsequence {
                user: 0,
                start: s,
                items: vec![1 + s, 2 + s, 3 + s],
                next_items: vec![4 + s],
                next_rating: None,
            })
            .collect()
    }

    #[test]
    fn ablations_allocate_only_used_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = Idnp::new(&tiny(true, true), 10, 2, &mut rng).unwrap();
        let enc = Idnp::new(&tiny(false, false), 10, 2, &mut rng).unwrap();
        assert!(full.params.id("lat.W_mu").is_some());
        assert!(enc.params.id("lat.W_mu").is_none());
        assert!(enc.params.id("enc.W_Q").is_none());
        assert_eq!(full.params.value(full.ids.w_d).rows(), 4 + 3 + 6);
    }

    #[test]
    fn episode_loss_is_finite_for_every_variant() {
        let ws = windows();
        let ep = Episode {
            user: 0,
            context: vec![1, 3],
            target: vec![0, 1, 2, 3],
        };
        for (np, att) in [(true, true), (true, false), (false, true), (false, false)] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let m = Idnp::new(&tiny(np, att), 10, 2, &mut rng).unwrap();
            let noise = m.draw_noise(&mut rng);
            let (report, grads) = m.episode_grads(UserRef::Trained(1), &ws, &ep, &noise).unwrap();
            assert!(report.total.is_finite() && grads.is_finite());
            assert_eq!(report.per_query.len(), 4);
        }
    }

    #[test]
    fn prediction_covers_catalog() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Idnp::new(&tiny(true, true), 10, 2, &mut rng).unwrap();
        let p = m
            .predict(UserRef::Unseen, &[&[1, 2, 3], &[0, 0, 5]], &[4, 5, 6], LatentMode::ContextMean)
            .unwrap();
        assert_eq!(p.y.len(), 10);
        assert!(p.y.iter().all(|y| *y > 0.0 && *y < 1.0));
        let w = p.det_weights.unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.predict(UserRef::Unseen, &[&[1, 2]], &[4, 5, 6], LatentMode::ContextMean).is_err());
    }
}
