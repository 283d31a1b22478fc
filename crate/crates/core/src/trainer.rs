//! Episodic training with Adam, early stopping and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::corpus::{sample_episode, Dataset, Subsequence};
use crate::error::{Error, Result};
use crate::evalkit::{eval_cases, evaluate, EvalReport, Ranker};
use crate::model::{Idnp, UserRef};
use crate::numerics::{ParamGrads, ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Smallest validation gain that resets the patience counter.
pub const MIN_IMPROVEMENT: f64 = 1e-5;
/// Cutoff monitored for early stopping.
pub const MONITOR_CUTOFF: usize = 10;

/// One Adam update with bias correction; increments `params.step`.
pub fn adam_step(params: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (id, p) in params.iter() {
        if grads.get(id).len() != p.value.len() {
            return Err(Error::dim("adam_step", format!("gradient shape of `{}`", p.name)));
        }
    }
    params.step += 1;
    let t = params.step as i32;
    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads.grads[i];
        let value = p.value.data_mut();
        for j in 0..g.len() {
            p.m1[j] = BETA1 * p.m1[j] + (1.0 - BETA1) * g[j];
            p.m2[j] = BETA2 * p.m2[j] + (1.0 - BETA2) * g[j] * g[j];
            let m_hat = p.m1[j] / c1;
            let v_hat = p.m2[j] / c2;
            value[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `true` when the best value has not improved by [`MIN_IMPROVEMENT`] for
/// `patience` consecutive epochs.
pub fn early_stop_check(history: &[f64], patience: usize) -> bool {
    let Some(first) = history.first() else {
        return false;
    };
    let mut best = *first;
    let mut since = 0;
    for v in &history[1..] {
        if *v >= best + MIN_IMPROVEMENT {
            best = *v;
            since = 0;
        } else {
            since += 1;
        }
    }
    since >= patience
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub nll: f64,
    pub wass: f64,
    pub total: f64,
    pub val_ndcg: f64,
}

/// Training windows of every train user that has at least one.
pub fn training_windows(data: &Dataset, cfg: &TrainConfig) -> Result<Vec<(usize, Vec<Subsequence>)>> {
    let mut out = Vec::new();
    for u in &data.train {
        let w = data.labeled_windows(*u, cfg.window)?;
        if !w.is_empty() {
            out.push((*u, w));
        }
    }
    Ok(out)
}

/// One pass over the shuffled train users; returns mean losses.
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut Idnp,
    users: &[(usize, Vec<Subsequence>)],
    rng: &mut R,
) -> Result<EpochSummary> {
    if users.is_empty() {
        return Err(Error::InvalidArgument("no train user has a labeled window".into()));
    }
    let cfg = model.cfg.clone();
    let mut order: Vec<usize> = (0..users.len()).collect();
    order.shuffle(rng);
    let mut sum = EpochSummary::default();
    for batch in order.chunks(cfg.batch_size) {
        let mut acc = model.params.zero_grads();
        for &i in batch {
            let (user, windows) = &users[i];
            let n_c = rng.random_range(cfg.nc_min..=cfg.nc_max);
            let episode = sample_episode(*user, windows.len(), n_c, cfg.n_t, rng)?;
            let noise = model.draw_noise(rng);
            let (report, grads) = model
                .episode_grads(UserRef::Trained(*user), windows, &episode, &noise)
                .map_err(|e| Error::numeric("train_epoch", format!("episode of user {user}: {e}")))?;
            if !report.total.is_finite() || !grads.is_finite() {
                return Err(Error::numeric(
                    "train_epoch",
                    format!("non-finite loss in the episode of user {user} (context {:?})", episode.context),
                ));
            }
            sum.nll += report.nll;
            sum.wass += report.wass;
            sum.total += report.total;
            acc.add(&grads);
        }
        acc.scale(1.0 / batch.len() as f64);
        adam_step(&mut model.params, &acc, cfg.lr)?;
    }
    let n = users.len() as f64;
    sum.nll /= n;
    sum.wass /= n;
    sum.total /= n;
    Ok(sum)
}

/// Validation report used for early stopping.
pub fn validate(model: &Idnp, data: &Dataset, workers: usize) -> Result<EvalReport> {
    let mut cfg = model.cfg.clone();
    if !cfg.cutoffs.contains(&MONITOR_CUTOFF) {
        cfg.cutoffs.push(MONITOR_CUTOFF);
    }
    let (cases, skipped) = eval_cases(data, &data.validation, &cfg, false);
    let mut report = evaluate(Ranker::Model(model), &cases, &cfg, workers)?;
    report.skipped = skipped;
    Ok(report)
}

/// Mutable training state: model, generator, history and best weights.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Idnp,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    pub history: Vec<EpochSummary>,
    pub best: Option<(u64, ParamStore)>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = Idnp::new(cfg, data.item_count(), data.user_count(), &mut rng)?;
        model.trained_users = data.train.clone();
        Ok(Self {
            model,
            rng,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn val_history(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.val_ndcg).collect()
    }

    pub fn should_stop(&self) -> bool {
        self.epoch as usize >= self.model.cfg.max_epochs || early_stop_check(&self.val_history(), self.model.cfg.patience)
    }

    /// Trains one epoch, validates, and keeps the best weights.
    pub fn step(&mut self, users: &[(usize, Vec<Subsequence>)], data: &Dataset, workers: usize) -> Result<EpochSummary> {
        let mut summary = train_epoch(&mut self.model, users, &mut self.rng)?;
        self.epoch += 1;
        summary.epoch = self.epoch;
        summary.val_ndcg = if data.validation.is_empty() {
            0.0
        } else {
            validate(&self.model, data, workers)?.get(MONITOR_CUTOFF).ndcg
        };
        let best_so_far = self.history.iter().map(|h| h.val_ndcg).fold(f64::NEG_INFINITY, f64::max);
        if self.best.is_none() || summary.val_ndcg >= best_so_far + MIN_IMPROVEMENT {
            self.best = Some((self.epoch, self.model.params.clone()));
        }
        self.history.push(summary);
        Ok(summary)
    }

    /// Model carrying the best validation weights.
    pub fn best_model(&self) -> Idnp {
        let mut m = self.model.clone();
        if let Some((_, p)) = &self.best {
            m.params = p.clone();
        }
        m
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.cfg.clone(),
            epoch: self.epoch,
            params: self.model.params.clone(),
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
            trained_users: self.model.trained_users.clone(),
            best: self.best.clone(),
        }
    }

    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let model = Idnp::from_params(ck.config, ck.params, ck.trained_users)?;
        Ok(Self {
            model,
            rng: ck.rng.restore(),
            epoch: ck.epoch,
            history: ck.history,
            best: ck.best,
        })
    }
}

/// Where [`fit`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct FitOutputs {
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub curve: PathBuf,
}

impl FitOutputs {
    pub fn in_dir(dir: &Path, checkpoint: PathBuf) -> Self {
        let best = checkpoint.with_extension("best.idnp");
        Self {
            checkpoint,
            best_checkpoint: best,
            curve: dir.join("curve.csv"),
        }
    }
}

pub const CURVE_HEADER: &str = "epoch,nll,wass,total,val_ndcg@10";

/// Trains until early stopping or `max_epochs`, writing the curve CSV and
/// checkpoints after every epoch. `progress` sees each epoch summary.
pub fn fit(
    trainer: &mut Trainer,
    data: &Dataset,
    workers: usize,
    out: Option<&FitOutputs>,
    mut progress: impl FnMut(&EpochSummary),
) -> Result<()> {
    let users = training_windows(data, &trainer.model.cfg)?;
    if let Some(o) = out {
        write_curve(&o.curve, &trainer.history)?;
    }
    while !trainer.should_stop() {
        let s = trainer.step(&users, data, workers)?;
        progress(&s);
        if let Some(o) = out {
            append_curve(&o.curve, &s)?;
            let ck = trainer.checkpoint();
            save_checkpoint(&o.checkpoint, &ck)?;
            if trainer.best.as_ref().is_some_and(|(e, _)| *e == trainer.epoch) {
                save_checkpoint(&o.best_checkpoint, &ck.as_best())?;
            }
        }
    }
    Ok(())
}

fn curve_row(s: &EpochSummary) -> String {
    format!("{},{:?},{:?},{:?},{:?}\n", s.epoch, s.nll, s.wass, s.total, s.val_ndcg)
}

fn write_curve(path: &Path, history: &[EpochSummary]) -> Result<()> {
    let mut text = format!("{CURVE_HEADER}\n");
    history.iter().for_each(|s| text.push_str(&curve_row(s)));
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_curve(path: &Path, s: &EpochSummary) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(curve_row(s).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Serializable position of a [`ChaCha8Rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub const MAGIC: &[u8; 4] = b"IDNP";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub params: ParamStore,
    pub rng: RngState,
    pub history: Vec<EpochSummary>,
    pub trained_users: Vec<usize>,
    pub best: Option<(u64, ParamStore)>,
}

impl Checkpoint {
    /// The best weights as the primary parameters, for inference.
    pub fn as_best(&self) -> Self {
        let mut ck = self.clone();
        if let Some((_, p)) = &self.best {
            ck.params = p.clone();
        }
        ck
    }

    pub fn model(&self) -> Result<Idnp> {
        Idnp::from_params(self.config.clone(), self.params.clone(), self.trained_users.clone())
    }

    /// Refuses a configuration that differs from the stored one, listing the
    /// differing keys.
    pub fn check_config(&self, cfg: &TrainConfig) -> Result<()> {
        if cfg.hash() == self.config.hash() {
            return Ok(());
        }
        Err(Error::Refused(format!(
            "checkpoint was written with a different configuration:\n{}",
            config_diff(&self.config.echo(), &cfg.echo())
        )))
    }
}

/// `key: stored -> requested` for every differing line.
pub fn config_diff(stored: &str, requested: &str) -> String {
    let parse = |s: &str| -> Vec<(String, String)> {
        s.lines()
            .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
            .collect()
    };
    let (a, b) = (parse(stored), parse(requested));
    let mut out = String::new();
    for (k, v) in &a {
        let other = b.iter().find(|(k2, _)| k2 == k).map(|(_, v)| v.as_str()).unwrap_or("<absent>");
        if other != v {
            out.push_str(&format!("  {k}: {v} -> {other}\n"));
        }
    }
    out
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn store(&mut self, s: &ParamStore) {
        self.u64(s.step);
        self.u32(s.len() as u32);
        for (_, p) in s.iter() {
            self.bytes(p.name.as_bytes());
            self.u32(p.value.shape().len() as u32);
            p.value.shape().iter().for_each(|d| self.u64(*d as u64));
            self.f64s(p.value.data());
            self.f64s(&p.m1);
            self.f64s(&p.m2);
        }
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.0.len() {
            return Err(Error::Integrity("length prefix past end of file".into()));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("bad length".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len()?;
        Ok(self.take(n)?.to_vec())
    }
    fn store(&mut self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        s.step = self.u64()?;
        let count = self.u32()?;
        for _ in 0..count {
            let name = String::from_utf8(self.bytes()?).map_err(|_| Error::Integrity("parameter name".into()))?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let value = Tensor::new(shape, self.f64s()?).map_err(|e| Error::Integrity(e.to_string()))?;
            let (m1, m2) = (self.f64s()?, self.f64s()?);
            if m1.len() != value.len() || m2.len() != value.len() {
                return Err(Error::Integrity(format!("moment shapes of `{name}`")));
            }
            let id = s.insert(name, value)?;
            let p = s.get_mut(id);
            p.m1 = m1;
            p.m2 = m2;
        }
        Ok(s)
    }
}

fn encode_payload(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(ck.epoch);
    w.0.extend_from_slice(&ck.rng.seed);
    w.u64(ck.rng.stream);
    w.0.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    w.store(&ck.params);
    w.u32(ck.history.len() as u32);
    for h in &ck.history {
        w.u64(h.epoch);
        w.f64s(&[h.nll, h.wass, h.total, h.val_ndcg]);
    }
    w.u64(ck.trained_users.len() as u64);
    ck.trained_users.iter().for_each(|u| w.u64(*u as u64));
    match &ck.best {
        Some((epoch, p)) => {
            w.u32(1);
            w.u64(*epoch);
            w.store(p);
        }
        None => w.u32(0),
    }
    w.0
}

fn decode_payload(bytes: &[u8], config: TrainConfig) -> Result<Checkpoint> {
    let mut r = Reader(bytes);
    let epoch = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let params = r.store()?;
    let n = r.u32()?;
    let mut history = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let e = r.u64()?;
        let v = r.f64s()?;
        if v.len() != 4 {
            return Err(Error::Integrity("history record".into()));
        }
        history.push(EpochSummary {
            epoch: e,
            nll: v[0],
            wass: v[1],
            total: v[2],
            val_ndcg: v[3],
        });
    }
    let users = r.u64()? as usize;
    let trained_users = (0..users).map(|_| r.u64().map(|u| u as usize)).collect::<Result<Vec<_>>>()?;
    let best = match r.u32()? {
        0 => None,
        1 => Some((r.u64()?, r.store()?)),
        _ => return Err(Error::Integrity("best-weights flag".into())),
    };
    if !r.0.is_empty() {
        return Err(Error::Integrity("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        config,
        epoch,
        params,
        rng: RngState { seed, stream, word_pos },
        history,
        trained_users,
        best,
    })
}

/// Serializes `ck`: magic, version, config hash, config text, then a
/// checksummed payload. All integers little-endian.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let payload = encode_payload(ck);
    let echo = ck.config.echo();
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.0.extend_from_slice(&ck.config.hash());
    w.bytes(echo.as_bytes());
    w.0.extend_from_slice(&Sha256::digest(&payload));
    w.bytes(&payload);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Refused(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let echo = String::from_utf8(r.bytes()?).map_err(|_| Error::Integrity("config text".into()))?;
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let payload = r.bytes()?;
    if !r.0.is_empty() {
        return Err(Error::Integrity("trailing bytes".into()));
    }
    if <[u8; 32]>::from(Sha256::digest(&payload)) != digest {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }
    let mut config = TrainConfig::default();
    for line in echo.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Integrity(format!("config line `{line}`")))?;
        if !config.set(k.trim(), v.trim())? {
            return Err(Error::Integrity(format!("unknown config key `{}`", k.trim())));
        }
    }
    if config.hash() != hash {
        return Err(Error::Integrity("config hash does not match config text".into()));
    }
    decode_payload(&payload, config)
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::row(vec![1.0, -2.0, 0.5])).unwrap();
        let mut g = s.zero_grads();
        g.get_mut(id).copy_from_slice(&[0.3, -4.0, 0.0]);
        adam_step(&mut s, &g, 0.01).unwrap();
        let v = s.value(id).data();
        assert!((v[0] - (1.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-12);
        assert!((v[1] - (-2.0 + 0.01 * 4.0 / (4.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(v[2], 0.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_zero_grad_and_zero_lr() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::row(vec![1.0])).unwrap();
        let mut g = s.zero_grads();
        g.get_mut(id)[0] = 2.0;
        adam_step(&mut s, &g, 0.0).unwrap();
        assert_eq!(s.value(id).data(), &[1.0]);
        let m1 = s.get(id).m1[0];
        let zero = s.zero_grads();
        adam_step(&mut s, &zero, 0.1).unwrap();
        assert!((s.get(id).m1[0] - 0.9 * m1).abs() < 1e-15);
        assert_ne!(s.value(id).data(), &[1.0]);
    }

    #[test]
    fn adam_fresh_zero_grad_is_a_no_op() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::row(vec![1.0, -3.0])).unwrap();
        let zero = s.zero_grads();
        adam_step(&mut s, &zero, 0.1).unwrap();
        assert_eq!(s.value(id).data(), &[1.0, -3.0]);
    }

    #[test]
    fn adam_rejects_foreign_grads() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row(vec![1.0])).unwrap();
        let mut other = ParamStore::new();
        other.insert("a", Tensor::row(vec![1.0])).unwrap();
        other.insert("b", Tensor::row(vec![1.0])).unwrap();
        assert!(adam_step(&mut s, &other.zero_grads(), 0.1).is_err());
    }

    #[test]
    fn early_stopping_rules() {
        assert!(!early_stop_check(&[0.1, 0.2, 0.3, 0.4], 2));
        assert!(early_stop_check(&[0.5; 4], 3));
        assert!(!early_stop_check(&[0.5, 0.5, 0.5, 0.6], 3));
        assert!(!early_stop_check(&[], 1));
    }

    #[test]
    fn config_diff_names_keys() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            lr: 0.01,
            ..a.clone()
        };
        let d = config_diff(&a.echo(), &b.echo());
        assert_eq!(d.trim(), "lr: 0.0003 -> 0.01");
    }
}
