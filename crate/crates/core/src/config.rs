//! Training and run configuration, and the flat `key = value` file format.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{FeedbackKind, SynthConfig};
use crate::error::{Error, Result};

/// Which divergence ties the target- and context-conditioned latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Divergence {
    Wasserstein,
    Kl,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WassImpl {
    ClosedForm,
    Sinkhorn,
}

/// How a held-out user's context is assembled at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalContextMode {
    /// The first `L` interactions form both the only context window and the
    /// query.
    SingleWindow,
    /// The last window before the ground truth is the query; up to
    /// `eval_nc` windows from the preceding history form the context.
    ClampedEpisode,
}

/// Embedding used for users that never appeared in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnseenUser {
    Zero,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub window: usize,
    pub d: usize,
    pub n_f: usize,
    pub d_r: usize,
    pub d_z: usize,
    pub heads: usize,
    pub nc_min: usize,
    pub nc_max: usize,
    pub n_t: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub feedback: FeedbackKind,
    pub divergence: Divergence,
    pub wass_impl: WassImpl,
    pub sinkhorn_samples: usize,
    pub sinkhorn_lambda: f64,
    pub sinkhorn_iters: usize,
    pub dilation: bool,
    pub attention: bool,
    pub np_inference: bool,
    pub eval_context_mode: EvalContextMode,
    pub eval_nc: usize,
    pub eval_sample_z: bool,
    pub basket: usize,
    pub cutoffs: Vec<usize>,
    pub exclude_seen: bool,
    pub unseen_user: UnseenUser,
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 5,
            d: 64,
            n_f: 32,
            d_r: 64,
            d_z: 64,
            heads: 1,
            nc_min: 1,
            nc_max: 10,
            n_t: 15,
            batch_size: 32,
            lr: 3e-4,
            max_epochs: 100,
            patience: 10,
            seed: 1234,
            feedback: FeedbackKind::Implicit,
            divergence: Divergence::Wasserstein,
            wass_impl: WassImpl::ClosedForm,
            sinkhorn_samples: 64,
            sinkhorn_lambda: 0.05,
            sinkhorn_iters: 200,
            dilation: true,
            attention: true,
            np_inference: true,
            eval_context_mode: EvalContextMode::SingleWindow,
            eval_nc: 10,
            eval_sample_z: false,
            basket: 1,
            cutoffs: vec![1, 5, 10],
            exclude_seen: true,
            unseen_user: UnseenUser::Zero,
            split: [0.8, 0.15, 0.05],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: key.into(),
                detail: detail.into(),
            })
        };
        if self.window == 0 {
            return bad("window", "must be >= 1");
        }
        for (k, v) in [("d", self.d), ("n_f", self.n_f), ("d_r", self.d_r), ("d_z", self.d_z)] {
            if v == 0 {
                return bad(k, "must be >= 1");
            }
        }
        if self.heads == 0 || self.d_r % self.heads != 0 {
            return bad("heads", "must divide d_r");
        }
        if self.nc_min == 0 || self.nc_min > self.nc_max || self.nc_max > self.n_t {
            return bad("nc_min", "need 1 <= nc_min <= nc_max <= n_t");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.basket == 0 {
            return bad("basket", "must be >= 1");
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return bad("cutoffs", "need at least one positive cutoff");
        }
        if self.eval_nc == 0 {
            return bad("eval_nc", "must be >= 1");
        }
        if !(self.sinkhorn_lambda > 0.0) || self.sinkhorn_iters == 0 || self.sinkhorn_samples == 0 {
            return bad("sinkhorn_lambda", "sinkhorn settings must be positive");
        }
        if self.split.iter().any(|r| *r < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split", "ratios must be nonnegative and sum to 1");
        }
        Ok(())
    }

    /// Dilation gaps of the encoder kernel bank.
    pub fn gaps(&self) -> Vec<usize> {
        if self.dilation {
            vec![0, 1, 2]
        } else {
            vec![0]
        }
    }

    /// Length of one interest feature vector.
    pub fn feature_width(&self) -> usize {
        self.gaps().len() * self.n_f
    }

    pub fn max_cutoff(&self) -> usize {
        self.cutoffs.iter().copied().max().unwrap_or(1)
    }

    /// Fully resolved `key = value` lines, in a fixed order.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of [`TrainConfig::echo`].
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.echo().as_bytes()).into()
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("window", self.window.to_string()),
            ("d", self.d.to_string()),
            ("n_f", self.n_f.to_string()),
            ("d_r", self.d_r.to_string()),
            ("d_z", self.d_z.to_string()),
            ("heads", self.heads.to_string()),
            ("nc_min", self.nc_min.to_string()),
            ("nc_max", self.nc_max.to_string()),
            ("n_t", self.n_t.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("feedback", feedback_name(self.feedback).into()),
            ("divergence", self.divergence.name().into()),
            ("wass_impl", self.wass_impl.name().into()),
            ("sinkhorn_samples", self.sinkhorn_samples.to_string()),
            ("sinkhorn_lambda", format!("{:?}", self.sinkhorn_lambda)),
            ("sinkhorn_iters", self.sinkhorn_iters.to_string()),
            ("dilation", self.dilation.to_string()),
            ("attention", self.attention.to_string()),
            ("np_inference", self.np_inference.to_string()),
            ("eval_context_mode", self.eval_context_mode.name().into()),
            ("eval_nc", self.eval_nc.to_string()),
            ("eval_sample_z", self.eval_sample_z.to_string()),
            ("basket", self.basket.to_string()),
            ("cutoffs", list(&self.cutoffs)),
            ("exclude_seen", self.exclude_seen.to_string()),
            ("unseen_user", self.unseen_user.name().into()),
            (
                "split",
                self.split.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>().join(","),
            ),
        ]
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "window" | "L" => self.window = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "n_f" => self.n_f = parse(key, value)?,
            "d_r" => self.d_r = parse(key, value)?,
            "d_z" => self.d_z = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "nc_min" => self.nc_min = parse(key, value)?,
            "nc_max" => self.nc_max = parse(key, value)?,
            "n_t" => self.n_t = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "feedback" => {
                self.feedback = match value {
                    "explicit" => FeedbackKind::Explicit,
                    "implicit" => FeedbackKind::Implicit,
                    _ => return Err(type_error(key, "explicit|implicit")),
                }
            }
            "divergence" => self.divergence = parse(key, value)?,
            "wass_impl" => self.wass_impl = parse(key, value)?,
            "sinkhorn_samples" => self.sinkhorn_samples = parse(key, value)?,
            "sinkhorn_lambda" => self.sinkhorn_lambda = parse(key, value)?,
            "sinkhorn_iters" => self.sinkhorn_iters = parse(key, value)?,
            "dilation" => self.dilation = parse(key, value)?,
            "attention" => self.attention = parse(key, value)?,
            "np_inference" => self.np_inference = parse(key, value)?,
            "eval_context_mode" => self.eval_context_mode = parse(key, value)?,
            "eval_nc" => self.eval_nc = parse(key, value)?,
            "eval_sample_z" => self.eval_sample_z = parse(key, value)?,
            "basket" | "k" => self.basket = parse(key, value)?,
            "cutoffs" => self.cutoffs = parse_list(key, value)?,
            "exclude_seen" => self.exclude_seen = parse(key, value)?,
            "unseen_user" => self.unseen_user = parse(key, value)?,
            "split" => {
                let v: Vec<f64> = parse_list(key, value)?;
                self.split = v
                    .try_into()
                    .map_err(|_| type_error(key, "three comma-separated ratios"))?;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn feedback_name(f: FeedbackKind) -> &'static str {
    match f {
        FeedbackKind::Explicit => "explicit",
        FeedbackKind::Implicit => "implicit",
    }
}

macro_rules! named_enum {
    ($ty:ty, $expect:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err($expect.to_string()),
                }
            }
        }
    };
}

named_enum!(Divergence, "wasserstein|kl|none",
    Divergence::Wasserstein => "wasserstein",
    Divergence::Kl => "kl",
    Divergence::None => "none",
);
named_enum!(WassImpl, "closed-form|sinkhorn",
    WassImpl::ClosedForm => "closed-form",
    WassImpl::Sinkhorn => "sinkhorn",
);
named_enum!(EvalContextMode, "single-window|clamped-episode",
    EvalContextMode::SingleWindow => "single-window",
    EvalContextMode::ClampedEpisode => "clamped-episode",
);
named_enum!(UnseenUser, "zero|mean",
    UnseenUser::Zero => "zero",
    UnseenUser::Mean => "mean",
);
named_enum!(DatasetPreset, "movielens|gowalla|yelp|amazon-book|custom",
    DatasetPreset::MovieLens => "movielens",
    DatasetPreset::Gowalla => "gowalla",
    DatasetPreset::Yelp => "yelp",
    DatasetPreset::AmazonBook => "amazon-book",
    DatasetPreset::Custom => "custom",
);

fn type_error(key: &str, expected: &str) -> Error {
    Error::Config {
        key: key.into(),
        detail: format!("expected {expected}"),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        detail: format!("cannot parse `{value}` as {}", short_type::<T>()),
    })
}

fn short_type<T>() -> &'static str {
    let full = std::any::type_name::<T>();
    full.rsplit("::").next().unwrap_or(full)
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Named dataset with its sequence cap and feedback kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetPreset {
    MovieLens,
    Gowalla,
    Yelp,
    AmazonBook,
    Custom,
}

impl DatasetPreset {
    /// Per-user interaction cap.
    pub fn cap(self) -> Option<usize> {
        match self {
            DatasetPreset::MovieLens => Some(20),
            DatasetPreset::Gowalla => Some(16),
            DatasetPreset::Yelp => Some(24),
            DatasetPreset::AmazonBook => Some(24),
            DatasetPreset::Custom => None,
        }
    }

    pub fn feedback(self) -> Option<FeedbackKind> {
        match self {
            DatasetPreset::MovieLens | DatasetPreset::AmazonBook => Some(FeedbackKind::Explicit),
            DatasetPreset::Gowalla | DatasetPreset::Yelp => Some(FeedbackKind::Implicit),
            DatasetPreset::Custom => None,
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            DatasetPreset::AmazonBook => 64,
            _ => 32,
        }
    }
}

/// Everything a CLI command needs: training settings plus data locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetPreset,
    pub data: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// `None` means "infer from the data".
    pub feedback: Option<FeedbackKind>,
    pub rating_max: Option<f64>,
    pub cap: usize,
    pub workers: usize,
    pub synth: SynthConfig,
    explicit_keys: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dataset: DatasetPreset::Custom,
            data: None,
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            feedback: None,
            rating_max: None,
            cap: 20,
            workers: 1,
            synth: SynthConfig::default(),
            explicit_keys: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Reads a flat `key = value` file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                detail: format!("line {} is not `key = value`", no + 1),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.explicit_keys.push(key.to_string());
        if self.train.set(key, value)? {
            return Ok(());
        }
        match key {
            "dataset" => self.dataset = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "rating_max" => self.rating_max = Some(parse(key, value)?),
            "cap" => self.cap = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "synth_users" => self.synth.users = parse(key, value)?,
            "synth_items" => self.synth.items = parse(key, value)?,
            "synth_genres" => self.synth.genres = parse(key, value)?,
            "synth_concentration" => self.synth.concentration = parse(key, value)?,
            "synth_len" => self.synth.seq_len = parse(key, value)?,
            "synth_p_stay" => self.synth.p_stay = parse(key, value)?,
            "synth_skew" => self.synth.item_skew = parse(key, value)?,
            _ => {
                self.explicit_keys.pop();
                return Err(Error::Config {
                    key: key.into(),
                    detail: "unknown key".into(),
                });
            }
        }
        if key == "feedback" {
            self.feedback = Some(self.train.feedback);
        }
        Ok(())
    }

    /// Fills preset-derived values the user did not set, then validates.
    pub fn finish(&mut self) -> Result<()> {
        let set = |k: &str| self.explicit_keys.iter().any(|e| e == k);
        if let Some(cap) = self.dataset.cap() {
            if !set("cap") {
                self.cap = cap;
            }
        }
        if !set("batch_size") {
            self.train.batch_size = self.dataset.batch_size();
        }
        if self.explicit_keys.iter().any(|k| k == "feedback") {
            self.feedback = Some(self.train.feedback);
        } else if let Some(f) = self.dataset.feedback() {
            self.feedback = Some(f);
            self.train.feedback = f;
        }
        if self.workers == 0 {
            return Err(Error::Config {
                key: "workers".into(),
                detail: "must be >= 1".into(),
            });
        }
        if self.cap < self.train.window {
            return Err(Error::Config {
                key: "cap".into(),
                detail: format!("cap {} is below window {}", self.cap, self.train.window),
            });
        }
        self.train.validate()
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoint.idnp"))
    }

    /// Resolved configuration, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut s = self.train.echo();
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "dataset = {}", self.dataset.name());
        let _ = writeln!(s, "data = {}", opt(&self.data));
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint_path().display());
        if let Some(r) = self.rating_max {
            let _ = writeln!(s, "rating_max = {r:?}");
        }
        let _ = writeln!(s, "cap = {}", self.cap);
        let _ = writeln!(s, "workers = {}", self.workers);
        let sy = &self.synth;
        let _ = writeln!(s, "synth_users = {}", sy.users);
        let _ = writeln!(s, "synth_items = {}", sy.items);
        let _ = writeln!(s, "synth_genres = {}", sy.genres);
        let _ = writeln!(s, "synth_concentration = {:?}", sy.concentration);
        let _ = writeln!(s, "synth_len = {}", sy.seq_len);
        let _ = writeln!(s, "synth_p_stay = {:?}", sy.p_stay);
        let _ = writeln!(s, "synth_skew = {:?}", sy.item_skew);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.train.lr, 3e-4);
        assert_eq!(cfg.train.seed, 1234);
        assert_eq!(cfg.train.n_t, 15);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn lr_round_trips() {
        let cfg = RunConfig::parse("lr = 0.0003 # adam\n").unwrap();
        assert_eq!(cfg.train.lr, 3e-4);
        let again = RunConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(again.train, cfg.train);
    }

    #[test]
    fn type_errors_name_the_key() {
        match RunConfig::parse("seed = abc").unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "seed"),
            e => panic!("{e:?}"),
        }
        match RunConfig::parse("colour = blue").unwrap_err() {
            Error::Config { key, detail } => {
                assert_eq!(key, "colour");
                assert_eq!(detail, "unknown key");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn presets_fill_cap_and_batch() {
        let ml = RunConfig::parse("dataset = movielens").unwrap();
        assert_eq!(ml.cap, 20);
        assert_eq!(ml.feedback, Some(FeedbackKind::Explicit));
        let gw = RunConfig::parse("dataset = gowalla").unwrap();
        assert_eq!(gw.cap, 16);
        let yelp = RunConfig::parse("dataset = yelp").unwrap();
        assert_eq!(yelp.cap, 24);
        let ab = RunConfig::parse("dataset = amazon-book").unwrap();
        assert_eq!((ab.cap, ab.train.batch_size), (24, 64));
        let custom = RunConfig::parse("dataset = amazon-book\nbatch_size = 8\ncap = 30").unwrap();
        assert_eq!((custom.cap, custom.train.batch_size), (30, 8));
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(RunConfig::parse("nc_min = 4\nnc_max = 2").is_err());
        assert!(RunConfig::parse("lr = 0").is_err());
        assert!(RunConfig::parse("window = 30").is_err());
        assert!(RunConfig::parse("heads = 3").is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.attention = false;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), TrainConfig::default().hash());
    }
}
