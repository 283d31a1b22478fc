//! Interaction logs, user sequences, sliding windows and episodes.

mod dataset;
mod synth;

pub use dataset::Dataset;
pub use synth::{synth_generate, SynthConfig, SynthData};

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense index reserved for padding. Real items are numbered from 1.
pub const PAD: usize = 0;

/// Share of malformed lines tolerated by [`load_interactions`].
pub const MALFORMED_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    /// Normalized to `[0, 1]`; `None` for implicit feedback.
    pub rating: Option<f64>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackKind {
    Explicit,
    Implicit,
}

/// Result of parsing a TSV log.
#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub interactions: Vec<Interaction>,
    /// 1-based line numbers that could not be parsed.
    pub malformed: Vec<usize>,
    /// Largest raw rating seen, before normalization.
    pub rating_max: Option<f64>,
}

impl Loaded {
    pub fn feedback_kind(&self) -> FeedbackKind {
        if self.interactions.iter().any(|i| i.rating.is_some()) {
            FeedbackKind::Explicit
        } else {
            FeedbackKind::Implicit
        }
    }
}

fn parse_line(line: &str) -> Option<(String, String, Option<f64>, u64)> {
    let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
    if fields.len() < 2 || fields.len() > 4 || fields[0].is_empty() || fields[1].is_empty() {
        return None;
    }
    let rating = match fields.get(2) {
        Some(r) if !r.is_empty() => {
            let v: f64 = r.parse().ok()?;
            if !v.is_finite() || v < 0.0 {
                return None;
            }
            Some(v)
        }
        _ => None,
    };
    let ts = match fields.get(3) {
        Some(t) => t.parse().ok()?,
        None => 0,
    };
    Some((fields[0].to_string(), fields[1].to_string(), rating, ts))
}

/// Parses `user\titem[\trating[\ttimestamp]]` lines; `#` lines are comments.
///
/// Ratings are divided by `rating_max`, or by the largest rating in the file
/// when `rating_max` is `None`.
pub fn load_interactions(path: &Path, rating_max: Option<f64>) -> Result<Loaded> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, rating_max)
}

pub fn parse_interactions(text: &str, rating_max: Option<f64>) -> Result<Loaded> {
    let mut out = Loaded::default();
    let mut total = 0usize;
    let mut raw = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        total += 1;
        match parse_line(line) {
            Some(rec) => raw.push(rec),
            None => out.malformed.push(no + 1),
        }
    }
    if total > 0 && out.malformed.len() as f64 > MALFORMED_TOLERANCE * total as f64 {
        return Err(Error::Format {
            count: out.malformed.len(),
            total,
            lines: out.malformed,
        });
    }
    out.rating_max = raw.iter().filter_map(|r| r.2).reduce(f64::max);
    let scale = match rating_max.or(out.rating_max) {
        Some(m) if m > 0.0 => m,
        _ => 1.0,
    };
    for (user, item, rating, timestamp) in raw {
        let rating = rating.map(|r| r / scale);
        if let Some(r) = rating {
            if r > 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "rating {} exceeds the configured maximum {scale}",
                    r * scale
                )));
            }
        }
        out.interactions.push(Interaction {
            user,
            item,
            rating,
            timestamp,
        });
    }
    Ok(out)
}

/// Writes interactions in the same TSV layout [`load_interactions`] reads.
pub fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut buf = Vec::new();
    for i in interactions {
        let line = match i.rating {
            Some(r) => format!("{}\t{}\t{}\t{}\n", i.user, i.item, r, i.timestamp),
            None => format!("{}\t{}\t\t{}\n", i.user, i.item, i.timestamp),
        };
        buf.extend_from_slice(line.as_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Bijection between opaque ids and dense indices.
///
/// Items map into `1..=item_count` ([`PAD`] is reserved); users into
/// `0..user_count`. Indices are assigned in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "CatalogRepr", into = "CatalogRepr")]
pub struct Catalog {
    item_to_index: HashMap<String, usize>,
    index_to_item: Vec<String>,
    user_to_index: HashMap<String, usize>,
    index_to_user: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CatalogRepr {
    items: Vec<String>,
    users: Vec<String>,
}

impl From<CatalogRepr> for Catalog {
    fn from(r: CatalogRepr) -> Self {
        let mut c = Catalog::new();
        r.items.iter().for_each(|i| {
            c.intern_item(i);
        });
        r.users.iter().for_each(|u| {
            c.intern_user(u);
        });
        c
    }
}

impl From<Catalog> for CatalogRepr {
    fn from(c: Catalog) -> Self {
        CatalogRepr {
            items: c.index_to_item,
            users: c.index_to_user,
        }
    }
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn item_count(&self) -> usize {
        self.index_to_item.len()
    }

    pub fn user_count(&self) -> usize {
        self.index_to_user.len()
    }

    pub fn intern_item(&mut self, id: &str) -> usize {
        if let Some(i) = self.item_to_index.get(id) {
            return *i;
        }
        self.index_to_item.push(id.to_string());
        let idx = self.index_to_item.len();
        self.item_to_index.insert(id.to_string(), idx);
        idx
    }

    pub fn intern_user(&mut self, id: &str) -> usize {
        if let Some(i) = self.user_to_index.get(id) {
            return *i;
        }
        let idx = self.index_to_user.len();
        self.index_to_user.push(id.to_string());
        self.user_to_index.insert(id.to_string(), idx);
        idx
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_to_index.get(id).copied()
    }

    pub fn item_id(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.index_to_item.get(i))
            .map(String::as_str)
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_to_index.get(id).copied()
    }

    pub fn user_id(&self, index: usize) -> Option<&str> {
        self.index_to_user.get(index).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
    pub ratings: Option<Vec<f64>>,
    pub feedback: FeedbackKind,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Groups interactions per user, sorts by timestamp (stable, so ties keep
/// input order) and keeps the first `cap` items. Unknown ids are interned
/// into `catalog`. Output is ordered by user index.
pub fn build_sequences(
    interactions: &[Interaction],
    catalog: &mut Catalog,
    cap: usize,
) -> Result<Vec<UserSequence>> {
    if cap == 0 {
        return Err(Error::InvalidArgument("sequence cap must be >= 1".into()));
    }
    let mut per_user: Vec<Vec<(u64, usize, Option<f64>)>> = Vec::new();
    for rec in interactions {
        let u = catalog.intern_user(&rec.user);
        let i = catalog.intern_item(&rec.item);
        if per_user.len() <= u {
            per_user.resize_with(u + 1, Vec::new);
        }
        per_user[u].push((rec.timestamp, i, rec.rating));
    }
    let mut out = Vec::new();
    for (user, mut events) in per_user.into_iter().enumerate() {
        if events.is_empty() {
            continue;
        }
        events.sort_by_key(|e| e.0);
        events.truncate(cap);
        let explicit = events.iter().all(|e| e.2.is_some());
        out.push(UserSequence {
            user,
            items: events.iter().map(|e| e.1).collect(),
            ratings: explicit.then(|| events.iter().map(|e| e.2.unwrap_or(0.0)).collect()),
            feedback: if explicit {
                FeedbackKind::Explicit
            } else {
                FeedbackKind::Implicit
            },
        });
    }
    Ok(out)
}

/// One window of `L` consecutive items plus what follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subsequence {
    pub user: usize,
    pub start: usize,
    /// Exactly `L` item indices, left-padded with [`PAD`] for short users.
    pub items: Vec<usize>,
    /// Up to `k` items following the window.
    pub next_items: Vec<usize>,
    /// Normalized rating of `next_items[0]` for explicit feedback.
    pub next_rating: Option<f64>,
}

/// Sliding windows of width `l` and step 1. Sequences shorter than `l`
/// yield a single left-padded window.
pub fn window(seq: &UserSequence, l: usize, k: usize) -> Result<Vec<Subsequence>> {
    if l == 0 || k == 0 {
        return Err(Error::InvalidArgument("window width and basket length must be >= 1".into()));
    }
    let n = seq.items.len();
    if n == 0 {
        return Err(Error::InvalidArgument(format!("user {} has an empty sequence", seq.user)));
    }
    let rating_at = |pos: usize| {
        seq.ratings
            .as_ref()
            .and_then(|r| r.get(pos))
            .copied()
    };
    if n < l {
        let mut items = vec![PAD; l - n];
        items.extend_from_slice(&seq.items);
        return Ok(vec![Subsequence {
            user: seq.user,
            start: 0,
            items,
            next_items: Vec::new(),
            next_rating: None,
        }]);
    }
    Ok((0..=n - l)
        .map(|start| {
            let end = start + l;
            let next_end = (end + k).min(n);
            Subsequence {
                user: seq.user,
                start,
                items: seq.items[start..end].to_vec(),
                next_items: seq.items[end..next_end].to_vec(),
                next_rating: if end < n { rating_at(end) } else { None },
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `0..user_count` by shuffling and cutting at the rounded ratio
/// boundaries.
pub fn split_users<R: Rng + ?Sized>(
    user_count: usize,
    ratios: [f64; 3],
    rng: &mut R,
) -> Result<UserSplit> {
    if user_count < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 users to split, got {user_count}"
        )));
    }
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let mut users: Vec<usize> = (0..user_count).collect();
    users.shuffle(rng);
    let n = user_count as f64;
    let n_train = (ratios[0] * n).round() as usize;
    let n_val = ((ratios[1] * n).round() as usize).min(user_count - n_train);
    let mut train = users[..n_train].to_vec();
    let mut validation = users[n_train..n_train + n_val].to_vec();
    let mut test = users[n_train + n_val..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(UserSplit {
        train,
        validation,
        test,
    })
}

/// Context and target subsequences of one user, as indices into that
/// user's window list. Every context index also appears in the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub user: usize,
    pub context: Vec<usize>,
    pub target: Vec<usize>,
}

/// Draws `min(n_t, available)` targets without replacement, then
/// `min(n_c, |target|)` context elements from the target.
pub fn sample_episode<R: Rng + ?Sized>(
    user: usize,
    available: usize,
    n_c: usize,
    n_t: usize,
    rng: &mut R,
) -> Result<Episode> {
    if available == 0 {
        return Err(Error::InvalidArgument(format!("user {user} has no subsequences")));
    }
    if n_c == 0 || n_c > n_t {
        return Err(Error::InvalidArgument(format!(
            "episode sizes must satisfy 1 <= N_c <= N_t, got {n_c} and {n_t}"
        )));
    }
    let n_t = n_t.min(available);
    let target = rand::seq::index::sample(rng, available, n_t).into_vec();
    let n_c = n_c.min(target.len());
    let context = rand::seq::index::sample(rng, target.len(), n_c)
        .into_iter()
        .map(|i| target[i])
        .collect();
    Ok(Episode {
        user,
        context,
        target,
    })
}
