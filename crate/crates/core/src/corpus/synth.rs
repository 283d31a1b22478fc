use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::corpus::Interaction;
use crate::error::{Error, Result};

/// Genre-structured interaction generator.
///
/// Each user holds a long-term genre distribution drawn from a symmetric
/// Dirichlet and a short-term "current" genre. At every step the current
/// genre is kept with probability `p_stay`, otherwise redrawn from the
/// long-term distribution; the item is then drawn from the current genre
/// with Zipf-like popularity of exponent `item_skew`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub genres: usize,
    /// Symmetric Dirichlet concentration of the per-user genre preference.
    pub concentration: f64,
    pub seq_len: usize,
    pub p_stay: f64,
    pub item_skew: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 60,
            genres: 5,
            concentration: 0.5,
            seq_len: 20,
            p_stay: 0.8,
            item_skew: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub interactions: Vec<Interaction>,
    /// Genre of raw item id `j` (ids are the decimal strings `"0"..`).
    pub item_genre: Vec<usize>,
    /// Long-term genre distribution of raw user `u`.
    pub user_genres: Vec<Vec<f64>>,
}

impl SynthData {
    pub fn genre_of(&self, item_id: &str) -> Option<usize> {
        item_id.parse::<usize>().ok().and_then(|j| self.item_genre.get(j).copied())
    }
}

pub fn synth_generate<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SynthData> {
    if cfg.genres == 0 || cfg.genres > cfg.items {
        return Err(Error::InvalidArgument(format!(
            "genre count {} must be in 1..={}",
            cfg.genres, cfg.items
        )));
    }
    if !(0.0..=1.0).contains(&cfg.p_stay) {
        return Err(Error::InvalidArgument(format!("p_stay {} outside [0, 1]", cfg.p_stay)));
    }
    let gamma = Gamma::new(cfg.concentration, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("concentration: {e}")))?;

    let item_genre: Vec<usize> = (0..cfg.items).map(|j| j * cfg.genres / cfg.items).collect();
    let members: Vec<Vec<usize>> = (0..cfg.genres)
        .map(|g| (0..cfg.items).filter(|j| item_genre[*j] == g).collect())
        .collect();
    let within: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            let w: Vec<f64> = (0..m.len()).map(|r| (r as f64 + 1.0).powf(-cfg.item_skew)).collect();
            WeightedIndex::new(w).expect("non-empty positive weights")
        })
        .collect();

    let mut interactions = Vec::with_capacity(cfg.users * cfg.seq_len);
    let mut user_genres = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let mut pref: Vec<f64> = (0..cfg.genres).map(|_| gamma.sample(rng)).collect();
        let total: f64 = pref.iter().sum();
        if total > 0.0 {
            pref.iter_mut().for_each(|p| *p /= total);
        } else {
            pref = vec![1.0 / cfg.genres as f64; cfg.genres];
        }
        let long_term = WeightedIndex::new(&pref).map_err(|e| Error::numeric("synth", e.to_string()))?;
        let mut current = long_term.sample(rng);
        for t in 0..cfg.seq_len {
            if t > 0 && !rng.random_bool(cfg.p_stay) {
                current = long_term.sample(rng);
            }
            let item = members[current][within[current].sample(rng)];
            interactions.push(Interaction {
                user: format!("u{u}"),
                item: item.to_string(),
                rating: None,
                timestamp: t as u64,
            });
        }
        user_genres.push(pref);
    }
    Ok(SynthData {
        interactions,
        item_genre,
        user_genres,
    })
}
