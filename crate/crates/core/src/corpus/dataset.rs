use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_sequences, split_users, window, Catalog, FeedbackKind, Interaction, Subsequence, UserSequence, UserSplit};
use crate::error::{Error, Result};

/// Stream of the seeded generator reserved for the user split.
const SPLIT_STREAM: u64 = 1;

/// Sequences, catalog and user split of one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub catalog: Catalog,
    /// Indexed by user index.
    pub sequences: Vec<UserSequence>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub feedback: FeedbackKind,
}

impl Dataset {
    pub fn build(
        interactions: &[Interaction],
        feedback: FeedbackKind,
        cap: usize,
        ratios: [f64; 3],
        seed: u64,
    ) -> Result<Self> {
        let mut catalog = Catalog::new();
        let sequences = build_sequences(interactions, &mut catalog, cap)?;
        if feedback == FeedbackKind::Explicit {
            if let Some(s) = sequences.iter().find(|s| s.ratings.is_none()) {
                return Err(Error::InvalidArgument(format!(
                    "explicit feedback requested but user `{}` has unrated interactions",
                    catalog.user_id(s.user).unwrap_or("?")
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SPLIT_STREAM);
        let UserSplit {
            train,
            validation,
            test,
        } = split_users(sequences.len(), ratios, &mut rng)?;
        Ok(Self {
            catalog,
            sequences,
            train,
            validation,
            test,
            feedback,
        })
    }

    pub fn item_count(&self) -> usize {
        self.catalog.item_count()
    }

    pub fn user_count(&self) -> usize {
        self.sequences.len()
    }

    /// Windows of width `l` that are followed by at least one item.
    pub fn labeled_windows(&self, user: usize, l: usize) -> Result<Vec<Subsequence>> {
        let mut w = window(&self.sequences[user], l, 1)?;
        w.retain(|s| !s.next_items.is_empty());
        Ok(w)
    }

    /// Interaction counts over `users`; entry `c` belongs to item `c + 1`.
    pub fn item_frequency(&self, users: &[usize]) -> Vec<f64> {
        let mut f = vec![0.0; self.item_count()];
        for u in users {
            for i in &self.sequences[*u].items {
                f[i - 1] += 1.0;
            }
        }
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(users: usize, len: usize) -> Vec<Interaction> {
        (0..users)
            .flat_map(|u| {
                (0..len).map(move |t| Interaction {
                    user: format!("u{u}"),
                    item: format!("i{}", (u + t) % 7),
                    rating: None,
                    timestamp: t as u64,
                })
            })
            .collect()
    }

    #[test]
    fn split_partitions_users() {
        let ds = Dataset::build(&toy(40, 8), FeedbackKind::Implicit, 20, [0.8, 0.15, 0.05], 1234).unwrap();
        let mut all: Vec<usize> = ds.train.iter().chain(&ds.validation).chain(&ds.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        assert_eq!((ds.train.len(), ds.validation.len(), ds.test.len()), (32, 6, 2));
        let again = Dataset::build(&toy(40, 8), FeedbackKind::Implicit, 20, [0.8, 0.15, 0.05], 1234).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn labeled_windows_drop_the_last() {
        let ds = Dataset::build(&toy(3, 8), FeedbackKind::Implicit, 20, [0.8, 0.15, 0.05], 1).unwrap();
        assert_eq!(ds.labeled_windows(0, 5).unwrap().len(), 3);
        assert_eq!(ds.item_frequency(&[0]).iter().sum::<f64>(), 8.0);
    }

    #[test]
    fn explicit_needs_ratings() {
        let err = Dataset::build(&toy(3, 8), FeedbackKind::Explicit, 20, [0.8, 0.15, 0.05], 1);
        assert!(err.is_err());
    }
}
