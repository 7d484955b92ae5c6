//! Interaction data and the user–user social graph.
//!
//! [`load_dataset`] turns raw TSV files into a dense-index [`Dataset`] plus
//! [`SocialGraph`]; [`inject_fake_relations`] and [`co_interaction_stats`]
//! support the synthetic-noise study and the descriptive statistics.

mod load;
mod social;
pub(crate) mod stats;
mod store;

pub use load::{
    build_dataset, filter_interactions, load_dataset, parse_interactions, parse_social,
    split_interactions, FilterConfig, RawInteraction, SplitConfig,
};
pub use social::{Provenance, SocialGraph};
pub use stats::{co_interaction_stats, inject_fake_relations, write_stats_csv};
pub use store::{load_prepared, save_prepared};

use gdmsr_numerics::Csr;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Dense-index interaction data split into train/validation/test.
///
/// Adjacency and popularity are built from the train split only.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n_users: usize,
    n_items: usize,
    train: Vec<(usize, usize)>,
    valid: Vec<(usize, usize)>,
    test: Vec<(usize, usize)>,
    user_items: Csr,
    item_users: Csr,
    seen: Csr,
    popularity: Vec<u32>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
}

impl Dataset {
    /// Validates the splits and builds the derived adjacency.
    ///
    /// Empty id tables are filled with the decimal dense index.
    pub fn from_splits(
        n_users: usize,
        n_items: usize,
        train: Vec<(usize, usize)>,
        valid: Vec<(usize, usize)>,
        test: Vec<(usize, usize)>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        if n_users == 0 || n_items == 0 || train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let user_ids = if user_ids.is_empty() {
            (0..n_users).map(|u| u.to_string()).collect()
        } else {
            user_ids
        };
        let item_ids = if item_ids.is_empty() {
            (0..n_items).map(|i| i.to_string()).collect()
        } else {
            item_ids
        };
        if user_ids.len() != n_users || item_ids.len() != n_items {
            return Err(Error::Invalid("id table size mismatch".into()));
        }
        let mut all: Vec<(usize, usize)> =
            Vec::with_capacity(train.len() + valid.len() + test.len());
        for split in [&train, &valid, &test] {
            for &(u, i) in split.iter() {
                if u >= n_users || i >= n_items {
                    return Err(Error::Invalid(format!("pair ({u}, {i}) out of range")));
                }
            }
            all.extend_from_slice(split);
        }
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != total {
            return Err(Error::Invalid(
                "splits overlap or contain duplicates".into(),
            ));
        }

        let mut sorted_train = train.clone();
        sorted_train.sort_unstable();
        let user_items = Csr::from_pairs(n_users, n_items, &sorted_train)?;
        if let Some(u) = (0..n_users).find(|&u| user_items.degree(u) == 0) {
            return Err(Error::Invalid(format!("user {u} has no train interaction")));
        }
        let mut by_item: Vec<(usize, usize)> = sorted_train.iter().map(|&(u, i)| (i, u)).collect();
        by_item.sort_unstable();
        let item_users = Csr::from_pairs(n_items, n_users, &by_item)?;
        let seen = Csr::from_pairs(n_users, n_items, &all)?;
        let popularity = (0..n_items).map(|i| item_users.degree(i) as u32).collect();

        Ok(Self {
            n_users,
            n_items,
            train,
            valid,
            test,
            user_items,
            item_users,
            seen,
            popularity,
            user_ids,
            item_ids,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn train(&self) -> &[(usize, usize)] {
        &self.train
    }

    pub fn valid(&self) -> &[(usize, usize)] {
        &self.valid
    }

    pub fn test(&self) -> &[(usize, usize)] {
        &self.test
    }

    /// User → train items, ascending item index per row.
    pub fn user_items(&self) -> &Csr {
        &self.user_items
    }

    /// Item → train users, ascending user index per row.
    pub fn item_users(&self) -> &Csr {
        &self.item_users
    }

    /// Train items of `u` (sorted).
    pub fn items_of(&self, u: usize) -> &[usize] {
        self.user_items.row(u)
    }

    /// True if `u` interacted with `i` in any split.
    pub fn has_seen(&self, u: usize, i: usize) -> bool {
        self.seen.row(u).binary_search(&i).is_ok()
    }

    /// Number of distinct items `u` interacted with across all splits.
    pub fn seen_count(&self, u: usize) -> usize {
        self.seen.degree(u)
    }

    pub fn is_train(&self, u: usize, i: usize) -> bool {
        self.user_items.row(u).binary_search(&i).is_ok()
    }

    pub fn popularity(&self) -> &[u32] {
        &self.popularity
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// Groups a split by user: `result[u]` lists u's items in that split.
    pub fn by_user(&self, split: &[(usize, usize)]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for &(u, i) in split {
            out[u].push(i);
        }
        out.iter_mut().for_each(|v| v.sort_unstable());
        out
    }

    /// Keeps `ceil(fraction * |P_u|)` (at least one) train interactions per
    /// user, chosen with `seed`. Validation and test splits are dropped into
    /// the held-out part unchanged so the item universe stays the same.
    pub fn subsample_train(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "interaction_fraction must be in (0, 1], got {fraction}"
            )));
        }
        if fraction >= 1.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        for u in 0..self.n_users {
            let mut items = self.items_of(u).to_vec();
            items.shuffle(&mut rng);
            let keep = ((items.len() as f64 * fraction).ceil() as usize).max(1);
            let mut kept: Vec<usize> = items[..keep].to_vec();
            kept.sort_unstable();
            train.extend(kept.into_iter().map(|i| (u, i)));
        }
        Dataset::from_splits(
            self.n_users,
            self.n_items,
            train,
            self.valid.clone(),
            self.test.clone(),
            self.user_ids.clone(),
            self.item_ids.clone(),
        )
    }
}
