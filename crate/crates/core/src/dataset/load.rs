use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance, SocialGraph};
use crate::{Error, Result};

/// One row of the interactions file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub rating: Option<f64>,
}

/// Activity thresholds, applied repeatedly until nothing changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
    pub min_friends: usize,
    /// Rows rated below this are dropped; rows without a rating are kept.
    pub positive_rating: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_user_interactions: 5,
            min_item_interactions: 5,
            min_friends: 2,
            positive_rating: 4.0,
        }
    }
}

/// Per-user random split fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

/// Parses `user<TAB>item[<TAB>rating]` lines.
pub fn parse_interactions(text: &str, path: &Path) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let cols: Vec<&str> = l.split('\t').collect();
        if cols.len() < 2 || cols.len() > 3 || cols[0].is_empty() || cols[1].is_empty() {
            return Err(err(format!(
                "expected user<TAB>item[<TAB>rating], got {l:?}"
            )));
        }
        let rating = match cols.get(2) {
            Some(r) if !r.trim().is_empty() => Some(
                r.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("bad rating {r:?}")))?,
            ),
            _ => None,
        };
        out.push(RawInteraction {
            user: cols[0].to_string(),
            item: cols[1].to_string(),
            rating,
        });
    }
    Ok(out)
}

/// Parses `user<TAB>user` lines.
pub fn parse_social(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let cols: Vec<&str> = l.split('\t').collect();
        if cols.len() != 2 || cols[0].is_empty() || cols[1].is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected user<TAB>user, got {l:?}"),
            });
        }
        out.push((cols[0].to_string(), cols[1].to_string()));
    }
    Ok(out)
}

/// Removes users and items below the activity thresholds until a fixpoint.
///
/// Inputs use arbitrary ids. `social` is undirected; self-loops and
/// duplicates are ignored when counting friends. Returns the surviving
/// interactions (deduplicated, sorted) and the surviving undirected social
/// pairs (normalized `u < v`, sorted).
#[allow(clippy::type_complexity)]
pub fn filter_interactions(
    interactions: &[(usize, usize)],
    social: &[(usize, usize)],
    cfg: &FilterConfig,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut pairs: Vec<(usize, usize)> = interactions.to_vec();
    pairs.sort_unstable();
    pairs.dedup();
    let mut edges: Vec<(usize, usize)> = social
        .iter()
        .filter(|(u, v)| u != v)
        .map(|&(u, v)| (u.min(v), u.max(v)))
        .collect();
    edges.sort_unstable();
    edges.dedup();

    loop {
        let mut user_deg: HashMap<usize, usize> = HashMap::new();
        let mut item_deg: HashMap<usize, usize> = HashMap::new();
        for &(u, i) in &pairs {
            *user_deg.entry(u).or_default() += 1;
            *item_deg.entry(i).or_default() += 1;
        }
        // friendships only count between users that still interact
        edges.retain(|(u, v)| user_deg.contains_key(u) && user_deg.contains_key(v));
        let mut friend_deg: HashMap<usize, usize> = HashMap::new();
        for &(u, v) in &edges {
            *friend_deg.entry(u).or_default() += 1;
            *friend_deg.entry(v).or_default() += 1;
        }
        let user_ok = |u: usize| {
            user_deg.get(&u).copied().unwrap_or(0) >= cfg.min_user_interactions
                && friend_deg.get(&u).copied().unwrap_or(0) >= cfg.min_friends
        };
        let item_ok =
            |i: usize| item_deg.get(&i).copied().unwrap_or(0) >= cfg.min_item_interactions;
        let before = (pairs.len(), edges.len());
        pairs.retain(|&(u, i)| user_ok(u) && item_ok(i));
        edges.retain(|&(u, v)| user_ok(u) && user_ok(v));
        if (pairs.len(), edges.len()) == before {
            // a user can still lose all interactions without failing a
            // threshold when min_user_interactions == 0; drop its edges
            let alive: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
            edges.retain(|(u, v)| alive.contains(u) && alive.contains(v));
            if edges.len() == before.1 {
                return (pairs, edges);
            }
        }
    }
}

/// Splits each user's interactions by the given fractions.
///
type Pairs = Vec<(usize, usize)>;

/// Test and validation counts are `round(n * fraction)`; the rest goes to
/// train. A user that would end with no train interaction gets one back
/// from validation (or test).
pub fn split_interactions(
    by_user: &[Vec<usize>],
    cfg: &SplitConfig,
    seed: u64,
) -> Result<(Pairs, Pairs, Pairs)> {
    let sum = cfg.train + cfg.valid + cfg.test;
    if cfg.train <= 0.0 || cfg.valid < 0.0 || cfg.test < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative, train > 0, and sum to 1 (got {sum})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (u, items) in by_user.iter().enumerate() {
        let mut items = items.clone();
        items.sort_unstable();
        items.shuffle(&mut rng);
        let n = items.len();
        let mut n_test = ((n as f64) * cfg.test).round() as usize;
        let mut n_valid = ((n as f64) * cfg.valid).round() as usize;
        n_test = n_test.min(n);
        n_valid = n_valid.min(n - n_test);
        if n > 0 && n_test + n_valid == n {
            if n_valid > 0 {
                n_valid -= 1;
            } else {
                n_test -= 1;
            }
        }
        let (t, rest) = items.split_at(n_test);
        let (v, tr) = rest.split_at(n_valid);
        test.extend(t.iter().map(|&i| (u, i)));
        valid.extend(v.iter().map(|&i| (u, i)));
        train.extend(tr.iter().map(|&i| (u, i)));
    }
    Ok((train, valid, test))
}

/// Reads, filters, remaps and splits the raw interaction and social files.
pub fn load_dataset(
    interactions_path: &Path,
    social_path: &Path,
    filter: &FilterConfig,
    split: &SplitConfig,
    seed: u64,
) -> Result<(Dataset, SocialGraph)> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let raw = parse_interactions(&read(interactions_path)?, interactions_path)?;
    let social = parse_social(&read(social_path)?, social_path)?;
    build_dataset(&raw, &social, filter, split, seed)
}

/// In-memory counterpart of [`load_dataset`].
pub fn build_dataset(
    raw: &[RawInteraction],
    social: &[(String, String)],
    filter: &FilterConfig,
    split: &SplitConfig,
    seed: u64,
) -> Result<(Dataset, SocialGraph)> {
    // intern in order of first appearance
    let mut users: HashMap<&str, usize> = HashMap::new();
    let mut user_names: Vec<&str> = Vec::new();
    let mut items: HashMap<&str, usize> = HashMap::new();
    let mut item_names: Vec<&str> = Vec::new();
    let mut pairs = Vec::new();
    for r in raw {
        if r.rating.is_some_and(|x| x < filter.positive_rating) {
            continue;
        }
        let u = *users.entry(r.user.as_str()).or_insert_with(|| {
            user_names.push(r.user.as_str());
            user_names.len() - 1
        });
        let i = *items.entry(r.item.as_str()).or_insert_with(|| {
            item_names.push(r.item.as_str());
            item_names.len() - 1
        });
        pairs.push((u, i));
    }
    let edges: Vec<(usize, usize)> = social
        .iter()
        .filter_map(|(a, b)| Some((*users.get(a.as_str())?, *users.get(b.as_str())?)))
        .collect();

    let (pairs, edges) = filter_interactions(&pairs, &edges, filter);
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut user_map = vec![usize::MAX; user_names.len()];
    let mut item_map = vec![usize::MAX; item_names.len()];
    let (mut n_users, mut n_items) = (0, 0);
    let mut kept_users = Vec::new();
    let mut kept_items = Vec::new();
    let mut has_user = vec![false; user_names.len()];
    let mut has_item = vec![false; item_names.len()];
    for &(u, i) in &pairs {
        has_user[u] = true;
        has_item[i] = true;
    }
    for (u, &h) in has_user.iter().enumerate() {
        if h {
            user_map[u] = n_users;
            n_users += 1;
            kept_users.push(user_names[u].to_string());
        }
    }
    for (i, &h) in has_item.iter().enumerate() {
        if h {
            item_map[i] = n_items;
            n_items += 1;
            kept_items.push(item_names[i].to_string());
        }
    }

    let mut by_user = vec![Vec::new(); n_users];
    for &(u, i) in &pairs {
        by_user[user_map[u]].push(item_map[i]);
    }
    let (train, valid, test) = split_interactions(&by_user, split, seed)?;
    let dataset =
        Dataset::from_splits(n_users, n_items, train, valid, test, kept_users, kept_items)?;
    let social_pairs: Vec<(usize, usize)> = edges
        .iter()
        .map(|&(u, v)| (user_map[u], user_map[v]))
        .collect();
    let graph = SocialGraph::from_undirected(n_users, &social_pairs, Provenance::Observed)?;
    Ok((dataset, graph))
}
