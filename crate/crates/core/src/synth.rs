//! Synthetic rating and trust data with planted structure.
//!
//! Users and items carry one of `n_topics` topics. Users mostly rate items
//! of their own topic highly and everything else at random. Friendships are
//! homophilous (same topic) for ordinary users; a set of hub users collects
//! many more ties, most of them to random users. The random ties are the
//! noise a denoiser should find.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::dataset::RawInteraction;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub min_interactions: usize,
    pub mean_interactions: f64,
    /// Chance an interaction falls in the user's own topic.
    pub purity: f64,
    /// Zipf exponent of item popularity within a topic.
    pub zipf: f64,
    pub mean_friends: f64,
    pub hub_fraction: f64,
    /// Degree multiplier of hub users.
    pub hub_multiplier: f64,
    /// Chance an ordinary user's tie goes to a same-topic user.
    pub homophily: f64,
    pub hub_homophily: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 1500,
            n_topics: 12,
            min_interactions: 10,
            mean_interactions: 30.0,
            purity: 0.75,
            zipf: 0.8,
            mean_friends: 10.0,
            hub_fraction: 0.12,
            hub_multiplier: 12.0,
            homophily: 0.8,
            hub_homophily: 0.3,
            seed: 0,
        }
    }
}

/// Generated raw data plus the planted ground truth.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub interactions: Vec<RawInteraction>,
    pub social: Vec<(String, String)>,
    pub user_topic: Vec<usize>,
    /// Undirected ties drawn at random rather than by homophily.
    pub random_ties: BTreeSet<(usize, usize)>,
}

fn uid(u: usize) -> String {
    format!("u{u}")
}

fn iid(i: usize) -> String {
    format!("i{i}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.n_users < 2 || cfg.n_items == 0 || cfg.n_topics == 0 {
        return Err(Error::Config(
            "synthetic data needs >= 2 users, >= 1 item and >= 1 topic".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_topics = cfg.n_topics;
    let user_topic: Vec<usize> = (0..cfg.n_users)
        .map(|_| rng.gen_range(0..n_topics))
        .collect();
    let item_topic: Vec<usize> = (0..cfg.n_items).map(|i| i % n_topics).collect();
    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); n_topics];
    for (i, &t) in item_topic.iter().enumerate() {
        by_topic[t].push(i);
    }
    let pickers: Vec<Option<WeightedIndex<f64>>> = by_topic
        .iter()
        .map(|items| {
            let w: Vec<f64> = (0..items.len())
                .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf))
                .collect();
            WeightedIndex::new(w).ok()
        })
        .collect();
    let extra = Exp::new(1.0 / (cfg.mean_interactions - cfg.min_interactions as f64).max(1.0))
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut interactions = Vec::new();
    for (u, &topic) in user_topic.iter().enumerate() {
        let want = (cfg.min_interactions + extra.sample(&mut rng) as usize).min(cfg.n_items);
        let mut chosen = BTreeSet::new();
        let mut tries = 0;
        while chosen.len() < want && tries < want * 20 {
            tries += 1;
            let own = rng.gen_bool(cfg.purity);
            let t = if own {
                topic
            } else {
                rng.gen_range(0..n_topics)
            };
            let Some(p) = &pickers[t] else { continue };
            let item = by_topic[t][p.sample(&mut rng)];
            if !chosen.insert(item) {
                continue;
            }
            let rating = if item_topic[item] == topic {
                if rng.gen_bool(0.9) {
                    rng.gen_range(4..=5)
                } else {
                    rng.gen_range(2..=3)
                }
            } else {
                rng.gen_range(1..=5)
            };
            interactions.push(RawInteraction {
                user: uid(u),
                item: iid(item),
                rating: Some(rating as f64),
            });
        }
    }

    let mut same_topic: Vec<Vec<usize>> = vec![Vec::new(); n_topics];
    for (u, &t) in user_topic.iter().enumerate() {
        same_topic[t].push(u);
    }
    let degree =
        Exp::new(2.0 / cfg.mean_friends.max(1.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut ties = BTreeSet::new();
    let mut random_ties = BTreeSet::new();
    for u in 0..cfg.n_users {
        let hub = rng.gen_bool(cfg.hub_fraction);
        let mut k = 1.0 + degree.sample(&mut rng);
        if hub {
            k *= cfg.hub_multiplier;
        }
        let homophily = if hub {
            cfg.hub_homophily
        } else {
            cfg.homophily
        };
        for _ in 0..k.round() as usize {
            let peers = &same_topic[user_topic[u]];
            let (v, random) = if rng.gen_bool(homophily) && peers.len() > 1 {
                (peers[rng.gen_range(0..peers.len())], false)
            } else {
                (rng.gen_range(0..cfg.n_users), true)
            };
            if v == u {
                continue;
            }
            let key = (u.min(v), u.max(v));
            if ties.insert(key) && random {
                random_ties.insert(key);
            }
        }
    }
    let social = ties.iter().map(|&(a, b)| (uid(a), uid(b))).collect();
    Ok(SynthData {
        interactions,
        social,
        user_topic,
        random_ties,
    })
}

/// Writes `interactions.tsv` and `social.tsv` into `dir`.
pub fn write_raw(dir: &Path, data: &SynthData) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut s = String::new();
    for r in &data.interactions {
        match r.rating {
            Some(x) => writeln!(s, "{}\t{}\t{}", r.user, r.item, x).unwrap(),
            None => writeln!(s, "{}\t{}", r.user, r.item).unwrap(),
        }
    }
    let p = dir.join("interactions.tsv");
    std::fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
    let mut s = String::new();
    for (a, b) in &data.social {
        writeln!(s, "{a}\t{b}").unwrap();
    }
    let p = dir.join("social.tsv");
    std::fs::write(&p, s).map_err(|e| Error::io(&p, e))
}
