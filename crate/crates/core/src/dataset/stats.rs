use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Provenance, SocialGraph};
use crate::{Error, Result};

/// Adds uniformly sampled non-edges as fake relations (both directions).
///
/// The number of fake undirected pairs equals the number of observed
/// undirected pairs. Existing active flags are kept; fakes start active.
pub fn inject_fake_relations(g: &SocialGraph, seed: u64) -> Result<SocialGraph> {
    let n = g.n_users();
    let observed_undirected = g
        .edges()
        .filter(|&(u, v, p, _)| p == Provenance::Observed && u < v)
        .count();
    let mut existing: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (u, v, _, _) in g.edges() {
        existing.insert((u.min(v), u.max(v)));
    }
    let all_pairs = n * n.saturating_sub(1) / 2;
    let available = all_pairs - existing.len();
    if observed_undirected > available {
        return Err(Error::TooDense {
            needed: observed_undirected,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fakes: BTreeSet<(usize, usize)> = BTreeSet::new();
    if observed_undirected * 2 > available {
        // dense: enumerate the complement and take a random subset
        let mut pool: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|p| !existing.contains(p))
            .collect();
        for k in 0..observed_undirected {
            let j = rng.gen_range(k..pool.len());
            pool.swap(k, j);
        }
        fakes.extend(pool.into_iter().take(observed_undirected));
    } else {
        while fakes.len() < observed_undirected {
            let u = rng.gen_range(0..n);
            let v = rng.gen_range(0..n);
            if u == v {
                continue;
            }
            let p = (u.min(v), u.max(v));
            if !existing.contains(&p) {
                fakes.insert(p);
            }
        }
    }

    let mut edges: Vec<(usize, usize, Provenance)> =
        g.edges().map(|(u, v, p, _)| (u, v, p)).collect();
    let flags: Vec<bool> = g.active().to_vec();
    edges.extend(
        fakes
            .iter()
            .flat_map(|&(u, v)| [(u, v, Provenance::Fake), (v, u, Provenance::Fake)]),
    );
    let mut out = SocialGraph::from_directed(n, edges)?;
    // carry over deactivated originals
    for (e, (u, v, _, _)) in g.edges().enumerate() {
        if !flags[e] {
            let id = out.edge_id(u, v).expect("original edge kept");
            out.set_active(id, false);
        }
    }
    Ok(out)
}

/// For every user with at least one active friend, the fraction of active
/// friends sharing at least one train item with them.
pub fn co_interaction_stats(d: &Dataset, g: &SocialGraph) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for u in 0..g.n_users() {
        let friends: Vec<usize> = g.active_friends(u).collect();
        if friends.is_empty() {
            continue;
        }
        let mine = d.items_of(u);
        let sharing = friends
            .iter()
            .filter(|&&v| sorted_intersect_any(mine, d.items_of(v)))
            .count();
        out.push((u, sharing as f64 / friends.len() as f64));
    }
    out
}

pub(crate) fn sorted_intersect_any(a: &[usize], b: &[usize]) -> bool {
    sorted_intersection_count(a, b) > 0
}

pub(crate) fn sorted_intersection_count(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Writes `user_index,ratio` rows.
pub fn write_stats_csv(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut s = String::from("user_index,ratio\n");
    for (u, r) in rows {
        writeln!(s, "{u},{r}").unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
