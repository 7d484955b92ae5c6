//! Real-plus-N ranking evaluation and the social-side inference benchmark.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SocialGraph};
use crate::graphconv::LayerStack;
use crate::recommender::TrainedRecommender;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_negatives: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_negatives: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user: usize,
    pub n_positives: usize,
    pub recall_at_1: f64,
    pub recall_at_3: f64,
    pub ndcg_at_3: f64,
    /// Fewer than the requested number of negatives existed.
    pub short_pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub recall_at_1: f64,
    pub recall_at_3: f64,
    pub ndcg_at_3: f64,
    pub n_users: usize,
    pub n_negatives: usize,
    pub negative_seed: u64,
    pub users: Vec<UserRecord>,
}

/// Up to `n` items `u` never interacted with in any split, sampled without
/// replacement from a per-user stream of `seed`. Returned sorted, with a
/// flag set when the pool held fewer than `n` items.
pub fn sample_negatives(d: &Dataset, u: usize, n: usize, seed: u64) -> (Vec<usize>, bool) {
    let pool = d.n_items() - d.seen_count(u);
    if pool <= n {
        let all = (0..d.n_items()).filter(|&i| !d.has_seen(u, i)).collect();
        return (all, pool < n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u as u64);
    let mut out = BTreeSet::new();
    if pool * 2 < d.n_items() {
        // sparse pool: partial Fisher-Yates over the explicit list
        let mut list: Vec<usize> = (0..d.n_items()).filter(|&i| !d.has_seen(u, i)).collect();
        for k in 0..n {
            let j = rng.gen_range(k..list.len());
            list.swap(k, j);
        }
        out.extend(list.into_iter().take(n));
    } else {
        while out.len() < n {
            let i = rng.gen_range(0..d.n_items());
            if !d.has_seen(u, i) {
                out.insert(i);
            }
        }
    }
    (out.into_iter().collect(), false)
}

/// Orders `(item, score)` by score descending, ties (including `-0.0`
/// against `0.0`) by ascending item.
pub fn rank_candidates(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
}

/// `(recall@k, ndcg@k)` of a ranked list against `positives`.
pub fn recall_ndcg(ranked: &[usize], positives: &BTreeSet<usize>, k: usize) -> (f64, f64) {
    if positives.is_empty() {
        return (0.0, 0.0);
    }
    let mut hits = 0;
    let mut dcg = 0.0;
    for (r, item) in ranked.iter().take(k).enumerate() {
        if positives.contains(item) {
            hits += 1;
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(positives.len()))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    (hits as f64 / positives.len() as f64, dcg / idcg)
}

/// Evaluates every user with positives in `split`; `score(u, candidates)`
/// returns one score per candidate.
pub fn evaluate_with<F>(
    d: &Dataset,
    split: &[(usize, usize)],
    n_negatives: usize,
    seed: u64,
    mut score: F,
) -> RankingReport
where
    F: FnMut(usize, &[usize]) -> Vec<f64>,
{
    let by_user = d.by_user(split);
    let mut users = Vec::new();
    for (u, pos) in by_user.iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        let positives: BTreeSet<usize> = pos.iter().copied().collect();
        let (negs, short) = sample_negatives(d, u, n_negatives, seed);
        let mut candidates: Vec<usize> = positives.iter().copied().collect();
        candidates.extend(negs);
        let scores = score(u, &candidates);
        let mut scored: Vec<(usize, f64)> = candidates.into_iter().zip(scores).collect();
        rank_candidates(&mut scored);
        let ranked: Vec<usize> = scored.into_iter().map(|p| p.0).collect();
        let (r1, _) = recall_ndcg(&ranked, &positives, 1);
        let (r3, n3) = recall_ndcg(&ranked, &positives, 3);
        users.push(UserRecord {
            user: u,
            n_positives: positives.len(),
            recall_at_1: r1,
            recall_at_3: r3,
            ndcg_at_3: n3,
            short_pool: short,
        });
    }
    let n = users.len().max(1) as f64;
    RankingReport {
        recall_at_1: users.iter().map(|r| r.recall_at_1).sum::<f64>() / n,
        recall_at_3: users.iter().map(|r| r.recall_at_3).sum::<f64>() / n,
        ndcg_at_3: users.iter().map(|r| r.ndcg_at_3).sum::<f64>() / n,
        n_users: users.len(),
        n_negatives,
        negative_seed: seed,
        users,
    }
}

/// Ranking metrics of a materialized stack on `split`.
pub fn evaluate_stack<T: gdmsr_numerics::Real>(
    stack: &LayerStack<T>,
    d: &Dataset,
    split: &[(usize, usize)],
    n_negatives: usize,
    seed: u64,
) -> RankingReport {
    evaluate_with(d, split, n_negatives, seed, |u, cands| {
        let user = stack.user_avg.row(u);
        cands
            .iter()
            .map(|&i| {
                user.iter()
                    .zip(stack.item_avg.row(i))
                    .map(|(&a, &b)| a * b)
                    .sum::<T>()
                    .to_f64_lossy()
            })
            .collect()
    })
}

/// Test-split metrics of a trained recommender.
pub fn evaluate_ranking(
    m: &TrainedRecommender,
    d: &Dataset,
    cfg: &EvalConfig,
) -> Result<RankingReport> {
    if d.test().is_empty() {
        return Err(Error::Invalid("test split is empty".into()));
    }
    Ok(evaluate_stack(
        m.stack(),
        d,
        d.test(),
        cfg.n_negatives,
        cfg.seed,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub ratio: f64,
    pub active_edges: usize,
    pub workload: usize,
    pub repetitions: usize,
    pub median_secs: f64,
    pub min_secs: f64,
    pub max_secs: f64,
}

/// Times one social-side hop (self plus active friends, averaged) for
/// `workload` user records, cycling over users, for each `(ratio, graph)`.
/// Reports the median of `repetitions` (at least 3) runs.
pub fn bench_inference(
    m: &TrainedRecommender,
    graphs: &[(f64, SocialGraph)],
    workload: usize,
    repetitions: usize,
) -> Vec<BenchReport> {
    let reps = repetitions.max(3);
    let users = &m.stack().users[0];
    let dim = users.row_len();
    let mut out = Vec::with_capacity(graphs.len());
    for (ratio, g) in graphs {
        let social = g.active_csr();
        let mut times = Vec::with_capacity(reps);
        let mut sink = 0.0f32;
        let mut row = vec![0.0f32; dim];
        for _ in 0..reps {
            let start = Instant::now();
            for r in 0..workload {
                let u = r % g.n_users().max(1);
                row.copy_from_slice(users.row(u));
                for &v in social.row(u) {
                    for (a, &b) in row.iter_mut().zip(users.row(v)) {
                        *a += b;
                    }
                }
                let s = 1.0 / (1 + social.degree(u)) as f32;
                sink += row.iter().map(|x| x * s).sum::<f32>();
            }
            times.push(start.elapsed().as_secs_f64());
        }
        std::hint::black_box(sink);
        times.sort_by(f64::total_cmp);
        out.push(BenchReport {
            ratio: *ratio,
            active_edges: g.n_active(),
            workload,
            repetitions: reps,
            median_secs: times[reps / 2],
            min_secs: times[0],
            max_secs: times[reps - 1],
        });
    }
    out
}
