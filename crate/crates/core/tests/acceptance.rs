//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5-8 train whole pipelines and only run with
//! `GDMSR_ACCEPTANCE_FULL=1`. They use a synthetic stand-in unless
//! `GDMSR_CIAO_DIR` holds `interactions.tsv` and `social.tsv`.

mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use gdmsr::config::Config;
use gdmsr::dataset::{Dataset, Provenance, SocialGraph};
use gdmsr::denoiser::{
    apply_ratio, curriculum_update, denoise_ratio, joint_loss_on_tape, removal_count,
    smooth_scores, ConfidenceStore, DenoiseConfig, DenoiserModel, HistoryTable, LossBatch,
    RatioMode, ScorerVariant,
};
use gdmsr::eval::{bench_inference, evaluate_ranking, sample_negatives};
use gdmsr::experiment::{run_experiment, run_on, write_artifacts, ExperimentOutput, MetricRow};
use gdmsr::graphconv::{compute_layer_stack, EmbeddingTables, PropagationGraph};
use gdmsr::recommender::TrainedRecommender;
use gdmsr::synth::SynthConfig;
use gdmsr_numerics::{grad_check, Csr, NumericsError, ParamStore, Tape, Tensor, Var};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    /// `None` when skipped.
    pass: Option<bool>,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass: Some(pass),
        detail,
    }
}

fn skipped(why: &str) -> Outcome {
    Outcome {
        pass: None,
        detail: why.to_string(),
    }
}

fn full_mode() -> bool {
    std::env::var("GDMSR_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

// ---------------------------------------------------------------- 1

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random_store(rng: &mut ChaCha8Rng, tensors: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in tensors {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        s.add(*name, Tensor::new(shape.to_vec(), v).unwrap());
    }
    s
}

fn reduce(tape: &mut Tape<f64>, y: Var) -> Var {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| 0.3 + 0.17 * (i % 7) as f64 - 0.05 * i as f64)
        .collect();
    let w = tape.constant(Tensor::new(shape, w).unwrap());
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var>;

fn p(t: &mut Tape<f64>, s: &ParamStore<f64>, name: &str) -> Var {
    t.param(s, s.id(name).unwrap())
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, ParamStore<f64>, OpFn)> {
    let (m, k, n) = (
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
        rng.gen_range(2..=4),
    );
    let mut out: Vec<(&'static str, ParamStore<f64>, OpFn)> = Vec::new();
    out.push((
        "matmul",
        random_store(rng, &[("a", &[m, k]), ("b", &[k, n])]),
        Box::new(|t, s| {
            let (a, b) = (p(t, s, "a"), p(t, s, "b"));
            let y = t.matmul(a, b).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "matmul-3d",
        random_store(rng, &[("a", &[2, m, k]), ("b", &[k, n]), ("c", &[2, k, n])]),
        Box::new(|t, s| {
            let (a, b, c) = (p(t, s, "a"), p(t, s, "b"), p(t, s, "c"));
            let y = t.matmul(a, b).unwrap();
            let z = t.matmul(a, c).unwrap();
            let y = t.add(y, z).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "matmul-nt",
        random_store(rng, &[("a", &[2, m, k]), ("b", &[2, n, k])]),
        Box::new(|t, s| {
            let (a, b) = (p(t, s, "a"), p(t, s, "b"));
            let y = t.matmul_nt(a, b).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "elementwise",
        random_store(rng, &[("a", &[m, n]), ("b", &[m, n]), ("bias", &[n])]),
        Box::new(|t, s| {
            let (a, b, bias) = (p(t, s, "a"), p(t, s, "b"), p(t, s, "bias"));
            let x = t.mul(a, b).unwrap();
            let x = t.add(x, bias).unwrap();
            let x = t.sub(x, a).unwrap();
            let x = t.scale(x, 0.7);
            let x = t.neg(x);
            let g = t.gelu(x);
            let sg = t.sigmoid(b);
            let sp = t.softplus(a);
            let y = t.add(g, sg).unwrap();
            let y = t.add(y, sp).unwrap();
            reduce(t, y)
        }),
    ));
    let relu_vals: Vec<f64> = (0..m * n)
        .map(|_| {
            let x: f64 = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                -x
            } else {
                x
            }
        })
        .collect();
    let mut relu_store = ParamStore::new();
    relu_store.add("x", Tensor::new(vec![m, n], relu_vals).unwrap());
    out.push((
        "relu",
        relu_store,
        Box::new(|t, s| {
            let x = p(t, s, "x");
            let y = t.relu(x);
            reduce(t, y)
        }),
    ));
    let mask = Arc::new((0..m * n).map(|i| i % n == n - 1).collect::<Vec<bool>>());
    out.push((
        "softmax+masked-fill",
        random_store(rng, &[("a", &[m, n])]),
        Box::new(move |t, s| {
            let a = p(t, s, "a");
            let x = t.masked_fill(a, mask.clone(), -1e9).unwrap();
            let y = t.softmax(x);
            reduce(t, y)
        }),
    ));
    out.push((
        "layer-norm",
        random_store(rng, &[("x", &[m, n]), ("g", &[n]), ("b", &[n])]),
        Box::new(|t, s| {
            let (x, g, b) = (p(t, s, "x"), p(t, s, "g"), p(t, s, "b"));
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            reduce(t, y)
        }),
    ));
    let idx: Arc<Vec<usize>> = Arc::new((0..2 * m + 1).map(|i| (i * 3) % (m + 1)).collect());
    out.push((
        "gather+concat+row-dot+means",
        random_store(rng, &[("a", &[m, n]), ("b", &[1, n])]),
        Box::new(move |t, s| {
            let (a, b) = (p(t, s, "a"), p(t, s, "b"));
            let ab = t.concat_rows(a, b).unwrap();
            let g = t.gather_rows(ab, idx.clone()).unwrap();
            let g2 = t
                .gather_rows(ab, Arc::new(idx.iter().rev().copied().collect()))
                .unwrap();
            let d = t.row_dot(g, g2).unwrap();
            let mr = t.mean_rows(g).unwrap();
            let mr = t.mean(mr);
            let d = reduce(t, d);
            t.add(d, mr).unwrap()
        }),
    ));
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|r| {
            (0..m)
                .filter(move |c| (r + c) % 2 == 0)
                .map(move |c| (r, c))
        })
        .collect();
    let csr = Arc::new(Csr::from_pairs(m, m, &pairs).unwrap());
    let factors: Arc<Vec<f64>> =
        Arc::new((0..m).map(|r| 1.0 / (1.0 + csr.degree(r) as f64)).collect());
    out.push((
        "aggregate+scale-rows",
        random_store(rng, &[("x", &[m, n])]),
        Box::new(move |t, s| {
            let x = p(t, s, "x");
            let y = t.aggregate(csr.clone(), x).unwrap();
            let y = t.scale_rows(y, factors.clone()).unwrap();
            let y = t.add(y, x).unwrap();
            reduce(t, y)
        }),
    ));
    out.push((
        "heads+permute+reshape+dropout",
        random_store(rng, &[("x", &[6, 4])]),
        Box::new(|t, s| {
            let x = p(t, s, "x");
            let x = t.dropout(x, 1.0);
            let h = t.split_heads(x, 2, 3, 2).unwrap();
            let sc = t.matmul_nt(h, h).unwrap();
            let pr = t.softmax(sc);
            let o = t.matmul(pr, h).unwrap();
            let mh = t.merge_heads(o, 2, 2).unwrap();
            let perm: Vec<usize> = (0..24).rev().collect();
            let r = t.permute(mh, Arc::new(perm), vec![4, 6]).unwrap();
            let r = t.reshape(r, vec![24]).unwrap();
            reduce(t, r)
        }),
    ));
    out
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    for _ in 0..5 {
        for (name, mut store, f) in op_cases(&mut rng) {
            let r = grad_check(&mut store, STEP, |t, s| Ok(f(t, s))).unwrap();
            checks += 1;
            if r.max_rel_error > worst.0 || worst.1.is_empty() {
                worst = (r.max_rel_error, name.to_string());
            }
        }
    }
    let (d, g) = common::small();
    let batch = LossBatch {
        triples: vec![(0, 1, 3), (2, 4, 0), (4, 6, 1)],
        positives: vec![(0, 1), (2, 4), (1, 2)],
        negatives: vec![(0, 4), (3, 2)],
    };
    for scorer in ScorerVariant::ALL {
        let cfg = DenoiseConfig {
            history_len: 3,
            dropout: 0.0,
            init_std: 0.5,
            scorer,
            ..Default::default()
        };
        let mut model = DenoiserModel::<f64>::init(
            d.n_users(),
            d.n_items(),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        let graph = PropagationGraph::<f64>::new(&d, &g);
        let hist = HistoryTable::new(&d, cfg.history_len).unwrap();
        let (tables, head) = (model.tables, model.head.clone());
        let r = grad_check(&mut model.store, STEP, |tape, store| {
            joint_loss_on_tape(tape, store, tables, &head, &graph, &hist, &batch, &cfg)
                .map(|v| v.joint)
                .map_err(|e| NumericsError::Invalid {
                    op: "joint_loss",
                    msg: e.to_string(),
                })
        })
        .unwrap();
        checks += 1;
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, format!("joint loss ({})", scorer.name()));
        }
    }
    outcome(
        worst.0 <= TOL,
        format!(
            "{checks} checks, max rel error {:.2e} ({})",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------- 2

fn row_normalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let mut m = m;
    for mut row in m.row_iter_mut() {
        let s: f64 = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    m
}

/// Dense self-loop-mean propagation: returns (E1*, E2*).
fn dense_gcn(
    e1: &DMatrix<f64>,
    e2: &DMatrix<f64>,
    social: &DMatrix<f64>,
    inter: &DMatrix<f64>,
    hops: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (e1.nrows(), e2.nrows());
    let a_s = row_normalize(DMatrix::identity(n, n) + social);
    let deg_u: Vec<f64> = (0..n).map(|u| 1.0 + inter.row(u).sum()).collect();
    let deg_i: Vec<f64> = (0..m).map(|i| 1.0 + inter.column(i).sum()).collect();
    let (mut u, mut it) = (e1.clone(), e2.clone());
    let (mut su, mut si) = (u.clone(), it.clone());
    for _ in 0..hops {
        let soc = &a_s * &u;
        let mut pref = &u + inter * &it;
        for (r, d) in deg_u.iter().enumerate() {
            pref.row_mut(r).scale_mut(1.0 / d);
        }
        let mut items = &it + inter.transpose() * &u;
        for (r, d) in deg_i.iter().enumerate() {
            items.row_mut(r).scale_mut(1.0 / d);
        }
        u = (soc + pref) * 0.5;
        it = items;
        su += &u;
        si += &it;
    }
    let k = (hops + 1) as f64;
    (su / k, si / k)
}

fn to_dense(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(1..=5);
        let m = rng.gen_range(1..=10 - n);
        let hops = rng.gen_range(0..=3);
        let mut train = Vec::new();
        for u in 0..n {
            let first = rng.gen_range(0..m);
            for i in 0..m {
                if i == first || rng.gen_bool(0.3) {
                    train.push((u, i));
                }
            }
        }
        let d = Dataset::from_splits(n, m, train.clone(), vec![], vec![], vec![], vec![]).unwrap();
        let mut pairs = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.gen_bool(0.5) {
                    pairs.push((u, v));
                }
            }
        }
        let mut g = SocialGraph::from_undirected(n, &pairs, Provenance::Observed).unwrap();
        for e in 0..g.n_edges() {
            if rng.gen_bool(0.2) {
                g.set_active(e, false);
            }
        }
        let mut store = ParamStore::<f64>::new();
        let tables = EmbeddingTables::init(&mut store, n, m, 3, 1.0, &mut rng);
        let prop = PropagationGraph::new(&d, &g);
        let stack = compute_layer_stack(&store, tables, &prop, hops).unwrap();

        let mut social = DMatrix::zeros(n, n);
        for (u, v, _, active) in g.edges() {
            if active {
                social[(u, v)] = 1.0;
            }
        }
        let mut inter = DMatrix::zeros(n, m);
        for &(u, i) in &train {
            inter[(u, i)] = 1.0;
        }
        let (eu, ei) = dense_gcn(
            &to_dense(store.get(tables.user)),
            &to_dense(store.get(tables.item)),
            &social,
            &inter,
            hops,
        );
        worst = worst
            .max((eu - to_dense(&stack.user_avg)).abs().max())
            .max((ei - to_dense(&stack.item_avg)).abs().max());
    }
    outcome(
        worst <= 1e-10,
        format!("50 graphs, max |delta| {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let spots = denoise_ratio(4, 5, 1.0, 0.02) == 0.0
        && (denoise_ratio(50, 5, 1.0, 0.02) - 0.02).abs() < 1e-15
        && (denoise_ratio(500, 5, 2.0, 0.02) - 0.08).abs() < 1e-15;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut count_ok = true;
    let mut rank_ok = true;
    let mut checked_users = 0;
    for trial in 0..20 {
        // one star user with a large degree plus random ties
        let n = 700;
        let mut pairs = BTreeSet::new();
        let star = rng.gen_range(5..650);
        for v in 0..star {
            pairs.insert((0, v + 1));
        }
        for _ in 0..1500 {
            let (a, b) = (rng.gen_range(1..n), rng.gen_range(1..n));
            if a != b {
                pairs.insert((a.min(b), a.max(b)));
            }
        }
        let pairs: Vec<_> = pairs.into_iter().collect();
        let g0 = SocialGraph::from_undirected(n, &pairs, Provenance::Observed).unwrap();
        // coarse scores produce ties
        let scores: Vec<f64> = (0..g0.n_edges())
            .map(|_| rng.gen_range(0..20) as f64 / 4.0)
            .collect();
        let cfg = DenoiseConfig {
            gamma: [0.5, 1.0, 2.0][trial % 3],
            ratio_base: rng.gen_range(0.01..0.2),
            ..Default::default()
        };
        let mut g = g0.clone();
        curriculum_update(
            &mut g,
            &ConfidenceStore::from_scores(scores.clone(), 1),
            &cfg,
        )
        .unwrap();
        for u in 0..n {
            let range = g.edge_range(u);
            let deg = range.len();
            let expect = removal_count(
                denoise_ratio(deg, cfg.epsilon, cfg.gamma, cfg.ratio_base).min(0.99),
                deg,
            );
            let inactive: Vec<usize> = range.clone().filter(|&e| !g.is_active(e)).collect();
            count_ok &= inactive.len() == expect;
            if deg < cfg.epsilon {
                count_ok &= inactive.is_empty();
            }
            // every inactive edge ranks below every active one: lower score,
            // or equal score and higher friend index
            for &e in &inactive {
                for a in range.clone().filter(|&a| g.is_active(a)) {
                    let below = scores[e] < scores[a]
                        || (scores[e] == scores[a] && g.target(e) > g.target(a));
                    rank_ok &= below;
                }
            }
            checked_users += 1;
        }
    }
    // an edge removed in one period returns once its smoothed rank improves
    let pairs: Vec<(usize, usize)> = (1..=10).map(|v| (0, v)).collect();
    let g0 = SocialGraph::from_undirected(11, &pairs, Provenance::Observed).unwrap();
    let cfg = DenoiseConfig {
        ratio_mode: RatioMode::Uniform { ratio: 0.2 },
        beta: 0.5,
        ..Default::default()
    };
    let e3 = g0.edge_id(0, 3).unwrap();
    let mut raw1: Vec<f64> = vec![1.0; g0.n_edges()];
    for v in 1..=10 {
        raw1[g0.edge_id(0, v).unwrap()] = v as f64;
    }
    raw1[e3] = -5.0;
    let mut store = ConfidenceStore::new(g0.n_edges());
    smooth_scores(&mut store, &raw1, cfg.beta, 1).unwrap();
    let mut g = g0.clone();
    curriculum_update(&mut g, &store, &cfg).unwrap();
    let removed_first = !g.is_active(e3);
    let mut raw2 = raw1.clone();
    raw2[e3] = 30.0;
    smooth_scores(&mut store, &raw2, cfg.beta, 2).unwrap();
    curriculum_update(&mut g, &store, &cfg).unwrap();
    let returns = removed_first
        && g.is_active(e3)
        && g.edge_range(0).filter(|&e| !g.is_active(e)).count() == 2;
    outcome(
        spots && count_ok && rank_ok && returns,
        format!(
            "spot values {spots}, counts {count_ok}, ranks {rank_ok} over {checked_users} users, edge returns {returns}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut pass_through = true;
    for _ in 0..200 {
        let n = rng.gen_range(1..20);
        let beta: f64 = rng.gen_range(0.0..=1.0);
        let raws: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let mut store = ConfidenceStore::new(n);
        for (k, raw) in raws.iter().enumerate() {
            smooth_scores(&mut store, raw, beta, k + 1).unwrap();
            if k == 0 {
                pass_through &= store.scores() == raw.as_slice();
            }
        }
        for (e, &got) in store.scores().iter().enumerate() {
            // s_3 = beta^2 r_1 + (1 - beta) (beta r_2 + r_3)
            let closed =
                beta.powi(2) * raws[0][e] + (1.0 - beta) * (beta * raws[1][e] + raws[2][e]);
            worst = worst.max((got - closed).abs());
        }
    }
    outcome(
        worst <= 1e-12 && pass_through,
        format!("200 fixtures, max |delta| {worst:.2e}, first period pass-through {pass_through}"),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 6000;
    let mut pairs = BTreeSet::new();
    while pairs.len() < 60_000 {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let pairs: Vec<_> = pairs.into_iter().collect();
    let g = SocialGraph::from_undirected(n, &pairs, Provenance::Observed).unwrap();
    let train: Vec<(usize, usize)> = (0..n).map(|u| (u, u % 50)).collect();
    let d = Dataset::from_splits(n, 50, train, vec![], vec![], vec![], vec![]).unwrap();
    let mut store = ParamStore::<f32>::new();
    EmbeddingTables::init(&mut store, n, 50, 8, 0.1, &mut rng);
    let m = TrainedRecommender::from_params(&d, g.clone(), store, 2).unwrap();
    let scores: Vec<f64> = (0..g.n_edges()).map(|_| rng.gen()).collect();
    let mut pruned = g.clone();
    apply_ratio(&mut pruned, &scores, |_| 0.4).unwrap();
    let reports = bench_inference(&m, &[(0.0, g.clone()), (0.4, pruned)], 1_000_000, 7);
    let (full, cut) = (&reports[0], &reports[1]);
    outcome(
        g.n_edges() >= 100_000 && cut.median_secs < full.median_secs,
        format!(
            "{} edges: median {:.4}s at 0.0 vs {:.4}s at 0.4 ({} active)",
            g.n_edges(),
            full.median_secs,
            cut.median_secs,
            cut.active_edges
        ),
    )
}

// ---------------------------------------------------------------- 10

fn oracle_metrics(scored: &[(usize, f64)], positives: &BTreeSet<usize>) -> (f64, f64, f64) {
    // rank of a candidate = how many candidates beat it under (score desc, item asc)
    let rank = |item: usize, s: f64| {
        scored
            .iter()
            .filter(|&&(j, t)| t > s || (t == s && j < item))
            .count()
    };
    let ranks: Vec<usize> = scored
        .iter()
        .filter(|(i, _)| positives.contains(i))
        .map(|&(i, s)| rank(i, s))
        .collect();
    let n = positives.len() as f64;
    let r1 = ranks.iter().filter(|&&r| r < 1).count() as f64 / n;
    let r3 = ranks.iter().filter(|&&r| r < 3).count() as f64 / n;
    let dcg: f64 = ranks
        .iter()
        .filter(|&&r| r < 3)
        .map(|&r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..positives.len().min(3))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    (r1, r3, dcg / idcg)
}

fn criterion_10() -> Outcome {
    let worked = {
        let (a, b) = (
            gdmsr::eval::recall_ndcg(&[9, 8, 5, 1], &[5].into_iter().collect(), 3).1,
            gdmsr::eval::recall_ndcg(&[5, 8, 9, 1], &[5, 1].into_iter().collect(), 3).1,
        );
        (a - 0.5).abs() < 1e-15 && (b - 0.6131).abs() < 1e-4
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut exact = true;
    let mut users = 0;
    for f in 0..100 {
        let n = rng.gen_range(2..8);
        let m = rng.gen_range(5..40);
        let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for u in 0..n {
            let mut items: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                items.swap(i, rng.gen_range(0..=i));
            }
            let k = rng.gen_range(2..m.min(8));
            train.push((u, items[0]));
            for &i in &items[1..k] {
                match rng.gen_range(0..3) {
                    0 => train.push((u, i)),
                    1 => valid.push((u, i)),
                    _ => test.push((u, i)),
                }
            }
        }
        if test.is_empty() {
            test.push((
                0,
                (0..m)
                    .find(|&i| !train.contains(&(0, i)) && !valid.contains(&(0, i)))
                    .unwrap(),
            ));
        }
        let d = Dataset::from_splits(n, m, train, valid, test, vec![], vec![]).unwrap();
        let g = SocialGraph::empty(n);
        // small integer embeddings make tied scores common
        let mut store = ParamStore::<f32>::new();
        let user: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-2..=2) as f64).collect();
        let item: Vec<f64> = (0..m * 2).map(|_| rng.gen_range(-2..=2) as f64).collect();
        store.add("user_emb", Tensor::from_f64(&[n, 2], &user).unwrap());
        store.add("item_emb", Tensor::from_f64(&[m, 2], &item).unwrap());
        let model = TrainedRecommender::from_params(&d, g, store, 0).unwrap();
        let cfg = gdmsr::eval::EvalConfig {
            n_negatives: rng.gen_range(1..30),
            seed: f,
        };
        let report = evaluate_ranking(&model, &d, &cfg).unwrap();
        let by_user = d.by_user(d.test());
        let mut rec = report.users.iter();
        for (u, pos) in by_user.iter().enumerate() {
            if pos.is_empty() {
                continue;
            }
            let positives: BTreeSet<usize> = pos.iter().copied().collect();
            let (negs, _) = sample_negatives(&d, u, cfg.n_negatives, cfg.seed);
            let scored: Vec<(usize, f64)> = positives
                .iter()
                .chain(negs.iter())
                .map(|&i| {
                    let s: f32 = (0..2)
                        .map(|c| user[u * 2 + c] as f32 * item[i * 2 + c] as f32)
                        .sum();
                    (i, s as f64)
                })
                .collect();
            let (r1, r3, n3) = oracle_metrics(&scored, &positives);
            let got = rec.next().unwrap();
            exact &= got.user == u
                && got.recall_at_1 == r1
                && got.recall_at_3 == r3
                && got.ndcg_at_3 == n3;
            users += 1;
        }
    }
    outcome(
        worked && exact,
        format!("100 fixtures, {users} users exact {exact}, worked values {worked}"),
    )
}

// ---------------------------------------------------------------- 11

fn small_config(kind: &str) -> Config {
    let mut cfg = Config::default().with_seed(5);
    cfg.dataset.synthetic = Some(SynthConfig {
        n_users: 120,
        n_items: 160,
        n_topics: 4,
        seed: 5,
        ..Default::default()
    });
    cfg.dataset.inject_fakes = true;
    cfg.denoiser.epochs = 4;
    cfg.denoiser.curriculum_period = 2;
    cfg.denoiser.history_len = 8;
    cfg.denoiser.lr = 0.01;
    cfg.recommender.epochs = 6;
    cfg.recommender.eval_every = 2;
    cfg.experiment.kind = kind.into();
    cfg.experiment.target_ratio = Some(0.1);
    cfg
}

fn read_dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn criterion_11() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut n_files = 0;
    for kind in ["pipeline", "synthetic_noise"] {
        let cfg = small_config(kind);
        let dirs: Vec<PathBuf> = (0..2)
            .map(|r| tmp.path().join(format!("{kind}_{r}")))
            .collect();
        for dir in &dirs {
            let out = run_experiment(&cfg).unwrap();
            write_artifacts(dir, &cfg, &out).unwrap();
        }
        let (a, b) = (read_dir_bytes(&dirs[0]), read_dir_bytes(&dirs[1]));
        ok &= a == b
            && a.iter().any(|(n, _)| n.ends_with(".tsv"))
            && a.iter().any(|(n, _)| n == "metrics.json");
        n_files += a.len();
    }
    // the control arm equals a direct recommender run
    let mut cfg = small_config("pipeline");
    cfg.experiment.denoise = false;
    let (d, g) = cfg.load_data().unwrap();
    let out = run_on(&cfg, &d, &g).unwrap();
    let direct = gdmsr::recommender::train_recommender(&d, &g, &cfg.recommender).unwrap();
    let direct = evaluate_ranking(&direct, &d, &cfg.eval).unwrap();
    let same = |r: &MetricRow| {
        r.recall_at_1 == Some(direct.recall_at_1)
            && r.recall_at_3 == Some(direct.recall_at_3)
            && r.ndcg_at_3 == Some(direct.ndcg_at_3)
    };
    let control = out.rows.iter().all(same);
    outcome(
        ok && control,
        format!("{n_files} artifacts byte-identical {ok}, disabled-denoising control equals direct run {control}"),
    )
}

// ---------------------------------------------------------------- 5-8

struct Data {
    name: String,
    cfg: Config,
}

/// Real Ciao when `GDMSR_CIAO_DIR` is set, a synthetic stand-in otherwise.
fn base_data() -> Data {
    let mut cfg = Config::default();
    match std::env::var_os("GDMSR_CIAO_DIR") {
        Some(dir) => {
            let dir = PathBuf::from(dir);
            cfg.dataset.interactions = Some(dir.join("interactions.tsv"));
            cfg.dataset.social = Some(dir.join("social.tsv"));
            Data {
                name: "Ciao".into(),
                cfg,
            }
        }
        None => {
            cfg.dataset.synthetic = Some(SynthConfig::default());
            Data {
                name: "synthetic stand-in".into(),
                cfg,
            }
        }
    }
}

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

/// Settings shared by the downstream criteria.
fn downstream(kind: &str) -> (String, Config) {
    let Data { name, mut cfg } = base_data();
    cfg.experiment.kind = kind.into();
    cfg.experiment.seeds = (0..5).collect();
    cfg.denoiser.epochs = env_usize("GDMSR_ACCEPTANCE_EPOCHS", 60);
    cfg.denoiser.curriculum_period = 5;
    cfg.denoiser.lr = 0.01;
    cfg.denoiser.history_len = 20;
    cfg.recommender.lr = 0.005;
    cfg.recommender.epochs = 150;
    cfg.recommender.patience = 6;
    (name, cfg)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn r1(rows: &[&MetricRow]) -> Vec<f64> {
    rows.iter().map(|r| r.recall_at_1.unwrap()).collect()
}

fn run(cfg: &Config) -> ExperimentOutput {
    run_experiment(cfg).unwrap_or_else(|e| panic!("{} failed: {e}", cfg.experiment.kind))
}

fn criterion_5() -> Outcome {
    if !full_mode() {
        return skipped("set GDMSR_ACCEPTANCE_FULL=1");
    }
    let Data { name, mut cfg } = base_data();
    cfg.dataset.inject_fakes = true;
    cfg.experiment.kind = "synthetic_noise".into();
    cfg.experiment.target_ratio = Some(0.125);
    cfg.denoiser.epochs = 200;
    cfg.denoiser.lr = 0.01;
    let out = run(&cfg);
    let gap = |arm: &str| {
        let r = out.arm(arm)[0];
        (r.fake_removal.unwrap(), r.observed_removal.unwrap())
    };
    let (f, o) = gap("gdmsr");
    let (f2, o2) = gap("wo_ad_sc");
    let (f1, o1) = gap("wo_ad");
    let factor = f / o.max(f64::MIN_POSITIVE);
    outcome(
        factor >= 1.3 && f2 - o2 < f - o,
        format!(
            "{name}: gdmsr fake {f:.4} vs observed {o:.4} ({factor:.2}x); w/o ad {f1:.4}/{o1:.4}; w/o ad & sc {f2:.4}/{o2:.4} (gap {:.4} vs {:.4})",
            f2 - o2,
            f - o
        ),
    )
}

fn criterion_6() -> Outcome {
    if !full_mode() {
        return skipped("set GDMSR_ACCEPTANCE_FULL=1");
    }
    let (name, mut cfg) = downstream("pipeline");
    cfg.experiment.target_ratio = Some(0.075);
    let out = run(&cfg);
    let (c, g, r) = (
        r1(&out.arm("control")),
        r1(&out.arm("gdmsr")),
        r1(&out.arm("rule_based")),
    );
    let ratios: Vec<String> = out
        .arm("gdmsr")
        .iter()
        .map(|r| format!("{:.3}", r.removal_ratio))
        .collect();
    let in_band = out
        .arm("gdmsr")
        .iter()
        .all(|r| (0.05..=0.10).contains(&r.removal_ratio));
    let (mc, mg) = (mean(c.iter().copied()), mean(g.iter().copied()));
    let beats_rule = g.iter().zip(&r).filter(|(a, b)| a >= b).count();
    outcome(
        in_band && mg >= mc && beats_rule >= 3,
        format!(
            "{name}: mean R@1 gdmsr {mg:.4} vs full {mc:.4}; >= rule-based in {beats_rule}/5 seeds; removal [{}]",
            ratios.join(", ")
        ),
    )
}

fn criterion_7() -> Outcome {
    if !full_mode() {
        return skipped("set GDMSR_ACCEPTANCE_FULL=1");
    }
    let (name, mut cfg) = downstream("uniform_vs_adaptive");
    cfg.experiment.ratio_grid = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.6];
    let out = run(&cfg);
    let curve = |arm: &str, ratio: f64| {
        mean(
            out.arm(arm)
                .iter()
                .filter(|r| r.param == Some(ratio))
                .map(|r| r.recall_at_1.unwrap()),
        )
    };
    let grid = &cfg.experiment.ratio_grid;
    let base = curve("adaptive", 0.0);
    let not_monotone = grid[1..].iter().any(|&r| curve("adaptive", r) > base);
    let best = grid[1..]
        .iter()
        .copied()
        .max_by(|a, b| curve("uniform", *a).total_cmp(&curve("uniform", *b)))
        .unwrap();
    let at = |arm: &str| -> Vec<f64> {
        out.arm(arm)
            .iter()
            .filter(|r| r.param == Some(best))
            .map(|r| r.recall_at_1.unwrap())
            .collect()
    };
    let wins = at("adaptive")
        .iter()
        .zip(at("uniform"))
        .filter(|(a, u)| **a > *u)
        .count();
    let fmt = |arm: &str| {
        grid.iter()
            .map(|&r| format!("{:.4}", curve(arm, r)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        not_monotone && wins >= 3,
        format!(
            "{name}: adaptive [{}], uniform [{}]; adaptive beats uniform at {best} in {wins}/5 seeds",
            fmt("adaptive"),
            fmt("uniform")
        ),
    )
}

fn criterion_8() -> Outcome {
    if !full_mode() {
        return skipped("set GDMSR_ACCEPTANCE_FULL=1");
    }
    let (name, mut cfg) = downstream("zero_shot");
    cfg.experiment.target_ratio = Some(0.075);
    cfg.experiment.zero_shot_fraction = 0.3;
    let out = run(&cfg);
    let (c, z) = (r1(&out.arm("control")), r1(&out.arm("zero_shot")));
    let g = r1(&out.arm("gdmsr"));
    let wins = z.iter().zip(&c).filter(|(a, b)| a >= b).count();
    outcome(
        wins >= 3,
        format!(
            "{name}: zero-shot >= control in {wins}/5 seeds; mean R@1 zero-shot {:.4}, full-data gdmsr {:.4}, control {:.4}",
            mean(z.iter().copied()),
            mean(g.iter().copied()),
            mean(c.iter().copied())
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient suite", criterion_1),
        ("GCN dense oracle", criterion_2),
        ("curriculum invariants", criterion_3),
        ("smoothing closed form", criterion_4),
        ("synthetic discrimination", criterion_5),
        ("end-to-end directional", criterion_6),
        ("denoising-ratio curve", criterion_7),
        ("zero-shot", criterion_8),
        ("inference benchmark", criterion_9),
        ("metric oracle", criterion_10),
        ("determinism", criterion_11),
    ];
    let only: Vec<usize> = std::env::var("GDMSR_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let status = match o.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        println!(
            "criterion {n:>2} {status} [{name}] {} ({:.1}s)",
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
