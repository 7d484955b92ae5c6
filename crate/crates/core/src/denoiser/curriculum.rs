use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiseConfig, RatioMode};
use crate::dataset::stats::sorted_intersection_count;
use crate::dataset::{Dataset, Provenance, SocialGraph};
use crate::{Error, Result};

const RATIO_CLAMP: f64 = 0.99;

/// Smoothed confidence per directed edge of the original graph, indexed by
/// edge id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStore {
    scores: Vec<f64>,
    period: usize,
}

impl ConfidenceStore {
    pub fn new(n_edges: usize) -> Self {
        Self {
            scores: vec![0.0; n_edges],
            period: 0,
        }
    }

    /// A store holding `scores` as if set at `period`.
    pub fn from_scores(scores: Vec<f64>, period: usize) -> Self {
        Self { scores, period }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, edge: usize) -> f64 {
        self.scores[edge]
    }

    /// Period of the last update; 0 before the first.
    pub fn period(&self) -> usize {
        self.period
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Period 1 (or an empty store) takes `raw` as is; later periods blend
/// `beta * previous + (1 - beta) * raw`.
pub fn smooth_scores(
    store: &mut ConfidenceStore,
    raw: &[f64],
    beta: f64,
    period: usize,
) -> Result<()> {
    if raw.len() != store.scores.len() {
        return Err(Error::Invalid(format!(
            "raw scores cover {} edges, store has {}",
            raw.len(),
            store.scores.len()
        )));
    }
    if period <= 1 || store.period == 0 {
        store.scores.copy_from_slice(raw);
    } else {
        for (s, &r) in store.scores.iter_mut().zip(raw) {
            *s = beta * *s + (1.0 - beta) * r;
        }
    }
    store.period = period;
    Ok(())
}

/// `0` below `epsilon` friends, else `floor(log10 n)^gamma * r`, clamped to
/// 0.99.
pub fn denoise_ratio(friend_count: usize, epsilon: usize, gamma: f64, r: f64) -> f64 {
    if friend_count < epsilon || friend_count == 0 {
        return 0.0;
    }
    let digits = friend_count.ilog10() as f64;
    (digits.powf(gamma) * r).clamp(0.0, RATIO_CLAMP)
}

/// `floor(ratio * degree)`, robust to products that land a hair below an
/// integer.
pub fn removal_count(ratio: f64, degree: usize) -> usize {
    let n = (ratio * degree as f64 + 1e-9).floor();
    (n.max(0.0) as usize).min(degree)
}

/// Re-selects every user's active friends from scratch: the bottom
/// `removal_count(ratio(|R_u|), |R_u|)` original edges by score become
/// inactive, all others active. Equal scores rank the lower friend index
/// higher. Returns the number of inactive edges.
pub fn apply_ratio(
    g: &mut SocialGraph,
    scores: &[f64],
    ratio: impl Fn(usize) -> f64,
) -> Result<usize> {
    if scores.len() != g.n_edges() {
        return Err(Error::Invalid(format!(
            "{} scores for {} edges",
            scores.len(),
            g.n_edges()
        )));
    }
    let mut flags = vec![true; g.n_edges()];
    let mut removed = 0;
    for u in 0..g.n_users() {
        let range = g.edge_range(u);
        let deg = range.len();
        let drop = removal_count(ratio(deg), deg);
        if drop == 0 {
            continue;
        }
        let mut ranked: Vec<usize> = range.collect();
        // edges within a row are sorted by target, so a stable sort keeps
        // ascending (u, v) among ties
        ranked.sort_by(|&a, &b| (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)));
        for &e in &ranked[deg - drop..] {
            flags[e] = false;
        }
        removed += drop;
    }
    g.set_active_flags(flags)?;
    Ok(removed)
}

/// One curriculum step with the configured ratio.
pub fn curriculum_update(
    g: &mut SocialGraph,
    store: &ConfidenceStore,
    cfg: &DenoiseConfig,
) -> Result<usize> {
    let removed = apply_ratio(g, store.scores(), |deg| cfg.ratio_for(deg))?;
    if !cfg.symmetric {
        return Ok(removed);
    }
    let mut flags = g.active().to_vec();
    for (u, v, _, active) in g.edges() {
        if !active {
            if let Some(r) = g.edge_id(v, u) {
                flags[r] = false;
            }
        }
    }
    g.set_active_flags(flags)?;
    Ok(g.n_edges() - g.n_active())
}

/// Overall share of edges `cfg` removes from `g`, which depends only on
/// the degrees.
pub fn planned_removal(g: &SocialGraph, cfg: &DenoiseConfig) -> f64 {
    if g.n_edges() == 0 {
        return 0.0;
    }
    let removed: usize = (0..g.n_users())
        .map(|u| {
            let deg = g.degree(u);
            removal_count(cfg.ratio_for(deg), deg)
        })
        .sum();
    removed as f64 / g.n_edges() as f64
}

/// Base ratio `R` whose adaptive removal on `g` lands closest to `target`.
/// Ties go to the smaller `R`.
pub fn calibrate_ratio_base(g: &SocialGraph, cfg: &DenoiseConfig, target: f64) -> f64 {
    let at = |r: f64| {
        let c = DenoiseConfig {
            ratio_base: r,
            ratio_mode: RatioMode::Adaptive,
            ..cfg.clone()
        };
        planned_removal(g, &c)
    };
    let mut hi = 1.0f64;
    while at(hi) < target && hi < 1e6 {
        hi *= 2.0;
    }
    bisect(at, hi, target)
}

/// Uniform per-user ratio whose removal on `g` lands closest to `target`.
pub fn calibrate_uniform_ratio(g: &SocialGraph, cfg: &DenoiseConfig, target: f64) -> f64 {
    let at = |r: f64| {
        let c = DenoiseConfig {
            ratio_mode: RatioMode::Uniform { ratio: r },
            ..cfg.clone()
        };
        planned_removal(g, &c)
    };
    bisect(at, cfg.max_ratio, target)
}

fn bisect(at: impl Fn(f64) -> f64, hi: f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, hi);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if at(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let lo = lo.max(f64::MIN_POSITIVE);
    if (at(lo) - target).abs() <= (at(hi) - target).abs() {
        lo
    } else {
        hi
    }
}

/// Outcome of the final denoising pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseSummary {
    pub n_edges: usize,
    pub n_retained: usize,
    pub overall_removal_ratio: f64,
    /// Retained share per provenance, present only for provenances with edges.
    pub per_provenance_retention: BTreeMap<String, f64>,
}

impl DenoiseSummary {
    pub fn of(g: &SocialGraph) -> Self {
        let n_edges = g.n_edges();
        let n_retained = g.n_active();
        let mut per = BTreeMap::new();
        for p in [Provenance::Observed, Provenance::Fake] {
            let (total, kept) = g
                .edges()
                .filter(|e| e.2 == p)
                .fold((0usize, 0usize), |(t, k), e| (t + 1, k + e.3 as usize));
            if total > 0 {
                per.insert(p.as_str().to_string(), kept as f64 / total as f64);
            }
        }
        Self {
            n_edges,
            n_retained,
            overall_removal_ratio: if n_edges == 0 {
                0.0
            } else {
                (n_edges - n_retained) as f64 / n_edges as f64
            },
            per_provenance_retention: per,
        }
    }

    /// Removal ratio of one provenance, if present.
    pub fn removal(&self, p: Provenance) -> Option<f64> {
        self.per_provenance_retention
            .get(p.as_str())
            .map(|r| 1.0 - r)
    }
}

/// Applies the curriculum rule once to the full original edge set. The
/// returned graph keeps every edge; removed ones are inactive.
pub fn denoise_graph(
    g: &SocialGraph,
    store: &ConfidenceStore,
    cfg: &DenoiseConfig,
) -> Result<(SocialGraph, DenoiseSummary)> {
    let mut out = g.clone();
    curriculum_update(&mut out, store, cfg)?;
    let summary = DenoiseSummary::of(&out);
    Ok((out, summary))
}

/// Co-interaction baseline: each user keeps the friends sharing the most
/// train items and drops the bottom `floor(ratio * |R_u|)`.
pub fn rule_based_denoise(d: &Dataset, g: &SocialGraph, ratio: f64) -> Result<SocialGraph> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Invalid(format!(
            "ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let scores: Vec<f64> = g
        .edges()
        .map(|(u, v, _, _)| sorted_intersection_count(d.items_of(u), d.items_of(v)) as f64)
        .collect();
    let mut out = g.clone();
    apply_ratio(&mut out, &scores, |_| ratio)?;
    Ok(out)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    #[serde(flatten)]
    summary: &'a DenoiseSummary,
    config: &'a DenoiseConfig,
    seed: u64,
}

/// Writes retained edges as `u<TAB>v<TAB>score` to `tsv` and the summary
/// with a config echo to `json`.
pub fn write_denoised(
    tsv: &Path,
    json: &Path,
    g: &SocialGraph,
    store: &ConfidenceStore,
    summary: &DenoiseSummary,
    cfg: &DenoiseConfig,
) -> Result<()> {
    let mut s = String::with_capacity(g.n_active() * 24);
    for (e, (u, v, _, active)) in g.edges().enumerate() {
        if active {
            writeln!(s, "{u}\t{v}\t{}", store.score(e)).unwrap();
        }
    }
    std::fs::write(tsv, s).map_err(|e| Error::io(tsv, e))?;
    let file = SummaryFile {
        summary,
        config: cfg,
        seed: cfg.seed,
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(json, text).map_err(|e| Error::io(json, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_spot_values() {
        assert_eq!(denoise_ratio(4, 5, 1.0, 0.02), 0.0);
        assert!((denoise_ratio(50, 5, 1.0, 0.02) - 0.02).abs() < 1e-15);
        assert!((denoise_ratio(500, 5, 2.0, 0.02) - 0.08).abs() < 1e-15);
        assert!((denoise_ratio(1000, 5, 1.0, 0.02) - 0.06).abs() < 1e-15);
        assert_eq!(denoise_ratio(1_000_000, 5, 3.0, 0.5), 0.99);
    }

    #[test]
    fn calibration_hits_reachable_targets() {
        let mut pairs = Vec::new();
        for u in 0..40 {
            for v in u + 1..40 {
                if (u * 7 + v * 3) % 5 < 2 {
                    pairs.push((u, v));
                }
            }
        }
        let g = SocialGraph::from_undirected(40, &pairs, Provenance::Observed).unwrap();
        let cfg = DenoiseConfig::default();
        for target in [0.05, 0.1, 0.3] {
            let r = calibrate_ratio_base(&g, &cfg, target);
            let got = planned_removal(
                &g,
                &DenoiseConfig {
                    ratio_base: r,
                    ..cfg.clone()
                },
            );
            assert!((got - target).abs() < 0.03, "target {target} got {got}");
            let u = calibrate_uniform_ratio(&g, &cfg, target);
            let got = planned_removal(
                &g,
                &DenoiseConfig {
                    ratio_mode: RatioMode::Uniform { ratio: u },
                    ..cfg.clone()
                },
            );
            assert!(
                (got - target).abs() < 0.03,
                "uniform target {target} got {got}"
            );
        }
    }

    #[test]
    fn symmetric_removal_drops_reverse_edges() {
        let pairs: Vec<(usize, usize)> = (1..6).map(|v| (0, v)).collect();
        let g = SocialGraph::from_undirected(6, &pairs, Provenance::Observed).unwrap();
        let scores: Vec<f64> = g.edges().map(|(u, v, _, _)| (u + v) as f64).collect();
        let cfg = DenoiseConfig {
            ratio_mode: crate::denoiser::RatioMode::Uniform { ratio: 0.2 },
            symmetric: true,
            ..Default::default()
        };
        let mut out = g.clone();
        curriculum_update(&mut out, &ConfidenceStore::from_scores(scores, 1), &cfg).unwrap();
        assert!(!out.is_active(out.edge_id(0, 1).unwrap()));
        assert!(!out.is_active(out.edge_id(1, 0).unwrap()));
        assert_eq!(out.n_active(), 8);
    }

    #[test]
    fn smoothing_examples() {
        let mut s = ConfidenceStore::new(1);
        smooth_scores(&mut s, &[0.8], 0.9, 1).unwrap();
        assert_eq!(s.scores(), &[0.8]);
        smooth_scores(&mut s, &[0.4], 0.5, 2).unwrap();
        assert!((s.score(0) - 0.6).abs() < 1e-15);
        smooth_scores(&mut s, &[0.1], 0.0, 3).unwrap();
        assert_eq!(s.score(0), 0.1);
        assert_eq!(s.period(), 3);
        assert!(smooth_scores(&mut s, &[0.1, 0.2], 0.0, 4).is_err());
    }

    #[test]
    fn removal_count_floors() {
        assert_eq!(removal_count(0.2, 10), 2);
        assert_eq!(removal_count(0.29, 10), 2);
        assert_eq!(removal_count(0.0, 10), 0);
        assert_eq!(removal_count(0.7, 10), 7);
    }

    fn star(n: usize) -> SocialGraph {
        let pairs: Vec<(usize, usize)> = (1..=n).map(|v| (0, v)).collect();
        SocialGraph::from_undirected(n + 1, &pairs, Provenance::Observed).unwrap()
    }

    #[test]
    fn lowest_scores_go_and_ties_drop_higher_index() {
        let mut g = star(10);
        // hub's edges are 0..10 (targets 1..=10)
        let mut scores = vec![0.0; g.n_edges()];
        for e in g.edge_range(0) {
            scores[e] = g.target(e) as f64;
        }
        scores[0] = 100.0; // target 1 ranks first
        apply_ratio(&mut g, &scores, |d| if d == 10 { 0.2 } else { 0.0 }).unwrap();
        let off: Vec<usize> = g
            .edge_range(0)
            .filter(|&e| !g.is_active(e))
            .map(|e| g.target(e))
            .collect();
        assert_eq!(off, vec![2, 3]);

        let mut g = star(4);
        let scores = vec![1.0; g.n_edges()];
        apply_ratio(&mut g, &scores, |d| if d == 4 { 0.5 } else { 0.0 }).unwrap();
        let off: Vec<usize> = g
            .edge_range(0)
            .filter(|&e| !g.is_active(e))
            .map(|e| g.target(e))
            .collect();
        assert_eq!(off, vec![3, 4]);
    }

    #[test]
    fn removed_edge_returns_when_rank_improves() {
        let mut g = star(10);
        let cfg = DenoiseConfig {
            epsilon: 5,
            gamma: 1.0,
            ratio_base: 0.1,
            ..Default::default()
        };
        let mut scores: Vec<f64> = (0..g.n_edges()).map(|e| e as f64).collect();
        let low = g.edge_id(0, 1).unwrap();
        scores[low] = -5.0;
        let mut store = ConfidenceStore::new(g.n_edges());
        smooth_scores(&mut store, &scores, 0.5, 1).unwrap();
        curriculum_update(&mut g, &store, &cfg).unwrap();
        assert!(!g.is_active(low));
        scores[low] = 50.0;
        smooth_scores(&mut store, &scores, 0.5, 2).unwrap();
        curriculum_update(&mut g, &store, &cfg).unwrap();
        assert!(g.is_active(low));
        assert_eq!(g.edge_range(0).filter(|&e| !g.is_active(e)).count(), 1);
    }

    #[test]
    fn rule_based_drops_unshared_friend() {
        let d = Dataset::from_splits(
            3,
            4,
            vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 3)],
            vec![],
            vec![],
            vec![],
            vec![],
        )
        .unwrap();
        let g = SocialGraph::from_undirected(3, &[(0, 1), (0, 2)], Provenance::Observed).unwrap();
        let out = rule_based_denoise(&d, &g, 0.5).unwrap();
        assert!(out.is_active(out.edge_id(0, 1).unwrap()));
        assert!(!out.is_active(out.edge_id(0, 2).unwrap()));
        assert_eq!(rule_based_denoise(&d, &g, 0.0).unwrap(), g);
    }

    #[test]
    fn zero_ratio_is_identity() {
        let g = star(6);
        let store = ConfidenceStore::new(g.n_edges());
        let cfg = DenoiseConfig {
            ratio_mode: super::super::RatioMode::Uniform { ratio: 0.0 },
            ..Default::default()
        };
        let (out, summary) = denoise_graph(&g, &store, &cfg).unwrap();
        assert_eq!(out, g);
        assert_eq!(summary.overall_removal_ratio, 0.0);
        assert_eq!(summary.per_provenance_retention["observed"], 1.0);
    }
}
