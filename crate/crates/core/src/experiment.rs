//! Experiment drivers: each kind trains the arms it compares and collects
//! metric rows, retention curves, benchmark reports and denoised graphs.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{Dataset, Provenance, SocialGraph};
use crate::denoiser::{
    apply_ratio, calibrate_ratio_base, calibrate_uniform_ratio, denoise_graph, rule_based_denoise,
    train_denoiser, write_denoised, ConfidenceStore, DenoiseConfig, DenoiseSummary, RatioMode,
    ScorerVariant, TrainedDenoiser,
};
use crate::eval::{bench_inference, evaluate_ranking, BenchReport, RankingReport};
use crate::recommender::{train_recommender, RecConfig};
use crate::{Error, Result, BUILD};

pub const KINDS: [&str; 7] = [
    "pipeline",
    "alpha_sweep",
    "scorer_ablation",
    "uniform_vs_adaptive",
    "synthetic_noise",
    "zero_shot",
    "bench",
];

/// One arm of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub arm: String,
    /// The swept value, when the arm belongs to a sweep.
    pub param: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_3: Option<f64>,
    pub ndcg_at_3: Option<f64>,
    pub removal_ratio: f64,
    pub observed_removal: Option<f64>,
    pub fake_removal: Option<f64>,
}

/// Retention after one curriculum period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub seed: u64,
    pub arm: String,
    pub epoch: usize,
    pub removal_ratio: f64,
    pub observed_retention: Option<f64>,
    pub fake_retention: Option<f64>,
}

/// A denoised graph worth exporting.
#[derive(Clone, Debug)]
pub struct DenoisedGraph {
    pub name: String,
    pub graph: SocialGraph,
    pub store: ConfidenceStore,
    pub summary: DenoiseSummary,
    pub config: DenoiseConfig,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub kind: String,
    pub rows: Vec<MetricRow>,
    pub curves: Vec<CurvePoint>,
    pub bench: Vec<BenchReport>,
    pub denoised: Vec<DenoisedGraph>,
}

impl ExperimentOutput {
    /// Rows of one arm, in seed order.
    pub fn arm(&self, arm: &str) -> Vec<&MetricRow> {
        self.rows.iter().filter(|r| r.arm == arm).collect()
    }
}

pub fn check_kind(kind: &str) -> Result<()> {
    if KINDS.contains(&kind) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "unknown experiment kind `{kind}`; valid kinds: {}",
            KINDS.join(", ")
        )))
    }
}

/// Loads the configured data and runs the configured experiment.
pub fn run_experiment(cfg: &Config) -> Result<ExperimentOutput> {
    check_kind(&cfg.experiment.kind)?;
    let (d, g) = cfg.load_data()?;
    run_on(cfg, &d, &g)
}

/// Runs the configured experiment on already loaded data.
pub fn run_on(cfg: &Config, d: &Dataset, g: &SocialGraph) -> Result<ExperimentOutput> {
    check_kind(&cfg.experiment.kind)?;
    cfg.denoiser.validate()?;
    cfg.recommender.validate()?;
    let mut r = Runner {
        cfg,
        d,
        g,
        memo: HashMap::new(),
        out: ExperimentOutput {
            kind: cfg.experiment.kind.clone(),
            ..Default::default()
        },
    };
    for seed in cfg.seeds() {
        match cfg.experiment.kind.as_str() {
            "pipeline" => r.pipeline(seed)?,
            "alpha_sweep" => r.alpha_sweep(seed)?,
            "scorer_ablation" => r.scorer_ablation(seed)?,
            "uniform_vs_adaptive" => r.uniform_vs_adaptive(seed)?,
            "synthetic_noise" => r.synthetic_noise(seed)?,
            "zero_shot" => r.zero_shot(seed)?,
            "bench" => {
                r.bench(seed)?;
                break;
            }
            _ => unreachable!("kind checked above"),
        }
    }
    Ok(r.out)
}

struct Runner<'a> {
    cfg: &'a Config,
    d: &'a Dataset,
    g: &'a SocialGraph,
    memo: HashMap<(u64, Vec<bool>), RankingReport>,
    out: ExperimentOutput,
}

impl Runner<'_> {
    fn rec_config(&self, seed: u64) -> RecConfig {
        RecConfig {
            seed,
            ..self.cfg.recommender.clone()
        }
    }

    /// Test metrics of a recommender trained on the active edges of
    /// `graph`. Identical graphs under one seed train once.
    fn recommend(&mut self, graph: &SocialGraph, seed: u64) -> Result<RankingReport> {
        let key = (seed, graph.active().to_vec());
        if let Some(r) = self.memo.get(&key) {
            return Ok(r.clone());
        }
        let m = train_recommender(self.d, graph, &self.rec_config(seed))?;
        let report = evaluate_ranking(&m, self.d, &self.cfg.eval)?;
        self.memo.insert(key, report.clone());
        Ok(report)
    }

    /// Denoiser config for `seed`, with `R` calibrated when a target ratio
    /// is set.
    fn denoise_config(&self, seed: u64) -> DenoiseConfig {
        let mut c = DenoiseConfig {
            seed,
            ..self.cfg.denoiser.clone()
        };
        if let (Some(t), RatioMode::Adaptive) = (self.cfg.experiment.target_ratio, &c.ratio_mode) {
            c.ratio_base = calibrate_ratio_base(self.g, &c, t);
        }
        c
    }

    fn train(
        &self,
        c: &DenoiseConfig,
    ) -> Result<(TrainedDenoiser<f32>, SocialGraph, DenoiseSummary)> {
        let t = train_denoiser::<f32>(self.d, self.g, c)?;
        let (graph, summary) = denoise_graph(self.g, &t.store, c)?;
        Ok((t, graph, summary))
    }

    fn push(
        &mut self,
        seed: u64,
        arm: &str,
        param: Option<f64>,
        report: Option<&RankingReport>,
        g: &SocialGraph,
    ) {
        let s = DenoiseSummary::of(g);
        self.out.rows.push(MetricRow {
            seed,
            arm: arm.to_string(),
            param,
            recall_at_1: report.map(|r| r.recall_at_1),
            recall_at_3: report.map(|r| r.recall_at_3),
            ndcg_at_3: report.map(|r| r.ndcg_at_3),
            removal_ratio: s.overall_removal_ratio,
            observed_removal: s.removal(Provenance::Observed),
            fake_removal: s.removal(Provenance::Fake),
        });
    }

    fn keep(
        &mut self,
        name: String,
        graph: &SocialGraph,
        t: &TrainedDenoiser<f32>,
        c: &DenoiseConfig,
    ) {
        self.out.denoised.push(DenoisedGraph {
            name,
            graph: graph.clone(),
            store: t.store.clone(),
            summary: DenoiseSummary::of(graph),
            config: c.clone(),
        });
    }

    fn control(&mut self, seed: u64) -> Result<()> {
        let g = self.g;
        let r = self.recommend(g, seed)?;
        self.push(seed, "control", None, Some(&r), g);
        Ok(())
    }

    /// Trains and evaluates one denoised arm.
    fn denoised_arm(
        &mut self,
        seed: u64,
        arm: &str,
        param: Option<f64>,
        c: &DenoiseConfig,
    ) -> Result<SocialGraph> {
        let (t, graph, _) = self.train(c)?;
        let r = self.recommend(&graph, seed)?;
        self.push(seed, arm, param, Some(&r), &graph);
        self.keep(format!("{arm}_seed{seed}"), &graph, &t, c);
        Ok(graph)
    }

    fn pipeline(&mut self, seed: u64) -> Result<()> {
        self.control(seed)?;
        if !self.cfg.experiment.denoise {
            let g = self.g;
            let r = self.recommend(g, seed)?;
            self.push(seed, "gdmsr", None, Some(&r), g);
            return Ok(());
        }
        let c = self.denoise_config(seed);
        let graph = self.denoised_arm(seed, "gdmsr", None, &c)?;
        let target = DenoiseSummary::of(&graph).overall_removal_ratio;
        let ratio = calibrate_uniform_ratio(self.g, &c, target);
        let rule = rule_based_denoise(self.d, self.g, ratio)?;
        let r = self.recommend(&rule, seed)?;
        self.push(seed, "rule_based", Some(ratio), Some(&r), &rule);
        Ok(())
    }

    fn alpha_sweep(&mut self, seed: u64) -> Result<()> {
        self.control(seed)?;
        for &alpha in &self.cfg.experiment.alpha_grid {
            let c = DenoiseConfig {
                alpha,
                ..self.denoise_config(seed)
            };
            self.denoised_arm(seed, &format!("alpha_{alpha}"), Some(alpha), &c)?;
        }
        Ok(())
    }

    fn scorer_ablation(&mut self, seed: u64) -> Result<()> {
        self.control(seed)?;
        for scorer in ScorerVariant::ALL {
            let c = DenoiseConfig {
                scorer,
                ..self.denoise_config(seed)
            };
            c.validate()?;
            self.denoised_arm(seed, scorer.name(), None, &c)?;
        }
        Ok(())
    }

    /// One trained denoiser per seed; each grid ratio is applied uniformly
    /// and, at the overall ratio that achieves, adaptively.
    fn uniform_vs_adaptive(&mut self, seed: u64) -> Result<()> {
        self.control(seed)?;
        let c = self.denoise_config(seed);
        let (t, _, _) = self.train(&c)?;
        for &ratio in &self.cfg.experiment.ratio_grid {
            let mut uniform = self.g.clone();
            apply_ratio(&mut uniform, t.store.scores(), |_| ratio)?;
            let achieved = DenoiseSummary::of(&uniform).overall_removal_ratio;
            let mut adaptive = self.g.clone();
            if achieved > 0.0 {
                let ac = DenoiseConfig {
                    ratio_base: calibrate_ratio_base(self.g, &c, achieved),
                    ratio_mode: RatioMode::Adaptive,
                    ..c.clone()
                };
                apply_ratio(&mut adaptive, t.store.scores(), |deg| ac.ratio_for(deg))?;
            }
            let ru = self.recommend(&uniform, seed)?;
            self.push(seed, "uniform", Some(ratio), Some(&ru), &uniform);
            let ra = self.recommend(&adaptive, seed)?;
            self.push(seed, "adaptive", Some(ratio), Some(&ra), &adaptive);
        }
        Ok(())
    }

    /// GDMSR against "w/o ad" (uniform ratio) and "w/o ad & sc" (uniform
    /// ratio, no curriculum), the uniform ratio matched to GDMSR's overall
    /// removal.
    fn synthetic_noise(&mut self, seed: u64) -> Result<()> {
        if self.g.count(Provenance::Fake) == 0 {
            return Err(Error::Config(
                "synthetic_noise needs injected fakes (dataset.inject_fakes)".into(),
            ));
        }
        let c = self.denoise_config(seed);
        let (t, graph, summary) = self.train(&c)?;
        self.curve(seed, "gdmsr", &t);
        self.push(seed, "gdmsr", None, None, &graph);
        self.keep(format!("gdmsr_seed{seed}"), &graph, &t, &c);
        let ratio = calibrate_uniform_ratio(self.g, &c, summary.overall_removal_ratio);
        for (arm, curriculum) in [("wo_ad", true), ("wo_ad_sc", false)] {
            let vc = DenoiseConfig {
                ratio_mode: RatioMode::Uniform { ratio },
                curriculum,
                ..c.clone()
            };
            let (t, graph, _) = self.train(&vc)?;
            self.curve(seed, arm, &t);
            self.push(seed, arm, Some(ratio), None, &graph);
        }
        Ok(())
    }

    fn curve(&mut self, seed: u64, arm: &str, t: &TrainedDenoiser<f32>) {
        for e in &t.log {
            if let Some(s) = &e.summary {
                self.out.curves.push(CurvePoint {
                    seed,
                    arm: arm.to_string(),
                    epoch: e.epoch,
                    removal_ratio: s.overall_removal_ratio,
                    observed_retention: s
                        .per_provenance_retention
                        .get(Provenance::Observed.as_str())
                        .copied(),
                    fake_retention: s
                        .per_provenance_retention
                        .get(Provenance::Fake.as_str())
                        .copied(),
                });
            }
        }
    }

    fn zero_shot(&mut self, seed: u64) -> Result<()> {
        self.control(seed)?;
        let c = self.denoise_config(seed);
        self.denoised_arm(seed, "gdmsr", Some(1.0), &c)?;
        let fraction = self.cfg.experiment.zero_shot_fraction;
        let zc = DenoiseConfig {
            interaction_fraction: fraction,
            ..c
        };
        self.denoised_arm(seed, "zero_shot", Some(fraction), &zc)?;
        Ok(())
    }

    /// Times social propagation on uniformly denoised graphs at each grid
    /// ratio, using the trained denoiser's scores.
    fn bench(&mut self, seed: u64) -> Result<()> {
        let m = train_recommender(self.d, self.g, &self.rec_config(seed))?;
        let c = self.denoise_config(seed);
        let (t, _, _) = self.train(&c)?;
        let mut graphs = Vec::new();
        for &ratio in &self.cfg.experiment.ratio_grid {
            let mut g = self.g.clone();
            apply_ratio(&mut g, t.store.scores(), |_| ratio)?;
            graphs.push((ratio, g));
        }
        let e = &self.cfg.experiment;
        self.out.bench = bench_inference(&m, &graphs, e.bench_workload, e.bench_repetitions);
        Ok(())
    }
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    kind: &'a str,
    git_describe: &'a str,
    seed: u64,
    seeds: Vec<u64>,
    metrics: &'a [MetricRow],
    curves: &'a [CurvePoint],
    bench: &'a [BenchReport],
    denoised: Vec<(&'a str, &'a DenoiseSummary)>,
    config: &'a Config,
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `metrics.json`, `metrics.csv`, `curves.csv`, `bench.csv` and one
/// `<name>.tsv` / `<name>.json` pair per denoised graph into `dir`.
pub fn write_artifacts(dir: &Path, cfg: &Config, out: &ExperimentOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = MetricsFile {
        kind: &out.kind,
        git_describe: BUILD,
        seed: cfg.seed,
        seeds: cfg.seeds(),
        metrics: &out.rows,
        curves: &out.curves,
        bench: &out.bench,
        denoised: out
            .denoised
            .iter()
            .map(|g| (g.name.as_str(), &g.summary))
            .collect(),
        config: cfg,
    };
    let p = dir.join("metrics.json");
    std::fs::write(&p, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&p, e))?;
    write_csv(&dir.join("metrics.csv"), &out.rows)?;
    if !out.curves.is_empty() {
        write_csv(&dir.join("curves.csv"), &out.curves)?;
    }
    if !out.bench.is_empty() {
        write_csv(&dir.join("bench.csv"), &out.bench)?;
    }
    for g in &out.denoised {
        write_denoised(
            &dir.join(format!("{}.tsv", g.name)),
            &dir.join(format!("{}.json", g.name)),
            &g.graph,
            &g.store,
            &g.summary,
            &g.config,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kind_lists_valid_ones() {
        let err = check_kind("alpha").unwrap_err().to_string();
        for k in KINDS {
            assert!(err.contains(k));
        }
        assert!(check_kind("zero_shot").is_ok());
    }
}
