use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gdmsr::config::Config;
use gdmsr::dataset::{
    co_interaction_stats, inject_fake_relations, load_prepared, save_prepared, write_stats_csv,
};
use gdmsr::denoiser::{
    apply_ratio, denoise_graph, train_denoiser, write_denoised, ConfidenceStore,
};
use gdmsr::eval::{bench_inference, evaluate_ranking};
use gdmsr::experiment::{check_kind, run_experiment, write_artifacts};
use gdmsr::recommender::{train_recommender, TrainedRecommender};
use gdmsr::synth::{generate, write_raw};
use gdmsr::{checkpoint, BUILD};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "gdmsr",
    version,
    about = "Preference-guided social graph denoising"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Data {
    /// Prepared dataset directory; the config's dataset section otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic raw dataset (interactions.tsv, social.tsv).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Filter, remap and split raw data into a prepared directory.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Add as many fake relations as observed ones to a prepared dataset.
    InjectNoise {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Train the denoiser; writes its checkpoint, final scores and log.
    TrainDenoiser {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Prune the graph with stored scores; writes a prepared directory
    /// whose social graph carries the removals.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// `scores.json` from train-denoiser.
        #[arg(long)]
        scores: PathBuf,
    },
    /// Train the recommender on the (possibly denoised) graph.
    TrainRec {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Test-split ranking metrics of a recommender checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time social propagation at each of the experiment's ratios.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Run the experiment named in the config.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let cfg = match &c.config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    let seed = c.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn load_data(
    cfg: &Config,
    data: &Data,
) -> Result<(gdmsr::dataset::Dataset, gdmsr::dataset::SocialGraph)> {
    Ok(match &data.data {
        Some(dir) => load_prepared(dir).with_context(|| format!("loading {}", dir.display()))?,
        None => cfg.load_data()?,
    })
}

#[derive(Serialize)]
struct Metrics<'a, M: Serialize> {
    metrics: M,
    config: &'a Config,
    seed: u64,
    git_describe: &'a str,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn write_metrics(dir: &Path, cfg: &Config, metrics: impl Serialize) -> Result<()> {
    write_json(
        &dir.join("metrics.json"),
        &Metrics {
            metrics,
            config: cfg,
            seed: cfg.seed,
            git_describe: BUILD,
        },
    )
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_scores(path: &Path) -> Result<ConfidenceStore> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            let mut syn = cfg.dataset.synthetic.clone().unwrap_or_default();
            if let Some(s) = common.seed {
                syn.seed = s;
            }
            write_raw(&common.out, &generate(&syn)?)?;
        }
        Command::Prepare { common } => {
            let cfg = load_config(&common)?;
            let (d, g) = cfg.load_data()?;
            save_prepared(&common.out, &d, &g)?;
            write_stats_csv(
                &common.out.join("co_interaction.csv"),
                &co_interaction_stats(&d, &g),
            )?;
            eprintln!(
                "{} users, {} items, {} train / {} valid / {} test, {} directed relations",
                d.n_users(),
                d.n_items(),
                d.train().len(),
                d.valid().len(),
                d.test().len(),
                g.n_edges()
            );
        }
        Command::InjectNoise { common, data } => {
            let cfg = load_config(&common)?;
            let (d, g) = load_data(&cfg, &data)?;
            let noisy = inject_fake_relations(&g, cfg.seed)?;
            save_prepared(&common.out, &d, &noisy)?;
        }
        Command::TrainDenoiser { common, data } => {
            let cfg = load_config(&common)?;
            let (d, g) = load_data(&cfg, &data)?;
            let t = train_denoiser::<f32>(&d, &g, &cfg.denoiser)?;
            mkdir(&common.out)?;
            checkpoint::save(&common.out.join("denoiser.ckpt"), &t.model.store)?;
            write_json(&common.out.join("scores.json"), &t.store)?;
            let log: Vec<_> = t
                .log
                .iter()
                .map(|e| LogRow {
                    epoch: e.epoch,
                    loss: e.loss,
                    bce: e.bce,
                    bpr: e.bpr,
                    active_edges: e.active_edges,
                    removed: e.removed,
                })
                .collect();
            write_csv(&common.out.join("train_log.csv"), &log)?;
            write_metrics(
                &common.out,
                &cfg,
                serde_json::json!({ "curriculum_updates": t.curriculum_updates }),
            )?;
        }
        Command::Denoise {
            common,
            data,
            scores,
        } => {
            let cfg = load_config(&common)?;
            let (d, g) = load_data(&cfg, &data)?;
            let store = read_scores(&scores)?;
            let (out, summary) = denoise_graph(&g, &store, &cfg.denoiser)?;
            save_prepared(&common.out, &d, &out)?;
            write_denoised(
                &common.out.join("denoised.tsv"),
                &common.out.join("denoise_summary.json"),
                &out,
                &store,
                &summary,
                &cfg.denoiser,
            )?;
            eprintln!(
                "removed {:.2}% of relations",
                100.0 * summary.overall_removal_ratio
            );
        }
        Command::TrainRec { common, data } => {
            let cfg = load_config(&common)?;
            let (d, g) = load_data(&cfg, &data)?;
            let m = train_recommender(&d, &g, &cfg.recommender)?;
            mkdir(&common.out)?;
            checkpoint::save(&common.out.join("rec.ckpt"), m.store())?;
            write_csv(&common.out.join("validation.csv"), &m.history)?;
            let report = evaluate_ranking(&m, &d, &cfg.eval)?;
            write_metrics(
                &common.out,
                &cfg,
                serde_json::json!({
                    "best_epoch": m.best_epoch,
                    "recall_at_1": report.recall_at_1,
                    "recall_at_3": report.recall_at_3,
                    "ndcg_at_3": report.ndcg_at_3,
                    "n_users": report.n_users,
                }),
            )?;
        }
        Command::Evaluate {
            common,
            data,
            checkpoint: path,
        } => {
            let cfg = load_config(&common)?;
            let (d, g) = load_data(&cfg, &data)?;
            let store = checkpoint::load(&path)?;
            let m = TrainedRecommender::from_params(&d, g, store, cfg.recommender.hops)?;
            let report = evaluate_ranking(&m, &d, &cfg.eval)?;
            mkdir(&common.out)?;
            write_metrics(&common.out, &cfg, &report)?;
            println!(
                "recall@1 {:.4}  recall@3 {:.4}  ndcg@3 {:.4}  users {}",
                report.recall_at_1, report.recall_at_3, report.ndcg_at_3, report.n_users
            );
        }
        Command::Bench {
            common,
            data,
            checkpoint: path,
            scores,
        } => {
            let cfg = load_config(&common)?;
            let (d, g) = load_data(&cfg, &data)?;
            let store = read_scores(&scores)?;
            let m = TrainedRecommender::from_params(
                &d,
                g.clone(),
                checkpoint::load(&path)?,
                cfg.recommender.hops,
            )?;
            let mut graphs = Vec::new();
            for &ratio in &cfg.experiment.ratio_grid {
                let mut pruned = g.clone();
                apply_ratio(&mut pruned, store.scores(), |_| ratio)?;
                graphs.push((ratio, pruned));
            }
            let e = &cfg.experiment;
            let reports = bench_inference(&m, &graphs, e.bench_workload, e.bench_repetitions);
            mkdir(&common.out)?;
            write_csv(&common.out.join("bench.csv"), &reports)?;
            write_metrics(&common.out, &cfg, &reports)?;
        }
        Command::Experiment { common } => {
            let cfg = load_config(&common)?;
            check_kind(&cfg.experiment.kind)?;
            let out = run_experiment(&cfg)?;
            write_artifacts(&common.out, &cfg, &out)?;
            for r in &out.rows {
                let metric = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "seed {:>3}  {:<22} param {:>8}  R@1 {}  removal {:.4}",
                    r.seed,
                    r.arm,
                    metric(r.param),
                    metric(r.recall_at_1),
                    r.removal_ratio
                );
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    loss: f64,
    bce: f64,
    bpr: f64,
    active_edges: usize,
    removed: Option<usize>,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_subcommand_rejected() {
        assert!(Cli::try_parse_from(["gdmsr", "fly", "--out", "x"]).is_err());
        assert!(Cli::try_parse_from(["gdmsr", "experiment", "--out", "x", "--seed", "3"]).is_ok());
    }

    #[test]
    fn bad_kind_fails_early() {
        let cfg = Config::from_json(r#"{"experiment": {"kind": "nope"}}"#).unwrap();
        assert!(check_kind(&cfg.experiment.kind).is_err());
        assert!(run_experiment(&cfg).is_err());
    }
}
