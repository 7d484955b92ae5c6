//! JSON configuration shared by the CLI and the experiment driver.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_dataset, inject_fake_relations, load_dataset, load_prepared, Dataset, FilterConfig,
    SocialGraph, SplitConfig,
};
use crate::denoiser::DenoiseConfig;
use crate::eval::EvalConfig;
use crate::recommender::RecConfig;
use crate::synth::{generate, SynthConfig};
use crate::{Error, Result};

/// Where the data comes from. Exactly one of `prepared`, `interactions`
/// (with `social`) or `synthetic` must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub interactions: Option<PathBuf>,
    pub social: Option<PathBuf>,
    pub prepared: Option<PathBuf>,
    pub synthetic: Option<SynthConfig>,
    /// Add as many random fake relations as there are observed ones.
    pub inject_fakes: bool,
    /// Seed of the split and of fake injection.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: String,
    /// With `false` the pipeline's denoised arm trains on the original graph.
    pub denoise: bool,
    /// Model seeds; empty means just the top-level seed.
    pub seeds: Vec<u64>,
    pub alpha_grid: Vec<f64>,
    pub ratio_grid: Vec<f64>,
    /// Overall removal ratio the adaptive base ratio is calibrated to.
    pub target_ratio: Option<f64>,
    pub zero_shot_fraction: f64,
    /// Records timed per repetition by the inference benchmark.
    pub bench_workload: usize,
    pub bench_repetitions: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            kind: "pipeline".into(),
            denoise: true,
            seeds: Vec::new(),
            alpha_grid: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            ratio_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.6],
            target_ratio: None,
            zero_shot_fraction: 0.3,
            bench_workload: 500_000,
            bench_repetitions: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub filter: FilterConfig,
    pub split: SplitConfig,
    pub denoiser: DenoiseConfig,
    pub recommender: RecConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentSection,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes dataset paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.dataset.interactions,
            &mut self.dataset.social,
            &mut self.dataset.prepared,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Copies the top-level seed into the model sections.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.denoiser.seed = seed;
        self.recommender.seed = seed;
        self
    }

    /// Seeds the experiment iterates over.
    pub fn seeds(&self) -> Vec<u64> {
        if self.experiment.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.experiment.seeds.clone()
        }
    }

    /// Loads or generates the dataset described by the `dataset` section.
    pub fn load_data(&self) -> Result<(Dataset, SocialGraph)> {
        let ds = &self.dataset;
        let sources = [
            ds.prepared.is_some(),
            ds.interactions.is_some(),
            ds.synthetic.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if sources != 1 {
            return Err(Error::Config(
                "dataset needs exactly one of `prepared`, `interactions`/`social` or `synthetic`"
                    .into(),
            ));
        }
        let (d, g) = if let Some(dir) = &ds.prepared {
            load_prepared(dir)?
        } else if let Some(inter) = &ds.interactions {
            let social = ds
                .social
                .as_ref()
                .ok_or_else(|| Error::Config("`interactions` needs a `social` file".into()))?;
            load_dataset(inter, social, &self.filter, &self.split, ds.seed)?
        } else {
            let syn = generate(ds.synthetic.as_ref().expect("checked above"))?;
            build_dataset(
                &syn.interactions,
                &syn.social,
                &self.filter,
                &self.split,
                ds.seed,
            )?
        };
        let g = if ds.inject_fakes {
            inject_fake_relations(&g, ds.seed)?
        } else {
            g
        };
        Ok((d, g))
    }
}
