//! Preference-guided social graph denoising.
//!
//! A Transformer reads the concatenated interaction histories of two users
//! and emits a relation-confidence logit. It is trained jointly with a GCN
//! recommender (link BCE + BPR), while a self-correcting curriculum
//! periodically re-ranks every original relation, smooths the scores over
//! periods and deactivates the lowest-ranked share of each user's friends.
//! The final smoothed scores drive [`denoise_graph`].

mod curriculum;
mod history;
mod loss;
mod scorer;
mod train;

pub use curriculum::{
    apply_ratio, calibrate_ratio_base, calibrate_uniform_ratio, curriculum_update, denoise_graph,
    denoise_ratio, planned_removal, removal_count, rule_based_denoise, smooth_scores,
    write_denoised, ConfidenceStore, DenoiseSummary,
};
pub use history::{build_history, HistorySequence, HistoryTable};
pub use loss::{bce_link_loss, bce_link_loss_value, joint_loss, joint_loss_value};
pub use scorer::{relation_confidence, ConfidenceHead, HeadConfig, PairTokens, ScorerInputs};
pub use train::{
    joint_loss_on_tape, sample_batch, score_edges, train_denoiser, DenoiserModel, EpochLog,
    LossBatch, LossVars, TrainedDenoiser,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which function turns a user pair into a confidence logit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerVariant {
    /// Transformer over both interaction histories.
    TransformerHistory,
    /// Dot product of layer-0 user embeddings.
    UserLayer0,
    /// Dot product of first-hop user representations.
    UserLayer1,
    /// Dot product of the mean item embeddings of both histories.
    ItemMeanPool,
}

impl ScorerVariant {
    pub const ALL: [ScorerVariant; 4] = [
        ScorerVariant::TransformerHistory,
        ScorerVariant::UserLayer0,
        ScorerVariant::UserLayer1,
        ScorerVariant::ItemMeanPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScorerVariant::TransformerHistory => "transformer-history",
            ScorerVariant::UserLayer0 => "user-layer-0",
            ScorerVariant::UserLayer1 => "user-layer-1",
            ScorerVariant::ItemMeanPool => "item-mean-pool",
        }
    }
}

/// How many of each user's friends are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum RatioMode {
    /// Degree-adaptive ratio from `epsilon`, `gamma` and `ratio_base`.
    Adaptive,
    /// Same ratio for every user.
    Uniform { ratio: f64 },
}

/// Hyperparameters of denoiser training and the final denoising pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    /// Weight of the link loss against the BPR loss.
    pub alpha: f64,
    /// Smoothing weight of the previous period's score.
    pub beta: f64,
    /// Epochs between curriculum updates.
    pub curriculum_period: usize,
    /// Users with fewer friends keep all of them.
    pub epsilon: usize,
    pub gamma: f64,
    /// Base ratio `R`.
    pub ratio_base: f64,
    /// Upper clamp on the per-user ratio.
    pub max_ratio: f64,
    pub ratio_mode: RatioMode,
    /// Deactivate low-confidence edges during training.
    pub curriculum: bool,
    /// Also drop the reverse of every removed edge.
    pub symmetric: bool,
    pub history_len: usize,
    pub hops: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub lr: f64,
    /// Drop probability on attention weights and feed-forward output.
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_std: f64,
    pub seed: u64,
    pub scorer: ScorerVariant,
    /// Share of each user's train interactions used for training.
    pub interaction_fraction: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            curriculum_period: 10,
            epsilon: 5,
            gamma: 1.0,
            ratio_base: 0.02,
            max_ratio: 0.99,
            ratio_mode: RatioMode::Adaptive,
            curriculum: true,
            symmetric: false,
            history_len: 30,
            hops: 2,
            dim: 8,
            heads: 2,
            ff_dim: 32,
            layers: 1,
            lr: 1e-3,
            dropout: 0.1,
            epochs: 200,
            batch_size: 1024,
            init_std: 0.1,
            seed: 0,
            scorer: ScorerVariant::TransformerHistory,
            interaction_fraction: 1.0,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if self.epsilon < 1 {
            return bad("epsilon must be >= 1".into());
        }
        if self.ratio_base <= 0.0 {
            return bad(format!("ratio_base must be > 0, got {}", self.ratio_base));
        }
        if !(0.0..1.0).contains(&self.max_ratio) {
            return bad(format!(
                "max_ratio must lie in [0, 1), got {}",
                self.max_ratio
            ));
        }
        if let RatioMode::Uniform { ratio } = self.ratio_mode {
            if !(0.0..1.0).contains(&ratio) {
                return bad(format!("uniform ratio must lie in [0, 1), got {ratio}"));
            }
        }
        if self.history_len == 0 || self.dim == 0 || self.batch_size == 0 {
            return bad("history_len, dim and batch_size must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.layers == 0 || self.ff_dim == 0 {
            return bad("layers and ff_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.interaction_fraction > 0.0 && self.interaction_fraction <= 1.0) {
            return bad(format!(
                "interaction_fraction must lie in (0, 1], got {}",
                self.interaction_fraction
            ));
        }
        if self.scorer == ScorerVariant::UserLayer1 && self.hops == 0 {
            return bad("user-layer-1 scorer needs hops >= 1".into());
        }
        if self.lr <= 0.0 {
            return bad("lr must be positive".into());
        }
        Ok(())
    }

    /// Per-user ratio for `friend_count` under the configured mode.
    pub fn ratio_for(&self, friend_count: usize) -> f64 {
        match self.ratio_mode {
            RatioMode::Adaptive => {
                denoise_ratio(friend_count, self.epsilon, self.gamma, self.ratio_base)
                    .min(self.max_ratio)
            }
            RatioMode::Uniform { ratio } => ratio,
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            dim: self.dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            layers: self.layers,
            keep_prob: 1.0 - self.dropout,
        }
    }
}
