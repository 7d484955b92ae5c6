//! The downstream GCN recommender trained on a fixed social graph.

use gdmsr_numerics::{Adam, AdamConfig, NumericsError, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SocialGraph};
use crate::eval::evaluate_stack;
use crate::graphconv::{
    bpr_loss, compute_layer_stack, gcn_forward, EmbeddingTables, LayerStack, PropagationGraph,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecConfig {
    pub dim: usize,
    pub hops: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_std: f64,
    /// Epochs between validation checks.
    pub eval_every: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub n_negatives: usize,
    pub seed: u64,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            hops: 2,
            lr: 1e-3,
            epochs: 200,
            batch_size: 1024,
            init_std: 0.01,
            eval_every: 5,
            patience: 20,
            n_negatives: 100,
            seed: 0,
        }
    }
}

impl RecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "dim, batch_size and eval_every must be positive".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Validation Recall@1 at one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub epoch: usize,
    pub loss: f64,
    pub recall_at_1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedRecommender {
    store: ParamStore<f32>,
    tables: EmbeddingTables,
    hops: usize,
    graph: SocialGraph,
    stack: LayerStack<f32>,
    pub best_epoch: usize,
    pub history: Vec<ValidationPoint>,
}

impl TrainedRecommender {
    /// Rebuilds the cached stack for stored parameters on `graph`.
    pub fn from_params(
        d: &Dataset,
        graph: SocialGraph,
        store: ParamStore<f32>,
        hops: usize,
    ) -> Result<Self> {
        let id = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
        };
        let user = id("user_emb")?;
        let item = id("item_emb")?;
        let dim = store.get(user).row_len();
        let tables = EmbeddingTables { user, item, dim };
        let prop = PropagationGraph::new(d, &graph);
        let stack = compute_layer_stack(&store, tables, &prop, hops)?;
        Ok(Self {
            store,
            tables,
            hops,
            graph,
            stack,
            best_epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn stack(&self) -> &LayerStack<f32> {
        &self.stack
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn tables(&self) -> EmbeddingTables {
        self.tables
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    /// The social graph the model was trained on.
    pub fn graph(&self) -> &SocialGraph {
        &self.graph
    }
}

/// `E1*(u) . E2*(i)` for every candidate.
pub fn score_all(m: &TrainedRecommender, u: usize, candidates: &[usize]) -> Vec<f32> {
    let user = m.stack.user_avg.row(u);
    candidates
        .iter()
        .map(|&i| {
            user.iter()
                .zip(m.stack.item_avg.row(i))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// BPR training with one uniform negative per positive, Adam, and early
/// stopping on validation Recall@1. The best checked parameters are kept.
pub fn train_recommender(
    d: &Dataset,
    g: &SocialGraph,
    cfg: &RecConfig,
) -> Result<TrainedRecommender> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let tables = EmbeddingTables::init(
        &mut store,
        d.n_users(),
        d.n_items(),
        cfg.dim,
        cfg.init_std,
        &mut rng,
    );
    let prop = PropagationGraph::<f32>::new(d, g);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &store);
    let mut order = d.train().to_vec();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    let eval_seed = cfg.seed ^ 0x7a11_da7e;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let triples: Vec<(usize, usize, usize)> = chunk
                .iter()
                .filter_map(|&(u, i)| {
                    (0..64)
                        .map(|_| rng.gen_range(0..d.n_items()))
                        .find(|&j| !d.is_train(u, j))
                        .map(|j| (u, i, j))
                })
                .collect();
            let mut tape = Tape::new();
            let layers = gcn_forward(&mut tape, &store, tables, &prop, cfg.hops)?;
            let loss = bpr_loss(&mut tape, layers.user_avg, layers.item_avg, &triples)?;
            let value = tape.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "recommender loss {value} at epoch {epoch}"
                )));
            }
            loss_sum += value;
            let grads = tape.backward(loss, &store)?;
            adam.step(&mut store, &grads).map_err(|e| match e {
                NumericsError::NonFiniteGradient(m) => {
                    Error::Diverged(format!("epoch {epoch}: {m}"))
                }
                e => e.into(),
            })?;
        }
        if epoch % cfg.eval_every == 0 && !d.valid().is_empty() {
            let stack = compute_layer_stack(&store, tables, &prop, cfg.hops)?;
            let r1 = evaluate_stack(&stack, d, d.valid(), cfg.n_negatives, eval_seed).recall_at_1;
            history.push(ValidationPoint {
                epoch,
                loss: loss_sum,
                recall_at_1: r1,
            });
            if best.as_ref().is_none_or(|b| r1 > b.0) {
                best = Some((r1, epoch, store.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let (best_epoch, store) = match best {
        Some((_, e, s)) => (e, s),
        None => (cfg.epochs, store),
    };
    let stack = compute_layer_stack(&store, tables, &prop, cfg.hops)?;
    Ok(TrainedRecommender {
        store,
        tables,
        hops: cfg.hops,
        graph: g.clone(),
        stack,
        best_epoch,
        history,
    })
}
