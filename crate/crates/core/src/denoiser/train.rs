use gdmsr_numerics::{Adam, AdamConfig, NumericsError, ParamStore, Real, Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scorer::ScorerInputs;
use super::{
    bce_link_loss, curriculum_update, denoise_graph, joint_loss, relation_confidence,
    smooth_scores, ConfidenceHead, ConfidenceStore, DenoiseConfig, DenoiseSummary, HistoryTable,
    ScorerVariant,
};
use crate::dataset::{Dataset, SocialGraph};
use crate::graphconv::{bpr_loss, gcn_forward, EmbeddingTables, PropagationGraph};
use crate::{Error, Result};

const SAMPLE_TRIES: usize = 64;
const SCORE_CHUNK: usize = 2048;

/// Parameters of the jointly trained recommender and confidence head.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T> {
    pub store: ParamStore<T>,
    pub tables: EmbeddingTables,
    pub head: ConfidenceHead,
}

impl<T: Real> DenoiserModel<T> {
    pub fn init(n_users: usize, n_items: usize, cfg: &DenoiseConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let tables =
            EmbeddingTables::init(&mut store, n_users, n_items, cfg.dim, cfg.init_std, rng);
        let head = ConfidenceHead::init(&mut store, cfg.head_config(), cfg.init_std, rng);
        Self {
            store,
            tables,
            head,
        }
    }

    /// Rebuilds a model around a store holding the named parameters.
    pub fn from_store(store: ParamStore<T>, cfg: &DenoiseConfig) -> Result<Self> {
        let id = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
        };
        let tables = EmbeddingTables {
            user: id("user_emb")?,
            item: id("item_emb")?,
            dim: cfg.dim,
        };
        let head = ConfidenceHead::from_store(&store, cfg.head_config())?;
        Ok(Self {
            store,
            tables,
            head,
        })
    }

    pub fn cast<U: Real>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            store: self.store.cast(),
            tables: self.tables,
            head: self.head.clone(),
        }
    }
}

/// Sampled training signal for one batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LossBatch {
    /// `(u, i, j)`: positive `i`, sampled negative `j`.
    pub triples: Vec<(usize, usize, usize)>,
    /// `(u, v)` with `v` an active friend.
    pub positives: Vec<(usize, usize)>,
    /// `(u, w)` with `w` outside the original friend set.
    pub negatives: Vec<(usize, usize)>,
}

/// Tape handles of the three loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub joint: Var,
    pub bce: Var,
    pub bpr: Var,
}

/// Records the joint loss of `batch` on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    tables: EmbeddingTables,
    head: &ConfidenceHead,
    graph: &PropagationGraph<T>,
    histories: &HistoryTable,
    batch: &LossBatch,
    cfg: &DenoiseConfig,
) -> Result<LossVars> {
    let layers = gcn_forward(tape, store, tables, graph, cfg.hops)?;
    let bpr = bpr_loss(tape, layers.user_avg, layers.item_avg, &batch.triples)?;
    let bce = if cfg.alpha == 0.0 || (batch.positives.is_empty() && batch.negatives.is_empty()) {
        bce_link_loss(tape, None, None)
    } else {
        let mut pairs = batch.positives.clone();
        pairs.extend_from_slice(&batch.negatives);
        let inputs = ScorerInputs {
            items: layers.items[0],
            users0: layers.users[0],
            users1: layers.users.get(1).copied(),
        };
        let logits = relation_confidence(tape, store, head, inputs, histories, &pairs, cfg.scorer)?;
        let np = batch.positives.len();
        let split = |tape: &mut Tape<T>, r: std::ops::Range<usize>| -> Result<Option<Var>> {
            if r.is_empty() {
                return Ok(None);
            }
            Ok(Some(
                tape.gather_rows(logits, std::sync::Arc::new(r.collect()))?,
            ))
        };
        let pos = split(tape, 0..np)?;
        let neg = split(tape, np..pairs.len())?;
        bce_link_loss(tape, pos, neg)
    };
    let joint = joint_loss(tape, bce, bpr, cfg.alpha)?;
    Ok(LossVars { joint, bce, bpr })
}

/// Draws `j`, `v` and `w` for every `(u, i)` of `pairs`. A user without
/// active friends contributes no relation terms; a draw that fails after a
/// bounded number of tries is skipped.
pub fn sample_batch(
    d: &Dataset,
    g: &SocialGraph,
    active_friends: &[Vec<usize>],
    pairs: &[(usize, usize)],
    rng: &mut impl Rng,
) -> LossBatch {
    let mut out = LossBatch::default();
    let (n_users, n_items) = (d.n_users(), d.n_items());
    for &(u, i) in pairs {
        if let Some(j) = (0..SAMPLE_TRIES)
            .map(|_| rng.gen_range(0..n_items))
            .find(|&j| !d.is_train(u, j))
        {
            out.triples.push((u, i, j));
        }
        let friends = &active_friends[u];
        if friends.is_empty() {
            continue;
        }
        let v = friends[rng.gen_range(0..friends.len())];
        out.positives.push((u, v));
        if let Some(w) = (0..SAMPLE_TRIES)
            .map(|_| rng.gen_range(0..n_users))
            .find(|&w| w != u && !g.has_edge(u, w))
        {
            out.negatives.push((u, w));
        }
    }
    out
}

/// Raw logits of every original edge of `g`, in edge-id order, with
/// dropout off.
pub fn score_edges<T: Real>(
    model: &DenoiserModel<T>,
    d: &Dataset,
    g: &SocialGraph,
    histories: &HistoryTable,
    cfg: &DenoiseConfig,
) -> Result<Vec<f64>> {
    let pairs: Vec<(usize, usize)> = g.edges().map(|(u, v, _, _)| (u, v)).collect();
    let graph = (cfg.scorer == ScorerVariant::UserLayer1).then(|| PropagationGraph::<T>::new(d, g));
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(SCORE_CHUNK) {
        let mut tape = Tape::new();
        let items = tape.param(&model.store, model.tables.item);
        let users0 = tape.param(&model.store, model.tables.user);
        let users1 = match &graph {
            Some(graph) => {
                Some(gcn_forward(&mut tape, &model.store, model.tables, graph, 1)?.users[1])
            }
            None => None,
        };
        let inputs = ScorerInputs {
            items,
            users0,
            users1,
        };
        let logits = relation_confidence(
            &mut tape,
            &model.store,
            &model.head,
            inputs,
            histories,
            chunk,
            cfg.scorer,
        )?;
        out.extend(tape.value(logits).data().iter().map(|x| x.to_f64_lossy()));
    }
    Ok(out)
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub bpr: f64,
    pub active_edges: usize,
    /// Inactive edges after this epoch's curriculum step, if one ran.
    pub removed: Option<usize>,
    /// Retention after this epoch's scoring pass, if one ran. With the
    /// curriculum off it describes the graph the current scores would give.
    pub summary: Option<DenoiseSummary>,
}

/// Output of [`train_denoiser`].
#[derive(Clone, Debug)]
pub struct TrainedDenoiser<T> {
    pub model: DenoiserModel<T>,
    /// Final smoothed scores over every original edge.
    pub store: ConfidenceStore,
    /// Active flags left by the last curriculum step.
    pub graph: SocialGraph,
    pub log: Vec<EpochLog>,
    pub curriculum_updates: usize,
}

fn active_lists(g: &SocialGraph) -> Vec<Vec<usize>> {
    (0..g.n_users())
        .map(|u| g.active_friends(u).collect())
        .collect()
}

/// Joint training with the self-correcting curriculum.
///
/// Every `curriculum_period` epochs all original edges are rescored, the
/// scores smoothed, and (unless `cfg.curriculum` is off) the active set
/// re-selected. With `interaction_fraction < 1` training sees a per-user
/// subsample of the train interactions and the returned scores come from a
/// fresh pass over full-data histories.
pub fn train_denoiser<T: Real>(
    d: &Dataset,
    g: &SocialGraph,
    cfg: &DenoiseConfig,
) -> Result<TrainedDenoiser<T>> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let sub;
    let train_data = if cfg.interaction_fraction < 1.0 {
        sub = d.subsample_train(cfg.interaction_fraction, cfg.seed ^ 0x5eed_0002)?;
        &sub
    } else {
        d
    };
    let histories = HistoryTable::new(train_data, cfg.history_len)?;
    let mut model = DenoiserModel::<T>::init(d.n_users(), d.n_items(), cfg, &mut init_rng);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &model.store);
    let mut graph = g.clone();
    graph.set_all_active();
    let mut prop = PropagationGraph::<T>::new(train_data, &graph);
    let mut friends = active_lists(&graph);
    let mut store = ConfidenceStore::new(graph.n_edges());
    let mut order: Vec<(usize, usize)> = train_data.train().to_vec();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut updates = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut bce_sum, mut bpr_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = sample_batch(train_data, &graph, &friends, chunk, &mut rng);
            let mut tape = Tape::training(rng.gen());
            let vars = joint_loss_on_tape(
                &mut tape,
                &model.store,
                model.tables,
                &model.head,
                &prop,
                &histories,
                &batch,
                cfg,
            )?;
            let loss = tape.scalar(vars.joint).to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "denoiser loss {loss} at epoch {epoch}"
                )));
            }
            loss_sum += loss;
            bce_sum += tape.scalar(vars.bce).to_f64_lossy();
            bpr_sum += tape.scalar(vars.bpr).to_f64_lossy();
            let grads = tape.backward(vars.joint, &model.store)?;
            adam.step(&mut model.store, &grads).map_err(|e| match e {
                NumericsError::NonFiniteGradient(m) => {
                    Error::Diverged(format!("epoch {epoch}: {m}"))
                }
                e => e.into(),
            })?;
        }
        let mut removed = None;
        let mut summary = None;
        if cfg.curriculum_period > 0 && epoch % cfg.curriculum_period == 0 {
            updates += 1;
            let raw = score_edges(&model, train_data, &graph, &histories, cfg)?;
            smooth_scores(&mut store, &raw, cfg.beta, updates)?;
            if cfg.curriculum {
                removed = Some(curriculum_update(&mut graph, &store, cfg)?);
                prop = PropagationGraph::new(train_data, &graph);
                friends = active_lists(&graph);
                summary = Some(DenoiseSummary::of(&graph));
            } else {
                summary = Some(denoise_graph(&graph, &store, cfg)?.1);
            }
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum,
            bce: bce_sum,
            bpr: bpr_sum,
            active_edges: graph.n_active(),
            removed,
            summary,
        });
    }

    if cfg.interaction_fraction < 1.0 {
        let full = HistoryTable::new(d, cfg.history_len)?;
        let raw = score_edges(&model, d, &graph, &full, cfg)?;
        store = ConfidenceStore::from_scores(raw, store.period().max(1));
    } else if store.period() == 0 {
        let raw = score_edges(&model, train_data, &graph, &histories, cfg)?;
        smooth_scores(&mut store, &raw, cfg.beta, 1)?;
    }
    Ok(TrainedDenoiser {
        model,
        store,
        graph,
        log,
        curriculum_updates: updates,
    })
}
