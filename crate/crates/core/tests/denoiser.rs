mod common;

use gdmsr::denoiser::{
    joint_loss_on_tape, relation_confidence, train_denoiser, ConfidenceHead, DenoiseConfig,
    DenoiserModel, HistoryTable, LossBatch, ScorerInputs, ScorerVariant,
};
use gdmsr::graphconv::PropagationGraph;
use gdmsr_numerics::{grad_check, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grad_cfg(scorer: ScorerVariant) -> DenoiseConfig {
    DenoiseConfig {
        history_len: 3,
        hops: 2,
        dropout: 0.0,
        init_std: 0.5,
        scorer,
        ..Default::default()
    }
}

fn fixture_batch() -> LossBatch {
    LossBatch {
        triples: vec![(0, 1, 3), (2, 4, 0), (4, 6, 1)],
        positives: vec![(0, 1), (2, 4), (1, 2)],
        negatives: vec![(0, 4), (3, 2)],
    }
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    let (d, g) = common::small();
    for scorer in ScorerVariant::ALL {
        let cfg = grad_cfg(scorer);
        let mut model = DenoiserModel::<f64>::init(
            d.n_users(),
            d.n_items(),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        let graph = PropagationGraph::<f64>::new(&d, &g);
        let hist = HistoryTable::new(&d, cfg.history_len).unwrap();
        let batch = fixture_batch();
        let (tables, head) = (model.tables, model.head.clone());
        let report = grad_check(&mut model.store, 1e-4, |tape, store| {
            let v = joint_loss_on_tape(tape, store, tables, &head, &graph, &hist, &batch, &cfg)
                .map_err(|e| gdmsr_numerics::NumericsError::Invalid {
                    op: "joint",
                    msg: e.to_string(),
                })?;
            Ok(v.joint)
        })
        .unwrap();
        assert!(
            report.max_rel_error <= 1e-4,
            "{}: {:?}",
            scorer.name(),
            report.worst
        );
    }
}

#[test]
fn pair_layout_has_two_histories_and_cls() {
    let (d, _) = common::small();
    // user 1 has two items, user 3 has one
    let hist = HistoryTable::new(&d, 4).unwrap();
    let t = ConfidenceHead::pair_tokens(&hist, d.n_items(), 1, 3);
    assert_eq!(t.tokens.len(), 9);
    assert_eq!(t.padding.iter().filter(|&&p| p).count(), 5);
    assert_eq!(t.tokens[8], d.n_items());
    assert_eq!(t.segments, vec![0, 0, 0, 0, 1, 1, 1, 1, 2]);
}

fn score_pair(
    model: &DenoiserModel<f64>,
    hist: &HistoryTable,
    pairs: &[(usize, usize)],
    v: ScorerVariant,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let items = tape.param(&model.store, model.tables.item);
    let users0 = tape.param(&model.store, model.tables.user);
    let inputs = ScorerInputs {
        items,
        users0,
        users1: None,
    };
    let out =
        relation_confidence(&mut tape, &model.store, &model.head, inputs, hist, pairs, v).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn padded_item_embedding_does_not_change_logit() {
    let (d, _) = common::small();
    let cfg = grad_cfg(ScorerVariant::TransformerHistory);
    let mut model = DenoiserModel::<f64>::init(
        d.n_users(),
        d.n_items(),
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(1),
    );
    let hist = HistoryTable::new(&d, 4).unwrap();
    let pairs = [(1, 4)];
    let before = score_pair(&model, &hist, &pairs, ScorerVariant::TransformerHistory);
    // padded slots point at item 0, which neither user interacted with
    assert!(!hist.real(1).contains(&0) && !hist.real(4).contains(&0));
    let item = model.tables.item;
    for x in model.store.get_mut(item).row_mut(0) {
        *x += 7.5;
    }
    let after = score_pair(&model, &hist, &pairs, ScorerVariant::TransformerHistory);
    assert_eq!(before, after);
}

#[test]
fn item_mean_pool_example_and_symmetry() {
    // hu = {i0: [1,0], i1: [0,1]}, hv = {i0}
    let d = gdmsr::dataset::Dataset::from_splits(
        2,
        2,
        vec![(0, 0), (0, 1), (1, 0)],
        vec![],
        vec![],
        vec![],
        vec![],
    )
    .unwrap();
    let cfg = DenoiseConfig {
        dim: 2,
        heads: 1,
        ..grad_cfg(ScorerVariant::ItemMeanPool)
    };
    let mut model = DenoiserModel::<f64>::init(2, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    *model.store.get_mut(model.tables.item) =
        Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let hist = HistoryTable::new(&d, 3).unwrap();
    let s = score_pair(
        &model,
        &hist,
        &[(0, 1), (1, 0)],
        ScorerVariant::ItemMeanPool,
    );
    assert_eq!(s, vec![0.5, 0.5]);
}

fn train_cfg() -> DenoiseConfig {
    DenoiseConfig {
        history_len: 3,
        epochs: 20,
        curriculum_period: 2,
        batch_size: 4,
        epsilon: 2,
        ratio_base: 0.5,
        lr: 1e-2,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic_and_counts_updates() {
    let (d, g) = common::small();
    let cfg = train_cfg();
    let a = train_denoiser::<f32>(&d, &g, &cfg).unwrap();
    let b = train_denoiser::<f32>(&d, &g, &cfg).unwrap();
    assert_eq!(a.store, b.store);
    assert_eq!(a.graph, b.graph);
    assert_eq!(a.curriculum_updates, 10);
    assert_eq!(a.store.period(), 10);
    let c = train_denoiser::<f32>(&d, &g, &DenoiseConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.store, c.store);
}

#[test]
fn curriculum_leaves_exact_inactive_counts() {
    let (d, g) = common::small();
    let cfg = train_cfg();
    let t = train_denoiser::<f32>(&d, &g, &cfg).unwrap();
    for u in 0..g.n_users() {
        let deg = g.degree(u);
        let off = t
            .graph
            .edge_range(u)
            .filter(|&e| !t.graph.is_active(e))
            .count();
        assert_eq!(
            off,
            gdmsr::denoiser::removal_count(cfg.ratio_for(deg), deg),
            "user {u}"
        );
    }
}

#[test]
fn alpha_zero_leaves_head_untouched() {
    let (d, g) = common::small();
    let cfg = DenoiseConfig {
        alpha: 0.0,
        ..train_cfg()
    };
    let t = train_denoiser::<f64>(&d, &g, &cfg).unwrap();
    let init = DenoiserModel::<f64>::init(
        d.n_users(),
        d.n_items(),
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    );
    for id in t.model.head.param_ids() {
        assert_eq!(
            t.model.store.get(id),
            init.store.get(id),
            "{}",
            t.model.store.name(id)
        );
    }
    assert_ne!(
        t.model.store.get(t.model.tables.user),
        init.store.get(init.tables.user)
    );
}

#[test]
fn zero_shot_training_runs_on_subsample() {
    let (d, g) = common::small();
    let cfg = DenoiseConfig {
        interaction_fraction: 0.3,
        ..train_cfg()
    };
    let t = train_denoiser::<f32>(&d, &g, &cfg).unwrap();
    assert_eq!(t.store.len(), g.n_edges());
    assert!(t.store.scores().iter().all(|s| s.is_finite()));
}

#[test]
fn head_rebinds_from_store() {
    let (d, _) = common::small();
    let cfg = grad_cfg(ScorerVariant::TransformerHistory);
    let model = DenoiserModel::<f64>::init(
        d.n_users(),
        d.n_items(),
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(1),
    );
    let store: ParamStore<f64> = model.store.clone();
    let again = DenoiserModel::from_store(store, &cfg).unwrap();
    assert_eq!(again.head, model.head);
}
