//! K-hop GCN propagation over the social and interaction graphs.
//!
//! Every aggregation is a mean over the node itself and its neighbors:
//!
//! ```text
//! social(u)  = mean(E1[u], E1[v] for active friends v)
//! pref(u)    = mean(E1[u], E2[i] for train items i)
//! E1'[u]     = (social(u) + pref(u)) / 2
//! E2'[i]     = mean(E2[i], E1[u] for train users u)
//! ```
//!
//! Predictions use the average of layers `0..=K` on both sides.

use std::sync::Arc;

use gdmsr_numerics::{c, Csr, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Dataset, SocialGraph};
use crate::Result;

/// Ids of the user (`N x D`) and item (`M x D`) embedding tables in a
/// parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub user: ParamId,
    pub item: ParamId,
    pub dim: usize,
}

impl EmbeddingTables {
    /// Adds `user_emb` and `item_emb` drawn from `N(0, std^2)`.
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        n_users: usize,
        n_items: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let user = store.add("user_emb", gaussian(&[n_users, dim], std, rng));
        let item = store.add("item_emb", gaussian(&[n_items, dim], std, rng));
        Self { user, item, dim }
    }
}

pub(crate) fn gaussian<T: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            c::<T>(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Row-normalizing factors `1 / (1 + degree)`.
fn self_loop_scale<T: Real>(csr: &Csr) -> Arc<Vec<T>> {
    Arc::new(
        (0..csr.n_rows())
            .map(|r| T::one() / c::<T>(1.0 + csr.degree(r) as f64))
            .collect(),
    )
}

/// Adjacency snapshot used by [`gcn_forward`]: active social edges plus the
/// train interaction graph in both directions.
#[derive(Clone, Debug)]
pub struct PropagationGraph<T> {
    social: Arc<Csr>,
    social_scale: Arc<Vec<T>>,
    user_items: Arc<Csr>,
    user_scale: Arc<Vec<T>>,
    item_users: Arc<Csr>,
    item_scale: Arc<Vec<T>>,
}

impl<T: Real> PropagationGraph<T> {
    pub fn new(d: &Dataset, g: &SocialGraph) -> Self {
        Self::from_parts(
            g.active_csr(),
            d.user_items().clone(),
            d.item_users().clone(),
        )
    }

    pub fn from_parts(social: Csr, user_items: Csr, item_users: Csr) -> Self {
        Self {
            social_scale: self_loop_scale(&social),
            social: Arc::new(social),
            user_scale: self_loop_scale(&user_items),
            user_items: Arc::new(user_items),
            item_scale: self_loop_scale(&item_users),
            item_users: Arc::new(item_users),
        }
    }

    pub fn social(&self) -> &Csr {
        &self.social
    }

    pub fn n_users(&self) -> usize {
        self.user_items.n_rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_users.n_rows()
    }
}

/// Per-hop user and item representations on a tape.
#[derive(Clone, Debug)]
pub struct TapeLayers {
    pub users: Vec<Var>,
    pub items: Vec<Var>,
    pub user_avg: Var,
    pub item_avg: Var,
}

/// One social-side hop: `mean(x[u], x[v] for friends v)` for every user.
pub fn social_hop<T: Real>(graph: &PropagationGraph<T>, x: &[T], dim: usize) -> Vec<T> {
    let mut out = x.to_vec();
    graph.social.aggregate(x, dim, &mut out);
    for (r, row) in out.chunks_mut(dim).enumerate() {
        let s = graph.social_scale[r];
        row.iter_mut().for_each(|v| *v = *v * s);
    }
    out
}

/// Records `hops` rounds of propagation starting from the tables in
/// `store` and returns every layer plus the layer averages.
pub fn gcn_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    tables: EmbeddingTables,
    graph: &PropagationGraph<T>,
    hops: usize,
) -> Result<TapeLayers> {
    let e1 = tape.param(store, tables.user);
    let e2 = tape.param(store, tables.item);
    let mut users = vec![e1];
    let mut items = vec![e2];
    let half = c::<T>(0.5);
    for _ in 0..hops {
        let (u, i) = (*users.last().unwrap(), *items.last().unwrap());
        let s = tape.aggregate(graph.social.clone(), u)?;
        let s = tape.add(s, u)?;
        let s = tape.scale_rows(s, graph.social_scale.clone())?;
        let r = tape.aggregate(graph.user_items.clone(), i)?;
        let r = tape.add(r, u)?;
        let r = tape.scale_rows(r, graph.user_scale.clone())?;
        let both = tape.add(s, r)?;
        let next_u = tape.scale(both, half);
        let it = tape.aggregate(graph.item_users.clone(), u)?;
        let it = tape.add(it, i)?;
        let next_i = tape.scale_rows(it, graph.item_scale.clone())?;
        users.push(next_u);
        items.push(next_i);
    }
    let inv = T::one() / c::<T>((hops + 1) as f64);
    let average = |tape: &mut Tape<T>, layers: &[Var]| -> Result<Var> {
        let mut acc = layers[0];
        for &l in &layers[1..] {
            acc = tape.add(acc, l)?;
        }
        Ok(if layers.len() == 1 {
            acc
        } else {
            tape.scale(acc, inv)
        })
    };
    let user_avg = average(tape, &users)?;
    let item_avg = average(tape, &items)?;
    Ok(TapeLayers {
        users,
        items,
        user_avg,
        item_avg,
    })
}

/// Materialized propagation result.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack<T> {
    pub users: Vec<Tensor<T>>,
    pub items: Vec<Tensor<T>>,
    pub user_avg: Tensor<T>,
    pub item_avg: Tensor<T>,
}

impl<T: Real> LayerStack<T> {
    pub fn from_tape(tape: &Tape<T>, layers: &TapeLayers) -> Self {
        Self {
            users: layers
                .users
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
            items: layers
                .items
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
            user_avg: tape.value(layers.user_avg).clone(),
            item_avg: tape.value(layers.item_avg).clone(),
        }
    }

    pub fn hops(&self) -> usize {
        self.users.len() - 1
    }
}

/// Evaluation-mode propagation without keeping the tape around.
pub fn compute_layer_stack<T: Real>(
    store: &ParamStore<T>,
    tables: EmbeddingTables,
    graph: &PropagationGraph<T>,
    hops: usize,
) -> Result<LayerStack<T>> {
    let mut tape = Tape::new();
    let layers = gcn_forward(&mut tape, store, tables, graph, hops)?;
    Ok(LayerStack::from_tape(&tape, &layers))
}

/// `E1*(u) . E2*(i)`.
pub fn predict_score<T: Real>(stack: &LayerStack<T>, u: usize, i: usize) -> T {
    stack
        .user_avg
        .row(u)
        .iter()
        .zip(stack.item_avg.row(i))
        .map(|(&a, &b)| a * b)
        .sum()
}

/// `sum over (u, i, j) of -ln sigmoid(p_ui - p_uj)` recorded on a tape.
/// An empty triple list gives a constant zero.
pub fn bpr_loss<T: Real>(
    tape: &mut Tape<T>,
    user_repr: Var,
    item_repr: Var,
    triples: &[(usize, usize, usize)],
) -> Result<Var> {
    if triples.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let us = Arc::new(triples.iter().map(|t| t.0).collect::<Vec<_>>());
    let pos = Arc::new(triples.iter().map(|t| t.1).collect::<Vec<_>>());
    let neg = Arc::new(triples.iter().map(|t| t.2).collect::<Vec<_>>());
    let u = tape.gather_rows(user_repr, us)?;
    let i = tape.gather_rows(item_repr, pos)?;
    let j = tape.gather_rows(item_repr, neg)?;
    let pi = tape.row_dot(u, i)?;
    let pj = tape.row_dot(u, j)?;
    let diff = tape.sub(pj, pi)?;
    let l = tape.softplus(diff);
    Ok(tape.sum(l))
}

/// Value-only BPR loss over a materialized stack.
pub fn bpr_loss_value<T: Real>(stack: &LayerStack<T>, triples: &[(usize, usize, usize)]) -> f64 {
    triples
        .iter()
        .map(|&(u, i, j)| {
            let d = predict_score(stack, u, i) - predict_score(stack, u, j);
            gdmsr_numerics::softplus(-d).to_f64_lossy()
        })
        .sum()
}
