use std::sync::Arc;

use gdmsr_numerics::{c, Csr, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;

use super::{HistoryTable, ScorerVariant};
use crate::graphconv::gaussian;
use crate::{Error, Result};

const MASK_FILL: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Shape of the Transformer confidence head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub keep_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct EncoderLayer {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Transformer encoder over `[hist(u) + A] ++ [hist(v) + B] ++ [CLS]`
/// followed by a two-layer MLP on the CLS output. There are no positional
/// encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceHead {
    config: HeadConfig,
    cls: ParamId,
    segment: ParamId,
    layers: Vec<EncoderLayer>,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

/// Token layout of one pair: item ids (CLS is `n_items`), segment ids
/// (0 for `u`, 1 for `v`, 2 for CLS) and the padding mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairTokens {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub padding: Vec<bool>,
}

fn weight<T: Real, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    gaussian(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

fn filled<T: Real>(n: usize, v: f64) -> Tensor<T> {
    Tensor::new(vec![n], vec![c::<T>(v); n]).expect("vector shape")
}

impl ConfidenceHead {
    /// Registers every head parameter in `store` under a `head.` prefix.
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        config: HeadConfig,
        token_std: f64,
        rng: &mut R,
    ) -> Self {
        let d = config.dim;
        let f = config.ff_dim;
        let cls = store.add("head.cls", gaussian(&[1, d], token_std, rng));
        let segment = store.add("head.segment", gaussian(&[2, d], token_std, rng));
        let layers = (0..config.layers)
            .map(|l| {
                let mut add =
                    |name: &str, t: Tensor<T>| store.add(format!("head.enc{l}.{name}"), t);
                EncoderLayer {
                    wq: add("wq", weight(d, d, rng)),
                    bq: add("bq", filled(d, 0.0)),
                    wk: add("wk", weight(d, d, rng)),
                    bk: add("bk", filled(d, 0.0)),
                    wv: add("wv", weight(d, d, rng)),
                    bv: add("bv", filled(d, 0.0)),
                    wo: add("wo", weight(d, d, rng)),
                    bo: add("bo", filled(d, 0.0)),
                    ln1_g: add("ln1_g", filled(d, 1.0)),
                    ln1_b: add("ln1_b", filled(d, 0.0)),
                    ff1_w: add("ff1_w", weight(d, f, rng)),
                    ff1_b: add("ff1_b", filled(f, 0.0)),
                    ff2_w: add("ff2_w", weight(f, d, rng)),
                    ff2_b: add("ff2_b", filled(d, 0.0)),
                    ln2_g: add("ln2_g", filled(d, 1.0)),
                    ln2_b: add("ln2_b", filled(d, 0.0)),
                }
            })
            .collect();
        let mlp_w1 = store.add("head.mlp_w1", weight(d, d, rng));
        let mlp_b1 = store.add("head.mlp_b1", filled(d, 0.0));
        let mlp_w2 = store.add("head.mlp_w2", weight(d, 1, rng));
        let mlp_b2 = store.add("head.mlp_b2", filled(1, 0.0));
        Self {
            config,
            cls,
            segment,
            layers,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        }
    }

    /// Re-binds a head to parameters already present in `store`.
    pub fn from_store<T: Real>(store: &ParamStore<T>, config: HeadConfig) -> Result<Self> {
        let id = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let layers = (0..config.layers)
            .map(|l| {
                let p = |n: &str| id(format!("head.enc{l}.{n}"));
                Ok(EncoderLayer {
                    wq: p("wq")?,
                    bq: p("bq")?,
                    wk: p("wk")?,
                    bk: p("bk")?,
                    wv: p("wv")?,
                    bv: p("bv")?,
                    wo: p("wo")?,
                    bo: p("bo")?,
                    ln1_g: p("ln1_g")?,
                    ln1_b: p("ln1_b")?,
                    ff1_w: p("ff1_w")?,
                    ff1_b: p("ff1_b")?,
                    ff2_w: p("ff2_w")?,
                    ff2_b: p("ff2_b")?,
                    ln2_g: p("ln2_g")?,
                    ln2_b: p("ln2_b")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            cls: id("head.cls".into())?,
            segment: id("head.segment".into())?,
            layers,
            mlp_w1: id("head.mlp_w1".into())?,
            mlp_b1: id("head.mlp_b1".into())?,
            mlp_w2: id("head.mlp_w2".into())?,
            mlp_b2: id("head.mlp_b2".into())?,
        })
    }

    pub fn config(&self) -> HeadConfig {
        self.config
    }

    /// Ids of every head parameter.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.cls, self.segment];
        for l in &self.layers {
            out.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_g, l.ln1_b, l.ff1_w, l.ff1_b,
                l.ff2_w, l.ff2_b, l.ln2_g, l.ln2_b,
            ]);
        }
        out.extend([self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]);
        out
    }

    /// Layout of the `2L + 1` tokens for the pair `(u, v)`.
    pub fn pair_tokens(histories: &HistoryTable, n_items: usize, u: usize, v: usize) -> PairTokens {
        let l = histories.history_len();
        let mut out = PairTokens {
            tokens: Vec::with_capacity(2 * l + 1),
            segments: Vec::with_capacity(2 * l + 1),
            padding: Vec::with_capacity(2 * l + 1),
        };
        for (seg, user) in [(0, u), (1, v)] {
            let real = histories.real_len(user);
            for (k, &item) in histories.slots(user).iter().enumerate() {
                out.tokens.push(item);
                out.segments.push(seg);
                out.padding.push(k >= real);
            }
        }
        out.tokens.push(n_items);
        out.segments.push(2);
        out.padding.push(false);
        out
    }

    /// Logits `[P]` for `pairs`, reading item embeddings from `items`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        items: Var,
        histories: &HistoryTable,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        let p = pairs.len();
        let seq = 2 * histories.history_len() + 1;
        let n_items = tape.shape(items)[0];
        let d = self.config.dim;
        let mut tokens = Vec::with_capacity(p * seq);
        let mut segments = Vec::with_capacity(p * seq);
        let mut padding = Vec::with_capacity(p * seq);
        for &(u, v) in pairs {
            let t = Self::pair_tokens(histories, n_items, u, v);
            tokens.extend(t.tokens);
            segments.extend(t.segments);
            padding.extend(t.padding);
        }
        let cls = tape.param(store, self.cls);
        let table = tape.concat_rows(items, cls)?;
        let mut x = tape.gather_rows(table, Arc::new(tokens))?;
        let seg = tape.param(store, self.segment);
        let zero = tape.constant(Tensor::zeros(&[1, d]));
        let seg_table = tape.concat_rows(seg, zero)?;
        let s = tape.gather_rows(seg_table, Arc::new(segments))?;
        x = tape.add(x, s)?;

        let padding = Arc::new(padding);
        let n_layers = self.layers.len();
        for (k, layer) in self.layers.iter().enumerate() {
            x = self.encoder_layer(tape, store, layer, x, p, seq, &padding, k + 1 == n_layers)?;
        }
        // x is now the CLS output, [P, D]
        let w1 = tape.param(store, self.mlp_w1);
        let b1 = tape.param(store, self.mlp_b1);
        let w2 = tape.param(store, self.mlp_w2);
        let b2 = tape.param(store, self.mlp_b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add(o, b2)?;
        Ok(tape.reshape(o, vec![p])?)
    }

    /// Post-LN encoder layer. With `cls_only` only the CLS rows are used as
    /// queries, which is all the last layer needs.
    #[allow(clippy::too_many_arguments)]
    fn encoder_layer<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        layer: &EncoderLayer,
        x: Var,
        batch: usize,
        seq: usize,
        padding: &Arc<Vec<bool>>,
        cls_only: bool,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.dim / heads;
        let keep = self.config.keep_prob;
        let prm = |tape: &mut Tape<T>, id| tape.param(store, id);
        let (q_in, q_len) = if cls_only {
            let rows = (0..batch).map(|b| b * seq + seq - 1).collect();
            (tape.gather_rows(x, Arc::new(rows))?, 1)
        } else {
            (x, seq)
        };
        let linear = |tape: &mut Tape<T>, input: Var, w: ParamId, b: ParamId| -> Result<Var> {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            let y = tape.matmul(input, w)?;
            Ok(tape.add(y, b)?)
        };
        let q = linear(tape, q_in, layer.wq, layer.bq)?;
        let k = linear(tape, x, layer.wk, layer.bk)?;
        let v = linear(tape, x, layer.wv, layer.bv)?;
        let q = tape.split_heads(q, batch, q_len, heads)?;
        let k = tape.split_heads(k, batch, seq, heads)?;
        let v = tape.split_heads(v, batch, seq, heads)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, c::<T>(1.0 / (dh as f64).sqrt()));
        let mut mask = Vec::with_capacity(batch * heads * q_len * seq);
        for b in 0..batch {
            let keys = &padding[b * seq..(b + 1) * seq];
            for _ in 0..heads * q_len {
                mask.extend_from_slice(keys);
            }
        }
        let scores = tape.masked_fill(scores, Arc::new(mask), c::<T>(MASK_FILL))?;
        let attn = tape.softmax(scores);
        let attn = tape.dropout(attn, keep);
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.merge_heads(ctx, batch, heads)?;
        let o = linear(tape, ctx, layer.wo, layer.bo)?;
        let r = tape.add(q_in, o)?;
        let (g1, b1) = (prm(tape, layer.ln1_g), prm(tape, layer.ln1_b));
        let h = tape.layer_norm(r, g1, b1, c::<T>(LN_EPS))?;
        let f = linear(tape, h, layer.ff1_w, layer.ff1_b)?;
        let f = tape.gelu(f);
        let f = linear(tape, f, layer.ff2_w, layer.ff2_b)?;
        let f = tape.dropout(f, keep);
        let r = tape.add(h, f)?;
        let (g2, b2) = (prm(tape, layer.ln2_g), prm(tape, layer.ln2_b));
        Ok(tape.layer_norm(r, g2, b2, c::<T>(LN_EPS))?)
    }
}

/// Tape inputs a scorer may read.
#[derive(Clone, Copy, Debug)]
pub struct ScorerInputs {
    /// Layer-0 item table.
    pub items: Var,
    /// Layer-0 user table.
    pub users0: Var,
    /// First-hop user representations, needed by `user-layer-1` only.
    pub users1: Option<Var>,
}

/// Confidence logits `[P]` for directed `pairs` under `variant`.
pub fn relation_confidence<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    head: &ConfidenceHead,
    inputs: ScorerInputs,
    histories: &HistoryTable,
    pairs: &[(usize, usize)],
    variant: ScorerVariant,
) -> Result<Var> {
    let us = || Arc::new(pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let vs = || Arc::new(pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let dot_users = |tape: &mut Tape<T>, table: Var| -> Result<Var> {
        let a = tape.gather_rows(table, us())?;
        let b = tape.gather_rows(table, vs())?;
        Ok(tape.row_dot(a, b)?)
    };
    match variant {
        ScorerVariant::TransformerHistory => {
            head.forward(tape, store, inputs.items, histories, pairs)
        }
        ScorerVariant::UserLayer0 => dot_users(tape, inputs.users0),
        ScorerVariant::UserLayer1 => {
            let table = inputs.users1.ok_or_else(|| {
                Error::Invalid("user-layer-1 scorer needs first-hop representations".into())
            })?;
            dot_users(tape, table)
        }
        ScorerVariant::ItemMeanPool => {
            let p = pairs.len();
            let n_items = tape.shape(inputs.items)[0];
            let mut entries = Vec::new();
            let mut scale = Vec::with_capacity(2 * p);
            for (side, pick) in [(0, 0usize), (1, 1)] {
                for (k, &(u, v)) in pairs.iter().enumerate() {
                    let user = if pick == 0 { u } else { v };
                    let real = histories.real(user);
                    entries.extend(real.iter().map(|&i| (side * p + k, i)));
                    scale.push(c::<T>(1.0 / real.len().max(1) as f64));
                }
            }
            let pool = Csr::from_pairs(2 * p, n_items, &entries)?;
            let sums = tape.aggregate(Arc::new(pool), inputs.items)?;
            let means = tape.scale_rows(sums, Arc::new(scale))?;
            let a = tape.gather_rows(means, Arc::new((0..p).collect()))?;
            let b = tape.gather_rows(means, Arc::new((p..2 * p).collect()))?;
            Ok(tape.row_dot(a, b)?)
        }
    }
}
