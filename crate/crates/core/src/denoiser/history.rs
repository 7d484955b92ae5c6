use crate::dataset::Dataset;
use crate::{Error, Result};

/// Fixed-length item history of one user. Real items come first, in
/// descending popularity; the rest is padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistorySequence {
    pub owner: usize,
    /// Length `L`; padded slots hold item 0 and are flagged in `padding`.
    pub items: Vec<usize>,
    pub padding: Vec<bool>,
}

impl HistorySequence {
    pub fn real_len(&self) -> usize {
        self.padding.iter().filter(|&&p| !p).count()
    }

    pub fn real_items(&self) -> &[usize] {
        &self.items[..self.real_len()]
    }
}

/// Top-`len` train items of `u` by descending popularity (ties: lower item
/// index first), padded to `len`.
pub fn build_history(d: &Dataset, u: usize, len: usize) -> Result<HistorySequence> {
    let items = d.items_of(u);
    if items.is_empty() {
        return Err(Error::Invalid(format!("user {u} has an empty history")));
    }
    let pop = d.popularity();
    let mut ranked = items.to_vec();
    ranked.sort_by(|&a, &b| pop[b].cmp(&pop[a]).then(a.cmp(&b)));
    ranked.truncate(len);
    let real = ranked.len();
    ranked.resize(len, 0);
    let padding = (0..len).map(|k| k >= real).collect();
    Ok(HistorySequence {
        owner: u,
        items: ranked,
        padding,
    })
}

/// Histories of every user, stored flat.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryTable {
    len: usize,
    items: Vec<usize>,
    lengths: Vec<usize>,
}

impl HistoryTable {
    pub fn new(d: &Dataset, len: usize) -> Result<Self> {
        let mut items = Vec::with_capacity(d.n_users() * len);
        let mut lengths = Vec::with_capacity(d.n_users());
        for u in 0..d.n_users() {
            let h = build_history(d, u, len)?;
            lengths.push(h.real_len());
            items.extend_from_slice(&h.items);
        }
        Ok(Self {
            len,
            items,
            lengths,
        })
    }

    pub fn history_len(&self) -> usize {
        self.len
    }

    pub fn n_users(&self) -> usize {
        self.lengths.len()
    }

    /// All `L` slots of `u` (padding included).
    pub fn slots(&self, u: usize) -> &[usize] {
        &self.items[u * self.len..(u + 1) * self.len]
    }

    pub fn real(&self, u: usize) -> &[usize] {
        &self.slots(u)[..self.lengths[u]]
    }

    pub fn real_len(&self, u: usize) -> usize {
        self.lengths[u]
    }
}
