use gdmsr_numerics::Csr;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Where a directed social edge came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Observed,
    Fake,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Observed => "observed",
            Provenance::Fake => "fake",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "observed" => Some(Provenance::Observed),
            "fake" => Some(Provenance::Fake),
            _ => None,
        }
    }
}

/// Directed user → friend adjacency with a mutable per-edge active flag.
///
/// Edges are addressed by their position in the CSR layout; friends within
/// a row are sorted ascending, so edge order is ascending `(u, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SocialGraph {
    adjacency: Csr,
    active: Vec<bool>,
    provenance: Vec<Provenance>,
}

impl SocialGraph {
    pub fn empty(n_users: usize) -> Self {
        Self::from_directed(n_users, Vec::new()).expect("empty graph")
    }

    /// Builds from directed `(u, v, provenance)` triples. Self-loops are
    /// dropped; for duplicate `(u, v)` the first occurrence wins. All edges
    /// start active.
    pub fn from_directed(
        n_users: usize,
        mut edges: Vec<(usize, usize, Provenance)>,
    ) -> Result<Self> {
        if let Some(&(u, v, _)) = edges
            .iter()
            .find(|&&(u, v, _)| u >= n_users || v >= n_users)
        {
            return Err(Error::Invalid(format!(
                "social edge ({u}, {v}) out of range for {n_users} users"
            )));
        }
        edges.retain(|&(u, v, _)| u != v);
        // stable sort keeps the first provenance among duplicates
        edges.sort_by_key(|&(u, v, _)| (u, v));
        edges.dedup_by_key(|&mut (u, v, _)| (u, v));
        let pairs: Vec<(usize, usize)> = edges.iter().map(|&(u, v, _)| (u, v)).collect();
        let adjacency = Csr::from_pairs(n_users, n_users, &pairs)?;
        let provenance = edges.iter().map(|&(_, _, p)| p).collect();
        Ok(Self {
            active: vec![true; pairs.len()],
            adjacency,
            provenance,
        })
    }

    /// Each undirected pair becomes two directed edges.
    pub fn from_undirected(
        n_users: usize,
        pairs: &[(usize, usize)],
        provenance: Provenance,
    ) -> Result<Self> {
        let edges = pairs
            .iter()
            .flat_map(|&(u, v)| [(u, v, provenance), (v, u, provenance)])
            .collect();
        Self::from_directed(n_users, edges)
    }

    pub fn n_users(&self) -> usize {
        self.adjacency.n_rows()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.nnz()
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn adjacency(&self) -> &Csr {
        &self.adjacency
    }

    /// Original out-degree `|R_u|` (active or not).
    pub fn degree(&self, u: usize) -> usize {
        self.adjacency.degree(u)
    }

    pub fn friends(&self, u: usize) -> &[usize] {
        self.adjacency.row(u)
    }

    /// Edge ids of `u`'s out-edges.
    pub fn edge_range(&self, u: usize) -> std::ops::Range<usize> {
        self.adjacency.row_range(u)
    }

    pub fn source(&self, edge: usize) -> usize {
        self.adjacency.offsets().partition_point(|&o| o <= edge) - 1
    }

    pub fn target(&self, edge: usize) -> usize {
        self.adjacency.indices()[edge]
    }

    pub fn edge_id(&self, u: usize, v: usize) -> Option<usize> {
        let range = self.edge_range(u);
        self.adjacency
            .row(u)
            .binary_search(&v)
            .ok()
            .map(|k| range.start + k)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edge_id(u, v).is_some()
    }

    pub fn is_active(&self, edge: usize) -> bool {
        self.active[edge]
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn provenance(&self, edge: usize) -> Provenance {
        self.provenance[edge]
    }

    pub fn provenances(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn set_active(&mut self, edge: usize, on: bool) {
        self.active[edge] = on;
    }

    pub fn set_all_active(&mut self) {
        self.active.iter_mut().for_each(|a| *a = true);
    }

    /// Replaces every active flag. `flags.len()` must equal the edge count.
    pub fn set_active_flags(&mut self, flags: Vec<bool>) -> Result<()> {
        if flags.len() != self.active.len() {
            return Err(Error::Invalid(format!(
                "{} flags for {} edges",
                flags.len(),
                self.active.len()
            )));
        }
        self.active = flags;
        Ok(())
    }

    /// Active friends of `u`.
    pub fn active_friends(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        self.edge_range(u)
            .filter(|&e| self.active[e])
            .map(|e| self.adjacency.indices()[e])
    }

    /// Adjacency restricted to active edges.
    pub fn active_csr(&self) -> Csr {
        let mut offsets = Vec::with_capacity(self.n_users() + 1);
        let mut indices = Vec::with_capacity(self.n_active());
        offsets.push(0);
        for u in 0..self.n_users() {
            indices.extend(self.active_friends(u));
            offsets.push(indices.len());
        }
        Csr::new(offsets, indices, self.n_users()).expect("filtered csr stays valid")
    }

    /// `(u, v, provenance, active)` for every edge in id order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, Provenance, bool)> + '_ {
        (0..self.n_users()).flat_map(move |u| {
            self.edge_range(u).map(move |e| {
                (
                    u,
                    self.adjacency.indices()[e],
                    self.provenance[e],
                    self.active[e],
                )
            })
        })
    }

    /// New fully-active graph holding only the currently active edges.
    pub fn active_subgraph(&self) -> SocialGraph {
        let edges = self
            .edges()
            .filter(|e| e.3)
            .map(|(u, v, p, _)| (u, v, p))
            .collect();
        SocialGraph::from_directed(self.n_users(), edges).expect("subgraph of a valid graph")
    }

    /// Number of edges with the given provenance.
    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }
}
