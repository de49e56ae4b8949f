//! Edge- and node-adjacency attention masks for batched graphs.
//!
//! Masks use a single convention: `true` means the (query, key) pair is
//! blocked. The sparse layout lists the allowed `(b, i, j)` triples instead,
//! sorted lexicographically.

use std::collections::BTreeMap;

use crate::error::{contract, EsaError, Result};
use crate::graph::{BatchedGraph, Graph};
use crate::tensor::{AttnPattern, Element, Tensor};

/// Per-segment counters: segment `s` spans `starts[s]..starts[s + 1]`, the
/// last one ends at `total`.
///
/// `consecutive(&[1, 4, 6], 10) == [0, 1, 2, 0, 1, 0, 1, 2, 3]`.
pub fn consecutive(starts: &[usize], total: usize) -> Result<Vec<usize>> {
    if starts.windows(2).any(|w| w[0] >= w[1]) {
        return contract(format!("consecutive: starts {starts:?} are not strictly increasing"));
    }
    let Some(&first) = starts.first() else {
        return Ok(Vec::new());
    };
    let last = *starts.last().expect("nonempty");
    if total < last {
        return contract(format!("consecutive: total {total} is below the last start {last}"));
    }
    let mut out = Vec::with_capacity(total - first);
    for (s, &start) in starts.iter().enumerate() {
        let end = starts.get(s + 1).copied().unwrap_or(total);
        out.extend(0..end - start);
    }
    Ok(out)
}

/// Index of the first occurrence of each distinct value, in ascending value order.
pub fn first_unique_index<T: Ord + Copy>(xs: &[T]) -> Vec<usize> {
    let mut first = BTreeMap::new();
    for (i, &x) in xs.iter().enumerate() {
        first.entry(x).or_insert(i);
    }
    first.into_values().collect()
}

/// Dense `N_e × N_e` adjacency of directed edges (row-major, `true` = adjacent).
/// Edges are adjacent when they share a source, share a target, or one's
/// source is the other's target. The diagonal is always set.
pub fn edge_adjacency(edges: &[(usize, usize)]) -> Vec<bool> {
    let n = edges.len();
    let mut adj = vec![false; n * n];
    for (p, &(sp, tp)) in edges.iter().enumerate() {
        for (q, &(sq, tq)) in edges.iter().enumerate() {
            adj[p * n + q] = sp == sq || tp == tq || sp == tq || tp == sq;
        }
    }
    adj
}

/// Sparse form of [`edge_adjacency`]: sorted adjacent edge ids per edge.
/// Runs in time proportional to the number of adjacent pairs.
pub fn edge_adjacency_lists(edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let num_nodes = edges.iter().map(|&(s, t)| s.max(t) + 1).max().unwrap_or(0);
    let incident = incidence(num_nodes, edges);
    edges
        .iter()
        .map(|&(s, t)| {
            let mut row: Vec<usize> = incident[s].clone();
            if t != s {
                row.extend_from_slice(&incident[t]);
                row.sort_unstable();
                row.dedup();
            }
            row
        })
        .collect()
}

/// Edge ids touching each node (as source or target), ascending, without repeats.
fn incidence(num_nodes: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut inc = vec![Vec::new(); num_nodes];
    for (e, &(s, t)) in edges.iter().enumerate() {
        inc[s].push(e);
        if t != s {
            inc[t].push(e);
        }
    }
    inc
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskLayout {
    /// Row-major `[B, L, L]`, `true` = blocked.
    Dense(Vec<bool>),
    /// Allowed `(b, i, j)` triples, sorted.
    Sparse(Vec<[u32; 3]>),
}

/// Attention mask over `B` graph slots of `L` tokens each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    batch: usize,
    len: usize,
    layout: MaskLayout,
}

impl AttnMask {
    pub fn from_dense(batch: usize, len: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != batch * len * len {
            return contract(format!(
                "dense mask of {} entries for shape [{batch}, {len}, {len}]",
                blocked.len()
            ));
        }
        Ok(Self { batch, len, layout: MaskLayout::Dense(blocked) })
    }

    pub fn from_allowed(batch: usize, len: usize, mut allowed: Vec<[u32; 3]>) -> Result<Self> {
        allowed.sort_unstable();
        allowed.dedup();
        if let Some(t) = allowed
            .iter()
            .find(|t| t[0] as usize >= batch || t[1] as usize >= len || t[2] as usize >= len)
        {
            return contract(format!("mask entry {t:?} outside [{batch}, {len}, {len}]"));
        }
        Ok(Self { batch, len, layout: MaskLayout::Sparse(allowed) })
    }

    /// Real tokens may attend to every real token of their own graph; padding is blocked.
    pub fn full(batch: usize, len: usize, counts: &[usize]) -> Result<Self> {
        check_counts(counts, batch, len)?;
        let mut allowed = Vec::new();
        for (b, &n) in counts.iter().enumerate() {
            for i in 0..n as u32 {
                allowed.extend((0..n as u32).map(|j| [b as u32, i, j]));
            }
        }
        Self::from_allowed(batch, len, allowed)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layout(&self) -> &MaskLayout {
        &self.layout
    }

    pub fn is_blocked(&self, b: usize, i: usize, j: usize) -> bool {
        match &self.layout {
            MaskLayout::Dense(d) => d[(b * self.len + i) * self.len + j],
            MaskLayout::Sparse(s) => s.binary_search(&[b as u32, i as u32, j as u32]).is_err(),
        }
    }

    pub fn num_allowed(&self) -> usize {
        match &self.layout {
            MaskLayout::Dense(d) => d.iter().filter(|&&x| !x).count(),
            MaskLayout::Sparse(s) => s.len(),
        }
    }

    pub fn to_dense(&self) -> Self {
        match &self.layout {
            MaskLayout::Dense(_) => self.clone(),
            MaskLayout::Sparse(s) => {
                let l = self.len;
                let mut d = vec![true; self.batch * l * l];
                for &[b, i, j] in s {
                    d[(b as usize * l + i as usize) * l + j as usize] = false;
                }
                Self { batch: self.batch, len: l, layout: MaskLayout::Dense(d) }
            }
        }
    }

    pub fn to_sparse(&self) -> Self {
        match &self.layout {
            MaskLayout::Sparse(_) => self.clone(),
            MaskLayout::Dense(d) => {
                let l = self.len;
                let allowed = d
                    .iter()
                    .enumerate()
                    .filter(|(_, &blocked)| !blocked)
                    .map(|(k, _)| [(k / (l * l)) as u32, (k / l % l) as u32, (k % l) as u32])
                    .collect();
                Self { batch: self.batch, len: l, layout: MaskLayout::Sparse(allowed) }
            }
        }
    }

    /// Allowed triples in sorted order regardless of layout.
    pub fn allowed(&self) -> Vec<[u32; 3]> {
        match self.to_sparse().layout {
            MaskLayout::Sparse(s) => s,
            MaskLayout::Dense(_) => unreachable!(),
        }
    }

    /// The `L × L` blocked matrix of graph slot `b`.
    pub fn block(&self, b: usize) -> Vec<bool> {
        let l = self.len;
        let mut out = vec![true; l * l];
        for i in 0..l {
            for j in 0..l {
                out[i * l + j] = self.is_blocked(b, i, j);
            }
        }
        out
    }

    /// `[B, L, L]` tensor with 0 where allowed and `floor` where blocked.
    pub fn to_additive<T: Element>(&self, floor: T) -> Tensor<T> {
        let l = self.len;
        let mut t = Tensor::full(vec![self.batch, l, l], floor);
        let data = t.data_mut();
        match &self.layout {
            MaskLayout::Dense(d) => {
                for (x, &blocked) in data.iter_mut().zip(d) {
                    if !blocked {
                        *x = T::zero();
                    }
                }
            }
            MaskLayout::Sparse(s) => {
                for &[b, i, j] in s {
                    data[(b as usize * l + i as usize) * l + j as usize] = T::zero();
                }
            }
        }
        t
    }

    /// Compressed-row pattern consumed by the fused attention primitive.
    pub fn to_pattern(&self) -> AttnPattern {
        let l = self.len;
        let mut rows = vec![Vec::new(); self.batch * l];
        for [b, i, j] in self.allowed() {
            rows[b as usize * l + i as usize].push(j);
        }
        AttnPattern::from_rows(self.batch, l, l, rows).expect("mask entries are in range")
    }
}

fn check_counts(counts: &[usize], batch: usize, len: usize) -> Result<()> {
    if counts.len() != batch {
        return contract(format!("{} token counts for batch size {batch}", counts.len()));
    }
    if let Some(&n) = counts.iter().max() {
        if n > len {
            return contract(format!("mask size {len} is smaller than the largest token count {n}"));
        }
    }
    Ok(())
}

fn check_batch_map(edge_index: &[(usize, usize)], batch_map: &[usize], batch: usize) -> Result<()> {
    if batch_map.windows(2).any(|w| w[0] > w[1]) {
        return contract("batch map must be non-decreasing");
    }
    if batch_map.last().is_some_and(|&b| b >= batch) {
        return contract(format!("batch map refers to graph {} of {batch}", batch_map.last().unwrap()));
    }
    for &(s, t) in edge_index {
        if s >= batch_map.len() || t >= batch_map.len() {
            return Err(EsaError::InvalidGraph(format!("edge ({s}, {t}) outside the batch map")));
        }
        if batch_map[s] != batch_map[t] {
            return Err(EsaError::InvalidGraph(format!("edge ({s}, {t}) crosses graphs")));
        }
    }
    Ok(())
}

/// Edge-token mask. Edges of each graph are numbered locally by their
/// position in that graph's contiguous run of the batched edge list; edge
/// `i` may attend to edge `j` of the same graph iff they are adjacent.
pub fn edge_mask(
    batched_edge_index: &[(usize, usize)],
    batch_map: &[usize],
    batch: usize,
    len: usize,
) -> Result<AttnMask> {
    check_batch_map(batched_edge_index, batch_map, batch)?;
    let edge_to_graph: Vec<usize> = batched_edge_index.iter().map(|&(s, _)| batch_map[s]).collect();
    if edge_to_graph.windows(2).any(|w| w[0] > w[1]) {
        return contract("edges must be grouped by graph in batch order");
    }
    let local = consecutive(&first_unique_index(&edge_to_graph), batched_edge_index.len())?;
    if let Some(&m) = local.iter().max() {
        if m >= len {
            return contract(format!("mask size {len} is smaller than the largest edge count {}", m + 1));
        }
    }
    let adj = edge_adjacency_lists(batched_edge_index);
    let mut allowed = Vec::with_capacity(adj.iter().map(Vec::len).sum());
    for (p, row) in adj.iter().enumerate() {
        let (b, i) = (edge_to_graph[p] as u32, local[p] as u32);
        allowed.extend(row.iter().map(|&q| [b, i, local[q] as u32]));
    }
    AttnMask::from_allowed(batch, len, allowed)
}

/// Node-token mask: node `i` may attend to node `j` of the same graph iff
/// the edge `(i, j)` exists. Self-attention needs an explicit self-loop.
pub fn node_mask(
    batched_edge_index: &[(usize, usize)],
    batch_map: &[usize],
    batch: usize,
    len: usize,
) -> Result<AttnMask> {
    check_batch_map(batched_edge_index, batch_map, batch)?;
    let mut offsets = vec![usize::MAX; batch];
    let mut counts = vec![0usize; batch];
    for (n, &b) in batch_map.iter().enumerate() {
        offsets[b] = offsets[b].min(n);
        counts[b] += 1;
    }
    check_counts(&counts, batch, len)?;
    let allowed = batched_edge_index
        .iter()
        .map(|&(s, t)| {
            let b = batch_map[s];
            [b as u32, (s - offsets[b]) as u32, (t - offsets[b]) as u32]
        })
        .collect();
    AttnMask::from_allowed(batch, len, allowed)
}

/// [`edge_mask`] for a batch, padded to the batch maximum unless `len` is given.
pub fn batch_edge_mask(batch: &BatchedGraph, len: Option<usize>) -> Result<AttnMask> {
    edge_mask(
        batch.edge_index(),
        batch.batch_map(),
        batch.num_graphs(),
        len.unwrap_or(batch.max_edges()),
    )
}

/// [`node_mask`] for a batch, padded to the batch maximum unless `len` is given.
pub fn batch_node_mask(batch: &BatchedGraph, len: Option<usize>) -> Result<AttnMask> {
    node_mask(
        batch.edge_index(),
        batch.batch_map(),
        batch.num_graphs(),
        len.unwrap_or(batch.max_nodes()),
    )
}

/// Bytes per stored coordinate triple: three 64-bit indices.
pub const SPARSE_ENTRY_BYTES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StorageReport {
    pub tokens: usize,
    pub dense_bytes: u128,
    pub sparse_entries: u64,
    pub sparse_bytes: u64,
}

/// Storage needed for the edge mask of one graph, as a dense `L × L` byte
/// matrix versus a list of allowed coordinates. Counted without building either.
pub fn mask_storage_report(g: &Graph, len: Option<usize>) -> StorageReport {
    let l = len.unwrap_or(g.num_edges()).max(g.num_edges());
    let incident = incidence(g.num_nodes(), g.edges());
    let mut between: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for &(s, t) in g.edges() {
        if s != t {
            *between.entry((s.min(t), s.max(t))).or_default() += 1;
        }
    }
    let entries: u64 = g
        .edges()
        .iter()
        .map(|&(s, t)| {
            if s == t {
                incident[s].len() as u64
            } else {
                (incident[s].len() + incident[t].len()) as u64 - between[&(s.min(t), s.max(t))]
            }
        })
        .sum();
    StorageReport {
        tokens: l,
        dense_bytes: (l as u128) * (l as u128),
        sparse_entries: entries,
        sparse_bytes: entries * SPARSE_ENTRY_BYTES as u64,
    }
}
