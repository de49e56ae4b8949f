//! Graphs, batching, tokenisation, generators and structural transforms.

mod batch;
pub mod generate;
mod io;
mod line_graph;
mod tokens;
mod wl;

pub use batch::BatchedGraph;
pub use io::{parse_graphs, read_graphs, write_graph, write_graphs};
pub use line_graph::line_graph;
pub use tokens::{build_edge_tokens, build_node_tokens, TokenKind, TokenSet};
pub use wl::wl1_hash;

use crate::error::{EsaError, Result};

/// Supervision attached to a graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// One value vector per graph (regression values, a class index, or labels).
    Graph(Vec<f64>),
    /// One value per node.
    Nodes(Vec<f64>),
}

/// Directed graph with dense node and edge features.
///
/// Undirected graphs carry both orientations `(i, j)` and `(j, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_dim: usize,
    node_features: Vec<f64>,
    edge_dim: usize,
    edge_features: Vec<f64>,
    pub target: Option<Target>,
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        node_dim: usize,
        node_features: Vec<f64>,
        edge_dim: usize,
        edge_features: Vec<f64>,
    ) -> Result<Self> {
        if let Some(&(s, t)) = edges.iter().find(|&&(s, t)| s >= num_nodes || t >= num_nodes) {
            return Err(EsaError::InvalidGraph(format!(
                "edge ({s}, {t}) out of range for {num_nodes} nodes"
            )));
        }
        if node_features.len() != num_nodes * node_dim {
            return Err(EsaError::InvalidGraph(format!(
                "expected {} node feature values, got {}",
                num_nodes * node_dim,
                node_features.len()
            )));
        }
        if edge_features.len() != edges.len() * edge_dim {
            return Err(EsaError::InvalidGraph(format!(
                "expected {} edge feature values, got {}",
                edges.len() * edge_dim,
                edge_features.len()
            )));
        }
        Ok(Self {
            num_nodes,
            edges,
            node_dim,
            node_features,
            edge_dim,
            edge_features,
            target: None,
        })
    }

    /// Undirected graph from an edge list, stored as `(u, v), (v, u)` per
    /// pair. Self-loops are stored once.
    pub fn undirected(num_nodes: usize, pairs: &[(usize, usize)], node_dim: usize, node_features: Vec<f64>) -> Result<Self> {
        let mut edges = Vec::with_capacity(pairs.len() * 2);
        for &(u, v) in pairs {
            edges.push((u, v));
            if u != v {
                edges.push((v, u));
            }
        }
        Self::new(num_nodes, edges, node_dim, node_features, 0, Vec::new())
    }

    /// Same as [`Graph::undirected`] with a constant scalar feature per node.
    pub fn undirected_unlabelled(num_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        Self::undirected(num_nodes, pairs, 1, vec![1.0; num_nodes])
    }

    pub fn with_target(mut self, target: Target) -> Result<Self> {
        if let Target::Nodes(v) = &target {
            if v.len() != self.num_nodes {
                return Err(EsaError::InvalidGraph(format!(
                    "node target has {} entries for {} nodes",
                    v.len(),
                    self.num_nodes
                )));
            }
        }
        self.target = Some(target);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_dim(&self) -> usize {
        self.node_dim
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    pub fn node_features(&self) -> &[f64] {
        &self.node_features
    }

    pub fn edge_features(&self) -> &[f64] {
        &self.edge_features
    }

    pub fn node_feature(&self, i: usize) -> &[f64] {
        &self.node_features[i * self.node_dim..(i + 1) * self.node_dim]
    }

    pub fn edge_feature(&self, e: usize) -> &[f64] {
        &self.edge_features[e * self.edge_dim..(e + 1) * self.edge_dim]
    }

    /// Token of edge `e`: source features, target features, edge features.
    pub fn edge_token(&self, e: usize) -> Vec<f64> {
        let (s, t) = self.edges[e];
        let mut tok = Vec::with_capacity(2 * self.node_dim + self.edge_dim);
        tok.extend_from_slice(self.node_feature(s));
        tok.extend_from_slice(self.node_feature(t));
        tok.extend_from_slice(self.edge_feature(e));
        tok
    }

    /// Out-neighbour lists.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(s, t) in &self.edges {
            adj[s].push(t);
        }
        adj
    }

    /// Out-degree of every node.
    pub fn out_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(s, _) in &self.edges {
            deg[s] += 1;
        }
        deg
    }

    /// Replaces node features by a one-hot encoding of out-degree, with
    /// degrees above `max_degree` sharing the last slot.
    pub fn with_degree_features(mut self, max_degree: usize) -> Self {
        let dim = max_degree + 1;
        let mut feats = vec![0.0; self.num_nodes * dim];
        for (i, d) in self.out_degrees().into_iter().enumerate() {
            feats[i * dim + d.min(max_degree)] = 1.0;
        }
        self.node_dim = dim;
        self.node_features = feats;
        self
    }

    /// Renames node `i` to `perm[i]`, keeping edge order.
    pub fn relabel_nodes(&self, perm: &[usize]) -> Result<Self> {
        check_perm(perm, self.num_nodes)?;
        let mut feats = vec![0.0; self.node_features.len()];
        for (i, &p) in perm.iter().enumerate() {
            feats[p * self.node_dim..(p + 1) * self.node_dim].copy_from_slice(self.node_feature(i));
        }
        let edges = self.edges.iter().map(|&(s, t)| (perm[s], perm[t])).collect();
        let target = match &self.target {
            Some(Target::Nodes(v)) => {
                let mut out = vec![0.0; v.len()];
                for (i, &p) in perm.iter().enumerate() {
                    out[p] = v[i];
                }
                Some(Target::Nodes(out))
            }
            other => other.clone(),
        };
        let mut g = Self::new(
            self.num_nodes,
            edges,
            self.node_dim,
            feats,
            self.edge_dim,
            self.edge_features.clone(),
        )?;
        g.target = target;
        Ok(g)
    }

    /// Reorders edges so that new edge `k` is old edge `order[k]`.
    pub fn reorder_edges(&self, order: &[usize]) -> Result<Self> {
        check_perm(order, self.edges.len())?;
        let edges = order.iter().map(|&k| self.edges[k]).collect();
        let mut feats = Vec::with_capacity(self.edge_features.len());
        for &k in order {
            feats.extend_from_slice(self.edge_feature(k));
        }
        let mut g = Self::new(
            self.num_nodes,
            edges,
            self.node_dim,
            self.node_features.clone(),
            self.edge_dim,
            feats,
        )?;
        g.target = self.target.clone();
        Ok(g)
    }
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(EsaError::Contract(format!("permutation of length {} for {n} items", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(EsaError::Contract("not a permutation".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_edges_and_bad_feature_counts() {
        assert!(Graph::new(2, vec![(0, 2)], 1, vec![0.0, 0.0], 0, vec![]).is_err());
        assert!(Graph::new(2, vec![(0, 1)], 1, vec![0.0], 0, vec![]).is_err());
        assert!(Graph::new(2, vec![(0, 1)], 1, vec![0.0, 1.0], 2, vec![1.0]).is_err());
    }

    #[test]
    fn undirected_stores_both_orientations() {
        let g = Graph::undirected_unlabelled(3, &[(0, 1), (1, 2), (2, 2)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 0), (1, 2), (2, 1), (2, 2)]);
    }

    #[test]
    fn degree_features_are_capped_one_hot() {
        let g = Graph::undirected_unlabelled(4, &[(0, 1), (0, 2), (0, 3)])
            .unwrap()
            .with_degree_features(2);
        assert_eq!(g.node_dim(), 3);
        assert_eq!(g.node_feature(0), &[0.0, 0.0, 1.0]);
        assert_eq!(g.node_feature(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn relabel_moves_features_and_node_targets() {
        let g = Graph::undirected(2, &[(0, 1)], 1, vec![5.0, 7.0])
            .unwrap()
            .with_target(Target::Nodes(vec![1.0, 2.0]))
            .unwrap();
        let r = g.relabel_nodes(&[1, 0]).unwrap();
        assert_eq!(r.node_features(), &[7.0, 5.0]);
        assert_eq!(r.edges(), &[(1, 0), (0, 1)]);
        assert_eq!(r.target, Some(Target::Nodes(vec![2.0, 1.0])));
        assert!(g.relabel_nodes(&[0, 0]).is_err());
    }
}
