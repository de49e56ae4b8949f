use super::Graph;
use crate::error::Result;

/// Directed edges that touch each node (self-loops listed once).
pub(crate) fn incidence(g: &Graph) -> Vec<Vec<usize>> {
    let mut inc = vec![Vec::new(); g.num_nodes()];
    for (e, &(s, t)) in g.edges().iter().enumerate() {
        inc[s].push(e);
        if t != s {
            inc[t].push(e);
        }
    }
    inc
}

/// Line graph over directed edges: one node per edge of `g`, two nodes
/// adjacent iff the edges share an endpoint. Node features are the edge
/// tokens of `g`; the result has no edge features.
pub fn line_graph(g: &Graph) -> Result<Graph> {
    let inc = incidence(g);
    let mut edges = Vec::new();
    let mut nbrs = Vec::new();
    for (p, &(u, v)) in g.edges().iter().enumerate() {
        nbrs.clear();
        nbrs.extend_from_slice(&inc[u]);
        nbrs.extend_from_slice(&inc[v]);
        nbrs.sort_unstable();
        nbrs.dedup();
        edges.extend(nbrs.iter().filter(|&&q| q != p).map(|&q| (p, q)));
    }
    let dim = 2 * g.node_dim() + g.edge_dim();
    let feats = (0..g.num_edges()).flat_map(|e| g.edge_token(e)).collect();
    Graph::new(g.num_edges(), edges, dim, feats, 0, Vec::new())
}
