use super::Graph;
use crate::error::{EsaError, Result};

/// Several graphs concatenated into one disjoint union.
#[derive(Clone, Debug)]
pub struct BatchedGraph {
    graphs: Vec<Graph>,
    node_offsets: Vec<usize>,
    edge_offsets: Vec<usize>,
    edge_index: Vec<(usize, usize)>,
    batch_map: Vec<usize>,
}

impl BatchedGraph {
    pub fn new(graphs: Vec<Graph>) -> Result<Self> {
        let Some(first) = graphs.first() else {
            return Err(EsaError::Contract("cannot batch an empty list of graphs".into()));
        };
        let (dn, de) = (first.node_dim(), first.edge_dim());
        if let Some(g) = graphs.iter().find(|g| g.node_dim() != dn || g.edge_dim() != de) {
            return Err(EsaError::InvalidGraph(format!(
                "inconsistent feature dims in batch: ({dn}, {de}) vs ({}, {})",
                g.node_dim(),
                g.edge_dim()
            )));
        }
        let mut node_offsets = Vec::with_capacity(graphs.len() + 1);
        let mut edge_offsets = Vec::with_capacity(graphs.len() + 1);
        let mut edge_index = Vec::new();
        let mut batch_map = Vec::new();
        let (mut n_off, mut e_off) = (0, 0);
        for (b, g) in graphs.iter().enumerate() {
            node_offsets.push(n_off);
            edge_offsets.push(e_off);
            edge_index.extend(g.edges().iter().map(|&(s, t)| (s + n_off, t + n_off)));
            batch_map.extend(std::iter::repeat_n(b, g.num_nodes()));
            n_off += g.num_nodes();
            e_off += g.num_edges();
        }
        node_offsets.push(n_off);
        edge_offsets.push(e_off);
        Ok(Self {
            graphs,
            node_offsets,
            edge_offsets,
            edge_index,
            batch_map,
        })
    }

    pub fn single(g: Graph) -> Self {
        Self::new(vec![g]).expect("single graph batch")
    }

    pub fn num_graphs(&self) -> usize {
        self.graphs.len()
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn graph(&self, b: usize) -> &Graph {
        &self.graphs[b]
    }

    /// Edge list with node ids shifted into the concatenated numbering.
    pub fn edge_index(&self) -> &[(usize, usize)] {
        &self.edge_index
    }

    /// Graph index of every node in the concatenated numbering.
    pub fn batch_map(&self) -> &[usize] {
        &self.batch_map
    }

    pub fn node_offset(&self, b: usize) -> usize {
        self.node_offsets[b]
    }

    pub fn edge_offset(&self, b: usize) -> usize {
        self.edge_offsets[b]
    }

    pub fn max_nodes(&self) -> usize {
        self.graphs.iter().map(Graph::num_nodes).max().unwrap_or(0)
    }

    pub fn max_edges(&self) -> usize {
        self.graphs.iter().map(Graph::num_edges).max().unwrap_or(0)
    }

    pub fn node_dim(&self) -> usize {
        self.graphs[0].node_dim()
    }

    pub fn edge_dim(&self) -> usize {
        self.graphs[0].edge_dim()
    }

    pub fn unbatch(&self) -> Vec<Graph> {
        self.graphs.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_and_batch_map() {
        let a = Graph::undirected_unlabelled(3, &[(0, 1), (1, 2)]).unwrap();
        let b = Graph::undirected_unlabelled(2, &[(0, 1)]).unwrap();
        let batch = BatchedGraph::new(vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(batch.batch_map(), &[0, 0, 0, 1, 1]);
        assert_eq!(&batch.edge_index()[4..], &[(3, 4), (4, 3)]);
        for &(s, t) in batch.edge_index() {
            assert_eq!(batch.batch_map()[s], batch.batch_map()[t]);
        }
        let again = BatchedGraph::new(batch.unbatch()).unwrap();
        assert_eq!(again.edge_index(), batch.edge_index());
        assert_eq!(again.unbatch(), vec![a.clone(), b]);

        let single = BatchedGraph::single(a.clone());
        assert!(single.batch_map().iter().all(|&x| x == 0));
        assert_eq!(single.edge_index(), a.edges());
    }

    #[test]
    fn rejects_empty_and_inconsistent() {
        assert!(BatchedGraph::new(vec![]).is_err());
        let a = Graph::undirected_unlabelled(2, &[(0, 1)]).unwrap();
        let b = Graph::undirected(2, &[(0, 1)], 2, vec![0.0; 4]).unwrap();
        assert!(BatchedGraph::new(vec![a, b]).is_err());
    }
}
