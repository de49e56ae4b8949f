use super::BatchedGraph;
use crate::error::{EsaError, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Edge,
    Node,
}

/// Padded token matrix for a batch: `tokens` is `[B, L, d]`, pad rows are zero.
#[derive(Clone, Debug)]
pub struct TokenSet<T> {
    pub tokens: Tensor<T>,
    /// `true` for real tokens, row-major `[B, L]`.
    pub pad_mask: Vec<bool>,
    /// Real tokens per graph.
    pub counts: Vec<usize>,
    pub kind: TokenKind,
}

impl<T: Element> TokenSet<T> {
    pub fn batch(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn is_real(&self, b: usize, i: usize) -> bool {
        self.pad_mask[b * self.len() + i]
    }
}

fn padded_len(max: usize, fixed: Option<usize>) -> Result<usize> {
    match fixed {
        Some(l) if l < max => Err(EsaError::Contract(format!(
            "padded length {l} is smaller than the largest token count {max}"
        ))),
        Some(l) => Ok(l),
        None => Ok(max),
    }
}

/// One token per directed edge, `[n_src ∥ n_trg ∥ e]`, in edge-list order.
/// `fixed_len` pads every graph to a dataset-wide length instead of the batch maximum.
pub fn build_edge_tokens<T: Element>(batch: &BatchedGraph, fixed_len: Option<usize>) -> Result<TokenSet<T>> {
    if batch.node_dim() == 0 {
        return Err(EsaError::InvalidGraph("graphs without node features are not supported".into()));
    }
    let l = padded_len(batch.max_edges(), fixed_len)?;
    let d = 2 * batch.node_dim() + batch.edge_dim();
    let b = batch.num_graphs();
    let mut data = vec![T::zero(); b * l * d];
    let mut pad_mask = vec![false; b * l];
    let mut counts = Vec::with_capacity(b);
    for (gi, g) in batch.graphs().iter().enumerate() {
        for e in 0..g.num_edges() {
            let row = &mut data[(gi * l + e) * d..(gi * l + e + 1) * d];
            for (dst, src) in row.iter_mut().zip(g.edge_token(e)) {
                *dst = T::of(src);
            }
            pad_mask[gi * l + e] = true;
        }
        counts.push(g.num_edges());
    }
    Ok(TokenSet {
        tokens: Tensor::new(vec![b, l, d], data)?,
        pad_mask,
        counts,
        kind: TokenKind::Edge,
    })
}

/// One token per node holding its feature row.
pub fn build_node_tokens<T: Element>(batch: &BatchedGraph, fixed_len: Option<usize>) -> Result<TokenSet<T>> {
    let d = batch.node_dim();
    if d == 0 {
        return Err(EsaError::InvalidGraph("graphs without node features are not supported".into()));
    }
    let l = padded_len(batch.max_nodes(), fixed_len)?;
    let b = batch.num_graphs();
    let mut data = vec![T::zero(); b * l * d];
    let mut pad_mask = vec![false; b * l];
    let mut counts = Vec::with_capacity(b);
    for (gi, g) in batch.graphs().iter().enumerate() {
        for i in 0..g.num_nodes() {
            for (dst, &src) in data[(gi * l + i) * d..(gi * l + i + 1) * d]
                .iter_mut()
                .zip(g.node_feature(i))
            {
                *dst = T::of(src);
            }
            pad_mask[gi * l + i] = true;
        }
        counts.push(g.num_nodes());
    }
    Ok(TokenSet {
        tokens: Tensor::new(vec![b, l, d], data)?,
        pad_mask,
        counts,
        kind: TokenKind::Node,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn single_edge_token_is_concatenation() {
        let g = Graph::new(2, vec![(0, 1)], 1, vec![1.0, 2.0], 1, vec![5.0]).unwrap();
        let ts: TokenSet<f64> = build_edge_tokens(&BatchedGraph::single(g), None).unwrap();
        assert_eq!(ts.tokens.data(), &[1.0, 2.0, 5.0]);
        assert_eq!(ts.kind, TokenKind::Edge);

        let rev = Graph::new(2, vec![(1, 0)], 1, vec![1.0, 2.0], 1, vec![5.0]).unwrap();
        let ts: TokenSet<f64> = build_edge_tokens(&BatchedGraph::single(rev), None).unwrap();
        assert_eq!(ts.tokens.data(), &[2.0, 1.0, 5.0]);
    }

    #[test]
    fn padding_to_batch_max() {
        let a = Graph::new(3, vec![(0, 1), (1, 2), (2, 0)], 1, vec![1.0; 3], 0, vec![]).unwrap();
        let b = Graph::new(2, vec![(0, 1)], 1, vec![1.0; 2], 0, vec![]).unwrap();
        let batch = BatchedGraph::new(vec![a, b]).unwrap();
        let ts: TokenSet<f64> = build_edge_tokens(&batch, None).unwrap();
        assert_eq!(ts.tokens.shape(), &[2, 3, 2]);
        assert_eq!(ts.pad_mask, vec![true, true, true, true, false, false]);
        assert!(ts.tokens.data()[(3 + 1) * 2..].iter().all(|&x| x == 0.0));
        assert_eq!(ts.counts, vec![3, 1]);

        let fixed: TokenSet<f64> = build_edge_tokens(&batch, Some(5)).unwrap();
        assert_eq!(fixed.len(), 5);
        assert!(build_edge_tokens::<f64>(&batch, Some(2)).is_err());
    }

    #[test]
    fn node_tokens() {
        let g = Graph::new(2, vec![(0, 1)], 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0, vec![]).unwrap();
        let ts: TokenSet<f64> = build_node_tokens(&BatchedGraph::single(g.clone()), None).unwrap();
        assert_eq!(ts.tokens.shape(), &[1, 2, 3]);
        assert_eq!(ts.tokens.data(), g.node_features());

        let big = Graph::new(4, vec![], 3, vec![0.0; 12], 0, vec![]).unwrap();
        let ts: TokenSet<f64> = build_node_tokens(&BatchedGraph::new(vec![g, big]).unwrap(), None).unwrap();
        assert_eq!(ts.len(), 4);

        let empty = Graph::new(2, vec![(0, 1)], 0, vec![], 0, vec![]).unwrap();
        assert!(build_node_tokens::<f64>(&BatchedGraph::single(empty.clone()), None).is_err());
        assert!(build_edge_tokens::<f64>(&BatchedGraph::single(empty), None).is_err());
    }
}
