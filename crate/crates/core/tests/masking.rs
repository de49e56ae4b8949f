use esa::graph::generate::{random_digraph, rng};
use esa::graph::{BatchedGraph, Graph};
use esa::masking::*;
use esa::tensor::{Element, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn shares_endpoint((a, b): (usize, usize), (c, d): (usize, usize)) -> bool {
    a == c || b == d || a == d || b == c
}

fn brute_edge_blocked(graphs: &[Graph], l: usize) -> Vec<bool> {
    let mut out = vec![true; graphs.len() * l * l];
    for (b, g) in graphs.iter().enumerate() {
        for (i, &p) in g.edges().iter().enumerate() {
            for (j, &q) in g.edges().iter().enumerate() {
                out[(b * l + i) * l + j] = !shares_endpoint(p, q);
            }
        }
    }
    out
}

fn brute_node_blocked(graphs: &[Graph], l: usize) -> Vec<bool> {
    let mut out = vec![true; graphs.len() * l * l];
    for (b, g) in graphs.iter().enumerate() {
        for &(s, t) in g.edges() {
            out[(b * l + s) * l + t] = false;
        }
    }
    out
}

fn dense(m: &AttnMask) -> Vec<bool> {
    match m.to_dense().layout() {
        MaskLayout::Dense(d) => d.clone(),
        MaskLayout::Sparse(_) => unreachable!(),
    }
}

fn random_batch(r: &mut impl Rng) -> Vec<Graph> {
    let b = r.random_range(1..=5);
    (0..b).map(|_| random_digraph(r, 30, 120, 1)).collect()
}

#[test]
fn triangle_mask_is_all_allowed() {
    let g = Graph::undirected_unlabelled(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
    let m = batch_edge_mask(&BatchedGraph::single(g.clone()), None).unwrap();
    assert_eq!(m.len(), 6);
    assert_eq!(dense(&m), vec![false; 36]);
    assert_eq!(edge_adjacency(g.edges()), vec![true; 36]);
}

#[test]
fn disjoint_single_edges_allow_only_self() {
    let g = Graph::new(2, vec![(0, 1)], 1, vec![0.0; 2], 0, vec![]).unwrap();
    let batch = BatchedGraph::new(vec![g.clone(), g]).unwrap();
    let m = batch_edge_mask(&batch, Some(1)).unwrap();
    assert_eq!(m.allowed(), vec![[0, 0, 0], [1, 0, 0]]);
}

#[test]
fn edge_mask_rejects_short_length() {
    let g = Graph::undirected_unlabelled(3, &[(0, 1), (1, 2)]).unwrap();
    assert!(batch_edge_mask(&BatchedGraph::single(g.clone()), Some(3)).is_err());
    assert!(batch_node_mask(&BatchedGraph::single(g), Some(2)).is_err());
}

#[test]
fn node_mask_examples() {
    let path = Graph::undirected_unlabelled(3, &[(0, 1), (1, 2)]).unwrap();
    let m = batch_node_mask(&BatchedGraph::single(path), None).unwrap();
    assert_eq!(m.allowed(), vec![[0, 0, 1], [0, 1, 0], [0, 1, 2], [0, 2, 1]]);

    let looped = Graph::undirected_unlabelled(2, &[(0, 0), (0, 1)]).unwrap();
    let m = batch_node_mask(&BatchedGraph::single(looped), None).unwrap();
    assert!(!m.is_blocked(0, 0, 0));
    assert!(m.is_blocked(0, 1, 1));
}

#[test]
fn masks_match_brute_force_on_random_batches() {
    let mut r = rng(11);
    for _ in 0..300 {
        let graphs = random_batch(&mut r);
        let batch = BatchedGraph::new(graphs.clone()).unwrap();
        let le = batch.max_edges() + r.random_range(0..3);
        let em = batch_edge_mask(&batch, Some(le)).unwrap();
        assert_eq!(dense(&em), brute_edge_blocked(&graphs, le));
        let ln = batch.max_nodes() + r.random_range(0..3);
        let nm = batch_node_mask(&batch, Some(ln)).unwrap();
        assert_eq!(dense(&nm), brute_node_blocked(&graphs, ln));
    }
}

#[test]
fn batching_preserves_each_graph_block() {
    let mut r = rng(12);
    for _ in 0..50 {
        let graphs = random_batch(&mut r);
        let batch = BatchedGraph::new(graphs.clone()).unwrap();
        let l = batch.max_edges();
        let em = batch_edge_mask(&batch, Some(l)).unwrap();
        let nm = batch_node_mask(&batch, Some(batch.max_nodes())).unwrap();
        for (b, g) in graphs.iter().enumerate() {
            let alone = batch_edge_mask(&BatchedGraph::single(g.clone()), Some(l)).unwrap();
            assert_eq!(em.block(b), alone.block(0));
            let alone = batch_node_mask(&BatchedGraph::single(g.clone()), Some(batch.max_nodes())).unwrap();
            assert_eq!(nm.block(b), alone.block(0));
        }
    }
}

#[test]
fn additive_mask_and_softmax() {
    let g = Graph::undirected_unlabelled(4, &[(0, 1), (2, 3)]).unwrap();
    let m = batch_node_mask(&BatchedGraph::single(g), Some(5)).unwrap();
    let add = m.to_additive(f64::MASK_FLOOR);
    for (k, &x) in add.data().iter().enumerate() {
        assert_eq!(x == 0.0, !m.is_blocked(0, k / 5, k % 5));
    }
    let all = AttnMask::full(1, 3, &[3]).unwrap();
    assert!(all.to_additive(-1e9f64).data().iter().all(|&x| x == 0.0));

    // Blocked entries keep at most e^{-1e9 + spread} of the mass; rows with
    // no allowed entry come out as zeros.
    let mut r = rng(3);
    let scores: Vec<f64> = (0..25).map(|_| r.random_range(-30.0..30.0)).collect();
    for floor in [-1e9, f64::MASK_FLOOR] {
        let mut tape = Tape::<f64>::new();
        let s = tape.input(Tensor::new(vec![1, 5, 5], scores.clone()).unwrap());
        let mk = tape.input(m.to_additive(floor));
        let z = tape.add(s, mk).unwrap();
        let p = tape.softmax_lastdim(z).unwrap();
        let probs = tape.value(p).data();
        for i in 0..5 {
            let row = &probs[i * 5..(i + 1) * 5];
            if (0..5).all(|j| m.is_blocked(0, i, j)) {
                // The zero-row guard keys on the element type's own floor.
                if floor == f64::MASK_FLOOR {
                    assert!(row.iter().all(|&x| x == 0.0));
                }
                continue;
            }
            let allowed: f64 = (0..5).filter(|&j| !m.is_blocked(0, i, j)).map(|j| row[j]).sum();
            assert!(allowed >= 1.0 - 1e-12);
            for j in (0..5).filter(|&j| m.is_blocked(0, i, j)) {
                assert!(row[j] < 1e-30);
            }
        }
    }
}

#[test]
fn pattern_agrees_with_mask() {
    let mut r = rng(5);
    let graphs = random_batch(&mut r);
    let batch = BatchedGraph::new(graphs).unwrap();
    let m = batch_edge_mask(&batch, None).unwrap();
    let p = m.to_pattern();
    assert_eq!(p.nnz(), m.num_allowed());
    for b in 0..m.batch() {
        for i in 0..m.len() {
            for j in 0..m.len() {
                assert_eq!(p.is_allowed(b, i, j), !m.is_blocked(b, i, j));
            }
        }
    }
    assert_eq!(p.to_additive(-1e9f64), m.to_additive(-1e9f64));
}

#[test]
fn storage_report_examples() {
    let one = Graph::new(2, vec![(0, 1)], 1, vec![0.0; 2], 0, vec![]).unwrap();
    let r = mask_storage_report(&one, Some(1));
    assert_eq!((r.dense_bytes, r.sparse_entries), (1, 1));
    assert_eq!(r.sparse_bytes, SPARSE_ENTRY_BYTES as u64);

    let empty = Graph::new(3, vec![], 1, vec![0.0; 3], 0, vec![]).unwrap();
    assert_eq!(mask_storage_report(&empty, None).sparse_entries, 0);

    let mut rg = rng(8);
    for _ in 0..50 {
        let g = random_digraph(&mut rg, 20, 80, 1);
        let m = batch_edge_mask(&BatchedGraph::single(g.clone()), None).unwrap();
        assert_eq!(mask_storage_report(&g, None).sparse_entries as usize, m.num_allowed());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edge_adjacency_symmetric_with_true_diagonal(
        edges in prop::collection::vec((0usize..10, 0usize..10), 0..40)
    ) {
        let n = edges.len();
        let adj = edge_adjacency(&edges);
        for p in 0..n {
            prop_assert!(adj[p * n + p]);
            for q in 0..n {
                prop_assert_eq!(adj[p * n + q], adj[q * n + p]);
            }
        }
        let lists = edge_adjacency_lists(&edges);
        for p in 0..n {
            let row: Vec<usize> = (0..n).filter(|&q| adj[p * n + q]).collect();
            prop_assert_eq!(&lists[p], &row);
        }
    }

    #[test]
    fn dense_sparse_round_trip(bits in prop::collection::vec(any::<bool>(), 2 * 4 * 4)) {
        let m = AttnMask::from_dense(2, 4, bits.clone()).unwrap();
        let s = m.to_sparse();
        prop_assert_eq!(s.to_dense(), m.clone());
        prop_assert_eq!(s.to_dense().to_sparse(), s);
    }

    #[test]
    fn consecutive_segments(mut starts in prop::collection::btree_set(0usize..50, 1..8), extra in 0usize..5) {
        let starts: Vec<usize> = std::mem::take(&mut starts).into_iter().collect();
        let total = starts.last().unwrap() + extra;
        let out = consecutive(&starts, total).unwrap();
        prop_assert_eq!(out.len(), total - starts[0]);
        for (s, &start) in starts.iter().enumerate() {
            let end = starts.get(s + 1).copied().unwrap_or(total);
            for k in start..end {
                prop_assert_eq!(out[k - starts[0]], k - start);
            }
        }
    }
}
