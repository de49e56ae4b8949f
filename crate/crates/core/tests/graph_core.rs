use esa::graph::generate::{generate_ba, generate_infected_er, random_digraph, random_graph, rng};
use esa::graph::{line_graph, read_graphs, wl1_hash, write_graphs, BatchedGraph, Graph, Target};
use rand::seq::SliceRandom;
use rand::Rng;

fn random_perm(n: usize, r: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

#[test]
fn line_graph_degrees_match_pair_scan() {
    let mut r = rng(1);
    for _ in 0..40 {
        let g = random_digraph(&mut r, 25, 200, 1);
        let lg = line_graph(&g).unwrap();
        assert_eq!(lg.num_nodes(), g.num_edges());
        let deg = lg.out_degrees();
        for (p, &(u, v)) in g.edges().iter().enumerate() {
            let sharing = g
                .edges()
                .iter()
                .filter(|&&(a, b)| a == u || a == v || b == u || b == v)
                .count();
            assert_eq!(deg[p], sharing - 1);
        }
    }
}

#[test]
fn line_graph_features_are_edge_tokens() {
    let g = Graph::new(2, vec![(0, 1), (1, 0)], 1, vec![3.0, 4.0], 1, vec![7.0, 8.0]).unwrap();
    let lg = line_graph(&g).unwrap();
    assert_eq!(lg.node_features(), &[3.0, 4.0, 7.0, 4.0, 3.0, 8.0]);
}

#[test]
fn wl_hash_survives_random_relabelling() {
    let mut r = rng(2);
    for _ in 0..5 {
        let g = random_graph(&mut r, 12, 30, 1, 0);
        let h = wl1_hash(&g, None);
        for _ in 0..100 {
            let p = random_perm(g.num_nodes(), &mut r);
            assert_eq!(wl1_hash(&g.relabel_nodes(&p).unwrap(), None), h);
        }
    }
}

#[test]
fn isomorphic_line_graphs_hash_equal() {
    let mut r = rng(3);
    for _ in 0..20 {
        let g = random_graph(&mut r, 10, 24, 1, 0);
        let p = random_perm(g.num_nodes(), &mut r);
        let h = g.relabel_nodes(&p).unwrap();
        assert_eq!(
            wl1_hash(&line_graph(&g).unwrap(), Some(3)),
            wl1_hash(&line_graph(&h).unwrap(), Some(3))
        );
    }
}

fn bfs_oracle(g: &Graph, sources: &[usize]) -> Vec<Option<usize>> {
    // Bellman-Ford style relaxation, independent of the queue-based search.
    let mut dist: Vec<Option<usize>> = (0..g.num_nodes())
        .map(|i| sources.contains(&i).then_some(0))
        .collect();
    loop {
        let mut changed = false;
        for &(s, t) in g.edges() {
            if let Some(ds) = dist[s] {
                if dist[t].is_none_or(|dt| dt > ds + 1) {
                    dist[t] = Some(ds + 1);
                    changed = true;
                }
            }
        }
        if !changed {
            return dist;
        }
    }
}

#[test]
fn infected_er_labels_match_distance_oracle() {
    for (seed, n, k, cap, p) in [(0, 200, 3, 4, 0.01), (1, 200, 1, 20, 0.008), (2, 1500, 4, 20, 0.0009)] {
        let g = generate_infected_er(n, k, cap, p, seed).unwrap();
        assert_eq!(g.node_dim(), 2);
        let sources: Vec<usize> = (0..n).filter(|&i| g.node_feature(i) == [0.0, 1.0]).collect();
        assert_eq!(sources.len(), k);
        let Some(Target::Nodes(labels)) = &g.target else { panic!("node labels") };
        for (i, d) in bfs_oracle(&g, &sources).into_iter().enumerate() {
            let want = d.filter(|&d| d <= cap).unwrap_or(cap + 1);
            assert_eq!(labels[i], want as f64);
        }
    }
}

#[test]
fn ba_degrees_are_heavy_tailed() {
    let g = generate_ba(10_000, 3, 4).unwrap();
    assert_eq!(g.num_edges(), 2 * 3 * (10_000 - 3));
    let mut deg = g.out_degrees();
    deg.sort_unstable();
    let median = deg[deg.len() / 2];
    assert!(*deg.last().unwrap() >= 3 * median, "max {} median {median}", deg.last().unwrap());
    for &(s, t) in g.edges() {
        assert!(g.edges().binary_search(&(t, s)).is_ok() || g.edges().contains(&(t, s)));
    }
}

#[test]
fn batching_shifts_ids_and_round_trips() {
    let a = Graph::undirected_unlabelled(3, &[(0, 1), (1, 2)]).unwrap();
    let b = Graph::undirected_unlabelled(2, &[(0, 1)]).unwrap();
    let batch = BatchedGraph::new(vec![a, b.clone()]).unwrap();
    assert_eq!(&batch.edge_index()[4..], &[(3, 4), (4, 3)]);
    assert!(batch.batch_map().windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(BatchedGraph::single(b).batch_map(), &[0, 0]);
}

#[test]
fn text_files_round_trip_through_directories() {
    let mut r = rng(6);
    let graphs: Vec<Graph> = (0..4)
        .map(|i| {
            let g = random_graph(&mut r, 6, 10, 2, i % 2);
            g.with_target(Target::Graph(vec![i as f64 * 0.5])).unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.graph"), write_graphs(&graphs[..2])).unwrap();
    std::fs::write(dir.path().join("b.graph"), write_graphs(&graphs[2..])).unwrap();
    std::fs::write(dir.path().join("notes.md"), "ignored").unwrap();
    let back = read_graphs(dir.path()).unwrap();
    let mut want = graphs.clone();
    // Edge dims differ between files, which is fine until batching.
    want.truncate(4);
    assert_eq!(back, want);
    assert!(read_graphs(&dir.path().join("missing.graph")).is_err());
}
