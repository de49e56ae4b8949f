use esa::analysis::{
    cycle_with_pendants, gini, gini_csv, gini_trace, linear_fit, memory_scaling_study, wl_linegraph_demo, GiniRows,
    WL_DEMO_ROUNDS,
};
use esa::graph::generate::random_graph;
use esa::graph::{line_graph, wl1_hash, BatchedGraph, Graph};
use esa::model::{Esa, ModelConfig};
use esa::tensor::Tensor;
use esa::EsaError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairwise_gini(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let s: f64 = x.iter().sum();
    let mut d = 0.0;
    for a in x {
        for b in x {
            d += (a - b).abs();
        }
    }
    d / (2.0 * n * s)
}

#[test]
fn gini_examples() {
    assert_eq!(gini(&[0.25; 4]).unwrap(), 0.0);
    for n in 1..10 {
        let mut v = vec![0.0; n];
        v[n / 2] = 3.0;
        assert!((gini(&v).unwrap() - (n as f64 - 1.0) / n as f64).abs() < 1e-15);
    }
    assert!((gini(&[1.0, 2.0, 3.0]).unwrap() - 4.0 / 18.0).abs() < 1e-12);
    assert!(matches!(gini(&[0.0, 0.0]), Err(EsaError::UndefinedSignal(_))));
    assert!(gini(&[]).is_err());
    assert!(gini(&[1.0, -1.0]).is_err());
}

#[test]
fn gini_matches_pairwise_form_and_is_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let g = gini(&x).unwrap();
        assert!((g - pairwise_gini(&x)).abs() < 1e-12);
        assert!((0.0..1.0).contains(&g));
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        assert!((gini(&scaled).unwrap() - g).abs() < 1e-12);
        x.shuffle(&mut rng);
        assert!((gini(&x).unwrap() - g).abs() < 1e-12);
    }
}

fn small_graphs(seed: u64, n: usize) -> Vec<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let g = random_graph(&mut rng, 7, 14, 2, 1);
            if g.num_edges() > 0 {
                break g;
            }
        })
        .collect()
}

#[test]
fn single_token_graphs_have_zero_gini() {
    let g = Graph::new(2, vec![(0, 1)], 2, vec![1.0, 0.0, 0.0, 1.0], 1, vec![0.5]).unwrap();
    let cfg = ModelConfig::graph_default("MSMP", 5, 1);
    let (model, store) = Esa::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let inputs = model.prepare::<f64>(&BatchedGraph::new(vec![g.clone(), g]).unwrap(), None).unwrap();
    for rows in [GiniRows::Pooled, GiniRows::RowMean] {
        let layers = gini_trace(&model, &store, &inputs, rows).unwrap();
        assert_eq!(layers.len(), 3);
        for l in &layers {
            assert_eq!(l.per_graph, vec![Some(0.0), Some(0.0)]);
            assert_eq!((l.mean, l.std), (0.0, 0.0));
        }
    }
}

#[test]
fn zeroed_query_and_key_projections_give_uniform_attention() {
    let cfg = ModelConfig::graph_default("MSMSP", 5, 1);
    let (model, mut store) = Esa::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let names: Vec<String> = store
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| n.starts_with("enc.") && (n.contains(".attn.q.") || n.contains(".attn.k.")))
        .collect();
    for name in names {
        let id = store.id(&name).unwrap();
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(shape);
    }
    let graphs = small_graphs(3, 6);
    let inputs = model.prepare::<f64>(&BatchedGraph::new(graphs).unwrap(), None).unwrap();
    let layers = gini_trace(&model, &store, &inputs, GiniRows::RowMean).unwrap();
    assert_eq!(layers.len(), 4);
    for l in &layers {
        assert!(l.per_graph.iter().flatten().all(|&g| g.abs() < 1e-12), "{:?}", l.per_graph);
    }
    let csv = gini_csv(&layers);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,M,6,"));
    assert!(csv.lines().nth(2).unwrap().starts_with("1,S,6,"));
}

#[test]
fn gini_trace_values_are_in_range() {
    let cfg = ModelConfig::graph_default("MMSP", 5, 1);
    let (model, store) = Esa::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let graphs = small_graphs(5, 8);
    let inputs = model.prepare::<f64>(&BatchedGraph::new(graphs).unwrap(), None).unwrap();
    for rows in [GiniRows::Pooled, GiniRows::RowMean] {
        for l in gini_trace(&model, &store, &inputs, rows).unwrap() {
            assert_eq!(l.per_graph.len(), 8);
            assert!(l.per_graph.iter().flatten().all(|g| (0.0..1.0).contains(g)));
            assert!(l.std >= 0.0);
        }
    }
}

#[test]
fn linear_fit_recovers_a_line() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
    let f = linear_fit(&x, &y).unwrap();
    assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept + 1.0).abs() < 1e-12);
    assert!((f.r2 - 1.0).abs() < 1e-12);
    assert!(linear_fit(&[1.0, 1.0], &[2.0, 3.0]).is_err());
}

#[test]
fn mask_storage_scales_linearly_in_edges() {
    let counts: Vec<usize> = (0..5).map(|k| 2000 << k).collect();
    let s = memory_scaling_study(&counts, 3, 1).unwrap();
    assert_eq!(s.rows.len(), 5);
    for (r, &e) in s.rows.iter().zip(&counts) {
        assert!(r.edges >= e && r.edges < e + 6);
        assert_eq!(r.dense_bytes, (r.edges as u128).pow(2));
    }
    assert!(s.sparse_fit.r2 >= 0.99, "{}", s.summary());
    // Entries count sum(deg^2), which drifts above 2x per doubling on heavy-tailed BA graphs.
    assert!(s.sparse_ratios.iter().all(|r| (1.8..=2.6).contains(r)), "{:?}", s.sparse_ratios);
    assert!(s.dense_ratios.iter().all(|r| (3.6..=4.4).contains(r)), "{:?}", s.dense_ratios);
    assert_eq!(s.to_csv().lines().count(), 6);
}

#[test]
fn wl_demo_passes() {
    let d = wl_linegraph_demo().unwrap();
    assert!(d.passed(), "{}", d.report());
    assert!(d.report().ends_with("result: PASS\n"));
}

#[test]
fn isomorphic_pairs_hash_equally_with_their_line_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let g = random_graph(&mut rng, 9, 20, 0, 0);
        let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
        perm.shuffle(&mut rng);
        let h = g.relabel_nodes(&perm).unwrap();
        let r = Some(WL_DEMO_ROUNDS);
        assert_eq!(wl1_hash(&g, r), wl1_hash(&h, r));
        assert_eq!(wl1_hash(&line_graph(&g).unwrap(), r), wl1_hash(&line_graph(&h).unwrap(), r));
    }
}

#[test]
fn demo_pair_is_not_isomorphic() {
    // Pendant-to-pendant distance differs: 7 versus 8 hops.
    let dist = |g: &Graph| {
        let adj = g.adjacency_lists();
        let n = g.num_nodes();
        let mut d = vec![usize::MAX; n];
        let mut q = std::collections::VecDeque::from([n - 2]);
        d[n - 2] = 0;
        while let Some(u) = q.pop_front() {
            for &v in &adj[u] {
                if d[v] == usize::MAX {
                    d[v] = d[u] + 1;
                    q.push_back(v);
                }
            }
        }
        d[n - 1]
    };
    assert_eq!(dist(&cycle_with_pendants(12, 5).unwrap()), 7);
    assert_eq!(dist(&cycle_with_pendants(12, 6).unwrap()), 8);
}
