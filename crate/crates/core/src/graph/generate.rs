//! Seeded synthetic graph generators.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Target};
use crate::error::{EsaError, Result};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Undirected G(n, p) pairs `(w, v)` with `w < v`, by geometric skipping.
pub fn erdos_renyi_pairs(num_nodes: usize, edge_prob: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    if num_nodes < 2 || edge_prob <= 0.0 {
        return pairs;
    }
    if edge_prob >= 1.0 {
        for v in 1..num_nodes {
            pairs.extend((0..v).map(|w| (w, v)));
        }
        return pairs;
    }
    let lp = (1.0 - edge_prob).ln();
    let (mut v, mut w) = (1usize, -1i64);
    while v < num_nodes {
        let r: f64 = rng.random();
        w += 1 + ((1.0 - r).ln() / lp).floor() as i64;
        while w >= v as i64 && v < num_nodes {
            w -= v as i64;
            v += 1;
        }
        if v < num_nodes {
            pairs.push((w as usize, v));
        }
    }
    pairs
}

/// Multi-source BFS distances; `None` for unreachable nodes.
pub fn multi_source_distances(adj: &[Vec<usize>], sources: &[usize]) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    let mut queue = VecDeque::new();
    for &s in sources {
        if dist[s].is_none() {
            dist[s] = Some(0);
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        let d = dist[u].expect("queued nodes have a distance");
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Infection-distance node classification on an Erdős–Rényi graph.
///
/// Node features are `[healthy, infected]` one-hot. The label of a node is its
/// shortest-path distance to the nearest infected source, with every distance
/// above `max_path_len` (including unreachable) mapped to `max_path_len + 1`.
pub fn generate_infected_er(
    num_nodes: usize,
    num_infected: usize,
    max_path_len: usize,
    edge_prob: f64,
    seed: u64,
) -> Result<Graph> {
    if num_nodes == 0 || num_infected == 0 || max_path_len == 0 {
        return Err(EsaError::Config("infected-er parameters must be positive".into()));
    }
    if num_infected > num_nodes {
        return Err(EsaError::Config(format!(
            "{num_infected} infected sources exceed {num_nodes} nodes"
        )));
    }
    if !(edge_prob > 0.0 && edge_prob < 1.0) {
        return Err(EsaError::Config(format!("edge probability {edge_prob} outside (0, 1)")));
    }
    let mut rng = rng(seed);
    let pairs = erdos_renyi_pairs(num_nodes, edge_prob, &mut rng);
    let mut sources: Vec<usize> = sample(&mut rng, num_nodes, num_infected).into_vec();
    sources.sort_unstable();

    let mut feats = vec![0.0; num_nodes * 2];
    for i in 0..num_nodes {
        feats[i * 2] = 1.0;
    }
    for &s in &sources {
        feats[s * 2] = 0.0;
        feats[s * 2 + 1] = 1.0;
    }
    let g = Graph::undirected(num_nodes, &pairs, 2, feats)?;
    let dist = multi_source_distances(&g.adjacency_lists(), &sources);
    let labels = dist
        .iter()
        .map(|d| match d {
            Some(d) if *d <= max_path_len => *d as f64,
            _ => (max_path_len + 1) as f64,
        })
        .collect();
    g.with_target(Target::Nodes(labels))
}

/// Barabási–Albert preferential attachment. Starts from `attach_m` isolated
/// nodes; every later node links to `attach_m` distinct earlier nodes drawn
/// proportionally to degree. Both orientations of each link are stored, so
/// the graph has `2·m·(n − m)` directed edges.
pub fn generate_ba(num_nodes: usize, attach_m: usize, seed: u64) -> Result<Graph> {
    if attach_m < 1 || num_nodes <= attach_m {
        return Err(EsaError::Config(format!(
            "barabasi-albert needs attach_m >= 1 and num_nodes > attach_m (got n={num_nodes}, m={attach_m})"
        )));
    }
    let mut rng = rng(seed);
    let mut pairs = Vec::with_capacity(attach_m * (num_nodes - attach_m));
    let mut repeated: Vec<usize> = Vec::with_capacity(2 * attach_m * num_nodes);
    let mut targets: Vec<usize> = (0..attach_m).collect();
    for source in attach_m..num_nodes {
        for &t in &targets {
            pairs.push((t, source));
        }
        repeated.extend_from_slice(&targets);
        repeated.extend(std::iter::repeat_n(source, attach_m));
        let mut chosen = BTreeSet::new();
        let mut order = Vec::with_capacity(attach_m);
        while chosen.len() < attach_m {
            let x = repeated[rng.random_range(0..repeated.len())];
            if chosen.insert(x) {
                order.push(x);
            }
        }
        targets = order;
    }
    Graph::undirected_unlabelled(num_nodes, &pairs)
}

/// Random undirected graph with at most `max_nodes` nodes and roughly
/// `max_edges` directed edges, with random node and edge features.
pub fn random_graph(
    rng: &mut impl Rng,
    max_nodes: usize,
    max_edges: usize,
    node_dim: usize,
    edge_dim: usize,
) -> Graph {
    let n = rng.random_range(1..=max_nodes.max(1));
    let budget = rng.random_range(0..=max_edges / 2);
    let mut pairs = BTreeSet::new();
    for _ in 0..budget {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v {
            pairs.insert((u.min(v), u.max(v)));
        }
    }
    let pairs: Vec<_> = pairs.into_iter().collect();
    let feats = (0..n * node_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::undirected(n, &pairs, node_dim, feats).expect("valid random graph");
    if edge_dim > 0 {
        let ef = (0..g.num_edges() * edge_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        g = Graph::new(n, g.edges().to_vec(), node_dim, g.node_features().to_vec(), edge_dim, ef)
            .expect("valid random graph");
    }
    g
}

/// Random directed graph: up to `max_nodes` nodes and `max_edges` distinct
/// directed edges (self-loops included), edges in random order.
pub fn random_digraph(rng: &mut impl Rng, max_nodes: usize, max_edges: usize, node_dim: usize) -> Graph {
    let n = rng.random_range(1..=max_nodes.max(1));
    let cap = max_edges.min(n * n);
    let target = rng.random_range(0..=cap);
    let mut seen = BTreeSet::new();
    let mut edges = Vec::with_capacity(target);
    while edges.len() < target {
        let e = (rng.random_range(0..n), rng.random_range(0..n));
        if seen.insert(e) {
            edges.push(e);
        }
    }
    let feats = (0..n * node_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Graph::new(n, edges, node_dim, feats, 0, Vec::new()).expect("valid random digraph")
}
