//! Acceptance suite. Every check is deterministic given its seed, and the
//! report text carries no timings, so two runs print identical reports.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{gini, memory_scaling_study, wl_linegraph_demo};
use crate::error::Result;
use crate::graph::generate::{generate_infected_er, random_digraph, random_graph};
use crate::graph::{BatchedGraph, Graph, Target};
use crate::masking::{batch_edge_mask, batch_node_mask, consecutive, first_unique_index, AttnMask};
use crate::model::{Esa, Inputs, ModelConfig, NormPlacement};
use crate::tensor::gradcheck::param_grad_error;
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::training::{mcc, r2, train, Batch, Confusion, Dataset, Split, Task, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Wall-clock time, kept out of the report text.
    pub elapsed: Duration,
    pub time_limit: Option<Duration>,
}

impl Criterion {
    pub fn within_time(&self) -> bool {
        self.time_limit.is_none_or(|t| self.elapsed <= t)
    }

    pub fn line(&self) -> String {
        format!(
            "[{:>2}] {} {}: {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Clone, Debug)]
pub struct SelfcheckReport {
    pub seed: u64,
    pub criteria: Vec<Criterion>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("selfcheck seed {}\n", self.seed);
        for c in &self.criteria {
            s.push_str(&c.line());
            s.push('\n');
        }
        let n = self.criteria.iter().filter(|c| c.passed).count();
        let _ = writeln!(s, "{n}/{} passed", self.criteria.len());
        s
    }
}

/// Settings of the node-level learning check.
#[derive(Clone, Debug, PartialEq)]
pub struct InfectedRun {
    pub nodes: usize,
    pub sources: usize,
    pub max_path: usize,
    pub edge_prob: f64,
    pub layers: String,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub norm: NormPlacement,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_patience: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seeds: Vec<u64>,
    pub target_mcc: f64,
}

impl Default for InfectedRun {
    fn default() -> Self {
        Self {
            nodes: 1500,
            sources: 4,
            max_path: 20,
            edge_prob: 0.0009,
            layers: "M".repeat(24),
            d_model: 32,
            heads: 4,
            mlp_hidden: 64,
            norm: NormPlacement::Post,
            batch_size: 128,
            lr: 1e-3,
            lr_halving_patience: 15,
            patience: 30,
            max_epochs: 200,
            seeds: vec![0, 1, 2],
            target_mcc: 0.85,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Criteria to run; empty means all.
    pub only: Vec<u8>,
    pub infected: InfectedRun,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            only: Vec::new(),
            infected: InfectedRun::default(),
        }
    }
}

pub const CRITERIA: [(u8, &str); 14] = [
    (1, "mask oracle equivalence"),
    (2, "helper exactness"),
    (3, "SAB equals MAB with all-allowed mask"),
    (4, "permutation invariance"),
    (5, "masking locality"),
    (6, "gradient correctness"),
    (7, "batching consistency"),
    (8, "learning sanity (infected ER)"),
    (9, "overfit sanity"),
    (10, "line-graph expressivity"),
    (11, "memory-scaling law"),
    (12, "gini correctness"),
    (13, "metric oracles"),
    (14, "determinism"),
];

fn limit(id: u8) -> Option<Duration> {
    match id {
        1 => Some(Duration::from_secs(30)),
        6 | 11 => Some(Duration::from_secs(300)),
        8 => Some(Duration::from_secs(1200)),
        _ => None,
    }
}

/// Outcome of one check: pass flag and a deterministic detail string.
type Check = Result<(bool, String)>;

/// Runs one criterion, except 14 which compares whole reports.
pub fn run_criterion(id: u8, opts: &SelfcheckOptions) -> Criterion {
    let seed = opts.seed;
    let start = Instant::now();
    let out: Check = match id {
        1 => mask_oracle(seed),
        2 => helpers(),
        3 => sab_vs_mab(seed),
        4 => permutation_invariance(seed),
        5 => locality(seed),
        6 => gradient_check(seed),
        7 => batching(seed),
        8 => infected_sanity(&opts.infected),
        9 => overfit(seed),
        10 => wl_demo(),
        11 => memory_scaling(seed),
        12 => gini_checks(seed),
        13 => metric_oracles(seed),
        14 => determinism(opts),
        _ => Ok((false, format!("unknown criterion {id}"))),
    };
    let (passed, detail) = out.unwrap_or_else(|e| (false, format!("error: {e}")));
    let name = CRITERIA.iter().find(|c| c.0 == id).map_or("unknown", |c| c.1);
    Criterion {
        id,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
        time_limit: limit(id),
    }
}

/// Runs the selected criteria in order, reporting each through `on_done`.
pub fn run_selfcheck_with(opts: &SelfcheckOptions, mut on_done: impl FnMut(&Criterion)) -> SelfcheckReport {
    let ids: Vec<u8> = CRITERIA
        .iter()
        .map(|c| c.0)
        .filter(|id| opts.only.is_empty() || opts.only.contains(id))
        .collect();
    let mut criteria = Vec::new();
    for id in ids {
        let c = run_criterion(id, opts);
        on_done(&c);
        criteria.push(c);
    }
    SelfcheckReport {
        seed: opts.seed,
        criteria,
    }
}

pub fn run_selfcheck(opts: &SelfcheckOptions) -> SelfcheckReport {
    run_selfcheck_with(opts, |_| {})
}

fn shares_endpoint((a, b): (usize, usize), (c, d): (usize, usize)) -> bool {
    a == c || a == d || b == c || b == d
}

fn mask_oracle(seed: u64) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x01);
    let mut mismatches = 0usize;
    let mut entries = 0usize;
    for _ in 0..1000 {
        let b = r.random_range(1..=5);
        let graphs: Vec<Graph> = (0..b).map(|_| random_digraph(&mut r, 30, 120, 1)).collect();
        let batch = BatchedGraph::new(graphs.clone())?;
        let le = batch.max_edges();
        let em = batch_edge_mask(&batch, Some(le))?;
        let ln = batch.max_nodes();
        let nm = batch_node_mask(&batch, Some(ln))?;
        for (g, graph) in graphs.iter().enumerate() {
            let edges = graph.edges();
            for i in 0..le {
                for j in 0..le {
                    let allowed = i < edges.len() && j < edges.len() && shares_endpoint(edges[i], edges[j]);
                    mismatches += (em.is_blocked(g, i, j) == allowed) as usize;
                    entries += 1;
                }
            }
            let mut adj = vec![false; ln * ln];
            edges.iter().for_each(|&(s, t)| adj[s * ln + t] = true);
            for i in 0..ln {
                for j in 0..ln {
                    mismatches += (nm.is_blocked(g, i, j) == adj[i * ln + j]) as usize;
                    entries += 1;
                }
            }
        }
    }
    Ok((mismatches == 0, format!("1000 batches, {entries} entries, {mismatches} mismatches")))
}

fn helpers() -> Check {
    let c = consecutive(&[1, 4, 6], 10)?;
    let f = first_unique_index(&[3, 2, 3, 4, 2]);
    let ok = c == [0, 1, 2, 0, 1, 0, 1, 2, 3] && f == [1, 0, 3];
    Ok((ok, format!("consecutive {c:?}, first_unique_index {f:?}")))
}

fn random_tensor(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn encoded(m: &Esa, store: &ParamStore<f64>, inputs: &Inputs<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, store, inputs, None)?;
    Ok(tape.value(f.encoded).clone())
}

fn output(m: &Esa, store: &ParamStore<f64>, inputs: &Inputs<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, store, inputs, None)?;
    Ok(tape.value(f.output).clone())
}

fn sab_vs_mab(seed: u64) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x03);
    let mut differing = 0;
    for _ in 0..100 {
        let (b, l, d) = (r.random_range(1..4), r.random_range(1..9), 8);
        let counts: Vec<usize> = (0..b).map(|_| r.random_range(1..=l)).collect();
        let full = AttnMask::full(b, l, &counts)?;
        let inputs = Inputs::new(random_tensor(&[b, l, d], &mut r), counts, &full, 4)?;
        let model_seed: u64 = r.random();
        let build = |layers: &str| {
            let mut c = ModelConfig::node_default(layers, d, 2);
            c.d_model = d;
            c.heads = 2;
            c.mlp_hidden = 16;
            Esa::new(c, &mut ChaCha8Rng::seed_from_u64(model_seed))
        };
        let (mab, store) = build("M")?;
        let (sab, _) = build("S")?;
        differing += (encoded(&mab, &store, &inputs)? != encoded(&sab, &store, &inputs)?) as usize;
    }
    Ok((differing == 0, format!("100 instances, {differing} not bit-identical")))
}

fn permuted(g: &Graph, r: &mut impl Rng) -> Result<Graph> {
    let mut nodes: Vec<usize> = (0..g.num_nodes()).collect();
    nodes.shuffle(r);
    let mut edges: Vec<usize> = (0..g.num_edges()).collect();
    edges.shuffle(r);
    g.relabel_nodes(&nodes)?.reorder_edges(&edges)
}

fn nonempty_graph(r: &mut impl Rng, nodes: usize, edges: usize, dn: usize, de: usize) -> Graph {
    loop {
        let g = random_graph(r, nodes, edges, dn, de);
        if g.num_edges() > 0 {
            return g;
        }
    }
}

fn permutation_invariance(seed: u64) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x04);
    let mut worst = 0.0f64;
    let instances = 5;
    for k in 0..instances {
        let g = nonempty_graph(&mut r, 8, 20, 2, 1);
        let layers = ["MSP", "MMSPS", "SMSP", "MSMSP", "MMP"][k];
        let mut c = ModelConfig::graph_default(layers, 5, 2);
        c.d_model = 8;
        c.heads = 2;
        c.seeds = 3;
        let (m, store) = Esa::new(c, &mut r)?;
        let base = output(&m, &store, &m.prepare(&BatchedGraph::single(g.clone()), None)?)?;
        for _ in 0..50 {
            let p = permuted(&g, &mut r)?;
            let out = output(&m, &store, &m.prepare(&BatchedGraph::single(p), None)?)?;
            worst = worst.max(out.max_abs_diff(&base));
        }
    }
    Ok((worst <= 1e-10, format!("{instances} instances x 50 permutations, max deviation {worst:.3e}")))
}

fn locality(seed: u64) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x05);
    let (mut worst, mut blocks) = (0.0f64, 0usize);
    for _ in 0..5 {
        let (l, d) = (r.random_range(2..=12), 6);
        let mut allowed = Vec::new();
        for i in 0..l {
            for j in 0..l {
                if r.random_bool(0.35) {
                    allowed.push([0, i as u32, j as u32]);
                }
            }
        }
        let mask = AttnMask::from_allowed(1, l, allowed)?;
        let inputs = Inputs::new(random_tensor(&[1, l, d], &mut r), vec![l], &mask, 2)?;
        let mut c = ModelConfig::node_default("M", d, 2);
        c.d_model = d;
        c.heads = 2;
        let (m, store) = Esa::new(c, &mut r)?;
        for v in 0..l {
            for col in 0..d {
                let mut tape = Tape::new();
                let x = tape.input_with_grad(inputs.tokens.clone());
                let f = m.forward_from(&mut tape, &store, x, &inputs, None)?;
                let flat = tape.reshape(f.encoded, &[l, d])?;
                let row = tape.gather_rows(flat, &[v])?;
                let mut sel = Tensor::zeros(vec![1, d]);
                sel.data_mut()[col] = 1.0;
                let y = tape.mul_const(row, sel)?;
                let y = tape.sum_all(y);
                let g = tape.backward(y)?;
                let gx = g.wrt(x).expect("input gradient");
                for u in (0..l).filter(|&u| u != v && mask.is_blocked(0, v, u)) {
                    blocks += 1;
                    worst = gx.row(u).iter().fold(worst, |w, z| w.max(z.abs()));
                }
            }
        }
    }
    Ok((worst == 0.0, format!("{blocks} blocked Jacobian blocks, max |entry| {worst:.3e}")))
}

fn gradient_check(seed: u64) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x06);
    let g = Graph::undirected(3, &[(0, 1), (1, 2), (0, 2)], 2, vec![0.2, -0.4, 0.9, 0.1, -0.3, 0.5])?;
    let mut c = ModelConfig::graph_default("MSP", 4, 2);
    c.d_model = 16;
    c.heads = 2;
    c.mlp_hidden = 16;
    c.seeds = 2;
    let (m, store) = Esa::new(c, &mut r)?;
    let inputs: Inputs<f64> = m.prepare(&BatchedGraph::single(g), None)?;
    let w = random_tensor(&[1, 2], &mut r);
    let err = param_grad_error(&store, 1e-5, |tape, s| {
        let f = m.forward(tape, s, &inputs, None)?;
        let p = tape.mul_const(f.output, w.clone())?;
        let q = tape.mul(p, f.output)?;
        Ok(tape.sum_all(q))
    })?;
    Ok((err < 1e-4, format!("L = 6, {} parameters, max relative error {err:.3e}", store.num_scalars())))
}

fn batching(seed: u64) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x07);
    let graphs: Vec<Graph> = (0..4).map(|_| nonempty_graph(&mut r, 7, 16, 2, 1)).collect();
    let batch = BatchedGraph::new(graphs.clone())?;
    let l = batch.max_edges();
    let mut c = ModelConfig::graph_default("MSMSP", 5, 2);
    c.d_model = 8;
    c.heads = 2;
    c.seeds = 3;
    let (m, store) = Esa::new(c, &mut r)?;
    let all = output(&m, &store, &m.prepare(&batch, Some(l))?)?;
    let mut worst = 0.0f64;
    for (b, g) in graphs.into_iter().enumerate() {
        let one = output(&m, &store, &m.prepare(&BatchedGraph::single(g), Some(l))?)?;
        for (x, y) in all.row(b).iter().zip(one.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((worst <= 1e-10, format!("4-graph batch, max deviation {worst:.3e}")))
}

/// Trains one seed of the node-level check; returns the test MCC and epochs run.
pub fn infected_trial(run: &InfectedRun, seed: u64) -> Result<(f64, usize)> {
    let g = generate_infected_er(run.nodes, run.sources, run.max_path, run.edge_prob, seed)?;
    let mut c = ModelConfig::node_default(&run.layers, 2, run.max_path + 2);
    c.d_model = run.d_model;
    c.heads = run.heads;
    c.mlp_hidden = run.mlp_hidden;
    c.norm = run.norm;
    let (m, store) = Esa::new(c, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut tc = TrainConfig::new(Task::Multiclass);
    tc.lr = run.lr;
    tc.batch_size = run.batch_size;
    tc.max_epochs = run.max_epochs;
    tc.lr_halving_patience = run.lr_halving_patience;
    tc.patience = run.patience;
    tc.seed = seed;
    let split = Split::random(run.nodes, tc.split, seed)?;
    let out = train(&m, store.cast(), &[g], &split, &tc)?;
    Ok((out.report.test.mcc.unwrap_or(0.0), out.report.epochs.len()))
}

fn infected_sanity(run: &InfectedRun) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for &s in &run.seeds {
        let (m, epochs) = infected_trial(run, s)?;
        ok &= m >= run.target_mcc;
        parts.push(format!("seed {s}: MCC {m:.4} ({epochs} epochs)"));
    }
    Ok((ok, format!("{} nodes, layers {}; {}", run.nodes, run.layers, parts.join(", "))))
}

fn overfit(seed: u64) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x09);
    let graphs: Vec<Graph> = (0..16)
        .map(|_| {
            let g = nonempty_graph(&mut r, 8, 16, 3, 1);
            let y = r.random_range(-1.0..1.0);
            g.with_target(Target::Graph(vec![y]))
        })
        .collect::<Result<_>>()?;
    let (m, store) = Esa::new(ModelConfig::graph_default("MSP", 7, 1), &mut r)?;
    let mut tc = TrainConfig::new(Task::Regression);
    tc.lr = 1e-3;
    tc.weight_decay = 0.0;
    let data = Dataset::new(&m, &graphs, tc.task)?;
    let all: Vec<usize> = (0..16).collect();
    let batches: Vec<Batch> = data.batches(&m, &all, 16)?;
    let mut trainer = Trainer::new(&m, store.cast(), &tc)?;
    let mut last = f64::INFINITY;
    for step in 1..=2000 {
        last = trainer.step(&batches[0])?;
        if last < 1e-3 {
            return Ok((true, format!("train loss {last:.3e} after {step} steps")));
        }
    }
    Ok((false, format!("train loss {last:.3e} after 2000 steps")))
}

fn wl_demo() -> Check {
    let d = wl_linegraph_demo()?;
    Ok((
        d.passed(),
        format!(
            "graphs equal {}, line graphs differ {}, isomorphic copy consistent {}",
            d.g1_hash == d.g2_hash,
            d.l1_hash != d.l2_hash,
            d.isomorphic_ok
        ),
    ))
}

fn memory_scaling(seed: u64) -> Check {
    let counts: Vec<usize> = (0..6).map(|k| 2000 << k).collect();
    let s = memory_scaling_study(&counts, 4, seed)?;
    let sparse_ok = s.sparse_fit.r2 >= 0.99;
    let dense_ok = s.dense_ratios.iter().all(|r| (3.6..=4.4).contains(r));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    Ok((
        sparse_ok && dense_ok,
        format!(
            "{} to {} edges, sparse R^2 {:.5}, sparse ratios {}, dense ratios {}",
            s.rows[0].edges,
            s.rows.last().map_or(0, |r| r.edges),
            s.sparse_fit.r2,
            fmt(&s.sparse_ratios),
            fmt(&s.dense_ratios)
        ),
    ))
}

fn gini_checks(seed: u64) -> Check {
    let mut ok = gini(&[0.2; 5])? == 0.0;
    for n in 1..=20 {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        ok &= (gini(&v)? - (n as f64 - 1.0) / n as f64).abs() < 1e-12;
    }
    let g123 = gini(&[1.0, 2.0, 3.0])?;
    ok &= (g123 - 4.0 / 18.0).abs() < 1e-12;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x0c);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(1..50);
        let mut x: Vec<f64> = (0..n).map(|_| r.random_range(0.0..5.0)).collect();
        let g = gini(&x)?;
        let c = r.random_range(0.01..100.0);
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        worst = worst.max((gini(&scaled)? - g).abs());
        x.shuffle(&mut r);
        worst = worst.max((gini(&x)? - g).abs());
    }
    ok &= worst <= 1e-12;
    Ok((ok, format!("gini([1,2,3]) = {g123:.12}, invariance max deviation {worst:.3e}")))
}

fn metric_oracles(seed: u64) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x0d);
    let (mut worst_mcc, mut worst_r2) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let k = r.random_range(2..6);
        let counts: Vec<u64> = (0..k * k).map(|_| r.random_range(0..20)).collect();
        let c = Confusion::from_counts(k, counts.clone())?;
        if c.total() == 0 {
            continue;
        }
        // Covariance form over the one-hot expansion of the counts.
        let n = c.total() as f64;
        let (mut cxy, mut cxx, mut cyy) = (0.0, 0.0, 0.0);
        for cls in 0..k {
            let tk: f64 = (0..k).map(|j| c.get(cls, j) as f64).sum();
            let pk: f64 = (0..k).map(|i| c.get(i, cls) as f64).sum();
            let both = c.get(cls, cls) as f64;
            cxy += both - tk * pk / n;
            cxx += tk - tk * tk / n;
            cyy += pk - pk * pk / n;
        }
        let want = if cxx * cyy == 0.0 { 0.0 } else { cxy / (cxx * cyy).sqrt() };
        worst_mcc = worst_mcc.max((mcc(&c) - want).abs());

        let m = r.random_range(2..40);
        let t: Vec<f64> = (0..m).map(|_| r.random_range(-5.0..5.0)).collect();
        let p: Vec<f64> = t.iter().map(|y| y + r.random_range(-2.0..2.0)).collect();
        // Pairwise form of the total sum of squares.
        let ss_tot = t.iter().flat_map(|a| t.iter().map(move |b| (a - b).powi(2))).sum::<f64>() / (2 * m) as f64;
        let ss_res = t.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let got = r2(&p, &t)?;
        worst_r2 = worst_r2.max((got - (1.0 - ss_res / ss_tot)).abs());
    }
    let ok = worst_mcc <= 1e-12 && worst_r2 <= 1e-12;
    Ok((ok, format!("1000 cases, MCC max deviation {worst_mcc:.3e}, R^2 max deviation {worst_r2:.3e}")))
}

/// Reruns every other selected criterion and compares the report lines.
/// The learning check is repeated on one seed with a short epoch budget.
fn determinism(opts: &SelfcheckOptions) -> Check {
    let mut short = opts.clone();
    short.infected.seeds.truncate(1);
    short.infected.max_epochs = short.infected.max_epochs.min(5);
    short.only = CRITERIA.iter().map(|c| c.0).filter(|&id| id != 14).collect();
    if opts.only.iter().any(|&id| id != 14) {
        short.only.retain(|id| opts.only.contains(id));
    }
    let a = run_selfcheck(&short).to_text();
    let b = run_selfcheck(&short).to_text();
    Ok((a == b, format!("two reruns of {} criteria byte-identical: {}", short.only.len(), a == b)))
}
