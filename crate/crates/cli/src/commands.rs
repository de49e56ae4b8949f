use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use esa::analysis::{gini_csv, gini_trace, memory_scaling_study, wl_linegraph_demo, GiniRows};
use esa::graph::generate::{generate_ba, generate_infected_er};
use esa::graph::{read_graphs, write_graphs, BatchedGraph, Graph};
use esa::masking::{batch_edge_mask, batch_node_mask, mask_storage_report, MaskLayout};
use esa::model::{load_checkpoint, save_checkpoint, Esa, TaskLevel};
use esa::selfcheck::{run_selfcheck_with, SelfcheckOptions};
use esa::training::{evaluate, num_units, train_with, Dataset, Split, SplitName};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{resolve, RunConfig};
use crate::{AcceptanceFailure, UsageError};

pub const RESOLVED: &str = "resolved.toml";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.csv";
pub const SPLIT: &str = "split.txt";
pub const GRAPHS: &str = "graphs.txt";
pub const EVAL_HEADER: &str = "split,loss,mcc,accuracy,r2,rmse,mae,ap";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub struct InfectedParams {
    pub nodes: usize,
    pub sources: usize,
    pub max_path: usize,
    pub edge_prob: f64,
}

/// Writes one infected-ER graph and a node split manifest.
pub fn generate_infected(out: &Path, p: &InfectedParams, split: [f64; 3], seed: u64) -> Result<String> {
    let g = generate_infected_er(p.nodes, p.sources, p.max_path, p.edge_prob, seed).map_err(UsageError::from_esa)?;
    let s = Split::random(p.nodes, split, seed).map_err(UsageError::from_esa)?;
    create_dir(out)?;
    write(&out.join(GRAPHS), &write_graphs(std::slice::from_ref(&g)))?;
    write(&out.join(SPLIT), &s.to_text())?;
    Ok(format!(
        "infected-er: {} nodes, {} edges, {} classes -> {}\n",
        g.num_nodes(),
        g.num_edges(),
        p.max_path + 2,
        out.display()
    ))
}

/// Writes one BA graph per edge count plus a graph-level split manifest.
pub fn generate_ba_sweep(out: &Path, edges: &[usize], attach_m: usize, split: [f64; 3], seed: u64) -> Result<String> {
    if edges.is_empty() {
        return Err(UsageError::new("--edges needs at least one count").into());
    }
    let mut graphs = Vec::new();
    for (k, &e) in edges.iter().enumerate() {
        let n = e.div_ceil(2 * attach_m.max(1)) + attach_m;
        graphs.push(generate_ba(n, attach_m, seed.wrapping_add(k as u64)).map_err(UsageError::from_esa)?);
    }
    let s = Split::random(graphs.len(), split, seed).map_err(UsageError::from_esa)?;
    create_dir(out)?;
    write(&out.join(GRAPHS), &write_graphs(&graphs))?;
    write(&out.join(SPLIT), &s.to_text())?;
    let mut msg = String::new();
    for g in &graphs {
        let _ = writeln!(msg, "ba: {} nodes, {} edges", g.num_nodes(), g.num_edges());
    }
    Ok(msg)
}

fn load_split(cfg: &RunConfig, graphs: &[Graph]) -> Result<Split> {
    let n = num_units(graphs, cfg.model.level);
    let split = match &cfg.data.split {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Split::from_text(&text).map_err(UsageError::from_esa)?
        }
        None => Split::random(n, cfg.train.split, cfg.train.seed)?,
    };
    split.check(n).map_err(UsageError::from_esa)?;
    Ok(split)
}

/// Trains and writes the resolved config, split, checkpoint and metrics.
pub fn train(config: Option<&Path>, overrides: &[String], seed: Option<u64>, out: &Path, quiet: bool) -> Result<String> {
    let (cfg, graphs) = resolve(config, overrides, seed)?;
    let split = load_split(&cfg, &graphs)?;
    let (model, store) = Esa::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    create_dir(out)?;
    let mut resolved = cfg.clone();
    resolved.data.split = Some(fs::canonicalize(out)?.join(SPLIT));
    resolved.data.graphs = fs::canonicalize(&cfg.data.graphs)?;
    write(&out.join(SPLIT), &split.to_text())?;
    write(&out.join(RESOLVED), &resolved.to_toml())?;
    let outcome = train_with(&model, store.cast(), &graphs, &split, &cfg.train, |e| {
        if !quiet {
            eprintln!("epoch {:>4}  train {:.5}  val {:.5}  lr {:.3e}", e.epoch, e.train_loss, e.val.loss, e.lr);
        }
    })?;
    save_checkpoint(&out.join(CHECKPOINT), &model, &outcome.store)?;
    write(&out.join(METRICS), &outcome.report.to_csv())?;
    let r = &outcome.report;
    Ok(format!(
        "trained {} epochs (best {}), test loss {}{} -> {}\n",
        r.epochs.len(),
        r.best_epoch,
        r.test.loss,
        r.test.mcc.map(|m| format!(", mcc {m}")).unwrap_or_default(),
        out.display()
    ))
}

struct LoadedRun {
    cfg: RunConfig,
    model: Esa,
    store: esa::tensor::ParamStore<f64>,
    graphs: Vec<Graph>,
    split: Split,
}

fn load_run(run: &Path) -> Result<LoadedRun> {
    let cfg = RunConfig::read(&run.join(RESOLVED))?;
    let (model, store) = load_checkpoint(&run.join(CHECKPOINT)).map_err(|e| match e {
        esa::EsaError::Io(io) => anyhow::Error::from(UsageError::new(format!("{}: {io}", run.join(CHECKPOINT).display()))),
        other => other.into(),
    })?;
    if model.config() != &cfg.model {
        return Err(UsageError::new(format!(
            "checkpoint config does not match {}",
            run.join(RESOLVED).display()
        ))
        .into());
    }
    let graphs = read_graphs(&cfg.data.graphs).map_err(UsageError::from_esa)?;
    let split = load_split(&cfg, &graphs)?;
    Ok(LoadedRun {
        cfg,
        model,
        store,
        graphs,
        split,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Scores a trained run on one split and writes `eval_<split>.csv`.
pub fn eval(run: &Path, split_name: &str) -> Result<String> {
    let name = SplitName::parse(split_name).map_err(UsageError::from_esa)?;
    let r = load_run(run)?;
    let data = Dataset::new(&r.model, &r.graphs, r.cfg.train.task)?;
    let batches = data.batches(&r.model, r.split.get(name), r.cfg.train.batch_size)?;
    let m = evaluate(&r.model, &r.store.cast(), r.cfg.train.task, &batches)?;
    let row = format!(
        "{},{},{},{},{},{},{},{}",
        name.as_str(),
        m.loss,
        opt(m.mcc),
        opt(m.accuracy),
        opt(m.r2),
        opt(m.rmse),
        opt(m.mae),
        opt(m.ap)
    );
    let text = format!("{EVAL_HEADER}\n{row}\n");
    write(&run.join(format!("eval_{}.csv", name.as_str())), &text)?;
    Ok(text)
}

/// Gini coefficients of a trained run's attention on one split.
pub fn gini(run: &Path, split_name: &str, rows: GiniRows, max_graphs: usize) -> Result<String> {
    let name = SplitName::parse(split_name).map_err(UsageError::from_esa)?;
    let r = load_run(run)?;
    let graphs: Vec<Graph> = match r.cfg.model.level {
        TaskLevel::Graph => r.split.get(name).iter().take(max_graphs).map(|&i| r.graphs[i].clone()).collect(),
        TaskLevel::Node => r.graphs.iter().take(max_graphs).cloned().collect(),
    };
    let inputs = r.model.prepare::<f64>(&BatchedGraph::new(graphs)?, None)?;
    let layers = gini_trace(&r.model, &r.store, &inputs, rows)?;
    let csv = gini_csv(&layers);
    write(&run.join("gini.csv"), &csv)?;
    Ok(csv)
}

/// Builds the mask of a graph file and writes it, optionally with a storage report.
pub fn maskgen(graphs_path: &Path, node: bool, dense: bool, report: bool, out: &Path) -> Result<String> {
    let graphs = read_graphs(graphs_path).map_err(UsageError::from_esa)?;
    let batch = BatchedGraph::new(graphs.clone())?;
    let mask = if node {
        batch_node_mask(&batch, None)?
    } else {
        batch_edge_mask(&batch, None)?
    };
    let mask = if dense { mask.to_dense() } else { mask.to_sparse() };
    create_dir(out)?;
    let mut text = format!("mask {} {} {}\n", if node { "node" } else { "edge" }, mask.batch(), mask.len());
    match mask.layout() {
        MaskLayout::Dense(_) => {
            text.push_str("# 1 = blocked\n");
            for b in 0..mask.batch() {
                for (i, row) in mask.block(b).chunks(mask.len().max(1)).enumerate() {
                    let _ = write!(text, "{b} {i} ");
                    text.extend(row.iter().map(|&x| if x { '1' } else { '0' }));
                    text.push('\n');
                }
            }
        }
        MaskLayout::Sparse(_) => {
            text.push_str("# allowed b i j\n");
            for [b, i, j] in mask.allowed() {
                let _ = writeln!(text, "{b} {i} {j}");
            }
        }
    }
    let file = out.join(if dense { "mask_dense.txt" } else { "mask_sparse.txt" });
    write(&file, &text)?;
    let mut msg = format!("{} allowed entries -> {}\n", mask.num_allowed(), file.display());
    if report {
        let mut csv = String::from("graph,tokens,dense_bytes,sparse_entries,sparse_bytes\n");
        for (k, g) in graphs.iter().enumerate() {
            let r = mask_storage_report(g, None);
            let _ = writeln!(csv, "{k},{},{},{},{}", r.tokens, r.dense_bytes, r.sparse_entries, r.sparse_bytes);
        }
        write(&out.join("mask_report.csv"), &csv)?;
        msg.push_str(&csv);
    }
    Ok(msg)
}

/// Sparse versus dense mask storage over a BA sweep.
pub fn bench(edges: &[usize], attach_m: usize, seed: u64, out: &Path) -> Result<String> {
    let study = memory_scaling_study(edges, attach_m, seed).map_err(UsageError::from_esa)?;
    create_dir(out)?;
    write(&out.join("scaling.csv"), &study.to_csv())?;
    let summary = study.summary();
    write(&out.join("scaling.txt"), &summary)?;
    Ok(format!("{}{summary}", study.to_csv()))
}

pub fn wl_demo(out: &Path) -> Result<String> {
    let demo = wl_linegraph_demo()?;
    create_dir(out)?;
    let report = demo.report();
    write(&out.join("wl_demo.txt"), &report)?;
    if !demo.passed() {
        return Err(AcceptanceFailure(report).into());
    }
    Ok(report)
}

pub fn selfcheck(opts: &SelfcheckOptions, out: &Path, quiet: bool) -> Result<String> {
    let report = run_selfcheck_with(opts, |c| {
        if !quiet {
            eprintln!("{}  ({:.1}s)", c.line(), c.elapsed.as_secs_f64());
        }
    });
    create_dir(out)?;
    let text = report.to_text();
    write(&out.join("selfcheck.txt"), &text)?;
    if !report.passed() {
        return Err(AcceptanceFailure(text).into());
    }
    Ok(text)
}

/// Parses a comma-separated list of counts.
pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| UsageError::new(format!("'{t}' is not a count")).into())
        })
        .collect()
}

pub fn default_sweep() -> Vec<usize> {
    (0..6).map(|k| 2000 << k).collect()
}

pub fn out_dir(root: &Path, explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| root.join(name))
}

pub fn ensure_exists(p: &Path) -> Result<()> {
    if !p.exists() {
        bail!(UsageError::new(format!("{} does not exist", p.display())));
    }
    Ok(())
}
