//! Attention inequality, mask memory scaling and the line-graph 1-WL demo.

use crate::error::{contract, EsaError, Result};
use crate::graph::generate::generate_ba;
use crate::graph::{line_graph, wl1_hash, Graph};
use crate::masking::mask_storage_report;
use crate::model::{attention_trace, Esa, Inputs, Stage};
use crate::tensor::{Element, ParamStore, Tape};

/// Gini coefficient `Σ_i Σ_j |x_i − x_j| / (2 n Σ x)`.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return contract("gini of an empty list");
    }
    if values.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return contract("gini needs finite non-negative values");
    }
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return Err(EsaError::UndefinedSignal("gini of an all-zero list".into()));
    }
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    // Sorted form of the pairwise sum: Σ_i (2i − n − 1) x_(i), i from 1.
    let weighted: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum();
    Ok((weighted / (n * total)).max(0.0))
}

/// How the attention rows of one graph become a single coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GiniRows {
    /// Concatenate the allowed entries of all real rows.
    #[default]
    Pooled,
    /// Average the per-row coefficients.
    RowMean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GiniLayer {
    pub layer: usize,
    pub stage: Stage,
    /// `None` for graphs whose rows have no allowed entries.
    pub per_graph: Vec<Option<f64>>,
    pub mean: f64,
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Head-averaged attention inequality of every encoder layer, per graph.
pub fn gini_trace<T: Element>(
    model: &Esa,
    store: &ParamStore<T>,
    inputs: &Inputs<T>,
    rows: GiniRows,
) -> Result<Vec<GiniLayer>> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, store, inputs, None)?;
    let trace = attention_trace(&tape, &fwd);
    let layers: Vec<_> = trace.iter().filter(|t| matches!(t.stage, Stage::Encoder(..))).collect();
    if layers.len() != model.plan().encoder.len() {
        return Err(EsaError::Contract("attention trace is missing encoder layers".into()));
    }
    let mut out = Vec::new();
    for (layer, t) in layers.into_iter().enumerate() {
        let mut per_graph = Vec::with_capacity(inputs.batch());
        for (b, &count) in inputs.counts.iter().enumerate() {
            let row_vals: Vec<Vec<f64>> = (0..count)
                .map(|i| t.head_mean_row(b, i).into_iter().map(|(_, p)| p).collect::<Vec<_>>())
                .filter(|r| !r.is_empty())
                .collect();
            let value = match rows {
                _ if row_vals.is_empty() => None,
                GiniRows::Pooled => Some(gini(&row_vals.concat())?),
                GiniRows::RowMean => {
                    let gs = row_vals.iter().map(|r| gini(r)).collect::<Result<Vec<_>>>()?;
                    Some(gs.iter().sum::<f64>() / gs.len() as f64)
                }
            };
            per_graph.push(value);
        }
        let present: Vec<f64> = per_graph.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&present);
        out.push(GiniLayer {
            layer,
            stage: t.stage,
            per_graph,
            mean,
            std,
        });
    }
    Ok(out)
}

pub const GINI_CSV_HEADER: &str = "layer,kind,graphs,mean,std";

pub fn gini_csv(layers: &[GiniLayer]) -> String {
    let mut s = format!("{GINI_CSV_HEADER}\n");
    for l in layers {
        let kind = match l.stage {
            Stage::Encoder(_, crate::model::BlockKind::Masked) => "M",
            Stage::Encoder(..) => "S",
            Stage::Pool => "P",
            Stage::PoolSab(_) => "S",
        };
        let n = l.per_graph.iter().flatten().count();
        s.push_str(&format!("{},{kind},{n},{},{}\n", l.layer, l.mean, l.std));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub nodes: usize,
    pub edges: usize,
    pub sparse_entries: u64,
    pub sparse_bytes: u64,
    pub dense_bytes: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ≈ slope · x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return contract("linear fit needs at least two paired points");
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(EsaError::UndefinedSignal("linear fit over constant x".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r2 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingStudy {
    pub attach_m: usize,
    pub rows: Vec<ScalingRow>,
    /// Fit of sparse bytes against edge count.
    pub sparse_fit: LinearFit,
    /// Consecutive-point ratios, useful when edge counts double.
    pub sparse_ratios: Vec<f64>,
    pub dense_ratios: Vec<f64>,
}

impl ScalingStudy {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("nodes,edges,sparse_entries,sparse_bytes,dense_bytes\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.nodes, r.edges, r.sparse_entries, r.sparse_bytes, r.dense_bytes
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        let f = &self.sparse_fit;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
        format!(
            "BA graphs with m = {}, {} points\nsparse bytes ~ {:.4} * edges + {:.1} (R^2 = {:.6})\nsparse ratios: {}\ndense ratios: {}\n",
            self.attach_m,
            self.rows.len(),
            f.slope,
            f.intercept,
            f.r2,
            fmt(&self.sparse_ratios),
            fmt(&self.dense_ratios)
        )
    }
}

/// Mask storage of Barabási–Albert graphs with (about) the requested
/// directed edge counts at fixed attachment `m`, hence fixed mean degree.
pub fn memory_scaling_study(edge_counts: &[usize], attach_m: usize, seed: u64) -> Result<ScalingStudy> {
    if attach_m == 0 || edge_counts.len() < 2 {
        return Err(EsaError::Config("scaling study needs m > 0 and at least two sizes".into()));
    }
    let mut rows = Vec::new();
    for (k, &e) in edge_counts.iter().enumerate() {
        // 2 m (n − m) directed edges.
        let n = e.div_ceil(2 * attach_m) + attach_m;
        let g = generate_ba(n, attach_m, seed.wrapping_add(k as u64))?;
        let r = mask_storage_report(&g, None);
        rows.push(ScalingRow {
            nodes: n,
            edges: g.num_edges(),
            sparse_entries: r.sparse_entries,
            sparse_bytes: r.sparse_bytes,
            dense_bytes: r.dense_bytes,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.edges as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.sparse_bytes as f64).collect();
    let sparse_fit = linear_fit(&x, &y)?;
    let ratios = |f: &dyn Fn(&ScalingRow) -> f64| rows.windows(2).map(|w| f(&w[1]) / f(&w[0])).collect();
    Ok(ScalingStudy {
        attach_m,
        sparse_ratios: ratios(&|r| r.sparse_bytes as f64),
        dense_ratios: ratios(&|r| r.dense_bytes as f64),
        sparse_fit,
        rows,
    })
}

/// Cycle `C_n` with two pendant nodes hung on cycle nodes `0` and `d`.
pub fn cycle_with_pendants(n: usize, d: usize) -> Result<Graph> {
    let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    pairs.push((0, n));
    pairs.push((d, n + 1));
    Graph::undirected_unlabelled(n + 2, &pairs)
}

/// Refinement rounds used by the demo.
pub const WL_DEMO_ROUNDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WlDemo {
    pub g1_hash: String,
    pub g2_hash: String,
    pub l1_hash: String,
    pub l2_hash: String,
    /// A relabelled copy of the first graph hashes like the original, as does its line graph.
    pub isomorphic_ok: bool,
}

impl WlDemo {
    pub fn passed(&self) -> bool {
        self.g1_hash == self.g2_hash && self.l1_hash != self.l2_hash && self.isomorphic_ok
    }

    pub fn report(&self) -> String {
        format!(
            "G1 = C12 + pendants at 0,5; G2 = C12 + pendants at 0,6; {WL_DEMO_ROUNDS} rounds\n\
             G1 {}\nG2 {}\nL(G1) {}\nL(G2) {}\n\
             graphs equal: {}\nline graphs differ: {}\nisomorphic copy consistent: {}\nresult: {}\n",
            self.g1_hash,
            self.g2_hash,
            self.l1_hash,
            self.l2_hash,
            self.g1_hash == self.g2_hash,
            self.l1_hash != self.l2_hash,
            self.isomorphic_ok,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Two graphs that 1-WL cannot tell apart, whose line graphs it can.
pub fn wl_linegraph_demo() -> Result<WlDemo> {
    let r = Some(WL_DEMO_ROUNDS);
    let g1 = cycle_with_pendants(12, 5)?;
    let g2 = cycle_with_pendants(12, 6)?;
    let (l1, l2) = (line_graph(&g1)?, line_graph(&g2)?);
    let n = g1.num_nodes();
    let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
    let g1p = g1.relabel_nodes(&perm)?;
    let isomorphic_ok = wl1_hash(&g1p, r) == wl1_hash(&g1, r) && wl1_hash(&line_graph(&g1p)?, r) == wl1_hash(&l1, r);
    Ok(WlDemo {
        g1_hash: wl1_hash(&g1, r),
        g2_hash: wl1_hash(&g2, r),
        l1_hash: wl1_hash(&l1, r),
        l2_hash: wl1_hash(&l2, r),
        isomorphic_ok,
    })
}
