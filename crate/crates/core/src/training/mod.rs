//! Losses, metrics, optimiser and the train/eval loops.

mod metrics;
mod optim;

use std::fmt::Write as _;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{average_precision, mae, mcc, r2, rmse, Confusion};
pub use optim::{clip_grad_norm, grad_norm, AdamW};

use crate::error::{contract, EsaError, Result};
use crate::graph::{BatchedGraph, Graph, Target};
use crate::model::{Esa, Inputs, TaskLevel};
use crate::tensor::{Element, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Binary,
    Multiclass,
    Multilabel,
}

fn d_lr() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    128
}
fn d_epochs() -> usize {
    200
}
fn d_patience() -> usize {
    30
}
fn d_halving() -> usize {
    15
}
fn d_clip() -> f64 {
    0.5
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.01
}
fn d_rel() -> f64 {
    1e-6
}
fn d_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_halving")]
    pub lr_halving_patience: usize,
    #[serde(default = "d_clip")]
    pub grad_clip_norm: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// Relative decrease of the validation loss that counts as improvement.
    #[serde(default = "d_rel")]
    pub min_rel_improvement: f64,
    #[serde(default = "d_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            lr: d_lr(),
            batch_size: d_batch(),
            max_epochs: d_epochs(),
            patience: d_patience(),
            lr_halving_patience: d_halving(),
            grad_clip_norm: d_clip(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_wd(),
            min_rel_improvement: d_rel(),
            split: d_split(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EsaError::Config(m.into()));
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("lr and weight_decay must be non-negative, eps positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.lr_halving_patience == 0 {
            return bad("batch_size, max_epochs and patience values must be positive");
        }
        if self.split.iter().any(|&f| !(f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be non-negative and sum to 1");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)
    }
}

/// Disjoint train/validation/test index sets. Indices address graphs for
/// graph-level tasks and nodes (numbered consecutively across graphs) for
/// node-level tasks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(EsaError::Config(format!("unknown split '{s}' (train, val, test)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl Split {
    /// Shuffles `0..n` and cuts it by `fractions`; validation and test sizes are rounded.
    pub fn random(n: usize, fractions: [f64; 3], seed: u64) -> Result<Self> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (n as f64 * fractions[1]).round() as usize;
        let n_test = (n as f64 * fractions[2]).round() as usize;
        if n_val + n_test >= n {
            return Err(EsaError::Config(format!("{n} examples leave an empty training split")));
        }
        let test = idx.split_off(n - n_test);
        let val = idx.split_off(n - n_test - n_val);
        let s = Self { train: idx, val, test };
        s.check(n)?;
        Ok(s)
    }

    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Errors on an empty part, an out-of-range index or overlap.
    pub fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
            let part = self.get(name);
            if part.is_empty() {
                return Err(EsaError::Config(format!("empty {} split", name.as_str())));
            }
            for &i in part {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(EsaError::Config(format!("split index {i} out of range or repeated")));
                }
            }
        }
        Ok(())
    }

    /// Three lines: `train i j ..`, `val ..`, `test ..`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
            s.push_str(name.as_str());
            for i in self.get(name) {
                let _ = write!(s, " {i}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut parts: [Option<Vec<usize>>; 3] = [None, None, None];
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let Some(key) = it.next() else { continue };
            let slot = match SplitName::parse(key) {
                Ok(n) => n as usize,
                Err(_) => {
                    return Err(EsaError::Parse {
                        line: ln + 1,
                        msg: format!("unknown split '{key}'"),
                    })
                }
            };
            let idx = it
                .map(|t| {
                    t.parse().map_err(|_| EsaError::Parse {
                        line: ln + 1,
                        msg: format!("bad index '{t}'"),
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            parts[slot] = Some(idx);
        }
        let [Some(train), Some(val), Some(test)] = parts else {
            return Err(EsaError::Parse {
                line: 0,
                msg: "split manifest needs train, val and test lines".into(),
            });
        };
        Ok(Self { train, val, test })
    }
}

/// Number of supervised units: graphs or nodes.
pub fn num_units(graphs: &[Graph], level: TaskLevel) -> usize {
    match level {
        TaskLevel::Graph => graphs.len(),
        TaskLevel::Node => graphs.iter().map(Graph::num_nodes).sum(),
    }
}

/// Target rows, one per unit.
fn unit_targets(graphs: &[Graph], level: TaskLevel) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for (i, g) in graphs.iter().enumerate() {
        match (level, &g.target) {
            (TaskLevel::Graph, Some(Target::Graph(v))) => out.push(v.clone()),
            (TaskLevel::Node, Some(Target::Nodes(v))) => out.extend(v.iter().map(|&x| vec![x])),
            _ => {
                return Err(EsaError::InvalidGraph(format!(
                    "graph {i} has no {} target",
                    if level == TaskLevel::Graph { "graph-level" } else { "node-level" }
                )))
            }
        }
    }
    Ok(out)
}

fn check_targets(task: Task, out_dim: usize, targets: &[Vec<f64>]) -> Result<()> {
    for t in targets {
        let ok = match task {
            Task::Regression => t.len() == out_dim && t.iter().all(|x| x.is_finite()),
            Task::Binary => out_dim == 1 && t.len() == 1 && (t[0] == 0.0 || t[0] == 1.0),
            Task::Multilabel => t.len() == out_dim && t.iter().all(|&x| x == 0.0 || x == 1.0),
            Task::Multiclass => t.len() == 1 && t[0] >= 0.0 && t[0].fract() == 0.0 && (t[0] as usize) < out_dim,
        };
        if !ok {
            return contract(format!("target {t:?} does not fit a {task:?} task with {out_dim} outputs"));
        }
    }
    Ok(())
}

/// Prepared model inputs plus the supervised rows of its output.
#[derive(Clone)]
pub struct Batch {
    /// Shared between the node chunks of one graph group.
    pub inputs: Rc<Inputs<f32>>,
    /// Output rows that carry supervision.
    pub rows: Vec<usize>,
    /// Targets aligned with `rows`.
    pub targets: Vec<Vec<f64>>,
}

/// A graph list with its targets, ready to be batched.
pub struct Dataset<'a> {
    graphs: &'a [Graph],
    level: TaskLevel,
    targets: Vec<Vec<f64>>,
    /// First unit of each graph, with a trailing total.
    unit_offsets: Vec<usize>,
}

impl<'a> Dataset<'a> {
    pub fn new(model: &Esa, graphs: &'a [Graph], task: Task) -> Result<Self> {
        let level = model.config().level;
        if graphs.is_empty() {
            return contract("empty dataset");
        }
        let targets = unit_targets(graphs, level)?;
        check_targets(task, model.config().out_dim, &targets)?;
        let mut unit_offsets = vec![0];
        for g in graphs {
            let n = if level == TaskLevel::Graph { 1 } else { g.num_nodes() };
            unit_offsets.push(unit_offsets.last().unwrap() + n);
        }
        Ok(Self {
            graphs,
            level,
            targets,
            unit_offsets,
        })
    }

    pub fn num_units(&self) -> usize {
        self.targets.len()
    }

    /// Batches covering exactly `units`. Graph-level batches take up to
    /// `batch_size` units in the given order. Node-level batches hold whole
    /// graphs, grouped until a group has at least `batch_size` nodes, with
    /// every selected node of the group as a row.
    pub fn batches(&self, model: &Esa, units: &[usize], batch_size: usize) -> Result<Vec<Batch>> {
        let mut out = Vec::new();
        match self.level {
            TaskLevel::Graph => {
                for chunk in units.chunks(batch_size) {
                    let gs = chunk.iter().map(|&u| self.graphs[u].clone()).collect();
                    out.push(Batch {
                        inputs: Rc::new(model.prepare(&BatchedGraph::new(gs)?, None)?),
                        rows: (0..chunk.len()).collect(),
                        targets: chunk.iter().map(|&u| self.targets[u].clone()).collect(),
                    });
                }
            }
            TaskLevel::Node => {
                let mut selected = vec![false; self.num_units()];
                units.iter().for_each(|&u| selected[u] = true);
                let mut group: Vec<usize> = Vec::new();
                let mut nodes = 0;
                for g in 0..self.graphs.len() {
                    let span = self.unit_offsets[g]..self.unit_offsets[g + 1];
                    if !span.clone().any(|u| selected[u]) {
                        continue;
                    }
                    group.push(g);
                    nodes += span.len();
                    if nodes >= batch_size {
                        out.push(self.node_group(model, &group, &selected)?);
                        group.clear();
                        nodes = 0;
                    }
                }
                if !group.is_empty() {
                    out.push(self.node_group(model, &group, &selected)?);
                }
            }
        }
        Ok(out)
    }

    fn node_group(&self, model: &Esa, group: &[usize], selected: &[bool]) -> Result<Batch> {
        let gs = group.iter().map(|&g| self.graphs[g].clone()).collect();
        let inputs = Rc::new(model.prepare(&BatchedGraph::new(gs)?, None)?);
        let (mut rows, mut targets, mut row) = (Vec::new(), Vec::new(), 0);
        for &g in group {
            for u in self.unit_offsets[g]..self.unit_offsets[g + 1] {
                if selected[u] {
                    rows.push(row);
                    targets.push(self.targets[u].clone());
                }
                row += 1;
            }
        }
        Ok(Batch { inputs, rows, targets })
    }
}

/// Splits each group's rows into shuffled chunks of at most `batch_size`
/// nodes and shuffles the chunk order.
fn node_chunks(groups: &[Batch], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    let mut out = Vec::new();
    for g in groups {
        let mut idx: Vec<usize> = (0..g.rows.len()).collect();
        idx.shuffle(rng);
        for c in idx.chunks(batch_size) {
            out.push(Batch {
                inputs: Rc::clone(&g.inputs),
                rows: c.iter().map(|&i| g.rows[i]).collect(),
                targets: c.iter().map(|&i| g.targets[i].clone()).collect(),
            });
        }
    }
    out.shuffle(rng);
    out
}

/// Loss of `output` rows against targets, mean over supervised entries.
pub fn task_loss<T: Element>(tape: &mut Tape<T>, task: Task, output: Var, rows: &[usize], targets: &[Vec<f64>]) -> Result<Var> {
    let pred = tape.gather_rows(output, rows)?;
    let width = tape.shape(pred)[1];
    match task {
        Task::Multiclass => {
            let labels: Vec<usize> = targets.iter().map(|t| t[0] as usize).collect();
            tape.softmax_cross_entropy(pred, &labels)
        }
        _ => {
            let flat: Vec<f64> = targets.iter().flatten().copied().collect();
            let t = Tensor::from_f64(vec![rows.len(), width], &flat)?;
            match task {
                Task::Regression => tape.mse(pred, t),
                _ => tape.bce_with_logits(pred, t),
            }
        }
    }
}

/// Applicable metrics; `None` marks a metric that does not apply or is undefined.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub mcc: Option<f64>,
    pub accuracy: Option<f64>,
    pub r2: Option<f64>,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub ap: Option<f64>,
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x.abs()).exp().ln_1p() + (-x).max(0.0))
}

/// Metrics of raw model outputs against targets.
pub fn compute_metrics(task: Task, preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Metrics> {
    if preds.is_empty() || preds.len() != targets.len() {
        return contract("metrics need matching, non-empty predictions and targets");
    }
    let n = preds.len();
    let mut m = Metrics::default();
    match task {
        Task::Regression => {
            let p: Vec<f64> = preds.iter().flatten().copied().collect();
            let t: Vec<f64> = targets.iter().flatten().copied().collect();
            m.loss = t.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
            m.rmse = Some(rmse(&p, &t));
            m.mae = Some(mae(&p, &t));
            let k = preds[0].len();
            let per_dim: Result<Vec<f64>> = (0..k)
                .map(|j| {
                    let pj: Vec<f64> = preds.iter().map(|r| r[j]).collect();
                    let tj: Vec<f64> = targets.iter().map(|r| r[j]).collect();
                    r2(&pj, &tj)
                })
                .collect();
            m.r2 = per_dim.ok().map(|v| v.iter().sum::<f64>() / k as f64);
        }
        Task::Binary | Task::Multilabel => {
            let (mut loss, mut hits, mut count) = (0.0, 0usize, 0usize);
            for (p, t) in preds.iter().zip(targets) {
                for (&x, &y) in p.iter().zip(t) {
                    loss -= y * log_sigmoid(x) + (1.0 - y) * log_sigmoid(-x);
                    hits += ((x > 0.0) == (y == 1.0)) as usize;
                    count += 1;
                }
            }
            m.loss = loss / count as f64;
            m.accuracy = Some(hits as f64 / count as f64);
            let k = preds[0].len();
            let aps: Vec<f64> = (0..k)
                .filter_map(|j| {
                    let s: Vec<f64> = preds.iter().map(|r| r[j]).collect();
                    let l: Vec<bool> = targets.iter().map(|r| r[j] == 1.0).collect();
                    average_precision(&s, &l)
                })
                .collect();
            m.ap = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
            if task == Task::Binary {
                let truth: Vec<usize> = targets.iter().map(|t| t[0] as usize).collect();
                let guess: Vec<usize> = preds.iter().map(|p| (p[0] > 0.0) as usize).collect();
                m.mcc = Some(mcc(&Confusion::from_labels(2, &truth, &guess)?));
            }
        }
        Task::Multiclass => {
            let k = preds[0].len();
            let mut loss = 0.0;
            let mut truth = Vec::with_capacity(n);
            let mut guess = Vec::with_capacity(n);
            for (p, t) in preds.iter().zip(targets) {
                let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = p.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                let label = t[0] as usize;
                loss += lse - p[label];
                truth.push(label);
                guess.push((0..k).fold(0, |best, j| if p[j] > p[best] { j } else { best }));
            }
            m.loss = loss / n as f64;
            let c = Confusion::from_labels(k, &truth, &guess)?;
            m.mcc = Some(mcc(&c));
            m.accuracy = Some(c.accuracy());
        }
    }
    Ok(m)
}

/// Runs `batches` without dropout and scores the supervised rows.
pub fn evaluate(model: &Esa, store: &ParamStore<f32>, task: Task, batches: &[Batch]) -> Result<Metrics> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for b in batches {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, store, &b.inputs, None)?;
        let out = tape.value(fwd.output);
        for (&r, t) in b.rows.iter().zip(&b.targets) {
            preds.push(out.row(r).iter().map(|&x| x as f64).collect());
            targets.push(t.clone());
        }
    }
    compute_metrics(task, &preds, &targets)
}

/// Gradient steps on one parameter set.
pub struct Trainer<'m> {
    pub model: &'m Esa,
    pub store: ParamStore<f32>,
    pub opt: AdamW,
    pub task: Task,
    pub clip: f64,
    rng: ChaCha8Rng,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Esa, store: ParamStore<f32>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            store,
            opt: cfg.optimizer(),
            task: cfg.task,
            clip: cfg.grad_clip_norm,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d409),
        })
    }

    /// One forward/backward/clip/update pass; returns the batch loss.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        if batch.rows.is_empty() {
            return contract("batch without supervised rows");
        }
        let mut tape = Tape::new();
        let fwd = self.model.forward(&mut tape, &self.store, &batch.inputs, Some(&mut self.rng))?;
        let loss = task_loss(&mut tape, self.task, fwd.output, &batch.rows, &batch.targets)?;
        let value = tape.value(loss).item() as f64;
        let grads = tape.backward(loss)?;
        self.store.zero_grad();
        self.store.accumulate(&grads);
        clip_grad_norm(&mut self.store, self.clip);
        self.opt.step(&mut self.store);
        Ok(value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored (1-based).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Validation metrics of the restored parameters.
    pub val: Metrics,
    pub test: Metrics,
}

pub const METRIC_CSV_HEADER: &str = "epoch,split,train_loss,loss,mcc,accuracy,r2,rmse,mae,ap,lr";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One CSV row for `metrics` on a named split.
pub fn metrics_csv_row(epoch: usize, split: &str, train_loss: Option<f64>, m: &Metrics, lr: Option<f64>) -> String {
    format!(
        "{epoch},{split},{},{},{},{},{},{},{},{},{}",
        opt(train_loss),
        m.loss,
        opt(m.mcc),
        opt(m.accuracy),
        opt(m.r2),
        opt(m.rmse),
        opt(m.mae),
        opt(m.ap),
        opt(lr)
    )
}

impl MetricReport {
    /// One `val` row per epoch, then a `test` row for the restored parameters.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRIC_CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&metrics_csv_row(e.epoch, "val", Some(e.train_loss), &e.val, Some(e.lr)));
            s.push('\n');
        }
        s.push_str(&metrics_csv_row(self.best_epoch, "test", None, &self.test, None));
        s.push('\n');
        s
    }
}

pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub report: MetricReport,
}

/// Trains with validation-loss early stopping and learning-rate halving,
/// then restores the best parameters and scores the test split.
pub fn train(
    model: &Esa,
    store: ParamStore<f32>,
    graphs: &[Graph],
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, store, graphs, split, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &Esa,
    store: ParamStore<f32>,
    graphs: &[Graph],
    split: &Split,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::new(model, graphs, cfg.task)?;
    split.check(data.num_units())?;
    let val_batches = data.batches(model, &split.val, cfg.batch_size)?;
    // Node-level graph groups are prepared once; graph-level batches are rebuilt every epoch.
    let node_groups = match model.config().level {
        TaskLevel::Node => Some(data.batches(model, &split.train, cfg.batch_size)?),
        TaskLevel::Graph => None,
    };
    let mut trainer = Trainer::new(model, store, cfg)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train_units = split.train.clone();

    let mut best = (f64::INFINITY, 0usize, trainer.store.clone(), Metrics::default());
    let (mut bad_epochs, mut since_halving) = (0, 0);
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let batches = match &node_groups {
            Some(groups) => node_chunks(groups, cfg.batch_size, &mut order_rng),
            None => {
                train_units.shuffle(&mut order_rng);
                data.batches(model, &train_units, cfg.batch_size)?
            }
        };
        let (mut loss_sum, mut rows) = (0.0, 0);
        for b in &batches {
            loss_sum += trainer.step(b)? * b.rows.len() as f64;
            rows += b.rows.len();
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / rows as f64,
            val: evaluate(model, &trainer.store, cfg.task, &val_batches)?,
            lr: trainer.opt.lr,
        };
        let loss = rec.val.loss;
        let improved = loss.is_finite()
            && (best.0 == f64::INFINITY || best.0 - loss > cfg.min_rel_improvement * best.0.abs());
        if improved {
            best = (loss, epoch, trainer.store.clone(), rec.val.clone());
            bad_epochs = 0;
            since_halving = 0;
        } else {
            bad_epochs += 1;
            since_halving += 1;
            if since_halving >= cfg.lr_halving_patience {
                trainer.opt.lr *= 0.5;
                since_halving = 0;
            }
        }
        on_epoch(&rec);
        epochs.push(rec);
        if bad_epochs >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    if best.1 == 0 {
        return Err(EsaError::Contract("validation loss never became finite".into()));
    }

    let (best_val_loss, best_epoch, best_store, val) = best;
    let test_batches = data.batches(model, &split.test, cfg.batch_size)?;
    let test = evaluate(model, &best_store, cfg.task, &test_batches)?;
    Ok(TrainOutcome {
        store: best_store,
        report: MetricReport {
            epochs,
            best_epoch,
            best_val_loss,
            stopped_early,
            val,
            test,
        },
    })
}
