//! `esa`: generate datasets, train and evaluate edge-set attention models,
//! build masks, and run the analyses and the acceptance self-check.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric
//! failure, 3 failed acceptance check.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use esa::analysis::GiniRows;
use esa::selfcheck::SelfcheckOptions;
use esa::EsaError;

/// Bad arguments, configs or inputs.
#[derive(Debug)]
pub struct UsageError(String);

impl UsageError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }

    pub fn from_esa(e: EsaError) -> anyhow::Error {
        match e {
            EsaError::Config(_) | EsaError::Parse { .. } | EsaError::Checkpoint(_) | EsaError::Io(_) => {
                Self(e.to_string()).into()
            }
            other => other.into(),
        }
    }
}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check ran to completion and failed; carries the report.
#[derive(Debug)]
pub struct AcceptanceFailure(pub String);

impl std::fmt::Display for AcceptanceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AcceptanceFailure {}

#[derive(Parser)]
#[command(name = "esa", version, about = "Edge-set attention for graph learning")]
struct Cli {
    /// Root for output directories when --out is not given.
    #[arg(long, global = true, env = "ESA_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    /// Suppress per-epoch and per-criterion progress on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    InfectedEr,
    Ba,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tokens {
    Edge,
    Node,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Dense,
    Sparse,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rows {
    Pooled,
    RowMean,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset (graphs.txt) and a split manifest (split.txt).
    Generate {
        #[arg(value_enum)]
        kind: GenKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Infected-ER: node count.
        #[arg(long, default_value_t = 1500)]
        nodes: usize,
        /// Infected-ER: number of infected sources.
        #[arg(long, default_value_t = 4)]
        sources: usize,
        /// Infected-ER: longest distance with its own class.
        #[arg(long, default_value_t = 20)]
        max_path: usize,
        /// Infected-ER: edge probability.
        #[arg(long, default_value_t = 0.0009)]
        edge_prob: f64,
        /// BA: comma-separated directed edge counts.
        #[arg(long, default_value = "2000,4000,8000,16000,32000")]
        edges: String,
        /// BA: links added per new node.
        #[arg(long, default_value_t = 4)]
        attach: usize,
        /// Train, validation and test fractions.
        #[arg(long, num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
        split: Vec<f64>,
    },
    /// Train from a TOML config with [data], [model] and [train] sections.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted overrides such as train.lr=1e-3 or model.layers=MSMSP.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trained run on one split.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Build the attention mask of a graph file.
    Maskgen {
        graphs: PathBuf,
        #[arg(long, value_enum, default_value = "edge")]
        tokens: Tokens,
        #[arg(long, value_enum, default_value = "sparse")]
        layout: Layout,
        /// Also write per-graph storage sizes to mask_report.csv.
        #[arg(long)]
        report: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mask storage scaling over Barabási–Albert graphs.
    Bench {
        /// Run the sparse versus dense storage sweep.
        #[arg(long)]
        ba_sweep: bool,
        #[arg(long)]
        edges: Option<String>,
        #[arg(long, default_value_t = 4)]
        attach: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gini coefficients of a trained run's encoder attention.
    Gini {
        #[arg(long)]
        run: PathBuf,
        /// Encoder layers to report; only `all` is supported.
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "pooled")]
        rows: Rows,
        #[arg(long, default_value_t = 256)]
        max_graphs: usize,
    },
    /// Line-graph versus 1-WL distinguishability demonstration.
    WlDemo {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance suite and write selfcheck.txt.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated criterion numbers; all when absent.
        #[arg(long)]
        only: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let root = cli.out_root;
    match cli.cmd {
        Cmd::Generate {
            kind,
            seed,
            out,
            nodes,
            sources,
            max_path,
            edge_prob,
            edges,
            attach,
            split,
        } => {
            let split = [split[0], split[1], split[2]];
            match kind {
                GenKind::InfectedEr => {
                    let out = commands::out_dir(&root, out, "infected-er");
                    let p = commands::InfectedParams {
                        nodes,
                        sources,
                        max_path,
                        edge_prob,
                    };
                    commands::generate_infected(&out, &p, split, seed)
                }
                GenKind::Ba => {
                    let out = commands::out_dir(&root, out, "ba");
                    commands::generate_ba_sweep(&out, &commands::parse_list(&edges)?, attach, split, seed)
                }
            }
        }
        Cmd::Train {
            config,
            overrides,
            seed,
            out,
        } => {
            if let Some(c) = &config {
                commands::ensure_exists(c)?;
            }
            let out = commands::out_dir(&root, out, "train");
            commands::train(config.as_deref(), &overrides, seed, &out, cli.quiet)
        }
        Cmd::Eval { run, split } => commands::eval(&run, &split),
        Cmd::Maskgen {
            graphs,
            tokens,
            layout,
            report,
            out,
        } => {
            commands::ensure_exists(&graphs)?;
            let out = commands::out_dir(&root, out, "maskgen");
            commands::maskgen(
                &graphs,
                matches!(tokens, Tokens::Node),
                matches!(layout, Layout::Dense),
                report,
                &out,
            )
        }
        Cmd::Bench {
            ba_sweep,
            edges,
            attach,
            seed,
            out,
        } => {
            if !ba_sweep {
                return Err(UsageError::new("bench needs a study flag; use --ba-sweep").into());
            }
            let edges = match edges {
                Some(e) => commands::parse_list(&e)?,
                None => commands::default_sweep(),
            };
            let out = commands::out_dir(&root, out, "bench");
            commands::bench(&edges, attach, seed, &out)
        }
        Cmd::Gini {
            run,
            layers,
            split,
            rows,
            max_graphs,
        } => {
            if layers != "all" {
                return Err(UsageError::new(format!("--layers '{layers}' is not supported; use all")).into());
            }
            let rows = match rows {
                Rows::Pooled => GiniRows::Pooled,
                Rows::RowMean => GiniRows::RowMean,
            };
            commands::gini(&run, &split, rows, max_graphs)
        }
        Cmd::WlDemo { out } => commands::wl_demo(&commands::out_dir(&root, out, "wl-demo")),
        Cmd::Selfcheck { seed, only, out } => {
            let only = match only {
                Some(s) => commands::parse_list(&s)?
                    .into_iter()
                    .map(|id| {
                        u8::try_from(id)
                            .ok()
                            .filter(|id| (1..=14).contains(id))
                            .ok_or_else(|| UsageError::new(format!("no criterion {id}")))
                    })
                    .collect::<Result<_, _>>()?,
                None => Vec::new(),
            };
            let opts = SelfcheckOptions {
                seed,
                only,
                ..SelfcheckOptions::default()
            };
            commands::selfcheck(&opts, &commands::out_dir(&root, out, "selfcheck"), cli.quiet)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<AcceptanceFailure>().is_some() {
        3
    } else if e.downcast_ref::<UsageError>().is_some() {
        1
    } else {
        match e.downcast_ref::<EsaError>() {
            Some(EsaError::Config(_) | EsaError::Parse { .. } | EsaError::Checkpoint(_)) => 1,
            _ => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            if code == 3 {
                print!("{e}");
                eprintln!("acceptance check failed");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(code)
        }
    }
}
