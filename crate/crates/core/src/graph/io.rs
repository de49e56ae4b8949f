//! Plain-text graph format.
//!
//! ```text
//! # comment
//! graph <num_nodes> <num_edges> <node_dim> <edge_dim>
//! <node_dim floats>          one line per node, omitted when node_dim = 0
//! <src> <trg> <edge_dim floats>   one line per edge
//! target graph <floats>      optional
//! target node <floats>       optional, one value per node
//! ---
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Graph, Target};
use crate::error::{EsaError, Result};

fn perr<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(EsaError::Parse { line, msg: msg.into() })
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .or_else(|_| perr(line, format!("invalid {what} '{tok}'")))
}

fn parse_floats(toks: &[&str], line: usize) -> Result<Vec<f64>> {
    toks.iter().map(|t| parse_num::<f64>(t, line, "number")).collect()
}

/// Parses every graph in `text`.
pub fn parse_graphs(text: &str) -> Result<Vec<Graph>> {
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, toks)| !toks.is_empty())
        .collect();
    let mut graphs = Vec::new();
    let mut pos = 0;
    while pos < lines.len() {
        let (ln, toks) = &lines[pos];
        if toks == &["---"] {
            pos += 1;
            continue;
        }
        if toks[0] != "graph" || toks.len() != 5 {
            return perr(*ln, "expected 'graph <num_nodes> <num_edges> <node_dim> <edge_dim>'");
        }
        let n: usize = parse_num(toks[1], *ln, "node count")?;
        let m: usize = parse_num(toks[2], *ln, "edge count")?;
        let dn: usize = parse_num(toks[3], *ln, "node dim")?;
        let de: usize = parse_num(toks[4], *ln, "edge dim")?;
        let header_line = *ln;
        pos += 1;

        let mut next = |what: &str| -> Result<&(usize, Vec<&str>)> {
            let item = lines.get(pos);
            pos += 1;
            match item {
                Some(item) if item.1 != ["---"] => Ok(item),
                _ => perr(header_line, format!("graph ends before {what}")),
            }
        };

        let mut node_features = Vec::with_capacity(n * dn);
        if dn > 0 {
            for i in 0..n {
                let (ln, toks) = next(&format!("node line {i}"))?;
                if toks.len() != dn {
                    return perr(*ln, format!("node line has {} values, expected {dn}", toks.len()));
                }
                node_features.extend(parse_floats(toks, *ln)?);
            }
        }
        let mut edges = Vec::with_capacity(m);
        let mut edge_features = Vec::with_capacity(m * de);
        for e in 0..m {
            let (ln, toks) = next(&format!("edge line {e}"))?;
            if toks.len() != 2 + de {
                return perr(*ln, format!("edge line has {} fields, expected {}", toks.len(), 2 + de));
            }
            let s: usize = parse_num(toks[0], *ln, "source id")?;
            let t: usize = parse_num(toks[1], *ln, "target id")?;
            if s >= n || t >= n {
                return perr(*ln, format!("edge ({s}, {t}) out of range for {n} nodes"));
            }
            edges.push((s, t));
            edge_features.extend(parse_floats(&toks[2..], *ln)?);
        }
        let mut g = Graph::new(n, edges, dn, node_features, de, edge_features)
            .or_else(|e| perr(header_line, e.to_string()))?;
        if let Some((ln, toks)) = lines.get(pos) {
            if toks[0] == "target" {
                let values = parse_floats(toks.get(2..).unwrap_or(&[]), *ln)?;
                let target = match toks.get(1).copied() {
                    Some("graph") => Target::Graph(values),
                    Some("node") => Target::Nodes(values),
                    _ => return perr(*ln, "expected 'target graph ...' or 'target node ...'"),
                };
                g = g.with_target(target).or_else(|e| perr(*ln, e.to_string()))?;
                pos += 1;
            }
        }
        if let Some((ln, toks)) = lines.get(pos) {
            if toks != &["---"] {
                return perr(*ln, "expected '---' between graphs");
            }
        }
        graphs.push(g);
    }
    Ok(graphs)
}

fn push_floats(out: &mut String, xs: &[f64]) {
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        // `{}` on f64 is the shortest representation that round-trips.
        let _ = write!(out, "{x}");
    }
}

pub fn write_graph(g: &Graph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "graph {} {} {} {}", g.num_nodes(), g.num_edges(), g.node_dim(), g.edge_dim());
    if g.node_dim() > 0 {
        for i in 0..g.num_nodes() {
            push_floats(&mut out, g.node_feature(i));
            out.push('\n');
        }
    }
    for (e, &(s, t)) in g.edges().iter().enumerate() {
        let _ = write!(out, "{s} {t}");
        if g.edge_dim() > 0 {
            out.push(' ');
            push_floats(&mut out, g.edge_feature(e));
        }
        out.push('\n');
    }
    match &g.target {
        Some(Target::Graph(v)) => {
            out.push_str("target graph ");
            push_floats(&mut out, v);
            out.push('\n');
        }
        Some(Target::Nodes(v)) => {
            out.push_str("target node ");
            push_floats(&mut out, v);
            out.push('\n');
        }
        None => {}
    }
    out
}

pub fn write_graphs(graphs: &[Graph]) -> String {
    graphs.iter().map(write_graph).collect::<Vec<_>>().join("---\n")
}

/// Reads a graph file, or every `*.graph` / `*.txt` file of a directory in name order.
pub fn read_graphs(path: &Path) -> Result<Vec<Graph>> {
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("graph" | "txt")))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(parse_graphs(&fs::read_to_string(&f)?)?);
        }
        Ok(out)
    } else {
        parse_graphs(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = Graph::new(3, vec![(0, 1), (2, 1)], 2, vec![0.5, -1.0, 0.1, 2.0, 3.0, 1e-7], 1, vec![4.0, 0.3])
            .unwrap()
            .with_target(Target::Graph(vec![1.5, -0.25]))
            .unwrap();
        let b = Graph::undirected_unlabelled(2, &[(0, 1)])
            .unwrap()
            .with_target(Target::Nodes(vec![0.0, 3.0]))
            .unwrap();
        let c = Graph::new(2, vec![(0, 1)], 0, vec![], 0, vec![]).unwrap();
        let text = write_graphs(&[a.clone(), b.clone(), c.clone()]);
        assert_eq!(parse_graphs(&text).unwrap(), vec![a, b, c]);
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = "# header\n\ngraph 2 1 1 0\n1.0\n2.0 # second\n0 1\n";
        let g = &parse_graphs(text).unwrap()[0];
        assert_eq!(g.node_features(), &[1.0, 2.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "graph 2 1 1 0\n1.0\n2.0\n0 5\n";
        match parse_graphs(bad) {
            Err(EsaError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        match parse_graphs("graph 2 1 1 0\n1.0\nx\n0 1\n") {
            Err(EsaError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_graphs("graph 2 2 1 0\n1.0\n2.0\n0 1\n").is_err());
        assert!(parse_graphs("nodes 2\n").is_err());
        assert!(parse_graphs("graph 2 1 1 0\n1\n2\n0 1\ntarget node 1\n").is_err());
    }
}
