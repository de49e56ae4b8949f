use sha2::{Digest, Sha256};

use super::Graph;

type Color = [u8; 16];

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

fn color_of(parts: &[&[u8]]) -> Color {
    digest(parts)[..16].try_into().expect("16 bytes")
}

/// 1-WL colour-refinement hash.
///
/// Initial colours come from node features; each round recolours a node by
/// its colour together with the sorted multisets of out- and in-neighbour
/// colours. The hash covers the sorted colour histogram of every round, so it
/// is invariant under node relabelling. `iterations = None` runs `N_n` rounds.
pub fn wl1_hash(g: &Graph, iterations: Option<usize>) -> String {
    let rounds = iterations.unwrap_or(g.num_nodes()).max(1);
    let n = g.num_nodes();
    let mut colors: Vec<Color> = (0..n)
        .map(|i| {
            let bytes: Vec<u8> = g
                .node_feature(i)
                .iter()
                .flat_map(|x| x.to_bits().to_le_bytes())
                .collect();
            color_of(&[b"init", &bytes])
        })
        .collect();
    let mut outs = vec![Vec::new(); n];
    let mut ins = vec![Vec::new(); n];
    for &(s, t) in g.edges() {
        outs[s].push(t);
        ins[t].push(s);
    }
    let mut history = Vec::new();
    let snapshot = |colors: &[Color]| {
        let mut sorted = colors.to_vec();
        sorted.sort_unstable();
        sorted.concat()
    };
    history.push(snapshot(&colors));
    for _ in 0..rounds {
        let next: Vec<Color> = (0..n)
            .map(|i| {
                let mut o: Vec<Color> = outs[i].iter().map(|&j| colors[j]).collect();
                let mut inn: Vec<Color> = ins[i].iter().map(|&j| colors[j]).collect();
                o.sort_unstable();
                inn.sort_unstable();
                color_of(&[&colors[i], &o.concat(), &inn.concat()])
            })
            .collect();
        colors = next;
        history.push(snapshot(&colors));
    }
    let parts: Vec<&[u8]> = history.iter().map(Vec::as_slice).collect();
    digest(&parts).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::line_graph;

    #[test]
    fn relabelling_preserves_hash() {
        let g = Graph::undirected_unlabelled(5, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 4)]).unwrap();
        let r = g.relabel_nodes(&[3, 0, 4, 1, 2]).unwrap();
        assert_eq!(wl1_hash(&g, None), wl1_hash(&r, None));
    }

    #[test]
    fn triangle_differs_from_path() {
        let tri = Graph::undirected_unlabelled(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        let path = Graph::undirected_unlabelled(3, &[(0, 1), (1, 2)]).unwrap();
        assert_ne!(wl1_hash(&tri, None), wl1_hash(&path, None));
    }

    #[test]
    fn hexagon_and_two_triangles() {
        let c6 = Graph::undirected_unlabelled(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]).unwrap();
        let t2 = Graph::undirected_unlabelled(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]).unwrap();
        assert_eq!(wl1_hash(&c6, None), wl1_hash(&t2, None));
        // Both line graphs are 5-regular on 12 nodes, so refinement cannot
        // separate them either.
        let (l1, l2) = (line_graph(&c6).unwrap(), line_graph(&t2).unwrap());
        assert_eq!(wl1_hash(&l1, None), wl1_hash(&l2, None));
    }
}
