use std::io::Cursor;

use esa::graph::generate::{random_digraph, random_graph, rng};
use esa::graph::{BatchedGraph, Graph};
use esa::masking::AttnMask;
use esa::model::*;
use esa::tensor::gradcheck::param_grad_error;
use esa::tensor::{ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Node-level model whose input projection is the identity, so the encoder
/// sees the raw tokens.
fn raw_model(layers: &str, d: usize, heads: usize, r: &mut ChaCha8Rng) -> (Esa, ParamStore<f64>) {
    let mut c = ModelConfig::node_default(layers, d, 2);
    c.d_model = d;
    c.heads = heads;
    c.mlp_hidden = 2 * d;
    let (m, mut store) = Esa::new(c, r).unwrap();
    let w = store.id("input.w").unwrap();
    let eye: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
    *store.value_mut(w) = Tensor::new(vec![d, d], eye).unwrap();
    let b = store.id("input.b").unwrap();
    *store.value_mut(b) = Tensor::zeros(vec![d]);
    (m, store)
}

fn encode(m: &Esa, store: &ParamStore<f64>, inputs: &Inputs<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, store, inputs, None).unwrap();
    tape.value(f.encoded).clone()
}

fn output<T: esa::tensor::Element>(m: &Esa, store: &ParamStore<T>, inputs: &Inputs<T>) -> Tensor<T> {
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, store, inputs, None).unwrap();
    tape.value(f.output).clone()
}

fn random_mask(b: usize, l: usize, counts: &[usize], p: f64, r: &mut impl Rng) -> AttnMask {
    let mut allowed = Vec::new();
    for (g, &n) in counts.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                if r.random::<f64>() < p {
                    allowed.push([g as u32, i as u32, j as u32]);
                }
            }
        }
    }
    AttnMask::from_allowed(b, l, allowed).unwrap()
}

fn padded_tokens(b: usize, l: usize, d: usize, counts: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    let mut t = random_tensor(&[b, l, d], r);
    for (g, &n) in counts.iter().enumerate() {
        for i in n..l {
            t.data_mut()[(g * l + i) * d..(g * l + i + 1) * d].fill(0.0);
        }
    }
    t
}

#[test]
fn sdpa_matches_loop_oracle() {
    let mut r = rng(1);
    let (b, h, l, dk) = (2, 2, 3, 4);
    let q = random_tensor(&[b, h, l, dk], &mut r);
    let k = random_tensor(&[b, h, l, dk], &mut r);
    let v = random_tensor(&[b, h, l, dk], &mut r);
    let mut mask = Tensor::zeros(vec![b, h, l, l]);
    for (idx, x) in mask.data_mut().iter_mut().enumerate() {
        if idx % 3 == 1 {
            *x = -1e30;
        }
    }
    let mut tape = Tape::new();
    let (qv, kv, vv, mv) = (
        tape.input(q.clone()),
        tape.input(k.clone()),
        tape.input(v.clone()),
        tape.input(mask.clone()),
    );
    let out = sdpa(&mut tape, qv, kv, vv, Some(mv)).unwrap();
    let got = tape.value(out);
    for bh in 0..b * h {
        for i in 0..l {
            let s: Vec<f64> = (0..l)
                .map(|j| {
                    let dot: f64 = (0..dk)
                        .map(|c| q.data()[(bh * l + i) * dk + c] * k.data()[(bh * l + j) * dk + c])
                        .sum();
                    dot / (dk as f64).sqrt() + mask.data()[(bh * l + i) * l + j]
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for c in 0..dk {
                let want: f64 = (0..l)
                    .map(|j| (s[j] - m).exp() / z * v.data()[(bh * l + j) * dk + c])
                    .sum();
                assert!((got.data()[(bh * l + i) * dk + c] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sdpa_concentrates_and_singletons() {
    let eye: Vec<f64> = (0..16).map(|k| if k / 4 == k % 4 { 1.0 } else { 0.0 }).collect();
    let kv = Tensor::new(vec![4, 4], eye.clone()).unwrap();
    let q = Tensor::new(vec![1, 4], eye[8..12].iter().map(|x| x * 60.0).collect()).unwrap();
    let mut tape = Tape::new();
    let (qv, k, v) = (tape.input(q), tape.input(kv.clone()), tape.input(kv));
    let out = sdpa(&mut tape, qv, k, v, None).unwrap();
    let o = tape.value(out).data();
    assert!((o[2] - 1.0).abs() < 1e-6 && o[0].abs() < 1e-6);

    // One allowed key per row returns that value row exactly.
    let mut r = rng(2);
    let q = random_tensor(&[3, 4], &mut r);
    let v = random_tensor(&[3, 4], &mut r);
    let pick = [2usize, 0, 1];
    let mask = Tensor::new(
        vec![3, 3],
        (0..9).map(|k| if pick[k / 3] == k % 3 { 0.0 } else { -1e30 }).collect(),
    )
    .unwrap();
    let mut tape = Tape::new();
    let (qv, vv, mv) = (tape.input(q), tape.input(v.clone()), tape.input(mask));
    let k = tape.input(random_tensor(&[3, 4], &mut r));
    let out = sdpa(&mut tape, qv, k, vv, Some(mv)).unwrap();
    for (i, &j) in pick.iter().enumerate() {
        assert_eq!(tape.value(out).row(i), v.row(j));
    }

    // Constant values give the same output whatever the queries.
    let row = [0.3, -0.2, 0.9, 0.1];
    let v = Tensor::new(vec![3, 4], row.repeat(3)).unwrap();
    let mut tape = Tape::new();
    let qv = tape.input(random_tensor(&[3, 4], &mut r));
    let k = tape.input(random_tensor(&[3, 4], &mut r));
    let vv = tape.input(v);
    let out = sdpa(&mut tape, qv, k, vv, None).unwrap();
    for i in 0..3 {
        for (a, b) in tape.value(out).row(i).iter().zip(row) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn sab_equals_mab_with_all_allowed_mask() {
    let mut r = rng(3);
    for _ in 0..20 {
        let (b, l, d) = (r.random_range(1..4), r.random_range(1..7), 8);
        let counts: Vec<usize> = (0..b).map(|_| r.random_range(1..=l)).collect();
        let full = AttnMask::full(b, l, &counts).unwrap();
        let tokens = padded_tokens(b, l, d, &counts, &mut r);
        let inputs = Inputs::new(tokens, counts, &full, 4).unwrap();
        let seed = r.random();
        let (mab, store) = raw_model("M", d, 2, &mut rng(seed));
        let (sab, _) = raw_model("S", d, 2, &mut rng(seed));
        assert_eq!(encode(&mab, &store, &inputs), encode(&sab, &store, &inputs));
    }
}

#[test]
fn masked_block_is_local() {
    let mut r = rng(4);
    for norm in [NormPlacement::Pre, NormPlacement::Post] {
        for _ in 0..4 {
            let (l, d) = (r.random_range(2..=12), 6);
            let mask = random_mask(1, l, &[l], 0.35, &mut r);
            let inputs = Inputs::new(random_tensor(&[1, l, d], &mut r), vec![l], &mask, 2).unwrap();
            let mut c = ModelConfig::node_default("M", d, 2);
            c.d_model = d;
            c.heads = 2;
            c.norm = norm;
            let (m, store) = Esa::new(c, &mut r).unwrap();
            for v in 0..l {
                for col in 0..d {
                    let mut tape = Tape::new();
                    let x = tape.input_with_grad(inputs.tokens.clone());
                    let f = m.forward_from(&mut tape, &store, x, &inputs, None).unwrap();
                    let flat = tape.reshape(f.encoded, &[l, d]).unwrap();
                    let row = tape.gather_rows(flat, &[v]).unwrap();
                    let mut sel = Tensor::zeros(vec![1, d]);
                    sel.data_mut()[col] = 1.0;
                    let y = tape.mul_const(row, sel).unwrap();
                    let y = tape.sum_all(y);
                    let g = tape.backward(y).unwrap();
                    let gx = g.wrt(x).unwrap();
                    for u in (0..l).filter(|&u| u != v && mask.is_blocked(0, v, u)) {
                        assert!(gx.row(u).iter().all(|&z| z == 0.0), "v={v} u={u}");
                    }
                }
            }
        }
    }
}

#[test]
fn zeroed_branches_leave_normalised_input() {
    let mut r = rng(5);
    let d = 4;
    let (m, mut store) = raw_model("M", d, 1, &mut r);
    for name in ["enc.0.attn.o.w", "enc.0.attn.o.b", "enc.0.mlp.fc2.w", "enc.0.mlp.fc2.b"] {
        let id = store.id(name).unwrap();
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(shape);
    }
    let x = random_tensor(&[1, 3, d], &mut r);
    let inputs = Inputs::new(x.clone(), vec![3], &AttnMask::full(1, 3, &[3]).unwrap(), 1).unwrap();
    let out = encode(&m, &store, &inputs);
    for i in 0..3 {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            let want = (row[c] - mean) / (var + 1e-5).sqrt();
            assert!((out.row(i)[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn padding_rows_are_inert() {
    let mut r = rng(6);
    let graphs: Vec<Graph> = (0..3).map(|_| random_graph(&mut r, 6, 12, 2, 1)).collect();
    let batch = BatchedGraph::new(graphs).unwrap();
    let mut c = ModelConfig::graph_default("MSMP", 5, 3);
    c.seeds = 4;
    c.d_model = 8;
    c.heads = 2;
    let (m, store) = Esa::new(c, &mut r).unwrap();
    let inputs: Inputs<f64> = m.prepare(&batch, Some(batch.max_edges() + 2)).unwrap();
    let base = output(&m, &store, &inputs);
    let base_enc = encode(&m, &store, &inputs);
    let mut noisy = inputs.clone();
    let l = inputs.len();
    for (g, &n) in inputs.counts.iter().enumerate() {
        for i in n..l {
            for x in &mut noisy.tokens.data_mut()[(g * l + i) * 5..(g * l + i + 1) * 5] {
                *x = r.random_range(-100.0..100.0);
            }
        }
    }
    assert_eq!(output(&m, &store, &noisy), base);
    let enc = encode(&m, &store, &noisy);
    for &row in &inputs.real_rows {
        assert_eq!(enc.row(row), base_enc.row(row));
    }
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let mut r = rng(7);
    let (l, d) = (5, 6);
    let (m, store) = raw_model("S", d, 3, &mut r);
    let x = random_tensor(&[1, l, d], &mut r);
    let full = AttnMask::full(1, l, &[l]).unwrap();
    let base = encode(&m, &store, &Inputs::new(x.clone(), vec![l], &full, 1).unwrap());
    let mut perm: Vec<usize> = (0..l).collect();
    perm.shuffle(&mut r);
    let mut px = Tensor::zeros(vec![1, l, d]);
    for (i, &p) in perm.iter().enumerate() {
        px.data_mut()[p * d..(p + 1) * d].copy_from_slice(x.row(i));
    }
    let out = encode(&m, &store, &Inputs::new(px, vec![l], &full, 1).unwrap());
    for (i, &p) in perm.iter().enumerate() {
        for (a, b) in base.row(i).iter().zip(out.row(p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    let one = Inputs::new(random_tensor(&[1, 1, d], &mut r), vec![1], &AttnMask::full(1, 1, &[1]).unwrap(), 1).unwrap();
    let a = encode(&m, &store, &one);
    assert!(a.all_finite());
    assert_eq!(a, encode(&m, &store, &one));
}

#[test]
fn masked_then_self_never_crosses_graphs() {
    let mut r = rng(8);
    let graphs: Vec<Graph> = (0..2).map(|_| random_digraph(&mut r, 6, 14, 2)).collect();
    let mut c = ModelConfig::node_default("MS", 2, 2);
    c.d_model = 8;
    c.heads = 2;
    let (m, store) = Esa::new(c, &mut r).unwrap();
    let batch = BatchedGraph::new(graphs).unwrap();
    let inputs: Inputs<f64> = m.prepare(&batch, None).unwrap();
    let base = encode(&m, &store, &inputs);
    let mut other = inputs.clone();
    let l = inputs.len();
    for x in &mut other.tokens.data_mut()[l * 2..] {
        *x += 0.5;
    }
    let out = encode(&m, &store, &other);
    assert_eq!(&out.data()[..l * 8], &base.data()[..l * 8]);
    assert_ne!(&out.data()[l * 8..], &base.data()[l * 8..]);
}

fn permuted(g: &Graph, r: &mut impl Rng) -> Graph {
    let mut nodes: Vec<usize> = (0..g.num_nodes()).collect();
    nodes.shuffle(r);
    let mut edges: Vec<usize> = (0..g.num_edges()).collect();
    edges.shuffle(r);
    g.relabel_nodes(&nodes).unwrap().reorder_edges(&edges).unwrap()
}

#[test]
fn graph_output_is_permutation_invariant() {
    let mut r = rng(9);
    for (layers, readout, seeds) in [("MSP", Readout::Mean, 4), ("MMSPS", Readout::Sum, 3), ("SMP", Readout::Mean, 1)] {
        let g = random_graph(&mut r, 7, 16, 2, 1);
        let mut c = ModelConfig::graph_default(layers, 5, 2);
        c.d_model = 8;
        c.heads = 2;
        c.seeds = seeds;
        c.readout = readout;
        let (m, store) = Esa::new(c, &mut r).unwrap();
        let base = output(&m, &store, &m.prepare(&BatchedGraph::single(g.clone()), None).unwrap());
        for _ in 0..10 {
            let p = permuted(&g, &mut r);
            let out = output(&m, &store, &m.prepare(&BatchedGraph::single(p.clone()), None).unwrap());
            assert!(out.max_abs_diff(&base) <= 1e-10);
            let s32 = store.cast::<f32>();
            let a = output(&m, &s32, &m.prepare(&BatchedGraph::single(g.clone()), None).unwrap());
            let b = output(&m, &s32, &m.prepare(&BatchedGraph::single(p), None).unwrap());
            assert!(a.max_abs_diff(&b) <= 1e-5);
        }
    }
}

#[test]
fn batched_outputs_match_standalone_runs() {
    let mut r = rng(10);
    let graphs: Vec<Graph> = (0..4).map(|_| random_graph(&mut r, 6, 14, 2, 0)).collect();
    let batch = BatchedGraph::new(graphs.clone()).unwrap();
    let l = batch.max_edges();
    let mut c = ModelConfig::graph_default("MSP", 4, 2);
    c.d_model = 8;
    c.heads = 2;
    c.seeds = 3;
    let (m, store) = Esa::new(c, &mut r).unwrap();
    let all = output(&m, &store, &m.prepare(&batch, Some(l)).unwrap());
    for (b, g) in graphs.into_iter().enumerate() {
        let one = output(&m, &store, &m.prepare(&BatchedGraph::single(g), Some(l)).unwrap());
        for (x, y) in all.row(b).iter().zip(one.data()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(11);
    let g = random_graph(&mut r, 8, 20, 2, 0);
    let (m, store) = Esa::new(ModelConfig::graph_default("MMSP", 4, 1), &mut rng(3)).unwrap();
    let (_, store2) = Esa::new(ModelConfig::graph_default("MMSP", 4, 1), &mut rng(3)).unwrap();
    let inputs: Inputs<f32> = m.prepare(&BatchedGraph::single(g), None).unwrap();
    let a = output(&m, &store.cast::<f32>(), &inputs);
    let b = output(&m, &store2.cast::<f32>(), &inputs);
    assert_eq!(a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

fn weighted_sum_loss(tape: &mut Tape<f64>, y: esa::tensor::Var, w: &Tensor<f64>) -> esa::tensor::Var {
    let p = tape.mul_const(y, w.clone()).unwrap();
    let q = tape.mul(p, y).unwrap();
    tape.sum_all(q)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut r = rng(12);
    let variants = [
        (MlpKind::Standard, NormPlacement::Pre, Readout::Mean),
        (MlpKind::Gated, NormPlacement::Post, Readout::Sum),
    ];
    for (mlp, norm, readout) in variants {
        let g = Graph::undirected(3, &[(0, 1), (1, 2)], 2, vec![0.2, -0.4, 0.9, 0.1, -0.3, 0.5])
            .unwrap()
            .reorder_edges(&[0, 2, 1, 3])
            .unwrap();
        let mut c = ModelConfig::graph_default("MSP", 4, 2);
        c.d_model = 16;
        c.heads = 2;
        c.mlp_hidden = 8;
        c.seeds = 2;
        c.mlp_kind = mlp;
        c.norm = norm;
        c.readout = readout;
        let (m, store) = Esa::new(c, &mut r).unwrap();
        let inputs: Inputs<f64> = m.prepare(&BatchedGraph::single(g), Some(5)).unwrap();
        let w = random_tensor(&[1, 2], &mut r);
        let err = param_grad_error(&store, 1e-5, |tape, s| {
            let f = m.forward(tape, s, &inputs, None)?;
            Ok(weighted_sum_loss(tape, f.output, &w))
        })
        .unwrap();
        assert!(err < 1e-4, "{mlp:?} {norm:?}: {err}");
    }
}

#[test]
fn multi_head_gradients_match_finite_differences() {
    let mut r = rng(13);
    for heads in [1, 2] {
        let (m, store) = raw_model("M", 4, heads, &mut r);
        let mask = AttnMask::from_allowed(2, 3, vec![[0, 0, 1], [0, 1, 1], [0, 2, 0], [0, 2, 2], [1, 0, 0], [1, 1, 0], [1, 1, 1]]).unwrap();
        let inputs = Inputs::new(padded_tokens(2, 3, 4, &[3, 2], &mut r), vec![3, 2], &mask, 1).unwrap();
        let w = random_tensor(&[5, 2], &mut r);
        let err = param_grad_error(&store, 1e-5, |tape, s| {
            let f = m.forward(tape, s, &inputs, None)?;
            Ok(weighted_sum_loss(tape, f.output, &w))
        })
        .unwrap();
        assert!(err < 1e-5, "heads {heads}: {err}");
    }
}

#[test]
fn attention_trace_rows_are_distributions() {
    let mut r = rng(14);
    let graphs: Vec<Graph> = (0..3).map(|_| random_graph(&mut r, 7, 16, 2, 0)).collect();
    let batch = BatchedGraph::new(graphs).unwrap();
    let mut c = ModelConfig::graph_default("MSPS", 4, 1);
    c.seeds = 5;
    let (m, store) = Esa::new(c, &mut r).unwrap();
    let s32 = store.cast::<f32>();
    let inputs: Inputs<f32> = m.prepare(&batch, None).unwrap();
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, &s32, &inputs, None).unwrap();
    let trace = attention_trace(&tape, &f);
    assert_eq!(trace.len(), 4);
    assert_eq!(trace[2].stage, Stage::Pool);
    for layer in &trace {
        for b in 0..layer.pattern.batch() {
            for i in 0..layer.pattern.lq() {
                let row = layer.head_mean_row(b, i);
                if row.is_empty() {
                    continue;
                }
                let s: f64 = row.iter().map(|(_, p)| p).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn single_seed_pooling_is_invariant() {
    let mut r = rng(15);
    let mut c = ModelConfig::graph_default("SP", 4, 3);
    c.seeds = 1;
    let (m, store) = Esa::new(c, &mut r).unwrap();
    let g = random_graph(&mut r, 6, 12, 2, 0);
    let a = output(&m, &store, &m.prepare(&BatchedGraph::single(g.clone()), None).unwrap());
    let b = output(&m, &store, &m.prepare(&BatchedGraph::single(permuted(&g, &mut r)), None).unwrap());
    assert_eq!(a.shape(), &[1, 3]);
    assert!(a.max_abs_diff(&b) <= 1e-10);
}

#[test]
fn node_level_outputs_drop_padding() {
    let mut r = rng(16);
    let graphs: Vec<Graph> = vec![random_digraph(&mut r, 4, 8, 3), random_digraph(&mut r, 7, 10, 3)];
    let n: usize = graphs.iter().map(Graph::num_nodes).sum();
    let (m, store) = Esa::new(ModelConfig::node_default("MMS", 3, 4), &mut r).unwrap();
    let out = output(&m, &store, &m.prepare(&BatchedGraph::new(graphs).unwrap(), None).unwrap());
    assert_eq!(out.shape(), &[n, 4]);
}

#[test]
fn checkpoints_round_trip() {
    let mut r = rng(17);
    let mut c = ModelConfig::graph_default("MSPS", 4, 2);
    c.mlp_kind = MlpKind::Gated;
    let (m, store) = Esa::new(c.clone(), &mut r).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, m.config(), &store).unwrap();
    let (c2, s2) = read_checkpoint(&buf).unwrap();
    assert_eq!(c2, c);
    for (a, b) in store.iter().zip(s2.iter()) {
        assert_eq!((&a.name, &a.value), (&b.name, &b.value));
    }
    assert!(buf.starts_with(CHECKPOINT_MAGIC.as_bytes()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &m, &store.cast::<f32>()).unwrap();
    let (m3, s3) = load_checkpoint(&path).unwrap();
    let g = random_graph(&mut r, 5, 10, 2, 0);
    let inputs: Inputs<f32> = m.prepare(&BatchedGraph::single(g), None).unwrap();
    assert_eq!(output(&m, &store.cast::<f32>(), &inputs), output(&m3, &s3.cast::<f32>(), &inputs));

    assert!(read_checkpoint(b"NOT-A-CHECKPOINT\n").is_err());
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    let mut cur = Cursor::new(Vec::new());
    let mut other = c2.clone();
    other.d_model = 64;
    write_checkpoint(&mut cur, &other, &store).unwrap();
    std::fs::write(&path, cur.into_inner()).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn config_rejects_bad_layer_strings() {
    let mut r = rng(18);
    for layers in ["MSPP", "PMS", "MSPM", ""] {
        assert!(Esa::new(ModelConfig::graph_default(layers, 2, 1), &mut r).is_err());
    }
    assert!(Esa::new(ModelConfig::node_default("MSP", 2, 1), &mut r).is_err());
    let p = LayerPlan::parse("MMMMSPS", TaskLevel::Graph).unwrap();
    assert_eq!((p.encoder.len(), p.pool), (5, Some(1)));
}
