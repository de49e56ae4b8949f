//! Edge/node-set attention model: masked and unmasked self-attention blocks,
//! attention pooling over learned seeds, and task heads.

mod checkpoint;
mod config;

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{BlockKind, LayerPlan, MlpKind, ModelConfig, NormPlacement, Readout, TaskLevel, TokenMode};

use crate::error::{contract, Result};
use crate::graph::{build_edge_tokens, build_node_tokens, BatchedGraph};
use crate::masking::{batch_edge_mask, batch_node_mask, AttnMask};
use crate::tensor::{AttnPattern, Element, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    scale: ParamId,
    shift: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
enum Mlp {
    Standard { fc1: Linear, fc2: Linear },
    Gated { gate: Linear, up: Linear, down: Linear },
}

#[derive(Clone, Copy, Debug)]
struct Block {
    kind: BlockKind,
    ln1: Norm,
    ln2: Norm,
    attn: MultiHead,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct Pool {
    seeds: ParamId,
    attn: MultiHead,
    ln: Norm,
    mlp: Mlp,
    sabs: Vec<Block>,
}

/// Where an attention map was recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder(usize, BlockKind),
    Pool,
    PoolSab(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct AttnSite {
    pub stage: Stage,
    pub var: Var,
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, out]` for graph-level models, `[real tokens, out]` for node-level.
    pub output: Var,
    /// Projected tokens `[B, L, d_model]`.
    pub projected: Var,
    /// Encoder output `[B, L, d_model]`.
    pub encoded: Var,
    /// Pooled seeds `[B, k, d_model]` before readout.
    pub pooled: Option<Var>,
    pub attention: Vec<AttnSite>,
}

/// Tokens and attention patterns for one batch.
#[derive(Clone, Debug)]
pub struct Inputs<T> {
    pub tokens: Tensor<T>,
    pub counts: Vec<usize>,
    pub mask: Rc<AttnPattern>,
    pub full: Rc<AttnPattern>,
    pub pool: Rc<AttnPattern>,
    pub pool_full: Rc<AttnPattern>,
    /// Flat `b * L + i` indices of real tokens, in batch order.
    pub real_rows: Vec<usize>,
}

impl<T: Element> Inputs<T> {
    /// `tokens` is `[B, L, d]`; graph `b` owns the first `counts[b]` slots.
    pub fn new(tokens: Tensor<T>, counts: Vec<usize>, mask: &AttnMask, seeds: usize) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 3 || s[0] != counts.len() || mask.batch() != s[0] || mask.len() != s[1] {
            return contract(format!(
                "tokens {:?} do not match mask [{}, {}] and {} counts",
                s,
                mask.batch(),
                mask.len(),
                counts.len()
            ));
        }
        let (b, l) = (s[0], s[1]);
        if counts.iter().any(|&c| c > l) {
            return contract("token count exceeds padded length");
        }
        let real_rows = counts
            .iter()
            .enumerate()
            .flat_map(|(g, &c)| (0..c).map(move |i| g * l + i))
            .collect();
        Ok(Self {
            mask: Rc::new(mask.to_pattern()),
            full: Rc::new(AttnMask::full(b, l, &counts)?.to_pattern()),
            pool: Rc::new(AttnPattern::prefix(b, seeds, l, &counts)),
            pool_full: Rc::new(AttnPattern::prefix(b, seeds, seeds, &vec![seeds; b])),
            tokens,
            counts,
            real_rows,
        })
    }

    pub fn batch(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Esa {
    config: ModelConfig,
    plan: LayerPlan,
    input: Linear,
    encoder: Vec<Block>,
    pool: Option<Pool>,
    head: Linear,
}

struct Init<'a> {
    store: ParamStore<f64>,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.store.add(name, Tensor::new(shape, data)?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(format!("{name}.w"), vec![fan_in, fan_out], bound)?;
        let b = if bias {
            Some(self.uniform(format!("{name}.b"), vec![fan_out], bound)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            scale: self.store.add(format!("{name}.scale"), Tensor::ones(vec![d]))?,
            shift: self.store.add(format!("{name}.shift"), Tensor::zeros(vec![d]))?,
        })
    }

    fn multi_head(&mut self, name: &str, d: usize) -> Result<MultiHead> {
        Ok(MultiHead {
            q: self.linear(&format!("{name}.q"), d, d, true)?,
            k: self.linear(&format!("{name}.k"), d, d, true)?,
            v: self.linear(&format!("{name}.v"), d, d, true)?,
            o: self.linear(&format!("{name}.o"), d, d, true)?,
        })
    }

    fn mlp(&mut self, name: &str, c: &ModelConfig) -> Result<Mlp> {
        let (d, h) = (c.d_model, c.mlp_hidden);
        Ok(match c.mlp_kind {
            MlpKind::Standard => Mlp::Standard {
                fc1: self.linear(&format!("{name}.fc1"), d, h, true)?,
                fc2: self.linear(&format!("{name}.fc2"), h, d, true)?,
            },
            MlpKind::Gated => Mlp::Gated {
                gate: self.linear(&format!("{name}.gate"), d, h, false)?,
                up: self.linear(&format!("{name}.up"), d, h, false)?,
                down: self.linear(&format!("{name}.down"), h, d, false)?,
            },
        })
    }

    fn block(&mut self, name: &str, kind: BlockKind, c: &ModelConfig) -> Result<Block> {
        Ok(Block {
            kind,
            ln1: self.norm(&format!("{name}.ln1"), c.d_model)?,
            ln2: self.norm(&format!("{name}.ln2"), c.d_model)?,
            attn: self.multi_head(&format!("{name}.attn"), c.d_model)?,
            mlp: self.mlp(&format!("{name}.mlp"), c)?,
        })
    }
}

fn dropout<T: Element>(tape: &mut Tape<T>, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - p));
    let shape = tape.shape(x).to_vec();
    let n = shape.iter().product();
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    tape.mul_const(x, Tensor::new(shape, mask)?)
}

impl Esa {
    /// Builds the layer layout and freshly initialised parameters.
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Self, ParamStore<f64>)> {
        let plan = config.validate()?;
        let mut init = Init {
            store: ParamStore::new(),
            rng,
        };
        let d = config.d_model;
        let input = init.linear("input", config.in_dim, d, true)?;
        let encoder = plan
            .encoder
            .iter()
            .enumerate()
            .map(|(i, &kind)| init.block(&format!("enc.{i}"), kind, &config))
            .collect::<Result<Vec<_>>>()?;
        let pool = match plan.pool {
            Some(p) => {
                let n = config.seeds * d;
                let seeds: Vec<f64> = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut *init.rng);
                        0.02 * z
                    })
                    .collect();
                let seeds = init.store.add("pool.seeds", Tensor::new(vec![config.seeds, d], seeds)?)?;
                Some(Pool {
                    seeds,
                    attn: init.multi_head("pool.attn", d)?,
                    ln: init.norm("pool.ln", d)?,
                    mlp: init.mlp("pool.mlp", &config)?,
                    sabs: (0..p)
                        .map(|i| init.block(&format!("pool.sab.{i}"), BlockKind::SelfAttn, &config))
                        .collect::<Result<Vec<_>>>()?,
                })
            }
            None => None,
        };
        let head = init.linear("head", d, config.out_dim, true)?;
        let store = init.store;
        Ok((
            Self {
                config,
                plan,
                input,
                encoder,
                pool,
                head,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    /// Tokens and masks for a batch. `fixed_len` pads beyond the batch maximum.
    pub fn prepare<T: Element>(&self, batch: &BatchedGraph, fixed_len: Option<usize>) -> Result<Inputs<T>> {
        let (tokens, mask) = match self.config.tokens {
            TokenMode::Edge => {
                let ts = build_edge_tokens(batch, fixed_len)?;
                let m = batch_edge_mask(batch, Some(ts.len()))?;
                (ts, m)
            }
            TokenMode::Node => {
                let ts = build_node_tokens(batch, fixed_len)?;
                let m = batch_node_mask(batch, Some(ts.len()))?;
                (ts, m)
            }
        };
        if tokens.width() != self.config.in_dim {
            return contract(format!(
                "token width {} does not match model input width {}",
                tokens.width(),
                self.config.in_dim
            ));
        }
        Inputs::new(tokens.tokens, tokens.counts, &mask, self.config.seeds)
    }

    /// Runs the model. Dropout is active only when `rng` is given.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &Inputs<T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let x = tape.input(inputs.tokens.clone());
        self.forward_from(tape, store, x, inputs, rng)
    }

    /// Like [`Esa::forward`] with the `[B, L, in_dim]` tokens given as a tape value.
    pub fn forward_from<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        inputs: &Inputs<T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let c = &self.config;
        let want = [inputs.batch(), inputs.len(), c.in_dim];
        if tape.shape(x) != want {
            return crate::error::shape_err("forward", tape.shape(x), &want);
        }
        let mut attention = Vec::new();
        let projected = self.linear(tape, store, self.input, x)?;
        let mut h = projected;
        for (i, blk) in self.encoder.iter().enumerate() {
            let pattern = match blk.kind {
                BlockKind::Masked => &inputs.mask,
                BlockKind::SelfAttn => &inputs.full,
            };
            let (out, a) = self.block(tape, store, blk, h, pattern.clone(), &mut rng)?;
            attention.push(AttnSite {
                stage: Stage::Encoder(i, blk.kind),
                var: a,
            });
            h = out;
        }
        let encoded = h;
        let (output, pooled) = match (&self.pool, c.level) {
            (Some(pool), TaskLevel::Graph) => {
                let z = tape.add(encoded, projected)?;
                let s = self.pool(tape, store, pool, z, inputs, &mut rng, &mut attention)?;
                let r = match c.readout {
                    Readout::Mean => tape.mean_axis(s, 1)?,
                    Readout::Sum => tape.sum_axis(s, 1)?,
                };
                (self.linear(tape, store, self.head, r)?, Some(s))
            }
            _ => {
                let y = self.linear(tape, store, self.head, encoded)?;
                let l = inputs.len();
                let flat = tape.reshape(y, &[inputs.batch() * l, c.out_dim])?;
                (tape.gather_rows(flat, &inputs.real_rows)?, None)
            }
        };
        Ok(Forward {
            output,
            projected,
            encoded,
            pooled,
            attention,
        })
    }

    fn linear<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, lin: Linear, x: Var) -> Result<Var> {
        let w = tape.param(store, lin.w);
        let y = tape.matmul(x, w)?;
        match lin.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    fn norm<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, n: Norm, x: Var) -> Result<Var> {
        let scale = tape.param(store, n.scale);
        let shift = tape.param(store, n.shift);
        tape.layer_norm(x, scale, shift, self.config.ln_eps)
    }

    fn mlp<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mlp: Mlp,
        x: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let hidden = match mlp {
            Mlp::Standard { fc1, .. } => {
                let a = self.linear(tape, store, fc1, x)?;
                tape.gelu(a)
            }
            Mlp::Gated { gate, up, .. } => {
                let g = self.linear(tape, store, gate, x)?;
                let g = tape.silu(g);
                let u = self.linear(tape, store, up, x)?;
                tape.mul(g, u)?
            }
        };
        let hidden = dropout(tape, hidden, self.config.dropout, rng)?;
        match mlp {
            Mlp::Standard { fc2, .. } => self.linear(tape, store, fc2, hidden),
            Mlp::Gated { down, .. } => self.linear(tape, store, down, hidden),
        }
    }

    /// Multi-head attention of `xq` over `xkv`; returns the output and the attention node.
    fn multi_head<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mh: MultiHead,
        xq: Var,
        xkv: Var,
        pattern: Rc<AttnPattern>,
    ) -> Result<(Var, Var)> {
        let q = self.linear(tape, store, mh.q, xq)?;
        let k = self.linear(tape, store, mh.k, xkv)?;
        let v = self.linear(tape, store, mh.v, xkv)?;
        let a = tape.attention(q, k, v, self.config.heads, pattern)?;
        Ok((self.linear(tape, store, mh.o, a)?, a))
    }

    fn block<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        blk: &Block,
        x: Var,
        pattern: Rc<AttnPattern>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        match self.config.norm {
            NormPlacement::Pre => {
                let xb = self.norm(tape, store, blk.ln1, x)?;
                let (a, site) = self.multi_head(tape, store, blk.attn, xb, xb, pattern)?;
                let a = dropout(tape, a, self.config.dropout, rng)?;
                let h = tape.add(xb, a)?;
                let hn = self.norm(tape, store, blk.ln2, h)?;
                let m = self.mlp(tape, store, blk.mlp, hn, rng)?;
                Ok((tape.add(h, m)?, site))
            }
            NormPlacement::Post => {
                let (a, site) = self.multi_head(tape, store, blk.attn, x, x, pattern)?;
                let a = dropout(tape, a, self.config.dropout, rng)?;
                let h = tape.add(x, a)?;
                let h = self.norm(tape, store, blk.ln1, h)?;
                let m = self.mlp(tape, store, blk.mlp, h, rng)?;
                let o = tape.add(h, m)?;
                Ok((self.norm(tape, store, blk.ln2, o)?, site))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn pool<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pool: &Pool,
        z: Var,
        inputs: &Inputs<T>,
        rng: &mut Option<&mut ChaCha8Rng>,
        attention: &mut Vec<AttnSite>,
    ) -> Result<Var> {
        let seeds = tape.param(store, pool.seeds);
        let q = self.linear(tape, store, pool.attn.q, seeds)?;
        let q = tape.expand_batch(q, inputs.batch());
        let k = self.linear(tape, store, pool.attn.k, z)?;
        let v = self.linear(tape, store, pool.attn.v, z)?;
        let a = tape.attention(q, k, v, self.config.heads, inputs.pool.clone())?;
        attention.push(AttnSite {
            stage: Stage::Pool,
            var: a,
        });
        let o = self.linear(tape, store, pool.attn.o, a)?;
        let sbar = self.norm(tape, store, pool.ln, o)?;
        let m = self.mlp(tape, store, pool.mlp, sbar, rng)?;
        let mut s = tape.add(sbar, m)?;
        for (i, blk) in pool.sabs.iter().enumerate() {
            let (out, site) = self.block(tape, store, blk, s, inputs.pool_full.clone(), rng)?;
            attention.push(AttnSite {
                stage: Stage::PoolSab(i),
                var: site,
            });
            s = out;
        }
        Ok(s)
    }
}

/// Recorded post-softmax attention of one layer.
#[derive(Clone, Debug)]
pub struct TraceLayer {
    pub stage: Stage,
    pub pattern: AttnPattern,
    pub heads: usize,
    /// `[head][entry]` over the pattern's allowed pairs.
    pub probs: Vec<f64>,
}

impl TraceLayer {
    /// Head-averaged weights of query `i` in graph `b`, paired with key indices.
    pub fn head_mean_row(&self, b: usize, i: usize) -> Vec<(usize, f64)> {
        let nnz = self.pattern.nnz();
        let off = self.pattern.row_offset(b, i);
        self.pattern
            .row(b, i)
            .iter()
            .enumerate()
            .map(|(e, &j)| {
                let s: f64 = (0..self.heads).map(|h| self.probs[h * nnz + off + e]).sum();
                (j as usize, s / self.heads as f64)
            })
            .collect()
    }
}

/// Copies the attention maps of a forward pass off the tape.
pub fn attention_trace<T: Element>(tape: &Tape<T>, fwd: &Forward) -> Vec<TraceLayer> {
    fwd.attention
        .iter()
        .filter_map(|site| {
            let (pattern, heads, probs) = tape.attention_probs(site.var)?;
            Some(TraceLayer {
                stage: site.stage,
                pattern: pattern.clone(),
                heads,
                probs: probs.iter().map(|p| p.as_f64()).collect(),
            })
        })
        .collect()
}

/// Dense scaled dot-product attention, `softmax(q kᵀ / √dk + mask) v`,
/// composed from tape primitives. `q` is `[.., Lq, dk]`, `k` and `v` are
/// `[.., Lk, dk]`; `mask` must match the score shape or a suffix of it.
pub fn sdpa<T: Element>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let dk = *tape.shape(q).last().unwrap_or(&0);
    if dk == 0 {
        return contract("sdpa needs a positive key width");
    }
    let kt = tape.transpose_last2(k)?;
    let s = tape.matmul(q, kt)?;
    let mut s = tape.scale(s, T::one() / T::of(dk as f64).sqrt());
    if let Some(m) = mask {
        s = tape.add(s, m)?;
    }
    let p = tape.softmax_lastdim(s)?;
    tape.matmul(p, v)
}
