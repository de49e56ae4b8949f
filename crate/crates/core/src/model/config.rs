use serde::{Deserialize, Serialize};

use crate::error::{EsaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    /// One token per directed edge, masked by edge adjacency.
    Edge,
    /// One token per node, masked by the adjacency matrix.
    Node,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskLevel {
    Graph,
    Node,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    /// `W2 · gelu(W1 x + b1) + b2`
    Standard,
    /// SwiGLU: `Wd · (silu(Wg x) ⊙ Wu x)`
    Gated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Pre,
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Masked,
    SelfAttn,
}

/// Parsed layer string: encoder blocks, then optional pooling with `p`
/// self-attention blocks over the seeds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub encoder: Vec<BlockKind>,
    pub pool: Option<usize>,
}

impl LayerPlan {
    pub fn parse(layers: &str, level: TaskLevel) -> Result<Self> {
        let err = |m: String| Err(EsaError::Config(format!("layer string '{layers}': {m}")));
        if layers.is_empty() {
            return err("empty".into());
        }
        if let Some(c) = layers.chars().find(|c| !matches!(c, 'M' | 'S' | 'P')) {
            return err(format!("unknown layer '{c}' (use M, S, P)"));
        }
        let pools = layers.matches('P').count();
        match level {
            TaskLevel::Node if pools > 0 => return err("node-level models have no pooling layer".into()),
            TaskLevel::Graph if pools != 1 => return err(format!("needs exactly one P, found {pools}")),
            _ => {}
        }
        let (enc, post) = match layers.find('P') {
            Some(0) => return err("P cannot come first".into()),
            Some(i) => (&layers[..i], Some(&layers[i + 1..])),
            None => (layers, None),
        };
        if let Some(post) = post {
            if post.contains('M') {
                return err("only S layers may follow P".into());
            }
        }
        let encoder = enc
            .chars()
            .map(|c| if c == 'M' { BlockKind::Masked } else { BlockKind::SelfAttn })
            .collect();
        Ok(Self {
            encoder,
            pool: post.map(str::len),
        })
    }
}

fn default_seeds() -> usize {
    32
}
fn default_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: String,
    pub tokens: TokenMode,
    pub level: TaskLevel,
    /// Token width before the input projection.
    pub in_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub mlp_kind: MlpKind,
    pub norm: NormPlacement,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub dropout: f64,
    pub readout: Readout,
    pub out_dim: usize,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Small defaults for a graph-level edge-set model.
    pub fn graph_default(layers: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            layers: layers.into(),
            tokens: TokenMode::Edge,
            level: TaskLevel::Graph,
            in_dim,
            d_model: 32,
            heads: 4,
            mlp_hidden: 64,
            mlp_kind: MlpKind::Standard,
            norm: NormPlacement::Pre,
            seeds: 32,
            dropout: 0.0,
            readout: Readout::Mean,
            out_dim,
            ln_eps: 1e-5,
        }
    }

    /// Small defaults for a node-level node-set model.
    pub fn node_default(layers: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            tokens: TokenMode::Node,
            level: TaskLevel::Node,
            ..Self::graph_default(layers, in_dim, out_dim)
        }
    }

    pub fn validate(&self) -> Result<LayerPlan> {
        let bad = |m: String| Err(EsaError::Config(m));
        let plan = LayerPlan::parse(&self.layers, self.level)?;
        if self.level == TaskLevel::Node && self.tokens == TokenMode::Edge {
            return bad("node-level tasks need node tokens".into());
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.in_dim == 0 || self.out_dim == 0 || self.mlp_hidden == 0 {
            return bad("in_dim, out_dim and mlp_hidden must be positive".into());
        }
        if self.seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| EsaError::Config(e.to_string()))
    }
}
