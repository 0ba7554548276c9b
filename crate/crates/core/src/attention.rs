//! Object-guided multi-head cross-attention over the 3-D feature stack.
//!
//! Queries come from flattened video tokens, keys and values from object
//! embeddings. The attended tokens are projected back to the level width and
//! added to the level (residual on by default).

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbones::ObjectEmbeddings;
use crate::error::{Error, Result};
use crate::nn::{Graph, Init, Linear, ParamId, ParamStore, Var};

/// Which fast-branch levels receive attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelection {
    First,
    Top,
    All,
}

impl LayerSelection {
    pub fn selects(self, level: usize, levels: usize) -> bool {
        match self {
            LayerSelection::First => level == 0,
            LayerSelection::Top => level + 1 == levels,
            LayerSelection::All => true,
        }
    }
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(LayerSelection::First),
            "top" => Ok(LayerSelection::Top),
            "all" => Ok(LayerSelection::All),
            other => Err(Error::Config(format!(
                "unknown fusion layer selection `{other}` (expected first, top or all)"
            ))),
        }
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerSelection::First => "first",
            LayerSelection::Top => "top",
            LayerSelection::All => "all",
        })
    }
}

/// Score divisor: `√d_k` or the literal `d_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionDivisor {
    Sqrt,
    Linear,
}

impl AttentionDivisor {
    pub fn value(self, d_k: usize) -> f64 {
        match self {
            AttentionDivisor::Sqrt => (d_k as f64).sqrt(),
            AttentionDivisor::Linear => d_k as f64,
        }
    }
}

impl FromStr for AttentionDivisor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(AttentionDivisor::Sqrt),
            "linear" => Ok(AttentionDivisor::Linear),
            other => Err(Error::Config(format!(
                "unknown attention divisor `{other}` (expected sqrt or linear)"
            ))),
        }
    }
}

impl fmt::Display for AttentionDivisor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionDivisor::Sqrt => "sqrt",
            AttentionDivisor::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub dim: usize,
    pub layers: LayerSelection,
    pub residual: bool,
    pub divisor: AttentionDivisor,
    /// Starts the inverse projection at zero so fusion begins as the identity.
    pub zero_init_output: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            dim: 32,
            layers: LayerSelection::All,
            residual: true,
            divisor: AttentionDivisor::Sqrt,
            zero_init_output: false,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// `(C, T, H, W)` level to `L × C` tokens in row-major `(t, y, x)` order.
pub fn flatten_tokens(g: &mut Graph, level: Var) -> Var {
    let shape = g.shape(level).to_vec();
    let c = shape[0];
    let l: usize = shape[1..].iter().product();
    let m = g.reshape(level, [c, l]);
    g.transpose(m)
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens(g: &mut Graph, tokens: Var, shape: &[usize]) -> Var {
    let t = g.transpose(tokens);
    g.reshape(t, shape.to_vec())
}

/// `softmax(Q Kᵀ / divisor) V` over valid keys. Returns the output and the weights.
///
/// The caller must ensure at least one key is valid.
pub fn scaled_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Rc<Vec<bool>>, divisor: f64) -> (Var, Var) {
    let scores = g.matmul_bt(q, k);
    let scores = g.scale(scores, 1.0 / divisor);
    let weights = g.masked_softmax(scores, mask);
    (g.matmul(weights, v), weights)
}

/// Attention weights for one level.
#[derive(Debug, Clone)]
pub struct GuidedAttentionLevel {
    pub video: Linear,
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub inverse: Linear,
    pub channels: usize,
    pub object_dim: usize,
}

impl GuidedAttentionLevel {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, channels: usize, object_dim: usize) -> Self {
        let (d, dh) = (cfg.dim, cfg.head_dim());
        let mut heads = |kind: &str, fan_in: usize| -> Vec<ParamId> {
            (0..cfg.heads)
                .map(|j| store.add(format!("{name}.{kind}{j}"), [fan_in, dh], Init::HeUniform { fan_in }))
                .collect()
        };
        let query = heads("query", d);
        let key = heads("key", object_dim);
        let value = heads("value", object_dim);
        let video = Linear::new(store, &format!("{name}.video"), channels, d, true);
        let output = store.add(format!("{name}.output"), [d, d], Init::HeUniform { fan_in: d });
        let inverse_init = if cfg.zero_init_output {
            Init::Zeros
        } else {
            Init::HeUniform { fan_in: d }
        };
        let inverse = Linear::with_init(store, &format!("{name}.inverse"), d, channels, true, inverse_init);
        Self {
            video,
            query,
            key,
            value,
            output,
            inverse,
            channels,
            object_dim,
        }
    }
}

pub fn object_guided_attention(
    g: &mut Graph,
    store: &ParamStore,
    weights: &GuidedAttentionLevel,
    level: Var,
    objects: &ObjectEmbeddings,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let shape = g.shape(level).to_vec();
    if shape.len() != 4 || shape[0] != weights.channels {
        return Err(Error::Config(format!(
            "attention weights expect a (C={}, T, H, W) level, got {shape:?}",
            weights.channels
        )));
    }
    let obj_shape = g.shape(objects.values).to_vec();
    if obj_shape.len() != 2 || obj_shape[1] != weights.object_dim || obj_shape[0] != objects.mask.len() {
        return Err(Error::Config(format!(
            "object embeddings {obj_shape:?} do not match attention width {}",
            weights.object_dim
        )));
    }
    if !objects.mask.iter().any(|&m| m) {
        return Ok(level);
    }
    let tokens = flatten_tokens(g, level);
    let q = weights.video.forward(g, store, tokens);
    let divisor = cfg.divisor.value(cfg.head_dim());
    let mut heads = Vec::with_capacity(weights.query.len());
    for j in 0..weights.query.len() {
        let wq = g.param(store, weights.query[j]);
        let wk = g.param(store, weights.key[j]);
        let wv = g.param(store, weights.value[j]);
        let qj = g.matmul(q, wq);
        let kj = g.matmul(objects.values, wk);
        let vj = g.matmul(objects.values, wv);
        heads.push(scaled_attention(g, qj, kj, vj, objects.mask.clone(), divisor).0);
    }
    let concat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    let wo = g.param(store, weights.output);
    let mixed = g.matmul(concat, wo);
    let back = weights.inverse.forward(g, store, mixed);
    let attended = unflatten_tokens(g, back, &shape);
    Ok(if cfg.residual { g.add(level, attended) } else { attended })
}

/// Applies attention to the selected levels; others pass through unchanged.
pub fn guided_fuse_stack(
    g: &mut Graph,
    store: &ParamStore,
    weights: &[GuidedAttentionLevel],
    stack: &[Var],
    objects: &ObjectEmbeddings,
    cfg: &AttentionConfig,
) -> Result<Vec<Var>> {
    if weights.len() != stack.len() {
        return Err(Error::Config(format!(
            "{} attention weight sets for {} feature levels",
            weights.len(),
            stack.len()
        )));
    }
    let n = stack.len();
    stack
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (&level, w))| {
            if cfg.layers.selects(i, n) {
                object_guided_attention(g, store, w, level, objects, cfg)
            } else {
                Ok(level)
            }
        })
        .collect()
}
