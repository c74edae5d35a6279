//! Parameterised building blocks shared by the encoder heads and the decoder.

use rand::Rng;

use crate::conv::ConvGeom;
use crate::graph::{Graph, Var};
use crate::params::{he, normal, xavier, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.weight"), xavier(rng, &[in_dim, out_dim], in_dim, out_dim));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// He initialisation, for layers feeding a ReLU.
    pub fn new_relu<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.weight"), he(rng, &[in_dim, out_dim], in_dim));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[1, dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub n: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, n: usize, dim: usize) -> Self {
        let table = store.add(format!("{name}.table"), normal(rng, &[n, dim], 1.0 / (dim as f64).sqrt()));
        Embedding { table, n }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

/// Convolution layer over channel-first `[C, D, H, W]` inputs.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
    pub out_channels: usize,
}

impl Conv {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, geom: ConvGeom, out_channels: usize) -> Self {
        let k = geom.patch_len();
        let w = store.add(format!("{name}.weight"), he(rng, &[out_channels, k], k));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_channels]));
        Conv { w, b, geom, out_channels }
    }

    pub fn out_shape(&self) -> [usize; 4] {
        let o = self.geom.out_dims().expect("validated at construction");
        [self.out_channels, o[0], o[1], o[2]]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// Queries from `x`, keys and values from `source`.
    pub fn forward(&self, g: &mut Graph, x: Var, source: Var, causal: bool) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, source);
        let v = self.v.forward(g, source);
        let a = g.attention(q, k, v, self.heads, causal);
        self.o.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new_relu(store, rng, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, causal: bool) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, causal);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}
