//! Parameterized layers shared by the encoders, the interactor and the LM.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[d_in, d_out], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[1, d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// `d_kv` is the width of the key/value source; everything projects to `d`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, d_kv: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, kv: Var, mask: Option<&[bool]>) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, kv)?;
        let v = self.v.forward(g, store, kv)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, store, a)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}
