//! Parameterized building blocks. Each layer only records [`ParamId`]s, so
//! the same layer value can drive graphs of any scalar type.

use rand::Rng;

use crate::{Float, Graph, ParamId, ParamStore, Result, Var};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let std = (1.0 / in_dim as f64).sqrt().min(0.1).max(INIT_STD);
        Ok(Self {
            weight: store.normal(format!("{name}.weight"), in_dim, out_dim, std, rng)?,
            bias: store.zeros(format!("{name}.bias"), 1, out_dim)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.filled(format!("{name}.gamma"), 1, dim, 1.0)?,
            beta: store.zeros(format!("{name}.beta"), 1, dim)?,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), in_dim, hidden)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl SelfAttention {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Self> {
        assert_eq!(dim % heads, 0, "{name}: width {dim} not divisible by {heads} heads");
        Ok(Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim)?,
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim)?,
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim)?,
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim)?,
            heads,
            causal,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let q = self.wq.forward(g, x);
        let k = self.wk.forward(g, x);
        let v = self.wv.forward(g, x);
        let a = g.attention(q, k, v, self.heads, self.causal);
        self.wo.forward(g, a)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        causal: bool,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), dim, heads, causal)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, mlp_hidden, dim)?,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let h = self.attn.forward(g, h);
        let x = g.add(x, h);
        let h = self.ln2.forward(g, x);
        let h = self.mlp.forward(g, h);
        g.add(x, h)
    }
}

/// A stack of transformer blocks.
#[derive(Clone, Debug)]
pub struct BlockStack {
    pub blocks: Vec<TransformerBlock>,
}

impl BlockStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        causal: bool,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(store, rng, &format!("{name}.{i}"), dim, heads, mlp_hidden, causal))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        self.blocks.iter().fold(x, |x, b| b.forward(g, x))
    }

    /// Runs the stack and also returns the input to the final block
    /// (the second-to-last layer's output).
    pub fn forward_with_penultimate<F: Float>(&self, g: &mut Graph<F>, x: Var) -> (Var, Var) {
        let mut penultimate = x;
        let mut x = x;
        for b in &self.blocks {
            penultimate = x;
            x = b.forward(g, x);
        }
        (x, penultimate)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, rng: &mut R, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: store.normal(format!("{name}.table"), vocab, dim, INIT_STD, rng)?,
            vocab,
            dim,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather(t, ids)
    }
}
