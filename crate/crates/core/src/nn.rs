//! Layers shared by the encoders and the fusion block.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Result, SemfError};

/// Variance epsilon for every layer norm in the model.
pub const LN_EPS: f64 = 1e-6;

/// Affine map `x W + b` applied to the last axis of a `[n, in]` input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Self {
            weight,
            bias: Some(bias),
        }
    }

    pub fn without_bias<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), fan_in, fan_out, rng);
        Self { weight, bias: None }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(bias) => {
                let b = g.param(store, bias)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        let y = g.mul(n, gamma)?;
        g.add(y, beta)
    }
}

/// Scaled dot-product attention with `n_heads` heads over a shared width.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut R) -> Self {
        assert!(n_heads > 0 && d_model.is_multiple_of(n_heads), "d_model must divide into heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            key: Linear::without_bias(store, &format!("{name}.k"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            n_heads,
            d_model,
        }
    }

    /// `queries: [nq, d]`, `context: [nk, d]` -> `[nq, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, context: Var) -> Result<Var> {
        let (sq, sk) = (g.shape(queries).to_vec(), g.shape(context).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sq[1] != self.d_model || sk[1] != self.d_model {
            return Err(SemfError::shape("attention", &sq, &sk));
        }
        if sk[0] == 0 {
            return Err(SemfError::contract("attention over an empty sequence"));
        }
        let dh = self.d_model / self.n_heads;
        let q = self.query.forward(g, store, queries)?;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt())?;
        let k = self.key.forward(g, store, context)?;
        let v = self.value.forward(g, store, context)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.narrow(q, 1, h * dh, dh)?;
            let kh = g.narrow(k, 1, h * dh, dh)?;
            let vh = g.narrow(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let probs = g.softmax_lastdim(scores)?;
            g.record_attention(probs);
            heads.push(g.matmul(probs, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        self.output.forward(g, store, merged)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ff_hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, n_heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d_model, ff_hidden, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_hidden, d_model, rng),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h)?;
        let a = g.dropout(a, self.dropout)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.ff_in.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.ff_out.forward(g, store, h)?;
        let h = g.dropout(h, self.dropout)?;
        g.add(x, h)
    }
}

/// Fixed sine/cosine position table of shape `[len, d_model]`.
pub fn sinusoidal_positions(len: usize, d_model: usize) -> Tensor {
    Tensor::from_fn2(len, d_model, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
