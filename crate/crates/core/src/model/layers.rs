//! Parameter registration and forward helpers for the building blocks.
//!
//! Each block owns the parameters under one name prefix; registration and
//! forward code agree on the suffixes.

use alloc::format;

use crate::numerics::params::init;
use crate::numerics::{AttnContext, Graph, ParamStore, RngStream, Tensor, Var};
use crate::Result;

/// Standard deviation of embedding tables and mask tokens.
pub const EMBED_STD: f64 = 0.02;

pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut RngStream,
}

impl Builder<'_> {
    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> Result<()> {
        let w = init::fan_in_uniform(&[out, inp], inp, self.rng);
        self.store.insert(&format!("{name}.w"), w)?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[out]))?;
        Ok(())
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<()> {
        let w = init::fan_in_uniform(&[c_out, c_in, 3], 3 * c_in, self.rng);
        self.store.insert(&format!("{name}.w"), w)?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(())
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.store.insert(&format!("{name}.g"), Tensor::full(&[dim], 1.0))?;
        self.store.insert(&format!("{name}.b"), Tensor::zeros(&[dim]))?;
        Ok(())
    }

    pub fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> Result<()> {
        self.store.insert(name, init::normal(&[rows, dim], EMBED_STD, self.rng))?;
        Ok(())
    }

    pub fn mlp(&mut self, name: &str, dims: &[usize]) -> Result<()> {
        for (i, w) in dims.windows(2).enumerate() {
            self.linear(&format!("{name}.fc{}", i + 1), w[0], w[1])?;
        }
        Ok(())
    }

    pub fn attention(&mut self, name: &str, dim: usize) -> Result<()> {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), dim, dim)?;
        }
        Ok(())
    }

    /// Pre-norm transformer block.
    pub fn transformer_block(&mut self, name: &str, dim: usize, mlp_ratio: usize) -> Result<()> {
        self.layer_norm(&format!("{name}.ln1"), dim)?;
        self.attention(&format!("{name}.attn"), dim)?;
        self.layer_norm(&format!("{name}.ln2"), dim)?;
        self.mlp(&format!("{name}.mlp"), &[dim, mlp_ratio * dim, dim])
    }

    /// Post-norm neighborhood-attention block.
    pub fn nat_block(&mut self, name: &str, dim: usize, mlp_ratio: usize) -> Result<()> {
        self.attention(&format!("{name}.attn"), dim)?;
        self.layer_norm(&format!("{name}.ln1"), dim)?;
        self.mlp(&format!("{name}.mlp"), &[dim, mlp_ratio * dim, dim])?;
        self.layer_norm(&format!("{name}.ln2"), dim)
    }
}

pub fn linear(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn layer_norm(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let gamma = g.param(&format!("{name}.g"))?;
    let beta = g.param(&format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta)
}

pub fn conv(g: &mut Graph, x: Var, name: &str, batch: usize, len: usize, stride: usize) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    g.conv1d(x, w, b, batch, len, stride)
}

/// Linear layers with GELU between them (not after the last). Dropout at
/// `rate` follows each activation.
pub fn mlp(g: &mut Graph, x: Var, name: &str, layers: usize, rate: f64) -> Result<Var> {
    let mut h = x;
    for i in 1..=layers {
        h = linear(g, h, &format!("{name}.fc{i}"))?;
        if i < layers {
            h = g.gelu(h);
            h = g.dropout(h, rate);
        }
    }
    Ok(h)
}

pub fn self_attention(g: &mut Graph, x: Var, name: &str, heads: usize, ctx: &AttnContext) -> Result<Var> {
    let q = linear(g, x, &format!("{name}.q"))?;
    let k = linear(g, x, &format!("{name}.k"))?;
    let v = linear(g, x, &format!("{name}.v"))?;
    let a = g.attention(q, k, v, heads, ctx)?;
    linear(g, a, &format!("{name}.o"))
}

pub fn transformer_block(g: &mut Graph, x: Var, name: &str, heads: usize, rate: f64) -> Result<Var> {
    let h = layer_norm(g, x, &format!("{name}.ln1"))?;
    let h = self_attention(g, h, &format!("{name}.attn"), heads, &AttnContext::Full { key_valid: None })?;
    let h = g.dropout(h, rate);
    let x = g.add(x, h)?;
    let h = layer_norm(g, x, &format!("{name}.ln2"))?;
    let h = mlp(g, h, &format!("{name}.mlp"), 2, rate)?;
    let h = g.dropout(h, rate);
    g.add(x, h)
}

/// `batch` sequences of `len` rows each.
pub fn nat_block(
    g: &mut Graph,
    x: Var,
    name: &str,
    heads: usize,
    kernel: usize,
    batch: usize,
    len: usize,
) -> Result<Var> {
    let ctx = AttnContext::Neighborhood { batch, len, kernel };
    let h = self_attention(g, x, &format!("{name}.attn"), heads, &ctx)?;
    let x = g.add(x, h)?;
    let x = layer_norm(g, x, &format!("{name}.ln1"))?;
    let h = mlp(g, x, &format!("{name}.mlp"), 2, 0.0)?;
    let x = g.add(x, h)?;
    layer_norm(g, x, &format!("{name}.ln2"))
}
