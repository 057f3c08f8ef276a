//! Layers shared by the object resampler and the decoder.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Scalar, Tensor, Var, LN_EPS};
use crate::params::{ParamId, ParamStore, Session};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight stored `d_in × d_out`, applied as `x · W + b`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?,
            d_in,
            d_out,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let weight = store.require(&format!("{name}.weight"))?;
        let bias = store.require(&format!("{name}.bias"))?;
        let shape = store.get(weight).shape();
        Ok(Linear {
            d_in: shape[0],
            d_out: shape[1],
            weight,
            bias,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.g.matmul(x, w)?;
        s.g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[width], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Norm {
            gamma: store.require(&format!("{name}.gamma"))?,
            beta: store.require(&format!("{name}.beta"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.g.layer_norm(x, g, b, LN_EPS)
    }
}

/// Low-rank update `(alpha / r) · B · A` for one weight matrix, with `A`
/// stored `r × d_in` and `B` stored `d_out × r`.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub scaling: f64,
}

impl LoraPair {
    /// `x · (B·A)ᵀ · scaling`
    pub fn delta<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let a = s.param(self.a);
        let b = s.param(self.b);
        let xa = s.g.matmul_t(x, a)?;
        let xab = s.g.matmul_t(xa, b)?;
        Ok(s.g.scale(xab, T::lit(self.scaling)))
    }
}

/// Adapters on the query and value projections of one block.
#[derive(Clone, Debug)]
pub struct BlockLora {
    pub q: LoraPair,
    pub v: LoraPair,
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        causal: bool,
        residual_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (width as f64).sqrt();
        let hidden = width * mlp_ratio;
        Ok(Block {
            ln1: Norm::new(store, &format!("{name}.ln1"), width)?,
            q: Linear::new(store, &format!("{name}.attn.q"), width, width, std, rng)?,
            k: Linear::new(store, &format!("{name}.attn.k"), width, width, std, rng)?,
            v: Linear::new(store, &format!("{name}.attn.v"), width, width, std, rng)?,
            o: Linear::new(store, &format!("{name}.attn.o"), width, width, residual_std, rng)?,
            ln2: Norm::new(store, &format!("{name}.ln2"), width)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), width, hidden, std, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, width, residual_std, rng)?,
            heads,
            causal,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, heads: usize, causal: bool) -> Result<Self> {
        Ok(Block {
            ln1: Norm::bind(store, &format!("{name}.ln1"))?,
            q: Linear::bind(store, &format!("{name}.attn.q"))?,
            k: Linear::bind(store, &format!("{name}.attn.k"))?,
            v: Linear::bind(store, &format!("{name}.attn.v"))?,
            o: Linear::bind(store, &format!("{name}.attn.o"))?,
            ln2: Norm::bind(store, &format!("{name}.ln2"))?,
            fc1: Linear::bind(store, &format!("{name}.mlp.fc1"))?,
            fc2: Linear::bind(store, &format!("{name}.mlp.fc2"))?,
            heads,
            causal,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, lora: Option<&BlockLora>) -> Result<Var> {
        let h = self.ln1.forward(s, x)?;
        let mut q = self.q.forward(s, h)?;
        let k = self.k.forward(s, h)?;
        let mut v = self.v.forward(s, h)?;
        if let Some(l) = lora {
            let dq = l.q.delta(s, h)?;
            q = s.g.add(q, dq)?;
            let dv = l.v.delta(s, h)?;
            v = s.g.add(v, dv)?;
        }
        let a = s.g.attention(q, k, v, self.heads, self.causal)?;
        let a = self.o.forward(s, a)?;
        let x = s.g.add(x, a)?;
        let h = self.ln2.forward(s, x)?;
        let h = self.fc1.forward(s, h)?;
        let h = s.g.gelu(h);
        let h = self.fc2.forward(s, h)?;
        s.g.add(x, h)
    }
}
