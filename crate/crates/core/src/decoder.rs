//! Toy causal language model over mixed text/object embedding rows, with
//! tied input/output embeddings, low-rank adapters on the attention query
//! and value projections, and greedy decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, BlockLora, LoraPair, Norm};
use crate::numerics::{kernels, Scalar, Tensor, Var};
use crate::object_encoder::ObjectEmbedding;
use crate::params::{ParamId, ParamStore, Session};
use crate::prompt::{MultimodalPrompt, BOS, EOS, OBJ};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    /// Standard deviation of the initial (tied) token embeddings.
    #[serde(default = "default_embed_std")]
    pub embed_std: f64,
}

fn default_embed_std() -> f64 {
    0.02
}

impl DecoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        DecoderConfig {
            vocab_size,
            width: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            max_len: 512,
            embed_std: default_embed_std(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.width == 0 || self.max_len == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide decoder width {}",
                self.heads, self.width
            )));
        }
        Ok(())
    }
}

const PREFIX: &str = "decoder";
const LORA_PREFIX: &str = "lora";

/// Pre-norm causal transformer. With zero layers there is no positional
/// table and no final norm, so logits are `rows · Eᵀ`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    embed: ParamId,
    pos: Option<ParamId>,
    blocks: Vec<Block>,
    ln_f: Option<Norm>,
}

impl Decoder {
    pub fn init(store: &mut ParamStore, config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let embed = store.add(
            format!("{PREFIX}.embed"),
            Tensor::randn(&[config.vocab_size, d], config.embed_std, &mut rng),
        )?;
        let mut pos = None;
        let mut ln_f = None;
        let mut blocks = Vec::new();
        if config.layers > 0 {
            pos = Some(store.add(
                format!("{PREFIX}.pos"),
                Tensor::randn(&[config.max_len, d], 0.02, &mut rng),
            )?);
            let residual_std = 1.0 / (d as f64).sqrt() / (2.0 * config.layers as f64).sqrt();
            for i in 0..config.layers {
                blocks.push(Block::new(
                    store,
                    &format!("{PREFIX}.block{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    true,
                    residual_std,
                    &mut rng,
                )?);
            }
            ln_f = Some(Norm::new(store, &format!("{PREFIX}.ln_f"), d)?);
        }
        Ok(Decoder {
            config,
            embed,
            pos,
            blocks,
            ln_f,
        })
    }

    pub fn bind(store: &ParamStore, config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let deep = config.layers > 0;
        Ok(Decoder {
            embed: store.require(&format!("{PREFIX}.embed"))?,
            pos: if deep { Some(store.require(&format!("{PREFIX}.pos"))?) } else { None },
            blocks: (0..config.layers)
                .map(|i| Block::bind(store, &format!("{PREFIX}.block{i}"), config.heads, true))
                .collect::<Result<_>>()?,
            ln_f: if deep { Some(Norm::bind(store, &format!("{PREFIX}.ln_f"))?) } else { None },
            config,
        })
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    pub fn num_params(store: &ParamStore) -> usize {
        store.num_params_with_prefix(&format!("{PREFIX}."))
    }

    /// Embeds `tokens`, taking `objects[i]` (each `1 × d`) for the `i`-th
    /// `[obj]` token.
    pub fn embed_tokens<T: Scalar>(&self, s: &mut Session<T>, tokens: &[u32], objects: &[Var]) -> Result<Var> {
        let table = s.param(self.embed);
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        let mut slot = 0;
        for &t in tokens {
            if t == OBJ {
                if !run.is_empty() {
                    parts.push(s.g.embedding(table, &run)?);
                    run.clear();
                }
                let obj = *objects.get(slot).ok_or(Error::UnboundSlot(slot))?;
                if s.g.value(obj).shape() != [1, self.config.width] {
                    return Err(Error::shape(
                        "embed_tokens",
                        format!("object shape {:?} for width {}", s.g.value(obj).shape(), self.config.width),
                    ));
                }
                parts.push(obj);
                slot += 1;
            } else {
                run.push(t as usize);
            }
        }
        if !run.is_empty() {
            parts.push(s.g.embedding(table, &run)?);
        }
        if slot != objects.len() {
            return Err(Error::Usage(format!("{} objects for {slot} slots", objects.len())));
        }
        s.g.concat_rows(&parts)
    }

    /// Final hidden states for `T × d` input rows.
    pub fn hidden<T: Scalar>(&self, s: &mut Session<T>, rows: Var, lora: Option<&LoraAdapter>) -> Result<Var> {
        let x = self.hidden_upto(s, rows, lora, self.blocks.len())?;
        match &self.ln_f {
            Some(n) => n.forward(s, x),
            None => Ok(x),
        }
    }

    /// Residual stream after the first `blocks` blocks (0 gives the input
    /// rows plus positions), without the final norm.
    pub fn hidden_upto<T: Scalar>(
        &self,
        s: &mut Session<T>,
        rows: Var,
        lora: Option<&LoraAdapter>,
        blocks: usize,
    ) -> Result<Var> {
        if blocks > self.blocks.len() {
            return Err(Error::Usage(format!("decoder has {} blocks, {blocks} requested", self.blocks.len())));
        }
        let (t, d) = (s.g.value(rows).rows(), s.g.value(rows).cols());
        if d != self.config.width {
            return Err(Error::shape("decoder", format!("rows of width {d}, model width {}", self.config.width)));
        }
        if t > self.config.max_len {
            return Err(Error::Length {
                len: t,
                max: self.config.max_len,
            });
        }
        if let Some(l) = lora {
            if l.blocks.len() != self.blocks.len() {
                return Err(Error::shape("lora", format!("{} adapters for {} blocks", l.blocks.len(), self.blocks.len())));
            }
        }
        let mut x = rows;
        if let Some(pos) = self.pos {
            let table = s.param(pos);
            let p = s.g.embedding(table, &(0..t).collect::<Vec<_>>())?;
            x = s.g.add(x, p)?;
        }
        for (i, b) in self.blocks.iter().enumerate().take(blocks) {
            x = b.forward(s, x, lora.map(|l| &l.blocks[i]))?;
        }
        Ok(x)
    }

    /// `T × V` logits.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, rows: Var, lora: Option<&LoraAdapter>) -> Result<Var> {
        let h = self.hidden(s, rows, lora)?;
        let e = s.param(self.embed);
        s.g.matmul_t(h, e)
    }

    /// Logits for the listed positions only.
    pub fn logits_at<T: Scalar>(
        &self,
        s: &mut Session<T>,
        rows: Var,
        positions: &[usize],
        lora: Option<&LoraAdapter>,
    ) -> Result<Var> {
        let h = self.hidden(s, rows, lora)?;
        let h = s.g.select_rows(h, positions)?;
        let e = s.param(self.embed);
        s.g.matmul_t(h, e)
    }

    /// Mean next-token NLL over positions with a target; `targets[t]` is
    /// the token expected after row `t`.
    pub fn loss<T: Scalar>(
        &self,
        s: &mut Session<T>,
        rows: Var,
        targets: &[Option<u32>],
        lora: Option<&LoraAdapter>,
    ) -> Result<Var> {
        let t = s.g.value(rows).rows();
        if targets.len() != t {
            return Err(Error::shape("decoder loss", format!("{} targets for {t} rows", targets.len())));
        }
        let positions: Vec<usize> = (0..t).filter(|&i| targets[i].is_some()).collect();
        if positions.is_empty() {
            return Err(Error::Domain("loss mask selects no positions".into()));
        }
        let ids: Vec<usize> = positions.iter().map(|&i| targets[i].unwrap_or(0) as usize).collect();
        let logits = self.logits_at(s, rows, &positions, lora)?;
        s.g.cross_entropy(logits, &ids, usize::MAX)
    }

    /// Greedy decoding: objects appear only in the prompt; each new token
    /// is the argmax (smallest id on ties) and is fed back through its text
    /// embedding. The prompt is preceded by `BOS`.
    pub fn greedy_decode(
        &self,
        store: &ParamStore,
        lora: Option<&LoraAdapter>,
        prompt: &MultimodalPrompt,
        max_new: usize,
    ) -> Result<GenerationOutput> {
        let mut objects: Vec<Tensor> = Vec::with_capacity(prompt.bound.len());
        for (i, b) in prompt.bound.iter().enumerate() {
            let e: &ObjectEmbedding = b.as_ref().ok_or(Error::UnboundSlot(i))?;
            objects.push(Tensor::new(vec![1, e.dim()], e.vec.clone())?);
        }
        let mut tokens = Vec::with_capacity(prompt.tokens().len() + 1 + max_new);
        tokens.push(BOS);
        tokens.extend_from_slice(prompt.tokens());
        let mut out = GenerationOutput {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            stop: StopReason::MaxLen,
        };
        for _ in 0..max_new {
            let mut s = Session::inference(store);
            let objs: Vec<Var> = objects.iter().map(|o| s.g.constant(o.clone())).collect();
            let rows = self.embed_tokens(&mut s, &tokens, &objs)?;
            let last = tokens.len() - 1;
            let logits = self.logits_at(&mut s, rows, &[last], lora)?;
            let row = s.g.value(logits).data();
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            let wide: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let lp = wide[best] - kernels::log_sum_exp(&wide);
            let id = best as u32;
            out.tokens.push(id);
            out.logprobs.push(lp);
            if id == EOS {
                out.stop = StopReason::Eos;
                break;
            }
            tokens.push(id);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLen,
}

/// Generated ids (prompt excluded; a final `EOS` is included when it was
/// produced) with the log-probability of each chosen token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub stop: StopReason,
}

impl GenerationOutput {
    /// Generated ids without the trailing `EOS`.
    pub fn text_tokens(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 4, alpha: 8.0 }
    }
}

/// Adapters on every decoder block's query and value projections.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub blocks: Vec<BlockLora>,
}

impl LoraAdapter {
    /// `A ~ N(0, 1/d_in)`, `B = 0`, so a fresh adapter changes nothing.
    pub fn init(store: &mut ParamStore, decoder: &Decoder, config: LoraConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scaling = config.alpha / config.rank as f64;
        let mut blocks = Vec::new();
        for (i, b) in decoder.blocks.iter().enumerate() {
            let mut pair = |which: &str, d_in: usize, d_out: usize| -> Result<LoraPair> {
                let name = format!("{LORA_PREFIX}.block{i}.{which}");
                Ok(LoraPair {
                    a: store.add(
                        format!("{name}.a"),
                        Tensor::randn(&[config.rank, d_in], 1.0 / (d_in as f64).sqrt(), &mut rng),
                    )?,
                    b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out, config.rank]))?,
                    scaling,
                })
            };
            let q = pair("q", b.q.d_in, b.q.d_out)?;
            let v = pair("v", b.v.d_in, b.v.d_out)?;
            blocks.push(BlockLora { q, v });
        }
        Ok(LoraAdapter { config, blocks })
    }

    pub fn bind(store: &ParamStore, decoder: &Decoder, config: LoraConfig) -> Result<Self> {
        let scaling = config.alpha / config.rank.max(1) as f64;
        let pair = |i: usize, which: &str| -> Result<LoraPair> {
            let name = format!("{LORA_PREFIX}.block{i}.{which}");
            Ok(LoraPair {
                a: store.require(&format!("{name}.a"))?,
                b: store.require(&format!("{name}.b"))?,
                scaling,
            })
        };
        let blocks = (0..decoder.blocks.len())
            .map(|i| Ok(BlockLora { q: pair(i, "q")?, v: pair(i, "v")? }))
            .collect::<Result<_>>()?;
        Ok(LoraAdapter { config, blocks })
    }

    pub fn num_params(store: &ParamStore) -> usize {
        store.num_params_with_prefix(&format!("{LORA_PREFIX}."))
    }

    /// Copy of `store` with `W + (α/r)·(B·A)ᵀ` folded into every adapted
    /// weight (weights are stored `d_in × d_out`) and the adapter tables
    /// left in place.
    pub fn merge(&self, store: &ParamStore, decoder: &Decoder) -> Result<ParamStore> {
        let mut out = store.clone();
        for (b, l) in decoder.blocks.iter().zip(&self.blocks) {
            for (lin, pair) in [(&b.q, &l.q), (&b.v, &l.v)] {
                let a = store.get(pair.a);
                let bm = store.get(pair.b);
                let r = a.rows();
                if a.cols() != lin.d_in || bm.rows() != lin.d_out || bm.cols() != r {
                    return Err(Error::shape(
                        "lora merge",
                        format!("A {:?}, B {:?} for a {}x{} weight", a.shape(), bm.shape(), lin.d_in, lin.d_out),
                    ));
                }
                let w = out.get_mut(lin.weight).data_mut();
                for i in 0..lin.d_in {
                    for o in 0..lin.d_out {
                        let mut acc = 0.0f64;
                        for k in 0..r {
                            acc += bm.get(o, k) as f64 * a.get(k, i) as f64;
                        }
                        w[i * lin.d_out + o] += (acc * pair.scaling) as f32;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
