//! Conditional autoregressive transformer over latent codes: p(z_g | z_c),
//! one token at a time in raster order.

mod sample;
mod train;

pub use sample::{greedy_sequence, sample, sequential_nll, SampleConfig, TokenModel};
pub use train::{train_prior, PriorLogEntry};

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{embedding, linear, Embedding, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Payload};
use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// z_c runs through an unmasked encoder stack; the decoder cross-attends.
    EncoderDecoder,
    /// One stack over [z_c ‖ z_g]: z_c bidirectional, z_g causal.
    Prefix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub layout: Layout,
    pub heads: usize,
    /// Layers per stack.
    pub layers: usize,
    /// Must equal the codebook size K.
    pub vocab: usize,
    pub embed: usize,
    pub ff: usize,
    /// Tokens per sequence, h·w.
    pub seq_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub log_every: usize,
    pub val_every: usize,
    pub val_pairs: usize,
    pub checkpoint_every: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            layout: Layout::EncoderDecoder,
            heads: 2,
            layers: 4,
            vocab: 128,
            embed: 128,
            ff: 512,
            seq_len: 64,
            lr: 2e-4,
            batch_size: 32,
            steps: 20_000,
            log_every: 100,
            val_every: 1_000,
            val_pairs: 256,
            checkpoint_every: 5_000,
        }
    }
}

impl PriorConfig {
    /// Full-scale configuration: 4 heads, 16 layers, vocabulary 1024, width
    /// 512, feed-forward 2048, 32×32 latents, 300K steps.
    pub fn full() -> Self {
        Self { heads: 4, layers: 16, vocab: 1024, embed: 512, ff: 2048, seq_len: 1024, steps: 300_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("prior: {m}")));
        if self.heads == 0 || self.embed % self.heads != 0 {
            return bad(format!("embed {} not divisible by heads {}", self.embed, self.heads));
        }
        if self.vocab < 2 || self.seq_len == 0 || self.ff == 0 {
            return bad("vocab must be >= 2, seq_len and ff >= 1".into());
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr must be > 0 and batch_size >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(d: usize, heads: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            q: linear(d, d, vb.pp("q"))?,
            k: linear(d, d, vb.pp("k"))?,
            v: linear(d, d, vb.pp("v"))?,
            o: linear(d, d, vb.pp("o"))?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()
    }

    /// `mask` is additive, (Tq, Tk), with −∞ at disallowed pairs.
    fn forward(&self, xq: &Tensor, xkv: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (b, t, d) = xq.dims3()?;
        let q = self.split(&self.q.forward(xq)?)?;
        let k = self.split(&self.k.forward(xkv)?)?;
        let v = self.split(&self.v.forward(xkv)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut s = (q.matmul(&k.t()?)? * scale)?;
        if let Some(m) = mask {
            s = s.broadcast_add(m)?;
        }
        let a = nn::softmax_last(&s)?.matmul(&v)?;
        self.o.forward(&a.transpose(1, 2)?.reshape((b, t, d))?)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    a: Linear,
    b: Linear,
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.b.forward(&self.a.forward(x)?.gelu()?)
    }
}

/// Pre-norm block: self-attention, optional cross-attention, feed-forward.
#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl Block {
    fn new(cfg: &PriorConfig, cross: bool, vb: VarBuilder) -> candle_core::Result<Self> {
        let d = cfg.embed;
        let cross = if cross {
            Some((LayerNorm::new(d, vb.pp("ln_x"))?, Attention::new(d, cfg.heads, vb.pp("cross"))?))
        } else {
            None
        };
        Ok(Self {
            ln1: LayerNorm::new(d, vb.pp("ln1"))?,
            attn: Attention::new(d, cfg.heads, vb.pp("attn"))?,
            cross,
            ln2: LayerNorm::new(d, vb.pp("ln2"))?,
            ff: FeedForward { a: linear(d, cfg.ff, vb.pp("ff_a"))?, b: linear(cfg.ff, d, vb.pp("ff_b"))? },
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>, memory: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let mut x = (x + self.attn.forward(&h, &h, mask)?)?;
        if let (Some((ln, attn)), Some(mem)) = (&self.cross, memory) {
            x = (&x + attn.forward(&ln.forward(&x)?, mem, None)?)?;
        }
        &x + self.ff.forward(&self.ln2.forward(&x)?)?
    }
}

pub struct Prior {
    cfg: PriorConfig,
    vars: VarMap,
    cond_emb: Embedding,
    /// K codebook tokens plus the start token at index K.
    goal_emb: Embedding,
    pos_c: Tensor,
    pos_g: Tensor,
    encoder: Vec<Block>,
    enc_ln: Option<LayerNorm>,
    decoder: Vec<Block>,
    dec_ln: LayerNorm,
    head: Linear,
    dtype: DType,
    device: Device,
}

impl Prior {
    pub fn new(cfg: &PriorConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let device = nn::device();
        let vars = VarMap::new();
        let vb = VarBuilder::from_varmap(&vars, dtype, &device);
        let (d, s) = (cfg.embed, cfg.seq_len);
        let cond_emb = embedding(cfg.vocab, d, vb.pp("cond_emb"))?;
        let goal_emb = embedding(cfg.vocab + 1, d, vb.pp("goal_emb"))?;
        let pos_c = vb.get((s, d), "pos_c_emb")?;
        let pos_g = vb.get((s, d), "pos_g_emb")?;
        let ed = cfg.layout == Layout::EncoderDecoder;
        let encoder = if ed {
            (0..cfg.layers).map(|i| Block::new(cfg, false, vb.pp(format!("enc{i}")))).collect::<candle_core::Result<_>>()?
        } else {
            vec![]
        };
        let enc_ln = if ed { Some(LayerNorm::new(d, vb.pp("enc_ln"))?) } else { None };
        let decoder =
            (0..cfg.layers).map(|i| Block::new(cfg, ed, vb.pp(format!("dec{i}")))).collect::<candle_core::Result<_>>()?;
        let dec_ln = LayerNorm::new(d, vb.pp("dec_ln"))?;
        let head = linear(d, cfg.vocab, vb.pp("head"))?;
        nn::seeded_init(&vars, seed)?;
        Ok(Self { cfg: cfg.clone(), vars, cond_emb, goal_emb, pos_c, pos_g, encoder, enc_ln, decoder, dec_ln, head, dtype, device })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.cfg
    }

    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn start_token(&self) -> u32 {
        self.cfg.vocab as u32
    }

    fn check_tokens(&self, tokens: &[u32], max_len: usize, what: &str) -> Result<()> {
        if tokens.len() > max_len {
            return Err(Error::shape(format!("{what} of at most {max_len} tokens"), tokens.len()));
        }
        match tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            Some(&t) => Err(Error::Vocabulary { token: t as usize, vocab: self.cfg.vocab }),
            None => Ok(()),
        }
    }

    fn tokens(&self, rows: &[&[u32]]) -> Result<Tensor> {
        let t = rows.first().map_or(0, |r| r.len());
        let flat: Vec<u32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (rows.len(), t), &self.device)?)
    }

    /// Additive mask of shape (t, t) allowing key j for query i iff
    /// `allowed(i, j)`.
    fn mask(&self, t: usize, allowed: impl Fn(usize, usize) -> bool) -> Result<Tensor> {
        let v: Vec<f32> =
            (0..t).flat_map(|i| (0..t).map(move |j| (i, j))).map(|(i, j)| if allowed(i, j) { 0.0 } else { f32::NEG_INFINITY }).collect();
        Ok(Tensor::from_vec(v, (t, t), &self.device)?.to_dtype(self.dtype)?)
    }

    fn embed_cond(&self, cond: &Tensor) -> Result<Tensor> {
        Ok(self.cond_emb.forward(cond)?.broadcast_add(&self.pos_c)?)
    }

    /// Decoder inputs: the start token followed by all but the last goal token.
    fn embed_goal_inputs(&self, goal_prefix: &[&[u32]]) -> Result<Tensor> {
        let rows: Vec<Vec<u32>> = goal_prefix
            .iter()
            .map(|g| std::iter::once(self.start_token()).chain(g.iter().copied()).collect())
            .collect();
        let refs: Vec<&[u32]> = rows.iter().map(|r| r.as_slice()).collect();
        let ids = self.tokens(&refs)?;
        let t = ids.dim(1)?;
        Ok(self.goal_emb.forward(&ids)?.broadcast_add(&self.pos_g.narrow(0, 0, t)?)?)
    }

    /// Conditioning memory for the encoder-decoder layout; the embedded
    /// conditioning sequence for the prefix layout.
    pub(crate) fn memory(&self, conds: &[&[u32]]) -> Result<Tensor> {
        for c in conds {
            if c.len() != self.cfg.seq_len {
                return Err(Error::shape(format!("{} conditioning tokens", self.cfg.seq_len), c.len()));
            }
            self.check_tokens(c, self.cfg.seq_len, "conditioning sequence")?;
        }
        let mut h = self.embed_cond(&self.tokens(conds)?)?;
        if self.cfg.layout == Layout::EncoderDecoder {
            for b in &self.encoder {
                h = b.forward(&h, None, None)?;
            }
            h = self.enc_ln.as_ref().expect("encoder layout").forward(&h)?;
        }
        Ok(h)
    }

    /// Logits (B, t+1, K) for positions 0..=t given goal prefixes of length
    /// t: position i is the prediction of token i from the tokens before it.
    pub(crate) fn logits_from_memory(&self, memory: &Tensor, prefixes: &[&[u32]]) -> Result<Tensor> {
        let s = self.cfg.seq_len;
        for p in prefixes {
            if p.len() >= s {
                return Err(Error::shape(format!("goal prefix shorter than {s}"), p.len()));
            }
            self.check_tokens(p, s, "goal prefix")?;
        }
        let x = self.embed_goal_inputs(prefixes)?;
        let t = x.dim(1)?;
        let h = match self.cfg.layout {
            Layout::EncoderDecoder => {
                let mask = self.mask(t, |i, j| j <= i)?;
                let mut h = x;
                for b in &self.decoder {
                    h = b.forward(&h, Some(&mask), Some(memory))?;
                }
                h
            }
            Layout::Prefix => {
                let mask = self.mask(s + t, |i, j| j < s || (i >= s && j <= i))?;
                let mut h = Tensor::cat(&[memory, &x], 1)?;
                for b in &self.decoder {
                    h = b.forward(&h, Some(&mask), None)?;
                }
                h.narrow(1, s, t)?
            }
        };
        Ok(self.head.forward(&self.dec_ln.forward(&h)?)?)
    }

    /// Teacher-forced logits (B, S, K) for full goal sequences.
    pub fn logits(&self, conds: &[&[u32]], goals: &[&[u32]]) -> Result<Tensor> {
        let s = self.cfg.seq_len;
        for g in goals {
            if g.len() != s {
                return Err(Error::shape(format!("{s} goal tokens"), g.len()));
            }
        }
        let prefixes: Vec<&[u32]> = goals.iter().map(|g| &g[..s - 1]).collect();
        let mem = self.memory(conds)?;
        self.logits_from_memory(&mem, &prefixes)
    }

    /// Per-sequence negative log-likelihood tensor (B,), differentiable.
    pub fn nll_tensor(&self, conds: &[&[u32]], goals: &[&[u32]]) -> Result<Tensor> {
        let lp = nn::log_softmax_last(&self.logits(conds, goals)?)?;
        let target = self.tokens(goals)?.unsqueeze(2)?;
        Ok(lp.gather(&target, 2)?.squeeze(2)?.sum(D::Minus1)?.neg()?)
    }

    /// −Σ_i log p(z_g,i | z_g,<i, z_c) under teacher forcing.
    pub fn nll(&self, cond: &[u32], goal: &[u32]) -> Result<f64> {
        Ok(self.nll_tensor(&[cond], &[goal])?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }

    /// Mean per-token nll over a set of pairs, evaluated in chunks.
    pub fn mean_token_nll(&self, pairs: &[(&[u32], &[u32])]) -> Result<f64> {
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for chunk in pairs.chunks(64) {
            let c: Vec<&[u32]> = chunk.iter().map(|p| p.0).collect();
            let g: Vec<&[u32]> = chunk.iter().map(|p| p.1).collect();
            total += self.nll_tensor(&c, &g)?.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(total / (pairs.len() * self.cfg.seq_len) as f64)
    }

    /// Checkpoint recording `vqvae` as the codec the tokens came from.
    pub fn to_checkpoint(&self, vqvae: &str) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(Payload::Prior, &self.cfg)?.with_parent("vqvae", vqvae);
        c.add_vars("net.", &self.vars);
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        if ckpt.payload != Payload::Prior {
            return Err(Error::Incompatible(format!("expected a prior checkpoint, got {}", ckpt.payload)));
        }
        let m = Self::new(&ckpt.config()?, dtype, 0)?;
        ckpt.load_vars("net.", &m.vars)?;
        Ok(m)
    }
}
