//! Shared embedding layer and post-norm transformer stack.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::SequencePair;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub num_connectives: usize,
    pub num_relations: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for the given table sizes.
    pub fn new(vocab_size: usize, num_connectives: usize, num_relations: usize) -> Self {
        ModelConfig {
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_positions: 256,
            vocab_size,
            num_connectives,
            num_relations,
            dropout: 0.1,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn_mult == 0 || self.max_positions == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "ffn_mult, max_positions and vocab_size must be positive".into(),
            ));
        }
        if self.num_connectives == 0 || self.num_relations == 0 {
            return Err(Error::Config("connective and relation counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

/// Handles to the encoder's arrays inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub token: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
    pub layers: Vec<LayerParams>,
}

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub std: f64,
    pub prefix: &'a str,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let dist = Normal::new(0.0, self.std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        self.store.add(format!("{}{name}", self.prefix), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store
            .add(format!("{}{name}", self.prefix), Tensor::full(shape, value))
    }
}

impl EncoderParams {
    pub(crate) fn register(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.hidden;
        let f = d * cfg.ffn_mult;
        let token = init.normal("emb.token", &[cfg.vocab_size, d])?;
        let segment = init.normal("emb.segment", &[1, d])?;
        let position = init.normal("emb.position", &[cfg.max_positions, d])?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("layer{l}.");
            layers.push(LayerParams {
                q_w: init.normal(&format!("{p}attn.q.w"), &[d, d])?,
                q_b: init.constant(&format!("{p}attn.q.b"), &[d], 0.0)?,
                k_w: init.normal(&format!("{p}attn.k.w"), &[d, d])?,
                k_b: init.constant(&format!("{p}attn.k.b"), &[d], 0.0)?,
                v_w: init.normal(&format!("{p}attn.v.w"), &[d, d])?,
                v_b: init.constant(&format!("{p}attn.v.b"), &[d], 0.0)?,
                o_w: init.normal(&format!("{p}attn.o.w"), &[d, d])?,
                o_b: init.constant(&format!("{p}attn.o.b"), &[d], 0.0)?,
                ln1_g: init.constant(&format!("{p}ln1.gamma"), &[d], 1.0)?,
                ln1_b: init.constant(&format!("{p}ln1.beta"), &[d], 0.0)?,
                ffn_w1: init.normal(&format!("{p}ffn.w1"), &[d, f])?,
                ffn_b1: init.constant(&format!("{p}ffn.b1"), &[f], 0.0)?,
                ffn_w2: init.normal(&format!("{p}ffn.w2"), &[f, d])?,
                ffn_b2: init.constant(&format!("{p}ffn.b2"), &[d], 0.0)?,
                ln2_g: init.constant(&format!("{p}ln2.gamma"), &[d], 1.0)?,
                ln2_b: init.constant(&format!("{p}ln2.beta"), &[d], 0.0)?,
            });
        }
        Ok(EncoderParams {
            token,
            segment,
            position,
            layers,
        })
    }
}

/// Padded batch of sequences, flattened row-major to `[batch·seq]` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    pub lengths: Vec<usize>,
    pub slots: Vec<Option<usize>>,
    pub seq: usize,
}

impl Batch {
    pub fn new(seqs: &[SequencePair], pad: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let seq = seqs.iter().map(SequencePair::len).max().unwrap_or(0);
        let mut b = Batch {
            ids: Vec::with_capacity(seqs.len() * seq),
            segments: Vec::with_capacity(seqs.len() * seq),
            positions: Vec::with_capacity(seqs.len() * seq),
            lengths: Vec::with_capacity(seqs.len()),
            slots: Vec::with_capacity(seqs.len()),
            seq,
        };
        for s in seqs {
            let n = s.len();
            b.ids.extend_from_slice(&s.ids);
            b.ids.extend(std::iter::repeat(pad).take(seq - n));
            b.segments.extend_from_slice(&s.segments);
            b.segments.extend(std::iter::repeat(0).take(seq - n));
            b.positions.extend(0..seq);
            b.lengths.push(n);
            b.slots.push(s.slot);
        }
        Ok(b)
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// Flat row of position `i` in sequence `b`.
    pub fn row(&self, b: usize, i: usize) -> usize {
        b * self.seq + i
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.size()).map(|b| self.row(b, 0)).collect()
    }

    pub fn slot_rows(&self) -> Result<Vec<usize>> {
        self.slots
            .iter()
            .enumerate()
            .map(|(b, s)| {
                s.map(|i| self.row(b, i))
                    .ok_or_else(|| Error::Internal(format!("sequence {b} has no slot")))
            })
            .collect()
    }

    pub fn layout(&self, heads: usize) -> AttnLayout {
        AttnLayout {
            batch: self.size(),
            seq: self.seq,
            heads,
            lengths: self.lengths.clone(),
        }
    }
}

/// Rows that replace the token embedding at given flat positions.
pub struct SlotOverride {
    pub rows: Vec<usize>,
    /// `[rows.len() × d]`.
    pub vectors: Var,
}

/// Dropout switch plus the RNG that draws masks.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub(crate) fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

/// `E[i] = tok[id_i] + seg[s_i] + pos[i]`, with optional token rows overridden.
pub fn embed(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderParams,
    batch: &Batch,
    slot_override: Option<&SlotOverride>,
) -> Result<Var> {
    let tok = g.param(store, enc.token)?;
    let seg = g.param(store, enc.segment)?;
    let pos = g.param(store, enc.position)?;
    let mut e = g.gather_rows(tok, &batch.ids)?;
    if let Some(o) = slot_override {
        e = g.overwrite_rows(e, &o.rows, o.vectors)?;
    }
    let s = g.gather_rows(seg, &batch.segments)?;
    let p = g.gather_rows(pos, &batch.positions)?;
    let e = g.add(e, s)?;
    g.add(e, p)
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = g.param(store, w)?;
    let bv = g.param(store, b)?;
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

/// `G = LN(H + MHAttn(H)); H' = LN(G + FFN(G))`.
pub fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    layer: &LayerParams,
    h: Var,
    layout: &AttnLayout,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let q = linear(g, store, h, layer.q_w, layer.q_b)?;
    let k = linear(g, store, h, layer.k_w, layer.k_b)?;
    let v = linear(g, store, h, layer.v_w, layer.v_b)?;
    let a = g.attention(q, k, v, layout.clone())?;
    let a = linear(g, store, a, layer.o_w, layer.o_b)?;
    let a = dropout.apply(g, a)?;
    let res = g.add(h, a)?;
    let (g1, b1) = (g.param(store, layer.ln1_g)?, g.param(store, layer.ln1_b)?);
    let mid = g.layer_norm(res, g1, b1, LAYER_NORM_EPS)?;
    let f = linear(g, store, mid, layer.ffn_w1, layer.ffn_b1)?;
    let f = g.relu(f);
    let f = linear(g, store, f, layer.ffn_w2, layer.ffn_b2)?;
    let f = dropout.apply(g, f)?;
    let res = g.add(mid, f)?;
    let (g2, b2) = (g.param(store, layer.ln2_g)?, g.param(store, layer.ln2_b)?);
    g.layer_norm(res, g2, b2, LAYER_NORM_EPS)
}

/// Embeds and runs all layers; returns `[batch·seq × d]` hidden states.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncoderParams,
    cfg: &ModelConfig,
    batch: &Batch,
    slot_override: Option<&SlotOverride>,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    if batch.seq > cfg.max_positions {
        return Err(Error::Internal(format!(
            "sequence length {} exceeds {} positions",
            batch.seq, cfg.max_positions
        )));
    }
    let mut h = embed(g, store, enc, batch, slot_override)?;
    let layout = batch.layout(cfg.heads);
    for layer in &enc.layers {
        h = transformer_block(g, store, layer, h, &layout, dropout)?;
    }
    Ok(h)
}
