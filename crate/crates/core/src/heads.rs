//! Connective generation head, the Gumbel-Softmax bridge, and the relation head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Init, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Graph, ParamId, ParamStore, Tensor, Var};

/// Probabilities are floored here before taking logs for the Gumbel perturbation.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense(d→d) → ReLU → LayerNorm → projection(d→CN).
#[derive(Clone, Debug, PartialEq)]
pub struct LmHeadParams {
    pub dense_w: ParamId,
    pub dense_b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// `p^r = softmax(h_[CLS] · W + b)`; `W` is stored `[d × RN]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelHeadParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LmHeadParams {
    pub(crate) fn register(init: &mut Init<'_>, d: usize, cn: usize) -> Result<Self> {
        Ok(LmHeadParams {
            dense_w: init.normal("lm.dense.w", &[d, d])?,
            dense_b: init.constant("lm.dense.b", &[d], 0.0)?,
            ln_g: init.constant("lm.ln.gamma", &[d], 1.0)?,
            ln_b: init.constant("lm.ln.beta", &[d], 0.0)?,
            proj_w: init.normal("lm.proj.w", &[d, cn])?,
            proj_b: init.constant("lm.proj.b", &[cn], 0.0)?,
        })
    }
}

impl RelHeadParams {
    pub(crate) fn register(init: &mut Init<'_>, d: usize, rn: usize) -> Result<Self> {
        Ok(RelHeadParams {
            w: init.normal("rel.w", &[d, rn])?,
            b: init.constant("rel.b", &[rn], 0.0)?,
        })
    }
}

/// Generation logits `[rows × CN]` read from the hidden states at `slot_rows`.
pub fn connective_logits(
    g: &mut Graph,
    store: &ParamStore,
    lm: &LmHeadParams,
    hidden: Var,
    slot_rows: &[usize],
) -> Result<Var> {
    let h = g.gather_rows(hidden, slot_rows)?;
    let w = g.param(store, lm.dense_w)?;
    let b = g.param(store, lm.dense_b)?;
    let x = g.matmul(h, w)?;
    let x = g.add_row(x, b)?;
    let x = g.relu(x);
    let (lg, lb) = (g.param(store, lm.ln_g)?, g.param(store, lm.ln_b)?);
    let x = g.layer_norm(x, lg, lb, LAYER_NORM_EPS)?;
    let pw = g.param(store, lm.proj_w)?;
    let pb = g.param(store, lm.proj_b)?;
    let x = g.matmul(x, pw)?;
    g.add_row(x, pb)
}

/// Relation logits `[rows × RN]` read from the hidden states at `cls_rows`.
pub fn relation_logits(
    g: &mut Graph,
    store: &ParamStore,
    rel: &RelHeadParams,
    hidden: Var,
    cls_rows: &[usize],
) -> Result<Var> {
    let h = g.gather_rows(hidden, cls_rows)?;
    let w = g.param(store, rel.w)?;
    let b = g.param(store, rel.b)?;
    let x = g.matmul(h, w)?;
    g.add_row(x, b)
}

/// A categorical distribution read off one row of logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let mut probs = logits.to_vec();
        softmax_in_place(&mut probs)?;
        Ok(Distribution {
            logits: logits.to_vec(),
            probs,
        })
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// One distribution per row of a logits tensor.
    pub fn rows(logits: &Tensor) -> Result<Vec<Self>> {
        (0..logits.rows()).map(|r| Self::from_logits(logits.row(r))).collect()
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `g = -ln(-ln ξ)`, `ξ ~ U(0,1)` with ξ = 0 redrawn.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let xi = loop {
                let u: f64 = rng.gen();
                if u > 0.0 {
                    break u;
                }
            };
            -(-xi.ln()).ln()
        })
        .collect()
}

/// Relaxed one-hot sample over connectives with the noise that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftConnective {
    pub weights: Vec<f64>,
    pub tau: f64,
    pub gumbel: Vec<f64>,
}

impl SoftConnective {
    /// Hard decision `argmax(log p + g)`, independent of the temperature.
    pub fn hard(&self) -> usize {
        argmax(&self.weights)
    }

    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|c| c * c.ln())
            .sum::<f64>()
    }
}

/// `c_i = exp((ln p_i + g_i)/τ) / Σ_j exp((ln p_j + g_j)/τ)` on plain vectors.
pub fn gumbel_softmax(probs: &[f64], tau: f64, gumbel: &[f64]) -> Result<SoftConnective> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if probs.len() != gumbel.len() {
        return Err(Error::dim("gumbel_softmax", &[probs.len()], &[gumbel.len()]));
    }
    let mut w: Vec<f64> = probs
        .iter()
        .zip(gumbel)
        .map(|(p, g)| (p.max(PROB_FLOOR).ln() + g) / tau)
        .collect();
    softmax_in_place(&mut w)?;
    Ok(SoftConnective {
        weights: w,
        tau,
        gumbel: gumbel.to_vec(),
    })
}

/// The same relaxation recorded on a graph, differentiable in `probs` with the
/// Gumbel draws `[rows × CN]` held fixed.
pub fn gumbel_softmax_graph(g: &mut Graph, probs: Var, tau: f64, gumbel: Tensor) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let logp = g.ln_floor(probs, PROB_FLOOR);
    let noise = g.constant(gumbel);
    let x = g.add(logp, noise)?;
    let x = g.scale(x, 1.0 / tau);
    g.softmax(x)
}

/// `cᵀ · E_conn`: expected connective embedding under the relaxed sample.
pub fn soft_connective_embedding(g: &mut Graph, weights: Var, conn_embeddings: Var) -> Result<Var> {
    g.matmul(weights, conn_embeddings)
}
