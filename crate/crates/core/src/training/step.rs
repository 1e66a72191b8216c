//! Loss graphs for one mini-batch under each objective.

use serde::{Deserialize, Serialize};

use crate::encoder::{Batch, Dropout, SlotOverride};
use crate::error::Result;
use crate::heads::{gumbel_softmax_graph, soft_connective_embedding};
use crate::model::DiscourseModel;
use crate::numerics::{Graph, Precision, Tensor, Var};
use crate::system::{Encoded, InputBuilder};
use crate::text::SequencePair;
use crate::training::Regime;

/// Which connective fills the slot of the second pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Annotated,
    Generated,
}

/// What a training stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// The relation-level objective of a regime.
    Relation(Regime),
    /// Connective prediction alone (first pipeline stage).
    Generator,
}

/// Per-step randomness, drawn by the caller so it can be frozen.
pub struct StepNoise<'a> {
    pub branch: Branch,
    /// `[batch × CN]` Gumbel draws.
    pub gumbel: &'a Tensor,
    pub tau: f64,
    pub dropout: Dropout<'a>,
}

pub struct LossGraph {
    pub graph: Graph,
    pub loss: Var,
    pub l_conn: Option<Var>,
    pub l_rel: Option<Var>,
    /// False when the connective loss is only reported.
    pub conn_in_objective: bool,
}

impl LossGraph {
    pub fn scalar(&self, v: Var) -> f64 {
        self.graph.value(v).data()[0]
    }
}

fn first_labels(items: &[&Encoded]) -> Vec<usize> {
    items.iter().map(|e| e.labels[0]).collect()
}

/// Cross-entropy of the generation logits over the rows with an annotated connective.
fn connective_loss(g: &mut Graph, logits: Var, items: &[&Encoded]) -> Result<Option<Var>> {
    let (rows, targets): (Vec<usize>, Vec<usize>) = items
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.conn.map(|c| (i, c)))
        .unzip();
    if rows.is_empty() {
        return Ok(None);
    }
    let sel = g.gather_rows(logits, &rows)?;
    g.cross_entropy(sel, &targets).map(Some)
}

fn relation_loss(
    g: &mut Graph,
    model: &DiscourseModel,
    seqs: &[SequencePair],
    slot_override: Option<&SlotOverride>,
    dropout: &mut Dropout<'_>,
    items: &[&Encoded],
    pad: usize,
) -> Result<Var> {
    let batch = Batch::new(seqs, pad)?;
    let h = model.encode(g, &batch, slot_override, dropout)?;
    let logits = model.relation_logits(g, h, &batch.cls_rows())?;
    g.cross_entropy(logits, &first_labels(items))
}

/// Builds the loss for `items`; `None` when the batch carries no training signal
/// for the objective (a generator batch without any annotated connective).
pub fn build_loss(
    objective: Objective,
    inputs: &InputBuilder,
    model: &DiscourseModel,
    items: &[&Encoded],
    noise: StepNoise<'_>,
    precision: Precision,
) -> Result<Option<LossGraph>> {
    let mut g = Graph::with_precision(precision);
    let pad = inputs.vocab.pad();
    let StepNoise {
        branch,
        gumbel,
        tau,
        mut dropout,
    } = noise;
    let regime = match objective {
        Objective::Generator => {
            let seqs = items.iter().map(|e| inputs.masked(e)).collect::<Result<Vec<_>>>()?;
            let batch = Batch::new(&seqs, pad)?;
            let h = model.encode(&mut g, &batch, None, &mut dropout)?;
            let logits = model.connective_logits(&mut g, h, &batch.slot_rows()?)?;
            return Ok(connective_loss(&mut g, logits, items)?.map(|l| LossGraph {
                graph: g,
                loss: l,
                l_conn: Some(l),
                l_rel: None,
                conn_in_objective: true,
            }));
        }
        Objective::Relation(r) => r,
    };
    let (l_conn, l_rel, conn_in_objective) = match regime {
        Regime::ArgsOnly => {
            let seqs = items.iter().map(|e| inputs.args(e)).collect::<Result<Vec<_>>>()?;
            let l = relation_loss(&mut g, model, &seqs, None, &mut dropout, items, pad)?;
            (None, l, false)
        }
        Regime::ConnTeacher | Regime::Pipeline => {
            let seqs = items
                .iter()
                .map(|e| match e.conn {
                    Some(c) => inputs.with_connective(e, c),
                    None => inputs.args(e),
                })
                .collect::<Result<Vec<_>>>()?;
            let l = relation_loss(&mut g, model, &seqs, None, &mut dropout, items, pad)?;
            (None, l, false)
        }
        Regime::MultiTask => {
            let seqs = items.iter().map(|e| inputs.masked(e)).collect::<Result<Vec<_>>>()?;
            let batch = Batch::new(&seqs, pad)?;
            let h = model.encode(&mut g, &batch, None, &mut dropout)?;
            let lc = model.connective_logits(&mut g, h, &batch.slot_rows()?)?;
            let lc = connective_loss(&mut g, lc, items)?;
            let lr = model.relation_logits(&mut g, h, &batch.cls_rows())?;
            let lr = g.cross_entropy(lr, &first_labels(items))?;
            (lc, lr, true)
        }
        Regime::Joint | Regime::JointNoSs | Regime::JointRelOnly => {
            let masked = items.iter().map(|e| inputs.masked(e)).collect::<Result<Vec<_>>>()?;
            let mb = Batch::new(&masked, pad)?;
            let h1 = model.encode(&mut g, &mb, None, &mut dropout)?;
            let logits_c = model.connective_logits(&mut g, h1, &mb.slot_rows()?)?;
            let lc = connective_loss(&mut g, logits_c, items)?;

            let annotated: Vec<Option<usize>> = items
                .iter()
                .map(|e| if branch == Branch::Annotated { e.conn } else { None })
                .collect();
            let seqs = items
                .iter()
                .zip(&annotated)
                .map(|(e, a)| match a {
                    Some(c) => inputs.with_connective(e, *c),
                    // placeholder token; its embedding is replaced below
                    None => inputs.masked(e),
                })
                .collect::<Result<Vec<_>>>()?;
            let cb = Batch::new(&seqs, pad)?;
            let generated: Vec<usize> = (0..items.len()).filter(|&i| annotated[i].is_none()).collect();
            let slot_override = if generated.is_empty() {
                None
            } else {
                let probs = g.softmax(logits_c)?;
                let probs = g.gather_rows(probs, &generated)?;
                let cn = gumbel.cols();
                let rows: Vec<f64> = generated.iter().flat_map(|&i| gumbel.row(i).to_vec()).collect();
                let draws = Tensor::new(vec![generated.len(), cn], rows)?;
                let weights = gumbel_softmax_graph(&mut g, probs, tau, draws)?;
                let table = model.connective_embeddings(&mut g)?;
                let vectors = soft_connective_embedding(&mut g, weights, table)?;
                let rows = generated
                    .iter()
                    .map(|&i| cb.slots[i].map(|s| cb.row(i, s)))
                    .collect::<Option<Vec<_>>>()
                    .expect("every joint input has a slot");
                Some(SlotOverride { rows, vectors })
            };
            let h2 = model.encode(&mut g, &cb, slot_override.as_ref(), &mut dropout)?;
            let lr = model.relation_logits(&mut g, h2, &cb.cls_rows())?;
            let lr = g.cross_entropy(lr, &first_labels(items))?;
            (lc, lr, regime != Regime::JointRelOnly)
        }
    };
    let loss = match l_conn {
        Some(lc) if conn_in_objective => g.add(lc, l_rel)?,
        _ => l_rel,
    };
    Ok(Some(LossGraph {
        graph: g,
        loss,
        l_conn,
        l_rel: Some(l_rel),
        conn_in_objective,
    }))
}
