use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{Batch, Dropout};
use crate::error::{Error, Result};
use crate::heads::Distribution;
use crate::model::DiscourseModel;
use crate::numerics::Graph;
use crate::system::{Encoded, InputBuilder, TrainedSystem};
use crate::text::SequencePair;
use crate::training::Regime;

/// How the classifier's input is formed at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// The regime's own test-time behavior.
    #[default]
    Default,
    /// The annotated connective is inserted; instances without one are skipped.
    FeedTrue,
    /// Arguments only, no slot.
    RemoveConn,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Default, EvalMode::FeedTrue, EvalMode::RemoveConn];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Default => "default",
            EvalMode::FeedTrue => "feed_true",
            EvalMode::RemoveConn => "remove_conn",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Usage(format!(
                "unknown mode {s:?}; expected default, feed_true or remove_conn"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub relation: usize,
    pub rel_probs: Vec<f64>,
    /// Generated connective (argmax of `conn_probs`), when the pass produced one.
    pub connective: Option<usize>,
    pub conn_probs: Option<Vec<f64>>,
    /// Connective placed in the classifier input, if any.
    pub inserted: Option<usize>,
    /// Set when a connective was inserted into a model never trained with one.
    pub interpreted_insertion: bool,
}

/// Inference over encoded instances with dropout off.
pub struct Predictor<'a> {
    pub regime: Regime,
    pub inputs: &'a InputBuilder,
    pub model: &'a DiscourseModel,
    pub generator: Option<&'a DiscourseModel>,
    pub batch_size: usize,
}

impl<'a> Predictor<'a> {
    pub fn new(system: &'a TrainedSystem, batch_size: usize) -> Self {
        Predictor {
            regime: system.regime,
            inputs: &system.inputs,
            model: &system.model,
            generator: system.generator.as_ref(),
            batch_size: batch_size.max(1),
        }
    }

    fn generator(&self) -> &DiscourseModel {
        self.generator.unwrap_or(self.model)
    }

    /// One prediction per item; `None` where the mode does not apply.
    pub fn predict(&self, items: &[Encoded], mode: EvalMode) -> Result<Vec<Option<Prediction>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(self.batch_size) {
            out.extend(self.predict_chunk(chunk, mode)?);
        }
        Ok(out)
    }

    /// Argmax connective of the generator for every item.
    pub fn generate(&self, items: &[Encoded]) -> Result<Vec<Distribution>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(self.batch_size) {
            let seqs = chunk
                .iter()
                .map(|e| self.inputs.masked(e))
                .collect::<Result<Vec<_>>>()?;
            out.extend(slot_distributions(self.generator(), &seqs, self.inputs.vocab.pad())?);
        }
        Ok(out)
    }

    fn classify(&self, seqs: &[SequencePair]) -> Result<Vec<Distribution>> {
        let batch = Batch::new(seqs, self.inputs.vocab.pad())?;
        let mut g = Graph::new();
        let h = self.model.encode(&mut g, &batch, None, &mut Dropout::off())?;
        let l = self.model.relation_logits(&mut g, h, &batch.cls_rows())?;
        Distribution::rows(g.value(l))
    }

    fn predict_chunk(&self, items: &[Encoded], mode: EvalMode) -> Result<Vec<Option<Prediction>>> {
        let inputs = self.inputs;
        let plain = |rel: Distribution, inserted: Option<usize>, interpreted: bool| Prediction {
            relation: rel.argmax(),
            rel_probs: rel.probs,
            connective: None,
            conn_probs: None,
            inserted,
            interpreted_insertion: interpreted,
        };
        match mode {
            EvalMode::RemoveConn => {
                let seqs = items.iter().map(|e| inputs.args(e)).collect::<Result<Vec<_>>>()?;
                Ok(self
                    .classify(&seqs)?
                    .into_iter()
                    .map(|d| Some(plain(d, None, false)))
                    .collect())
            }
            EvalMode::FeedTrue => {
                let present: Vec<(usize, usize)> = items
                    .iter()
                    .enumerate()
                    .filter_map(|(i, e)| e.conn.map(|c| (i, c)))
                    .collect();
                let mut out = vec![None; items.len()];
                if present.is_empty() {
                    return Ok(out);
                }
                let seqs = present
                    .iter()
                    .map(|&(i, c)| inputs.with_connective(&items[i], c))
                    .collect::<Result<Vec<_>>>()?;
                let interpreted = matches!(self.regime, Regime::ArgsOnly | Regime::MultiTask);
                for ((i, c), d) in present.into_iter().zip(self.classify(&seqs)?) {
                    out[i] = Some(plain(d, Some(c), interpreted));
                }
                Ok(out)
            }
            EvalMode::Default => match self.regime {
                Regime::ArgsOnly | Regime::ConnTeacher => self.predict_chunk(items, EvalMode::RemoveConn),
                Regime::MultiTask => {
                    let seqs = items.iter().map(|e| inputs.masked(e)).collect::<Result<Vec<_>>>()?;
                    let batch = Batch::new(&seqs, inputs.vocab.pad())?;
                    let mut g = Graph::new();
                    let h = self.model.encode(&mut g, &batch, None, &mut Dropout::off())?;
                    let lc = self.model.connective_logits(&mut g, h, &batch.slot_rows()?)?;
                    let lr = self.model.relation_logits(&mut g, h, &batch.cls_rows())?;
                    let conns = Distribution::rows(g.value(lc))?;
                    let rels = Distribution::rows(g.value(lr))?;
                    Ok(conns
                        .into_iter()
                        .zip(rels)
                        .map(|(c, r)| {
                            Some(Prediction {
                                connective: Some(c.argmax()),
                                conn_probs: Some(c.probs),
                                ..plain(r, None, false)
                            })
                        })
                        .collect())
                }
                Regime::Joint | Regime::JointNoSs | Regime::JointRelOnly | Regime::Pipeline => {
                    let masked = items.iter().map(|e| inputs.masked(e)).collect::<Result<Vec<_>>>()?;
                    let conns = slot_distributions(self.generator(), &masked, inputs.vocab.pad())?;
                    let seqs = items
                        .iter()
                        .zip(&conns)
                        .map(|(e, c)| inputs.with_connective(e, c.argmax()))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(conns
                        .into_iter()
                        .zip(self.classify(&seqs)?)
                        .map(|(c, r)| {
                            let k = c.argmax();
                            Some(Prediction {
                                connective: Some(k),
                                conn_probs: Some(c.probs),
                                ..plain(r, Some(k), false)
                            })
                        })
                        .collect())
                }
            },
        }
    }
}

fn slot_distributions(model: &DiscourseModel, seqs: &[SequencePair], pad: usize) -> Result<Vec<Distribution>> {
    let batch = Batch::new(seqs, pad)?;
    let mut g = Graph::new();
    let h = model.encode(&mut g, &batch, None, &mut Dropout::off())?;
    let l = model.connective_logits(&mut g, h, &batch.slot_rows()?)?;
    Distribution::rows(g.value(l))
}
