use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{filter_connectives, InstanceRecord, RelationSchema};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::eval::{metrics, EvalMode, Predictor};
use crate::heads::sample_gumbel;
use crate::model::DiscourseModel;
use crate::numerics::{clip_global_norm, AdamW, Tensor};
use crate::system::{build_vocabulary, encode_records, Encoded, InputBuilder, TrainedSystem, GENERATOR_PREFIX};
use crate::training::step::{build_loss, Branch, Objective, StepNoise};
use crate::training::{scheduled_sampling_epsilon, Regime, TrainConfig};

/// One optimizer step, as written to the training journal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: u64,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch: Option<Branch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_conn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_rel: Option<f64>,
    pub conn_in_objective: bool,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
    /// Relation accuracy, or connective accuracy for a generator stage.
    pub dev_score: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev score.
    pub system: TrainedSystem,
    pub journal: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Independent random streams so that, e.g., dropout draws never shift the shuffle.
struct Streams {
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
    gumbel: ChaCha8Rng,
    branch: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            shuffle: stream(seed, 1),
            dropout: stream(seed, 2),
            gumbel: stream(seed, 3),
            branch: stream(seed, 4),
        }
    }
}

/// Builds vocabularies from `train`, initializes the regime's model(s) and trains them.
pub fn train(
    train: &[InstanceRecord],
    dev: &[InstanceRecord],
    schema: &RelationSchema,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let filtered = filter_connectives(train, cfg.min_conn_freq)?;
    if !filtered.out_of_vocab.is_empty() {
        log::info!(
            "{} training instances have a connective outside the inventory",
            filtered.out_of_vocab.len()
        );
    }
    let conns = filtered.vocab;
    let vocab = build_vocabulary(train, &conns);
    let train_items = encode_records(train, &vocab, &conns, schema)?;
    let dev_items = encode_records(dev, &vocab, &conns, schema)?;
    let conn_ids = conns.token_ids(&vocab)?;
    let model_cfg = cfg.model_config(vocab.len(), conns.len(), schema.len());
    let mut init_rng = stream(cfg.seed, 0);
    let mut new_model = |prefix: &str| -> Result<DiscourseModel> {
        let mut m = DiscourseModel::new(model_cfg.clone(), conn_ids.clone(), prefix, &mut init_rng)?;
        m.init_connective_embeddings(&vocab, &conns);
        Ok(m)
    };
    let generator = if cfg.regime == Regime::Pipeline {
        Some(new_model(GENERATOR_PREFIX)?)
    } else {
        None
    };
    let model = new_model("")?;
    let mut system = TrainedSystem {
        regime: cfg.regime,
        inputs: InputBuilder {
            vocab,
            conn_ids,
            max_seq_len: cfg.max_seq_len,
        },
        connectives: conns,
        schema: schema.clone(),
        model,
        generator,
    };
    let mut streams = Streams::new(cfg.seed);
    let mut journal = Vec::new();
    let mut epochs = Vec::new();
    let relations = system.schema.relations.clone();

    if let Some(gen) = system.generator.as_mut() {
        let stage = Stage {
            name: "generator",
            objective: Objective::Generator,
            inputs: &system.inputs,
            cfg,
        };
        stage.run(
            gen,
            None,
            &train_items,
            &dev_items,
            &relations,
            &mut streams,
            &mut journal,
            &mut epochs,
        )?;
        // the classifier learns from the generator's own outputs
        let predictor = Predictor {
            regime: Regime::Pipeline,
            inputs: &system.inputs,
            model: gen,
            generator: None,
            batch_size: cfg.eval_batch_size,
        };
        let generated = predictor.generate(&train_items)?;
        let stage2_items: Vec<Encoded> = train_items
            .iter()
            .zip(generated)
            .map(|(e, d)| Encoded {
                conn: Some(d.argmax()),
                ..e.clone()
            })
            .collect();
        let stage = Stage {
            name: "classifier",
            objective: Objective::Relation(Regime::Pipeline),
            inputs: &system.inputs,
            cfg,
        };
        stage.run(
            &mut system.model,
            system.generator.as_ref(),
            &stage2_items,
            &dev_items,
            &relations,
            &mut streams,
            &mut journal,
            &mut epochs,
        )?;
    } else {
        let stage = Stage {
            name: cfg.regime.name(),
            objective: Objective::Relation(cfg.regime),
            inputs: &system.inputs,
            cfg,
        };
        stage.run(
            &mut system.model,
            None,
            &train_items,
            &dev_items,
            &relations,
            &mut streams,
            &mut journal,
            &mut epochs,
        )?;
    }
    Ok(TrainOutcome {
        system,
        journal,
        epochs,
    })
}

struct Stage<'a> {
    name: &'a str,
    objective: Objective,
    inputs: &'a InputBuilder,
    cfg: &'a TrainConfig,
}

impl Stage<'_> {
    fn dev_score(
        &self,
        model: &DiscourseModel,
        generator: Option<&DiscourseModel>,
        dev: &[Encoded],
        relations: &[String],
    ) -> Result<Option<f64>> {
        if dev.is_empty() {
            return Ok(None);
        }
        let regime = match self.objective {
            Objective::Relation(r) => r,
            Objective::Generator => Regime::Pipeline,
        };
        let predictor = Predictor {
            regime,
            inputs: self.inputs,
            model,
            generator,
            batch_size: self.cfg.eval_batch_size,
        };
        match self.objective {
            Objective::Generator => {
                let with_conn: Vec<Encoded> = dev.iter().filter(|e| e.conn.is_some()).cloned().collect();
                if with_conn.is_empty() {
                    return Ok(None);
                }
                let gen = predictor.generate(&with_conn)?;
                let hits = gen
                    .iter()
                    .zip(&with_conn)
                    .filter(|(d, e)| Some(d.argmax()) == e.conn)
                    .count();
                Ok(Some(hits as f64 / with_conn.len() as f64))
            }
            Objective::Relation(_) => {
                let preds = predictor.predict(dev, EvalMode::Default)?;
                Ok(Some(metrics::score(&preds, dev, relations)?.accuracy))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        model: &mut DiscourseModel,
        generator: Option<&DiscourseModel>,
        items: &[Encoded],
        dev: &[Encoded],
        relations: &[String],
        streams: &mut Streams,
        journal: &mut Vec<StepRecord>,
        epochs: &mut Vec<EpochRecord>,
    ) -> Result<()> {
        let cfg = self.cfg;
        let per_epoch = items.len().div_ceil(cfg.batch_size);
        let mut opt = AdamW::new(cfg.optimizer((per_epoch * cfg.epochs) as u64), &model.store)?;
        let cn = model.config.num_connectives;
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut best: Option<(f64, crate::numerics::ParamStore)> = None;
        let mut t: u64 = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut streams.shuffle);
            let mut loss_sum = 0.0;
            let mut steps = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Encoded> = chunk.iter().map(|&i| &items[i]).collect();
                let epsilon = match self.objective {
                    Objective::Relation(Regime::Joint) => Some(scheduled_sampling_epsilon(t as f64, cfg.k)),
                    Objective::Relation(Regime::JointNoSs | Regime::JointRelOnly) => Some(0.0),
                    _ => None,
                };
                let branch = epsilon.map(|e| {
                    if streams.branch.gen::<f64>() < e {
                        Branch::Annotated
                    } else {
                        Branch::Generated
                    }
                });
                let gumbel = Tensor::new(
                    vec![batch.len(), cn],
                    sample_gumbel(&mut streams.gumbel, batch.len() * cn),
                )?;
                let noise = StepNoise {
                    branch: branch.unwrap_or(Branch::Generated),
                    gumbel: &gumbel,
                    tau: cfg.tau,
                    dropout: Dropout::train(cfg.dropout, &mut streams.dropout),
                };
                t += 1;
                let Some(lg) = build_loss(self.objective, self.inputs, model, &batch, noise, cfg.precision)? else {
                    log::debug!("{}: step {t} has no training signal; skipped", self.name);
                    continue;
                };
                let loss = lg.scalar(lg.loss);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{} stage: non-finite loss {loss} at step {} (epoch {}, batch of {})",
                        self.name,
                        t - 1,
                        epoch,
                        batch.len()
                    )));
                }
                let mut grads = lg.graph.param_grads(&model.store, &lg.graph.backward(lg.loss)?);
                let grad_norm = clip_global_norm(&mut grads, cfg.max_grad_norm);
                if !grad_norm.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{} stage: non-finite gradient at step {}",
                        self.name,
                        t - 1
                    )));
                }
                let lr = opt.step(&mut model.store, &grads)?;
                loss_sum += loss;
                steps += 1;
                journal.push(StepRecord {
                    stage: self.name.to_string(),
                    step: t - 1,
                    epoch,
                    epsilon,
                    branch,
                    l_conn: lg.l_conn.map(|v| lg.scalar(v)),
                    l_rel: lg.l_rel.map(|v| lg.scalar(v)),
                    conn_in_objective: lg.conn_in_objective,
                    loss,
                    lr,
                    grad_norm,
                    batch_size: batch.len(),
                });
            }
            let dev_score = self.dev_score(model, generator, dev, relations)?;
            log::info!(
                "{} epoch {epoch}: mean loss {:.4}, dev {}",
                self.name,
                loss_sum / steps.max(1) as f64,
                dev_score.map_or("n/a".to_string(), |s| format!("{s:.4}"))
            );
            epochs.push(EpochRecord {
                stage: self.name.to_string(),
                epoch,
                mean_loss: loss_sum / steps.max(1) as f64,
                dev_score,
            });
            // without a dev score the last epoch wins
            let score = dev_score.unwrap_or(f64::INFINITY);
            if best.as_ref().is_none_or(|(b, _)| score > *b || dev_score.is_none()) {
                best = Some((score, model.store.clone()));
            }
        }
        if let Some((_, store)) = best {
            model.store = store;
        }
        Ok(())
    }
}
