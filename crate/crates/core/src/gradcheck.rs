//! Finite-difference verification of the full joint loss on a tiny model.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{filter_connectives, generate_synthetic, SynthConfig};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::heads::sample_gumbel;
use crate::model::DiscourseModel;
use crate::numerics::{finite_difference_check, GradCheckOptions, GradCheckReport, Precision, Tensor};
use crate::system::{build_vocabulary, encode_records, Encoded, InputBuilder};
use crate::training::{build_loss, Branch, Objective, Regime, StepNoise, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointGradCheckConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub connectives: usize,
    pub relations: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub init_std: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for JointGradCheckConfig {
    fn default() -> Self {
        JointGradCheckConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            connectives: 4,
            relations: 3,
            batch_size: 3,
            tau: 1.0,
            init_std: 0.3,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl JointGradCheckConfig {
    /// Pass threshold on the maximum relative error.
    pub fn threshold(&self) -> f64 {
        match self.precision {
            Precision::F64 => 1e-4,
            Precision::F32 => 1e-2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BranchCheck {
    pub branch: Branch,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct JointGradCheck {
    pub config: JointGradCheckConfig,
    pub parameters: usize,
    pub branches: Vec<BranchCheck>,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
    pub seconds: f64,
}

/// Checks the gradient of the joint loss (both branches of the second pass)
/// against central differences, with Gumbel draws frozen and dropout off.
///
/// Differences are always taken on the f64 loss: at f32 they would be swamped
/// by rounding noise long before `h` is small enough to step over no ReLU kink.
/// An f32 run therefore measures how far the single-precision gradient is from
/// the exact one.
pub fn run_joint_gradcheck(cfg: &JointGradCheckConfig) -> Result<JointGradCheck> {
    let start = Instant::now();
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let corpus = generate_synthetic(&SynthConfig {
        vocab_size: 10,
        num_relations: cfg.relations,
        num_connectives: cfg.connectives,
        min_arg_len: 1,
        max_arg_len: 3,
        kappa: 0.5,
        num_train: 64,
        num_dev: 0,
        num_test: 0,
        seed: cfg.seed,
        ..SynthConfig::default()
    })?;
    let conns = filter_connectives(&corpus.train, 1)?.vocab;
    let vocab = build_vocabulary(&corpus.train, &conns);
    let items = encode_records(&corpus.train, &vocab, &conns, &corpus.schema)?;
    let batch: Vec<&Encoded> = items.iter().take(cfg.batch_size).collect();
    let inputs = InputBuilder {
        conn_ids: conns.token_ids(&vocab)?,
        vocab,
        max_seq_len: 16,
    };
    let model_cfg = TrainConfig {
        hidden: cfg.hidden,
        layers: cfg.layers,
        heads: cfg.heads,
        max_seq_len: inputs.max_seq_len,
        dropout: 0.0,
        init_std: cfg.init_std,
        ..TrainConfig::default()
    }
    .model_config(inputs.vocab.len(), conns.len(), corpus.schema.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DiscourseModel::new(model_cfg, inputs.conn_ids.clone(), "", &mut rng)?;
    model.init_connective_embeddings(&inputs.vocab, &conns);
    let gumbel = Tensor::new(
        vec![batch.len(), conns.len()],
        sample_gumbel(&mut rng, batch.len() * conns.len()),
    )?;

    let loss = |model: &DiscourseModel, branch: Branch, precision: Precision| {
        let noise = StepNoise {
            branch,
            gumbel: &gumbel,
            tau: cfg.tau,
            dropout: Dropout::off(),
        };
        build_loss(
            Objective::Relation(Regime::Joint),
            &inputs,
            model,
            &batch,
            noise,
            precision,
        )?
        .ok_or_else(|| Error::Data("gradient check batch has no training signal".into()))
    };
    let options = GradCheckOptions {
        h: 1e-5,
        denom_floor: 1e-3,
        stride: 1,
    };
    let mut branches = Vec::new();
    for branch in [Branch::Generated, Branch::Annotated] {
        let lg = loss(&model, branch, cfg.precision)?;
        let analytic = lg.graph.param_grads(&model.store, &lg.graph.backward(lg.loss)?);
        let mut store = model.store.clone();
        let report = finite_difference_check(&mut store, &analytic, &options, |s| {
            let probe = DiscourseModel {
                store: s.clone(),
                ..model.clone()
            };
            let lg = loss(&probe, branch, Precision::F64)?;
            Ok(lg.scalar(lg.loss))
        })?;
        model.store = store;
        branches.push(BranchCheck { branch, report });
    }
    let max_rel_error = branches.iter().map(|b| b.report.max_rel_error).fold(0.0, f64::max);
    let threshold = cfg.threshold();
    Ok(JointGradCheck {
        config: cfg.clone(),
        parameters: model.store.num_scalars(),
        passed: branches.iter().all(|b| b.report.passed(threshold)),
        branches,
        max_rel_error,
        threshold,
        seconds: start.elapsed().as_secs_f64(),
    })
}
