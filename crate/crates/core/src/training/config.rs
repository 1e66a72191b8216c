use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, Precision};

/// Training regime: the joint model, its ablations, and the baselines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Generate a connective, then classify with it inserted.
    #[default]
    Joint,
    /// Classify from the two arguments alone.
    ArgsOnly,
    /// Train with the annotated connective inserted; test on arguments alone.
    ConnTeacher,
    /// Separately trained generator feeding a separately trained classifier.
    Pipeline,
    /// One masked pass with both heads; no connective is ever inserted.
    MultiTask,
    /// Joint, always using the generated connective.
    JointNoSs,
    /// Joint without the connective loss, always using the generated connective.
    JointRelOnly,
}

impl Regime {
    pub const ALL: [Regime; 7] = [
        Regime::Joint,
        Regime::ArgsOnly,
        Regime::ConnTeacher,
        Regime::Pipeline,
        Regime::MultiTask,
        Regime::JointNoSs,
        Regime::JointRelOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Joint => "joint",
            Regime::ArgsOnly => "args_only",
            Regime::ConnTeacher => "conn_teacher",
            Regime::Pipeline => "pipeline",
            Regime::MultiTask => "multi_task",
            Regime::JointNoSs => "joint_no_ss",
            Regime::JointRelOnly => "joint_rel_only",
        }
    }

    /// Whether the regime generates connectives through the Gumbel bridge.
    pub fn is_joint(self) -> bool {
        matches!(self, Regime::Joint | Regime::JointNoSs | Regime::JointRelOnly)
    }

    /// Whether the model has a trained connective generator.
    pub fn generates(self) -> bool {
        !matches!(self, Regime::ArgsOnly | Regime::ConnTeacher)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Regime::ALL.iter().map(|r| r.name()).collect();
            Error::Usage(format!("unknown regime {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Every knob of a training run. Defaults follow the reference recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub max_grad_norm: f64,
    pub max_seq_len: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// Decay constant of the scheduled-sampling probability.
    pub k: f64,
    /// Connectives seen fewer times in training are dropped from the inventory.
    pub min_conn_freq: usize,
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub precision: Precision,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Joint,
            lr: 1e-5,
            batch_size: 16,
            weight_decay: 0.1,
            epochs: 10,
            warmup_ratio: 0.06,
            max_grad_norm: 2.0,
            max_seq_len: 256,
            tau: 1.0,
            k: 100.0,
            min_conn_freq: 100,
            seed: 0,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            init_std: 0.02,
            precision: Precision::F64,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.k >= 1.0) {
            return Err(Error::Config(format!("k must be >= 1, got {}", self.k)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, num_connectives: usize, num_relations: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            max_positions: self.max_seq_len,
            vocab_size,
            num_connectives,
            num_relations,
            dropout: self.dropout,
            init_std: self.init_std,
        }
    }

    pub fn optimizer(&self, total_steps: u64) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_ratio: self.warmup_ratio,
            total_steps,
            ..AdamWConfig::default()
        }
    }
}

/// Probability of feeding the annotated connective at global step `t`:
/// `k / (k + exp(t / k))`.
pub fn scheduled_sampling_epsilon(t: f64, k: f64) -> f64 {
    let x = t / k;
    if x > 700.0 {
        return 0.0;
    }
    k / (k + x.exp())
}
