//! Prediction modes, metrics, connective-correctness groups and multi-seed comparisons.

pub mod metrics;
mod predict;

use serde::{Deserialize, Serialize};

pub use metrics::{group_analysis, score, GroupReport, GroupStats, MetricsReport, RelationRow};
pub use predict::{EvalMode, Prediction, Predictor};

use crate::data::{InstanceRecord, RelationSchema};
use crate::error::Result;
use crate::system::TrainedSystem;
use crate::training::{train, Regime, TrainConfig};

/// Predicts and scores `records` under `mode`.
pub fn evaluate(
    system: &TrainedSystem,
    records: &[InstanceRecord],
    mode: EvalMode,
    batch_size: usize,
) -> Result<(Vec<Option<Prediction>>, MetricsReport)> {
    let items = system.encode(records)?;
    let preds = Predictor::new(system, batch_size).predict(&items, mode)?;
    let report = score(&preds, &items, &system.schema.relations)?;
    Ok((preds, report))
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    pub base: TrainConfig,
    pub mode: EvalMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub regime: Regime,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub regime: Regime,
    /// Successful runs behind the statistics.
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
    pub runs: Vec<RunSummary>,
}

impl MatrixReport {
    pub fn row(&self, regime: Regime) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.regime == regime)
    }

    pub fn render_table(&self) -> String {
        let mut s = format!("{:<16} {:>4} {:>16} {:>16}\n", "regime", "runs", "accuracy", "macro-F1");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<16} {:>4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}\n",
                r.regime.name(),
                r.runs,
                r.acc_mean,
                r.acc_std,
                r.f1_mean,
                r.f1_std
            ));
        }
        for run in self.runs.iter().filter(|r| r.error.is_some()) {
            s.push_str(&format!(
                "failed: {} seed {}: {}\n",
                run.regime,
                run.seed,
                run.error.as_deref().unwrap_or_default()
            ));
        }
        s
    }
}

/// Trains every regime under every seed and aggregates test scores.
/// A failing run is recorded and left out of the statistics.
pub fn run_experiment_matrix(
    train_set: &[InstanceRecord],
    dev: &[InstanceRecord],
    test: &[InstanceRecord],
    schema: &RelationSchema,
    cfg: &MatrixConfig,
) -> MatrixReport {
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &regime in &cfg.regimes {
        let (mut accs, mut f1s) = (Vec::new(), Vec::new());
        for &seed in &cfg.seeds {
            let tc = TrainConfig {
                regime,
                seed,
                ..cfg.base.clone()
            };
            let result = train(train_set, dev, schema, &tc)
                .and_then(|o| evaluate(&o.system, test, cfg.mode, tc.eval_batch_size));
            let summary = match result {
                Ok((_, m)) => {
                    accs.push(m.accuracy);
                    f1s.push(m.macro_f1);
                    RunSummary {
                        regime,
                        seed,
                        accuracy: Some(m.accuracy),
                        macro_f1: Some(m.macro_f1),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("{regime} seed {seed} failed: {e}");
                    RunSummary {
                        regime,
                        seed,
                        accuracy: None,
                        macro_f1: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            runs.push(summary);
        }
        let (acc_mean, acc_std) = mean_std(&accs);
        let (f1_mean, f1_std) = mean_std(&f1s);
        rows.push(MatrixRow {
            regime,
            runs: accs.len(),
            acc_mean,
            acc_std,
            f1_mean,
            f1_std,
        });
    }
    MatrixReport { rows, runs }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_statistics() {
        let (m, s) = mean_std(&[0.4, 0.5, 0.6]);
        assert!((m - 0.5).abs() < 1e-15);
        assert!((s - (0.02f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}
