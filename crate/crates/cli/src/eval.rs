use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use conngen::data::load_corpus;
use conngen::eval::metrics::confusion_csv;
use conngen::eval::{evaluate, group_analysis, EvalMode, GroupReport, MetricsReport, Prediction};
use conngen::system::TrainedSystem;
use serde::Serialize;

use crate::manifest::{write_json, RunManifest, CHECKPOINT};
use crate::require_path;

#[derive(Args)]
pub struct RunInput {
    /// Run directory written by `conngen train`.
    #[arg(long)]
    run: PathBuf,
    /// Test corpus; defaults to test.jsonl in the run's data directory.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Evaluate even if the test corpus differs from the one recorded at training time.
    #[arg(long)]
    allow_checksum_mismatch: bool,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Report directory; defaults to a subdirectory of the run.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    input: RunInput,
    #[arg(long, default_value = "default", value_parser = parse_mode)]
    mode: EvalMode,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    input: RunInput,
    /// A second run whose default-mode predictions the connective groups are compared against.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    s.parse().map_err(|e: conngen::Error| e.to_string())
}

struct Loaded {
    system: TrainedSystem,
    records: Vec<conngen::data::InstanceRecord>,
}

impl RunInput {
    fn load(&self) -> Result<Loaded> {
        let manifest = RunManifest::load(&self.run)?;
        let test = match &self.test {
            Some(p) => p.clone(),
            None => manifest.data_dir.join("test.jsonl"),
        };
        require_path(&test, "test corpus")?;
        manifest.verify(&test, self.allow_checksum_mismatch)?;
        let system = TrainedSystem::load(&self.run.join(CHECKPOINT))?;
        let records = load_corpus(&test, &system.schema)?;
        Ok(Loaded { system, records })
    }

    fn out_dir(&self, default: &str) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| self.run.join(default));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn render_metrics(title: &str, m: &MetricsReport) -> String {
    let mut s = format!("{title}: n={} skipped={}\n", m.n, m.skipped);
    let _ = writeln!(s, "accuracy  {:.4}", m.accuracy);
    let _ = writeln!(s, "macro-F1  {:.4}", m.macro_f1);
    if let Some(c) = m.conn_accuracy {
        let _ = writeln!(s, "connective accuracy {c:.4}");
    }
    let _ = writeln!(
        s,
        "{:<24} {:>9} {:>9} {:>9} {:>8}",
        "relation", "precision", "recall", "F1", "support"
    );
    for r in &m.per_relation {
        let note = if r.zero_support { "  (no support)" } else { "" };
        let _ = writeln!(
            s,
            "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>8}{note}",
            r.relation, r.precision, r.recall, r.f1, r.support
        );
    }
    s
}

fn write_predictions(path: &Path, preds: &[Option<Prediction>], ids: &[String]) -> Result<()> {
    let mut text = String::new();
    for (id, p) in ids.iter().zip(preds) {
        text.push_str(&serde_json::to_string(
            &serde_json::json!({ "id": id, "prediction": p }),
        )?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    let Loaded { system, records } = args.input.load()?;
    let (preds, report) = evaluate(&system, &records, args.mode, args.input.batch_size)?;
    let dir = args.input.out_dir(&format!("eval-{}", args.mode))?;
    write_json(&dir.join("metrics.json"), &report)?;
    let table = render_metrics(&format!("{} / {}", system.regime, args.mode), &report);
    fs::write(dir.join("metrics.txt"), &table)?;
    fs::write(
        dir.join("confusion.csv"),
        confusion_csv(&report.confusion, &system.schema.relations),
    )?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    write_predictions(&dir.join("predictions.jsonl"), &preds, &ids)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct ModeResult {
    mode: EvalMode,
    metrics: MetricsReport,
    /// A connective was inserted into a model that never saw one in training.
    interpreted_insertion: bool,
}

#[derive(Serialize)]
struct Analysis {
    regime: String,
    modes: Vec<ModeResult>,
    groups: GroupReport,
    baseline_regime: Option<String>,
}

pub fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let Loaded { system, records } = args.input.load()?;
    let bs = args.input.batch_size;
    let mut modes = Vec::new();
    let mut default_preds = Vec::new();
    for mode in EvalMode::ALL {
        let (preds, metrics) = evaluate(&system, &records, mode, bs)?;
        let interpreted_insertion = preds.iter().flatten().any(|p| p.interpreted_insertion);
        if mode == EvalMode::Default {
            default_preds = preds;
        }
        modes.push(ModeResult {
            mode,
            metrics,
            interpreted_insertion,
        });
    }
    let baseline = match &args.baseline {
        Some(dir) => {
            let b = TrainedSystem::load(&dir.join(CHECKPOINT))?;
            let (preds, _) = evaluate(&b, &records, EvalMode::Default, bs)?;
            Some((b.regime, preds))
        }
        None => None,
    };
    let items = system.encode(&records)?;
    let groups = group_analysis(&default_preds, &items, baseline.as_ref().map(|(_, p)| p.as_slice()))?;
    let analysis = Analysis {
        regime: system.regime.to_string(),
        modes,
        groups,
        baseline_regime: baseline.map(|(r, _)| r.to_string()),
    };

    let dir = args.input.out_dir("analysis")?;
    write_json(&dir.join("analysis.json"), &analysis)?;
    let text = render_analysis(&analysis);
    fs::write(dir.join("analysis.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn render_analysis(a: &Analysis) -> String {
    let base = &a.modes[0].metrics;
    let mut s = format!("{}\n", a.regime);
    let _ = writeln!(
        s,
        "{:<12} {:>6} {:>9} {:>9} {:>9} {:>9}",
        "mode", "n", "accuracy", "Δacc", "macro-F1", "ΔF1"
    );
    for m in &a.modes {
        let flag = if m.interpreted_insertion {
            "  (interpreted insertion)"
        } else {
            ""
        };
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>9.4} {:>+9.4} {:>9.4} {:>+9.4}{flag}",
            m.mode.name(),
            m.metrics.n,
            m.metrics.accuracy,
            m.metrics.accuracy - base.accuracy,
            m.metrics.macro_f1,
            m.metrics.macro_f1 - base.macro_f1
        );
    }
    let _ = writeln!(s, "\nconnective groups (default mode)");
    for (name, g) in [("correct", &a.groups.correct), ("incorrect", &a.groups.incorrect)] {
        match g {
            Some(g) => {
                let _ = write!(s, "{name:<10} n={:<6} accuracy {:.4}", g.count, g.accuracy);
                if let (Some(b), Some(d)) = (g.baseline_accuracy, g.delta) {
                    let _ = write!(s, "  baseline {b:.4}  Δ {d:+.4}");
                }
                s.push('\n');
            }
            None => {
                let _ = writeln!(s, "{name:<10} n=0");
            }
        }
    }
    let _ = writeln!(s, "excluded   n={}", a.groups.excluded);
    for m in &a.modes {
        s.push('\n');
        s.push_str(&render_metrics(m.mode.name(), &m.metrics));
    }
    s
}
