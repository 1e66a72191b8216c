use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use conngen::data::{load_corpus, InstanceRecord, RelationSchema};
use conngen::training::{train, Regime, TrainConfig};

use crate::manifest::{load_json, sha256_file, RunManifest, CHECKPOINT, EPOCHS, JOURNAL};
use crate::{require_path, RUNS_DIR_ENV};

#[derive(Args)]
pub struct TrainArgs {
    /// Directory with train.jsonl, dev.jsonl and schema.json.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to `$CONNGEN_RUNS_DIR/<timestamp>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_regime)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub min_conn_freq: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: conngen::Error| e.to_string())
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(p) => load_json(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        set!(regime => regime, k => k, tau => tau, lr => lr, batch => batch_size, epochs => epochs,
             seed => seed, hidden => hidden, layers => layers, heads => heads,
             min_conn_freq => min_conn_freq, max_seq_len => max_seq_len, dropout => dropout);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_run_dir(seed: u64) -> PathBuf {
    let root = std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = root.join(format!("{stamp}-seed{seed}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    dir
}

struct CorpusFiles {
    schema: RelationSchema,
    train: Vec<InstanceRecord>,
    dev: Vec<InstanceRecord>,
}

fn load_training_data(dir: &Path) -> Result<CorpusFiles> {
    require_path(dir, "data directory")?;
    let schema_path = require_path(&dir.join("schema.json"), "schema")?;
    let schema = RelationSchema::load(&schema_path)?;
    let train = load_corpus(&require_path(&dir.join("train.jsonl"), "training corpus")?, &schema)?;
    let dev_path = dir.join("dev.jsonl");
    let dev = if dev_path.exists() {
        load_corpus(&dev_path, &schema)?
    } else {
        log::warn!("no dev.jsonl in {}; the last epoch is kept", dir.display());
        Vec::new()
    };
    Ok(CorpusFiles { schema, train, dev })
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: TrainArgs) -> Result<()> {
    let cfg = args.config()?;
    let data = load_training_data(&args.data)?;
    let mut checksums = std::collections::BTreeMap::new();
    for name in ["schema.json", "train.jsonl", "dev.jsonl", "test.jsonl"] {
        let p = args.data.join(name);
        if p.exists() {
            checksums.insert(name.to_string(), sha256_file(&p)?);
        }
    }
    let run_dir = args.out.clone().unwrap_or_else(|| default_run_dir(cfg.seed));
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let mut manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        data_dir: args.data.clone(),
        checksums,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at: chrono::Utc::now().to_rfc3339(),
        finished_at: None,
        outputs: Vec::new(),
    };
    manifest.save(&run_dir)?;
    log::info!("training {} into {}", cfg.regime, run_dir.display());

    let outcome = train(&data.train, &data.dev, &data.schema, &cfg)?;
    outcome.system.save(&run_dir.join(CHECKPOINT))?;
    write_jsonl(&run_dir.join(JOURNAL), &outcome.journal)?;
    write_jsonl(&run_dir.join(EPOCHS), &outcome.epochs)?;
    manifest.finished_at = Some(chrono::Utc::now().to_rfc3339());
    manifest.outputs = [CHECKPOINT, JOURNAL, EPOCHS].map(String::from).to_vec();
    manifest.save(&run_dir)?;
    let last_stage = outcome.epochs.last().map(|e| e.stage.clone());
    let best = outcome
        .epochs
        .iter()
        .filter(|e| Some(&e.stage) == last_stage.as_ref())
        .filter_map(|e| e.dev_score)
        .fold(f64::NAN, f64::max);
    println!("{}", run_dir.display());
    if best.is_finite() {
        println!("best dev score {best:.4}");
    }
    Ok(())
}
