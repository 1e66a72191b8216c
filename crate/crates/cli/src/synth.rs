use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use conngen::data::{generate_synthetic, write_corpus, SynthConfig};

use crate::manifest::{load_json, write_json};

#[derive(Args)]
pub struct GenSynthArgs {
    /// JSON generator config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for train/dev/test.jsonl, schema.json and oracle.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    relations: Option<usize>,
    #[arg(long)]
    connectives: Option<usize>,
    /// Probability that an instance carries its connective's cue word.
    #[arg(long)]
    kappa: Option<f64>,
    /// Probability of a second gold label.
    #[arg(long)]
    ambiguity: Option<f64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    dev: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl GenSynthArgs {
    fn config(&self) -> Result<SynthConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_json(p)?,
            None => SynthConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$field = v; })*
            };
        }
        set!(vocab_size => vocab_size, relations => num_relations, connectives => num_connectives,
             kappa => kappa, ambiguity => ambiguity_rate, train => num_train, dev => num_dev,
             test => num_test, seed => seed);
        Ok(cfg)
    }
}

pub fn run(args: GenSynthArgs) -> Result<()> {
    let cfg = args.config()?;
    let corpus = generate_synthetic(&cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (name, split) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        let path = args.out.join(format!("{name}.jsonl"));
        let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_corpus(BufWriter::new(f), split)?;
    }
    write_json(&args.out.join("schema.json"), &corpus.schema)?;
    write_json(&args.out.join("oracle.json"), &corpus.oracle)?;
    write_json(&args.out.join("synth_config.json"), &cfg)?;
    println!(
        "wrote {} / {} / {} instances to {}; Bayes accuracy {:.4}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        args.out.display(),
        corpus.oracle.bayes_accuracy
    );
    Ok(())
}
