//! Corpus records, relation schema, section splits and the synthetic generator.

mod corpus;
mod splits;
mod synth;

pub use corpus::{
    filter_connectives, load_corpus, read_corpus, write_corpus, FilteredConnectives, InstanceRecord, RelationSchema,
};
pub use splits::{make_splits, SectionSplit, SplitSpec, Splits, NUM_SECTIONS};
pub use synth::{generate_synthetic, Oracle, SynthConfig, SyntheticCorpus};
