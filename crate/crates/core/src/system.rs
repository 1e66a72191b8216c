//! A trained system: model(s) plus the vocabularies they were trained with,
//! and its on-disk checkpoint format.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InstanceRecord, RelationSchema};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::model::DiscourseModel;
use crate::numerics::{ParamStore, Tensor};
use crate::text::{
    assemble_args_input, assemble_conn_input, assemble_masked_input, tokenize, ConnectiveVocab, SequencePair,
    Vocabulary,
};
use crate::training::Regime;

const FORMAT: &str = "conngen-checkpoint-v1";
pub const GENERATOR_PREFIX: &str = "stage1.";

/// A record mapped into index space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub arg1: Vec<usize>,
    pub arg2: Vec<usize>,
    /// Inventory index of the annotated connective, when it has one in the inventory.
    pub conn: Option<usize>,
    /// Gold relation indices, first label first.
    pub labels: Vec<usize>,
}

/// Vocabulary over every argument word of `train` plus the connective tokens.
pub fn build_vocabulary(train: &[InstanceRecord], conns: &ConnectiveVocab) -> Vocabulary {
    let words = train
        .iter()
        .flat_map(|r| tokenize(&r.arg1).into_iter().chain(tokenize(&r.arg2)));
    let mut vocab = Vocabulary::from_words(words);
    conns.extend_vocabulary(&mut vocab);
    vocab
}

pub fn encode_records(
    records: &[InstanceRecord],
    vocab: &Vocabulary,
    conns: &ConnectiveVocab,
    schema: &RelationSchema,
) -> Result<Vec<Encoded>> {
    records
        .iter()
        .map(|r| {
            Ok(Encoded {
                arg1: vocab.encode(&r.arg1),
                arg2: vocab.encode(&r.arg2),
                conn: r.conn.as_deref().and_then(|c| conns.index_of(c)),
                labels: schema.label_ids(r)?,
            })
        })
        .collect()
}

/// Turns encoded records into the three input layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBuilder {
    pub vocab: Vocabulary,
    /// Vocabulary ids of the connective tokens, in inventory order.
    pub conn_ids: Vec<usize>,
    pub max_seq_len: usize,
}

impl InputBuilder {
    /// `[CLS] arg1 [MASK] arg2 [SEP]`.
    pub fn masked(&self, e: &Encoded) -> Result<SequencePair> {
        assemble_masked_input(&e.arg1, &e.arg2, &self.vocab, self.max_seq_len)
    }

    /// `[CLS] arg1 conn arg2 [SEP]` for inventory connective `c`.
    pub fn with_connective(&self, e: &Encoded, c: usize) -> Result<SequencePair> {
        let token = *self
            .conn_ids
            .get(c)
            .ok_or_else(|| Error::Internal(format!("connective index {c} out of range")))?;
        assemble_conn_input(&e.arg1, token, &e.arg2, &self.vocab, self.max_seq_len)
    }

    /// `[CLS] arg1 arg2 [SEP]`.
    pub fn args(&self, e: &Encoded) -> Result<SequencePair> {
        assemble_args_input(&e.arg1, &e.arg2, &self.vocab, self.max_seq_len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedSystem {
    pub regime: Regime,
    pub inputs: InputBuilder,
    pub connectives: ConnectiveVocab,
    pub schema: RelationSchema,
    /// The relation classifier; for every regime but the pipeline it is also the generator.
    pub model: DiscourseModel,
    /// Separately trained generator of the pipeline regime.
    pub generator: Option<DiscourseModel>,
}

impl TrainedSystem {
    pub fn encode(&self, records: &[InstanceRecord]) -> Result<Vec<Encoded>> {
        encode_records(records, &self.inputs.vocab, &self.connectives, &self.schema)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.inputs.vocab
    }

    pub fn generator_model(&self) -> &DiscourseModel {
        self.generator.as_ref().unwrap_or(&self.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::read(std::io::BufReader::new(f))
    }

    /// One compact JSON header line, then every tensor as little-endian f64.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let stores = std::iter::once(&self.model.store).chain(self.generator.as_ref().map(|g| &g.store));
        for store in stores.clone() {
            for (_, name, t) in store.iter() {
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.numel();
            }
        }
        let header = Header {
            format: FORMAT.into(),
            regime: self.regime,
            max_seq_len: self.inputs.max_seq_len,
            model_config: self.model.config.clone(),
            generator_config: self.generator.as_ref().map(|g| g.config.clone()),
            vocab: self.inputs.vocab.tokens().to_vec(),
            connectives: self.connectives.clone(),
            schema: self.schema.clone(),
            tensors,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for store in stores {
            for (_, _, t) in store.iter() {
                for x in t.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {:?}",
                header.format
            )));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if bytes.len() != total * 8 {
            return Err(Error::Data(format!(
                "checkpoint body has {} bytes, header describes {}",
                bytes.len(),
                total * 8
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let vocab = Vocabulary::from_tokens(header.vocab)?;
        let conn_ids = header.connectives.token_ids(&vocab)?;
        let rebuild = |cfg: ModelConfig, prefix: &str| -> Result<DiscourseModel> {
            // initialization values are discarded; only the layout matters
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut m = DiscourseModel::new(cfg, conn_ids.clone(), prefix, &mut rng)?;
            fill(&mut m.store, &header.tensors, &values)?;
            Ok(m)
        };
        let model = rebuild(header.model_config, "")?;
        let generator = header
            .generator_config
            .map(|c| rebuild(c, GENERATOR_PREFIX))
            .transpose()?;
        Ok(TrainedSystem {
            regime: header.regime,
            inputs: InputBuilder {
                vocab,
                conn_ids,
                max_seq_len: header.max_seq_len,
            },
            connectives: header.connectives,
            schema: header.schema,
            model,
            generator,
        })
    }
}

fn fill(store: &mut ParamStore, entries: &[TensorEntry], values: &[f64]) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let e = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))?;
        let t = store.update(id);
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Data(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                e.shape,
                t.shape()
            )));
        }
        let n = t.numel();
        *t = Tensor::new(e.shape.clone(), values[e.offset..e.offset + n].to_vec())?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    regime: Regime,
    max_seq_len: usize,
    model_config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator_config: Option<ModelConfig>,
    vocab: Vec<String>,
    connectives: ConnectiveVocab,
    schema: RelationSchema,
    tensors: Vec<TensorEntry>,
}
