//! The full parameter set: shared encoder, generation head and relation head.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, Batch, Dropout, EncoderParams, Init, ModelConfig, SlotOverride};
use crate::error::{Error, Result};
use crate::heads::{self, LmHeadParams, RelHeadParams};
use crate::numerics::{Graph, ParamStore, Var};
use crate::text::{init_multiword_embedding, ConnectiveVocab, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscourseModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub lm_head: LmHeadParams,
    pub rel_head: RelHeadParams,
    /// Vocabulary ids of the connective tokens, in inventory order.
    pub connective_ids: Vec<usize>,
    pub prefix: String,
}

impl DiscourseModel {
    /// Randomly initialized model whose parameter names all start with `prefix`.
    pub fn new(config: ModelConfig, connective_ids: Vec<usize>, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if connective_ids.len() != config.num_connectives {
            return Err(Error::Config(format!(
                "{} connective ids for {} connectives",
                connective_ids.len(),
                config.num_connectives
            )));
        }
        if let Some(&bad) = connective_ids.iter().find(|&&i| i >= config.vocab_size) {
            return Err(Error::Config(format!("connective id {bad} outside vocabulary")));
        }
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng,
            std: config.init_std,
            prefix,
        };
        let encoder = EncoderParams::register(&mut init, &config)?;
        let lm_head = LmHeadParams::register(&mut init, config.hidden, config.num_connectives)?;
        let rel_head = RelHeadParams::register(&mut init, config.hidden, config.num_relations)?;
        Ok(DiscourseModel {
            config,
            store,
            encoder,
            lm_head,
            rel_head,
            connective_ids,
            prefix: prefix.to_string(),
        })
    }

    /// Sets each multi-word connective token's embedding to the mean of its words.
    pub fn init_connective_embeddings(&mut self, vocab: &Vocabulary, conns: &ConnectiveVocab) {
        let table = self.store.get(self.encoder.token).clone();
        let rows: Vec<(usize, Vec<f64>)> = conns
            .entries()
            .iter()
            .filter(|e| e.is_multiword())
            .filter_map(|e| {
                vocab
                    .id(&e.token)
                    .map(|id| (id, init_multiword_embedding(e, vocab, &table)))
            })
            .collect();
        if rows.is_empty() {
            return;
        }
        let t = self.store.update(self.encoder.token);
        for (id, v) in rows {
            t.row_mut(id).copy_from_slice(&v);
        }
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        batch: &Batch,
        slot_override: Option<&SlotOverride>,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        encoder::encode(
            g,
            &self.store,
            &self.encoder,
            &self.config,
            batch,
            slot_override,
            dropout,
        )
    }

    pub fn connective_logits(&self, g: &mut Graph, hidden: Var, slot_rows: &[usize]) -> Result<Var> {
        heads::connective_logits(g, &self.store, &self.lm_head, hidden, slot_rows)
    }

    pub fn relation_logits(&self, g: &mut Graph, hidden: Var, cls_rows: &[usize]) -> Result<Var> {
        heads::relation_logits(g, &self.store, &self.rel_head, hidden, cls_rows)
    }

    /// `[CN × d]` view of the token table at the connective tokens.
    pub fn connective_embeddings(&self, g: &mut Graph) -> Result<Var> {
        let tok = g.param(&self.store, self.encoder.token)?;
        g.gather_rows(tok, &self.connective_ids)
    }
}
