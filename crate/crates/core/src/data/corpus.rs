use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{build_connective_vocab, ConnectiveVocab};

/// One implicit-relation example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub arg1: String,
    pub arg2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conn: Option<String>,
    /// First label is the training target; any of them counts as correct at evaluation.
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<u32>,
}

/// Ordered relation names; the order is the class index space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSchema {
    pub relations: Vec<String>,
    /// Optional child → parent map for two-level sense hierarchies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parents: Option<BTreeMap<String, String>>,
}

impl RelationSchema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let s = RelationSchema {
            relations: names.into_iter().map(Into::into).collect(),
            parents: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.relations.is_empty() {
            return Err(Error::Schema("relation schema is empty".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.relations {
            if !seen.insert(r) {
                return Err(Error::Schema(format!("relation {r:?} listed twice")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.relations[i]
    }

    /// Label indices of a record, first label first.
    pub fn label_ids(&self, rec: &InstanceRecord) -> Result<Vec<usize>> {
        rec.labels
            .iter()
            .map(|l| {
                self.index_of(l)
                    .ok_or_else(|| Error::Schema(format!("instance {}: unknown relation {l:?}", rec.id)))
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: RelationSchema = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }
}

/// Parses JSON-lines corpus text, validating each record against `schema`.
pub fn read_corpus<R: BufRead>(reader: R, schema: &RelationSchema) -> Result<Vec<InstanceRecord>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        if rec.labels.is_empty() {
            return Err(Error::Data(format!("line {}: labels must be non-empty", n + 1)));
        }
        schema.label_ids(&rec)?;
        if !ids.insert(rec.id.clone()) {
            return Err(Error::Data(format!("line {}: duplicate id {:?}", n + 1, rec.id)));
        }
        out.push(rec);
    }
    if out.is_empty() {
        log::warn!("corpus is empty");
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, schema: &RelationSchema) -> Result<Vec<InstanceRecord>> {
    let f =
        std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open corpus {}: {e}", path.display())))?;
    read_corpus(std::io::BufReader::new(f), schema)
}

pub fn write_corpus<W: Write>(mut w: W, records: &[InstanceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Connective inventory for `corpus` plus which instances fall outside it.
#[derive(Clone, Debug)]
pub struct FilteredConnectives {
    pub vocab: ConnectiveVocab,
    /// Per instance: inventory index of its annotated connective, if any.
    pub assignments: Vec<Option<usize>>,
    /// Ids of instances that have a connective outside the inventory.
    pub out_of_vocab: Vec<String>,
}

pub fn filter_connectives(corpus: &[InstanceRecord], min_freq: usize) -> Result<FilteredConnectives> {
    let vocab = build_connective_vocab(corpus.iter().filter_map(|r| r.conn.as_deref()), min_freq)?;
    let assignments: Vec<Option<usize>> = corpus
        .iter()
        .map(|r| r.conn.as_deref().and_then(|c| vocab.index_of(c)))
        .collect();
    let out_of_vocab = corpus
        .iter()
        .zip(&assignments)
        .filter(|(r, a)| r.conn.is_some() && a.is_none())
        .map(|(r, _)| r.id.clone())
        .collect();
    Ok(FilteredConnectives {
        vocab,
        assignments,
        out_of_vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> RelationSchema {
        RelationSchema::new(["Comparison", "Contingency", "Expansion", "Temporal"]).unwrap()
    }

    #[test]
    fn empty_corpus_is_valid() {
        assert!(read_corpus(&b""[..], &schema()).unwrap().is_empty());
    }

    #[test]
    fn missing_field_is_named() {
        let line = br#"{"id":"a","arg1":"x y","labels":["Comparison"]}"#;
        let err = read_corpus(&line[..], &schema()).unwrap_err().to_string();
        assert!(err.contains("arg2") && err.contains("line 1"), "{err}");
    }

    #[test]
    fn unknown_label_and_duplicate_id_rejected() {
        let bad = br#"{"id":"a","arg1":"x","arg2":"y","labels":["Nope"]}"#;
        assert!(matches!(read_corpus(&bad[..], &schema()), Err(Error::Schema(_))));
        let dup = b"{\"id\":\"a\",\"arg1\":\"x\",\"arg2\":\"y\",\"labels\":[\"Temporal\"]}\n\
{\"id\":\"a\",\"arg1\":\"x\",\"arg2\":\"y\",\"labels\":[\"Temporal\"]}\n";
        assert!(matches!(read_corpus(&dup[..], &schema()), Err(Error::Data(_))));
    }

    #[test]
    fn write_then_read_preserves_records() {
        let recs = vec![
            InstanceRecord {
                id: "1".into(),
                arg1: "he did poor work".into(),
                arg2: "i refused to pay".into(),
                conn: Some("as a result".into()),
                labels: vec!["Contingency".into(), "Expansion".into()],
                section: Some(7),
            },
            InstanceRecord {
                id: "2".into(),
                arg1: "a".into(),
                arg2: "".into(),
                conn: None,
                labels: vec!["Temporal".into()],
                section: None,
            },
        ];
        let mut buf = Vec::new();
        write_corpus(&mut buf, &recs).unwrap();
        assert_eq!(read_corpus(&buf[..], &schema()).unwrap(), recs);
    }

    #[test]
    fn schema_rejects_duplicates() {
        assert!(RelationSchema::new(["A", "A"]).is_err());
    }

    #[test]
    fn filtering_records_out_of_vocab() {
        let mk = |id: &str, c: &str| InstanceRecord {
            id: id.into(),
            arg1: "a".into(),
            arg2: "b".into(),
            conn: Some(c.into()),
            labels: vec!["Temporal".into()],
            section: None,
        };
        let corpus = vec![mk("1", "then"), mk("2", "then"), mk("3", "next")];
        let f = filter_connectives(&corpus, 2).unwrap();
        assert_eq!(f.vocab.len(), 1);
        assert_eq!(f.assignments, vec![Some(0), Some(0), None]);
        assert_eq!(f.out_of_vocab, vec!["3".to_string()]);
    }
}
