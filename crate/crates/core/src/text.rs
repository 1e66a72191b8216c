//! Vocabulary, the connective inventory, and assembly of model inputs.
//!
//! Tokenization is lowercase + whitespace. A connective of several words is
//! one token in the vocabulary (`"for instance"` → `for_instance`), so every
//! connective occupies exactly one slot position.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const RESERVED: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Normalized single-token spelling of a connective surface form.
pub fn connective_token(surface: &str) -> String {
    tokenize(surface).join("_")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Vocabulary holding only the reserved tokens, at ids 0..5.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.add(r);
        }
        v
    }

    /// Reserved tokens, then `words` sorted and deduplicated.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sorted: Vec<String> = words.into_iter().map(|w| w.as_ref().to_string()).collect();
        sorted.sort();
        sorted.dedup();
        let mut v = Self::new();
        for w in sorted {
            v.add(&w);
        }
        v
    }

    /// Returns the id of `token`, inserting it if new.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or_else(|| self.unk())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }
    pub fn unk(&self) -> usize {
        self.index[UNK]
    }
    pub fn cls(&self) -> usize {
        self.index[CLS]
    }
    pub fn sep(&self) -> usize {
        self.index[SEP]
    }
    pub fn mask(&self) -> usize {
        self.index[MASK]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK).to_string()).collect()
    }

    /// Writes one `token<TAB>id` line per entry, in id order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Data(format!("vocabulary line {}: expected token<TAB>id", lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Data(format!("vocabulary line {}: bad id {id:?}", lineno + 1)))?;
            if id != tokens.len() {
                return Err(Error::Data(format!(
                    "vocabulary line {}: ids must be dense and ordered, got {id}",
                    lineno + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }

    /// Vocabulary with the given id order; must contain every reserved token.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("vocabulary token {t:?} repeated")));
            }
        }
        for r in RESERVED {
            if !index.contains_key(r) {
                return Err(Error::Data(format!("vocabulary lacks reserved token {r}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectiveEntry {
    /// Normalized words, space separated.
    pub surface: String,
    /// Single-token form used in the vocabulary.
    pub token: String,
    pub frequency: usize,
}

impl ConnectiveEntry {
    pub fn words(&self) -> Vec<&str> {
        self.surface.split(' ').collect()
    }

    pub fn is_multiword(&self) -> bool {
        self.surface.contains(' ')
    }
}

/// The connective inventory. Entry order defines the class index of the
/// generation head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ConnectiveEntry>", into = "Vec<ConnectiveEntry>")]
pub struct ConnectiveVocab {
    entries: Vec<ConnectiveEntry>,
    by_surface: HashMap<String, usize>,
}

impl ConnectiveVocab {
    pub fn from_entries(entries: Vec<ConnectiveEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("connective vocabulary is empty".into()));
        }
        let mut by_surface = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if by_surface.insert(e.surface.clone(), i).is_some() {
                return Err(Error::Data(format!("connective {:?} listed twice", e.surface)));
            }
        }
        Ok(ConnectiveVocab { entries, by_surface })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ConnectiveEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ConnectiveEntry {
        &self.entries[i]
    }

    /// Index of a connective given in any casing/spacing.
    pub fn index_of(&self, surface: &str) -> Option<usize> {
        self.by_surface.get(&tokenize(surface).join(" ")).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_entries(serde_json::from_str(s)?)
    }

    /// Adds every connective word and connective token to `vocab`.
    pub fn extend_vocabulary(&self, vocab: &mut Vocabulary) {
        for e in &self.entries {
            for w in e.words() {
                vocab.add(w);
            }
            vocab.add(&e.token);
        }
    }

    /// Vocabulary ids of the connective tokens, in inventory order.
    pub fn token_ids(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        self.entries
            .iter()
            .map(|e| {
                vocab
                    .id(&e.token)
                    .ok_or_else(|| Error::Internal(format!("connective token {} missing from vocabulary", e.token)))
            })
            .collect()
    }
}

impl TryFrom<Vec<ConnectiveEntry>> for ConnectiveVocab {
    type Error = Error;

    fn try_from(entries: Vec<ConnectiveEntry>) -> Result<Self> {
        Self::from_entries(entries)
    }
}

impl From<ConnectiveVocab> for Vec<ConnectiveEntry> {
    fn from(v: ConnectiveVocab) -> Self {
        v.entries
    }
}

/// Counts connectives and keeps those seen at least `min_freq` times,
/// ordered by descending frequency then lexicographically.
pub fn build_connective_vocab<'a, I>(connectives: I, min_freq: usize) -> Result<ConnectiveVocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for c in connectives {
        let norm = tokenize(c).join(" ");
        if norm.is_empty() {
            continue;
        }
        *counts.entry(norm).or_default() += 1;
    }
    let mut kept: Vec<ConnectiveEntry> = counts
        .into_iter()
        .filter(|(_, n)| *n >= min_freq)
        .map(|(s, n)| ConnectiveEntry {
            token: s.replace(' ', "_"),
            surface: s,
            frequency: n,
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "no connective occurs at least {min_freq} times; lower the minimum frequency"
        )));
    }
    kept.sort_by(|a, b| b.frequency.cmp(&a.frequency).then(a.surface.cmp(&b.surface)));
    ConnectiveVocab::from_entries(kept)
}

/// Initial embedding for a connective token: the mean of its words' embeddings.
///
/// Words missing from the vocabulary contribute the `[UNK]` row.
pub fn init_multiword_embedding(entry: &ConnectiveEntry, vocab: &Vocabulary, token_embeddings: &Tensor) -> Vec<f64> {
    let words = entry.words();
    let d = token_embeddings.cols();
    let mut out = vec![0.0; d];
    for w in &words {
        let id = vocab.id(w).unwrap_or_else(|| {
            log::warn!("connective word {w:?} not in vocabulary; using [UNK]");
            vocab.unk()
        });
        for (o, x) in out.iter_mut().zip(token_embeddings.row(id)) {
            *o += x;
        }
    }
    if words.len() == 1 {
        return token_embeddings.row(vocab.id_or_unk(words[0])).to_vec();
    }
    let n = words.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// One assembled input sequence, unpadded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequencePair {
    pub ids: Vec<usize>,
    /// Index of the `[MASK]`/connective position, if the layout has one.
    pub slot: Option<usize>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    /// Lengths of the two arguments after truncation.
    pub arg_lens: (usize, usize),
}

impl SequencePair {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Arguments recovered from the assembled layout.
    pub fn args(&self) -> (&[usize], &[usize]) {
        let (n1, n2) = self.arg_lens;
        let a1 = &self.ids[1..1 + n1];
        let start2 = 1 + n1 + usize::from(self.slot.is_some());
        (a1, &self.ids[start2..start2 + n2])
    }
}

/// Shortens the longer argument from its end until both fit in `budget`
/// tokens; ties drop from arg1 first, so equal arguments shrink alternately.
pub fn truncate_pair(arg1: &[usize], arg2: &[usize], budget: usize) -> (usize, usize) {
    let (mut n1, mut n2) = (arg1.len(), arg2.len());
    while n1 + n2 > budget {
        if n1 >= n2 {
            n1 -= 1;
        } else {
            n2 -= 1;
        }
    }
    (n1, n2)
}

fn assemble(
    arg1: &[usize],
    slot_token: Option<usize>,
    arg2: &[usize],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<SequencePair> {
    if arg1.is_empty() && arg2.is_empty() {
        return Err(Error::Data("both arguments are empty".into()));
    }
    let specials = 2 + usize::from(slot_token.is_some());
    if max_len < specials + 2 {
        return Err(Error::Config(format!("max sequence length {max_len} too small")));
    }
    let (n1, n2) = truncate_pair(arg1, arg2, max_len - specials);
    let mut ids = Vec::with_capacity(n1 + n2 + specials);
    ids.push(vocab.cls());
    ids.extend_from_slice(&arg1[..n1]);
    let slot = slot_token.map(|t| {
        ids.push(t);
        1 + n1
    });
    ids.extend_from_slice(&arg2[..n2]);
    ids.push(vocab.sep());
    let n = ids.len();
    Ok(SequencePair {
        ids,
        slot,
        segments: vec![0; n],
        positions: (0..n).collect(),
        arg_lens: (n1, n2),
    })
}

/// `[CLS] arg1 [MASK] arg2 [SEP]`.
pub fn assemble_masked_input(
    arg1: &[usize],
    arg2: &[usize],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<SequencePair> {
    assemble(arg1, Some(vocab.mask()), arg2, vocab, max_len)
}

/// `[CLS] arg1 conn arg2 [SEP]`.
pub fn assemble_conn_input(
    arg1: &[usize],
    conn_token: usize,
    arg2: &[usize],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<SequencePair> {
    assemble(arg1, Some(conn_token), arg2, vocab, max_len)
}

/// `[CLS] arg1 arg2 [SEP]`, no slot.
pub fn assemble_args_input(arg1: &[usize], arg2: &[usize], vocab: &Vocabulary, max_len: usize) -> Result<SequencePair> {
    assemble(arg1, None, arg2, vocab, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abc_vocab() -> Vocabulary {
        Vocabulary::from_words(["a", "b", "c", "but"])
    }

    #[test]
    fn reserved_tokens_come_first() {
        let v = abc_vocab();
        assert_eq!(v.pad(), 0);
        assert_eq!(v.mask(), 4);
        assert_eq!(v.len(), 9);
        for r in RESERVED {
            assert_eq!(v.tokens().iter().filter(|t| *t == r).count(), 1);
        }
    }

    #[test]
    fn masked_layout() {
        let v = abc_vocab();
        let (a, b, c) = (v.id("a").unwrap(), v.id("b").unwrap(), v.id("c").unwrap());
        let s = assemble_masked_input(&[a, b], &[c], &v, 256).unwrap();
        assert_eq!(s.ids, vec![v.cls(), a, b, v.mask(), c, v.sep()]);
        assert_eq!(s.slot, Some(3));
        assert!(s.segments.iter().all(|&x| x == 0));
        assert_eq!(s.positions, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn conn_layout_and_degenerate_arg2() {
        let v = abc_vocab();
        let (a, b, c, but) = (
            v.id("a").unwrap(),
            v.id("b").unwrap(),
            v.id("c").unwrap(),
            v.id("but").unwrap(),
        );
        let s = assemble_conn_input(&[a], but, &[c], &v, 256).unwrap();
        assert_eq!(s.ids, vec![v.cls(), a, but, c, v.sep()]);
        let s = assemble_masked_input(&[a, b], &[], &v, 256).unwrap();
        assert_eq!(s.ids, vec![v.cls(), a, b, v.mask(), v.sep()]);
        assert!(matches!(assemble_masked_input(&[], &[], &v, 256), Err(Error::Data(_))));
    }

    #[test]
    fn truncation_to_max_len() {
        let v = abc_vocab();
        let a1 = vec![5; 200];
        let a2 = vec![6; 97];
        // 200 + 97 + 3 = 300 > 256
        let s = assemble_masked_input(&a1, &a2, &v, 256).unwrap();
        assert_eq!(s.len(), 256);
        let (x1, x2) = s.args();
        assert!(!x1.is_empty() && !x2.is_empty());
        // the longer argument is cut until the two balance
        assert_eq!((x1.len(), x2.len()), (156, 97));
        let conn = assemble_conn_input(&a1, 8, &a2, &v, 256).unwrap();
        assert_eq!(conn.arg_lens, s.arg_lens);

        let eq = truncate_pair(&[1; 10], &[1; 10], 15);
        assert_eq!(eq, (7, 8));
    }

    #[test]
    fn connective_inventory_filtering() {
        let mut conns = Vec::new();
        conns.extend(std::iter::repeat("but").take(120));
        conns.extend(std::iter::repeat("For instance").take(105));
        conns.extend(std::iter::repeat("next").take(7));
        let cv = build_connective_vocab(conns.iter().copied(), 100).unwrap();
        let toks: Vec<_> = cv.entries().iter().map(|e| e.token.as_str()).collect();
        assert_eq!(toks, ["but", "for_instance"]);
        assert_eq!(cv.index_of("for  INSTANCE"), Some(1));
        assert_eq!(cv.index_of("next"), None);

        let all = build_connective_vocab(conns.iter().copied(), 1).unwrap();
        assert_eq!(all.len(), 3);
        assert!(matches!(
            build_connective_vocab(conns.iter().copied(), 1000),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ordering_breaks_ties_lexicographically() {
        let conns = ["then", "also", "then", "also", "because"];
        let cv = build_connective_vocab(conns, 1).unwrap();
        let s: Vec<_> = cv.entries().iter().map(|e| e.surface.as_str()).collect();
        assert_eq!(s, ["also", "then", "because"]);
    }

    #[test]
    fn multiword_embedding_is_mean() {
        let mut v = Vocabulary::from_words(["for", "instance", "but", "as", "a", "result"]);
        let cv = build_connective_vocab(["for instance", "but", "as a result"], 1).unwrap();
        cv.extend_vocabulary(&mut v);
        let d = 2;
        let mut table = Tensor::zeros(&[v.len(), d]);
        table.row_mut(v.id("for").unwrap()).copy_from_slice(&[2.0, 0.0]);
        table.row_mut(v.id("instance").unwrap()).copy_from_slice(&[0.0, 2.0]);
        table.row_mut(v.id("but").unwrap()).copy_from_slice(&[0.3, -0.7]);
        table.row_mut(v.id("as").unwrap()).copy_from_slice(&[1.0, 4.0]);
        table.row_mut(v.id("a").unwrap()).copy_from_slice(&[2.0, 5.0]);
        table.row_mut(v.id("result").unwrap()).copy_from_slice(&[6.0, -3.0]);
        let fi = &cv.entries()[cv.index_of("for instance").unwrap()];
        assert_eq!(init_multiword_embedding(fi, &v, &table), vec![1.0, 1.0]);
        let but = &cv.entries()[cv.index_of("but").unwrap()];
        assert_eq!(init_multiword_embedding(but, &v, &table), vec![0.3, -0.7]);
        let aar = &cv.entries()[cv.index_of("as a result").unwrap()];
        let got = init_multiword_embedding(aar, &v, &table);
        assert_eq!(got, vec![(1.0 + 2.0 + 6.0) / 3.0, (4.0 + 5.0 - 3.0) / 3.0]);
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let v = abc_vocab();
        let mut buf = Vec::new();
        v.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("[PAD]\t0\n"));
        assert_eq!(Vocabulary::read_tsv(&buf[..]).unwrap(), v);
        assert!(Vocabulary::read_tsv(&b"[PAD]\t1\n"[..]).is_err());
    }

    #[test]
    fn connective_vocab_json_round_trip() {
        let cv = build_connective_vocab(["but", "in other words", "but"], 1).unwrap();
        let s = cv.to_json().unwrap();
        assert!(s.contains("\"in_other_words\""));
        assert_eq!(ConnectiveVocab::from_json(&s).unwrap(), cv);
    }

    proptest! {
        #[test]
        fn assembly_round_trips_and_differs_only_at_slot(
            a1 in proptest::collection::vec(5usize..9, 0..40),
            a2 in proptest::collection::vec(5usize..9, 0..40),
            max_len in 7usize..60,
        ) {
            prop_assume!(!(a1.is_empty() && a2.is_empty()));
            let v = abc_vocab();
            let m = assemble_masked_input(&a1, &a2, &v, max_len).unwrap();
            let c = assemble_conn_input(&a1, 8, &a2, &v, max_len).unwrap();
            prop_assert!(m.len() <= max_len);
            let (x1, x2) = m.args();
            prop_assert_eq!(x1, &a1[..x1.len()]);
            prop_assert_eq!(x2, &a2[..x2.len()]);
            let slot = m.slot.unwrap();
            prop_assert_eq!(slot, 1 + x1.len());
            prop_assert_eq!(m.len(), c.len());
            for i in 0..m.len() {
                if i == slot {
                    prop_assert_eq!(m.ids[i], v.mask());
                    prop_assert_eq!(c.ids[i], 8);
                } else {
                    prop_assert_eq!(m.ids[i], c.ids[i]);
                }
            }
            if !a1.is_empty() && !a2.is_empty() {
                prop_assert!(!x1.is_empty() && !x2.is_empty());
            }
        }
    }
}
