//! Synthetic corpus with a planted, known-optimal decision rule.
//!
//! Each instance draws a relation from the prior, then a connective among those
//! mapped to it. With probability `kappa` a cue word unique to the connective is
//! planted in one argument; everything else is uniform background noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::data::{InstanceRecord, RelationSchema};
use crate::error::{Error, Result};
use crate::text::tokenize;

const CONNECTIVES: &[&str] = &[
    "but",
    "because",
    "for instance",
    "then",
    "however",
    "as a result",
    "in other words",
    "meanwhile",
    "in contrast",
    "so",
    "specifically",
    "afterwards",
    "although",
    "thus",
    "in fact",
    "before",
];

const TOP_LEVEL: [&str; 4] = ["Comparison", "Contingency", "Expansion", "Temporal"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Distinct argument word types, cue words included.
    pub vocab_size: usize,
    pub num_relations: usize,
    pub num_connectives: usize,
    pub min_arg_len: usize,
    pub max_arg_len: usize,
    /// Probability that a cue word is planted.
    pub kappa: f64,
    /// Probability of a second gold label.
    pub ambiguity_rate: f64,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    /// Relation prior; uniform when absent.
    pub relation_prior: Option<Vec<f64>>,
    pub num_sections: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 200,
            num_relations: 4,
            num_connectives: 4,
            min_arg_len: 4,
            max_arg_len: 10,
            kappa: 0.85,
            ambiguity_rate: 0.04,
            num_train: 4000,
            num_dev: 500,
            num_test: 500,
            relation_prior: None,
            num_sections: 25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_relations == 0 || self.num_connectives < self.num_relations {
            return Err(Error::Config(format!(
                "need at least one connective per relation ({} connectives, {} relations)",
                self.num_connectives, self.num_relations
            )));
        }
        if self.vocab_size <= self.num_connectives {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no background words beside {} cues",
                self.vocab_size, self.num_connectives
            )));
        }
        if self.min_arg_len == 0 || self.min_arg_len > self.max_arg_len {
            return Err(Error::Config("argument lengths need 1 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.kappa) || !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return Err(Error::Config("kappa and ambiguity_rate must lie in [0,1]".into()));
        }
        if self.num_relations < 2 && self.ambiguity_rate > 0.0 {
            return Err(Error::Config("a second label needs at least two relations".into()));
        }
        if self.num_sections == 0 {
            return Err(Error::Config("num_sections must be positive".into()));
        }
        self.prior()?;
        Ok(())
    }

    pub fn prior(&self) -> Result<Vec<f64>> {
        match &self.relation_prior {
            None => Ok(vec![1.0 / self.num_relations as f64; self.num_relations]),
            Some(p) => {
                if p.len() != self.num_relations || p.iter().any(|x| !(*x >= 0.0)) {
                    return Err(Error::Config(
                        "relation_prior needs one non-negative weight per relation".into(),
                    ));
                }
                let z: f64 = p.iter().sum();
                if !(z > 0.0) {
                    return Err(Error::Config("relation_prior sums to zero".into()));
                }
                Ok(p.iter().map(|x| x / z).collect())
            }
        }
    }

    pub fn relation_names(&self) -> Vec<String> {
        if self.num_relations == TOP_LEVEL.len() {
            TOP_LEVEL.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.num_relations).map(|i| format!("Rel{i}")).collect()
        }
    }

    pub fn connective_surfaces(&self) -> Vec<String> {
        (0..self.num_connectives)
            .map(|i| match CONNECTIVES.get(i) {
                Some(s) => s.to_string(),
                None => format!("conn{i}"),
            })
            .collect()
    }
}

/// Ground truth about a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub kappa: f64,
    pub prior: Vec<f64>,
    pub relations: Vec<String>,
    pub connectives: Vec<String>,
    /// Relation index of each connective.
    pub connective_relation: Vec<usize>,
    /// Cue word of each connective.
    pub cue_words: Vec<String>,
    /// Accuracy of [`Oracle::predict`] against the first gold label.
    pub bayes_accuracy: f64,
}

impl Oracle {
    /// Relation implied by the first cue word found, else the prior mode.
    pub fn predict(&self, rec: &InstanceRecord) -> usize {
        self.find_cue(rec)
            .map(|c| self.connective_relation[c])
            .unwrap_or_else(|| crate::heads::argmax(&self.prior))
    }

    pub fn find_cue(&self, rec: &InstanceRecord) -> Option<usize> {
        tokenize(&rec.arg1)
            .into_iter()
            .chain(tokenize(&rec.arg2))
            .find_map(|w| self.cue_words.iter().position(|c| *c == w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub schema: RelationSchema,
    pub train: Vec<InstanceRecord>,
    pub dev: Vec<InstanceRecord>,
    pub test: Vec<InstanceRecord>,
    pub oracle: Oracle,
}

impl SyntheticCorpus {
    pub fn all(&self) -> Vec<InstanceRecord> {
        self.train.iter().chain(&self.dev).chain(&self.test).cloned().collect()
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let prior = cfg.prior()?;
    let relations = cfg.relation_names();
    let connectives = cfg.connective_surfaces();
    let rn = cfg.num_relations;
    let connective_relation: Vec<usize> = (0..cfg.num_connectives).map(|j| j % rn).collect();
    let by_relation: Vec<Vec<usize>> = (0..rn)
        .map(|r| (0..cfg.num_connectives).filter(|j| j % rn == r).collect())
        .collect();
    let cue_words: Vec<String> = (0..cfg.num_connectives).map(|j| format!("cue{j}")).collect();
    let background: Vec<String> = (0..cfg.vocab_size - cfg.num_connectives)
        .map(|i| format!("w{i}"))
        .collect();
    let max_prior = prior.iter().cloned().fold(0.0, f64::max);
    let oracle = Oracle {
        kappa: cfg.kappa,
        prior: prior.clone(),
        relations: relations.clone(),
        connectives: connectives.clone(),
        connective_relation,
        cue_words,
        bayes_accuracy: cfg.kappa + (1.0 - cfg.kappa) * max_prior,
    };
    let relation_dist = WeightedIndex::new(&prior).map_err(|e| Error::Config(format!("relation prior: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen_split = |name: &str, n: usize| -> Vec<InstanceRecord> {
        (0..n)
            .map(|i| {
                let y = relation_dist.sample(&mut rng);
                let c = *by_relation[y].choose(&mut rng).expect("relation has a connective");
                let mut args: [Vec<&str>; 2] = [0, 1].map(|_| {
                    let len = rng.gen_range(cfg.min_arg_len..=cfg.max_arg_len);
                    (0..len)
                        .map(|_| background.choose(&mut rng).expect("background").as_str())
                        .collect()
                });
                if rng.gen_bool(cfg.kappa) {
                    let side = rng.gen_range(0..2);
                    let pos = rng.gen_range(0..args[side].len());
                    args[side][pos] = &oracle.cue_words[c];
                }
                let mut labels = vec![relations[y].clone()];
                if rng.gen_bool(cfg.ambiguity_rate) {
                    let mut other = rng.gen_range(0..rn - 1);
                    if other >= y {
                        other += 1;
                    }
                    labels.push(relations[other].clone());
                }
                InstanceRecord {
                    id: format!("{name}-{i}"),
                    arg1: args[0].join(" "),
                    arg2: args[1].join(" "),
                    conn: Some(connectives[c].clone()),
                    labels,
                    section: Some(rng.gen_range(0..cfg.num_sections)),
                }
            })
            .collect()
    };
    let train = gen_split("train", cfg.num_train);
    let dev = gen_split("dev", cfg.num_dev);
    let test = gen_split("test", cfg.num_test);
    Ok(SyntheticCorpus {
        schema: RelationSchema::new(relations)?,
        train,
        dev,
        test,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_corpus;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_train: 300,
            num_dev: 50,
            num_test: 50,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic(&small(11)).unwrap();
        let b = generate_synthetic(&small(11)).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_corpus(&mut x, &a.all()).unwrap();
        write_corpus(&mut y, &b.all()).unwrap();
        assert_eq!(x, y);
        let c = generate_synthetic(&small(12)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn every_relation_has_a_connective() {
        let cfg = SynthConfig {
            num_relations: 3,
            num_connectives: 7,
            ..small(0)
        };
        let s = generate_synthetic(&cfg).unwrap();
        for r in 0..3 {
            assert!(s.oracle.connective_relation.contains(&r));
        }
        assert_eq!(s.schema.relations, vec!["Rel0", "Rel1", "Rel2"]);
        let bad = SynthConfig {
            num_connectives: 2,
            ..cfg
        };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn kappa_one_oracle_is_perfect() {
        let cfg = SynthConfig {
            kappa: 1.0,
            ambiguity_rate: 0.0,
            ..small(3)
        };
        let s = generate_synthetic(&cfg).unwrap();
        assert_eq!(s.oracle.bayes_accuracy, 1.0);
        for r in s.all() {
            let y = s.schema.index_of(&r.labels[0]).unwrap();
            assert_eq!(s.oracle.predict(&r), y);
            let c = s.oracle.find_cue(&r).unwrap();
            assert_eq!(s.oracle.connectives[c], r.conn.clone().unwrap());
        }
    }

    #[test]
    fn kappa_zero_oracle_is_prior_mode() {
        let cfg = SynthConfig {
            kappa: 0.0,
            relation_prior: Some(vec![0.1, 0.2, 0.3, 0.4]),
            ..small(5)
        };
        let s = generate_synthetic(&cfg).unwrap();
        assert!((s.oracle.bayes_accuracy - 0.4).abs() < 1e-15);
        assert!(s.all().iter().all(|r| s.oracle.predict(r) == 3));
    }

    #[test]
    fn records_are_well_formed() {
        let s = generate_synthetic(&small(9)).unwrap();
        for r in s.all() {
            let n1 = tokenize(&r.arg1).len();
            let n2 = tokenize(&r.arg2).len();
            assert!((4..=10).contains(&n1) && (4..=10).contains(&n2));
            assert!(r.section.unwrap() < 25);
            assert!(s.schema.label_ids(&r).is_ok());
            if r.labels.len() == 2 {
                assert_ne!(r.labels[0], r.labels[1]);
            }
        }
    }

    #[test]
    fn oracle_accuracy_matches_closed_form() {
        let cfg = SynthConfig {
            kappa: 0.8,
            relation_prior: Some(vec![0.4, 0.3, 0.2, 0.1]),
            num_train: 50_000,
            num_dev: 0,
            num_test: 0,
            ..SynthConfig::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        let p = 0.8 + 0.2 * 0.4;
        assert!((s.oracle.bayes_accuracy - p).abs() < 1e-15);
        let hits = s
            .train
            .iter()
            .filter(|r| s.schema.name(s.oracle.predict(r)) == r.labels[0])
            .count();
        let acc = hits as f64 / s.train.len() as f64;
        let sigma = (p * (1.0 - p) / s.train.len() as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * sigma, "{acc} vs {p} ± {sigma}");
    }

    #[test]
    fn connective_always_belongs_to_first_label() {
        let cfg = SynthConfig {
            num_relations: 4,
            num_connectives: 11,
            ..small(21)
        };
        let s = generate_synthetic(&cfg).unwrap();
        for r in s.all() {
            let c = s
                .oracle
                .connectives
                .iter()
                .position(|c| Some(c) == r.conn.as_ref())
                .unwrap();
            assert_eq!(s.oracle.relations[s.oracle.connective_relation[c]], r.labels[0]);
        }
    }
}
