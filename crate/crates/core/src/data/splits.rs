use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::InstanceRecord;
use crate::error::{Error, Result};

/// Number of sections in the standard corpus layout.
pub const NUM_SECTIONS: u32 = 25;

/// How records are partitioned by section.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Train 2–20, dev 0–1, test 21–22; other sections unused.
    Ji,
    /// Cross-validation fold `fold` (1-based) over consecutive section pairs.
    Xval { fold: u32, num_sections: u32 },
    Explicit {
        train: Vec<u32>,
        dev: Vec<u32>,
        test: Vec<u32>,
    },
}

impl SplitSpec {
    pub fn xval(fold: u32) -> Self {
        SplitSpec::Xval {
            fold,
            num_sections: NUM_SECTIONS,
        }
    }

    pub fn num_folds(num_sections: u32) -> u32 {
        num_sections / 2
    }

    pub fn sections(&self) -> Result<SectionSplit> {
        match self {
            SplitSpec::Ji => Ok(SectionSplit {
                train: (2..=20).collect(),
                dev: [0, 1].into(),
                test: [21, 22].into(),
            }),
            SplitSpec::Xval { fold, num_sections } => {
                let n = *num_sections;
                let folds = Self::num_folds(n);
                if *fold < 1 || *fold > folds {
                    return Err(Error::Config(format!(
                        "fold {fold} outside 1..={folds} for {n} sections"
                    )));
                }
                let base = 2 * (fold - 1);
                let dev: BTreeSet<u32> = [base % n, (base + 1) % n].into();
                let test: BTreeSet<u32> = [(base + n - 2) % n, (base + n - 1) % n].into();
                let train = (0..n).filter(|s| !dev.contains(s) && !test.contains(s)).collect();
                Ok(SectionSplit { train, dev, test })
            }
            SplitSpec::Explicit { train, dev, test } => {
                let s = SectionSplit {
                    train: train.iter().copied().collect(),
                    dev: dev.iter().copied().collect(),
                    test: test.iter().copied().collect(),
                };
                if !s.train.is_disjoint(&s.dev) || !s.train.is_disjoint(&s.test) || !s.dev.is_disjoint(&s.test) {
                    return Err(Error::Config("explicit split sections overlap".into()));
                }
                Ok(s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionSplit {
    pub train: BTreeSet<u32>,
    pub dev: BTreeSet<u32>,
    pub test: BTreeSet<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<InstanceRecord>,
    pub dev: Vec<InstanceRecord>,
    pub test: Vec<InstanceRecord>,
    /// Records whose section belongs to no split.
    pub unused: Vec<InstanceRecord>,
}

/// Partitions `corpus` by section; every record must carry one.
pub fn make_splits(corpus: &[InstanceRecord], spec: &SplitSpec) -> Result<Splits> {
    let sections = spec.sections()?;
    let mut out = Splits::default();
    for r in corpus {
        let s = r
            .section
            .ok_or_else(|| Error::Data(format!("instance {} has no section", r.id)))?;
        let bucket = if sections.train.contains(&s) {
            &mut out.train
        } else if sections.dev.contains(&s) {
            &mut out.dev
        } else if sections.test.contains(&s) {
            &mut out.test
        } else {
            &mut out.unused
        };
        bucket.push(r.clone());
    }
    Ok(out)
}
