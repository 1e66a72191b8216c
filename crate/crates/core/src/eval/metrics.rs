use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Prediction;
use crate::system::Encoded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRow {
    pub relation: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Test instances whose first gold label is this relation.
    pub support: usize,
    pub predicted: usize,
    /// No gold instances; the F1 of 0 is a placeholder.
    pub zero_support: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Instances scored (skipped ones excluded).
    pub n: usize,
    pub skipped: usize,
    /// A prediction is correct if it matches any gold label.
    pub accuracy: f64,
    /// Macro-F1 against the first gold label.
    pub macro_f1: f64,
    /// Generated-connective accuracy over instances with an inventory connective.
    pub conn_accuracy: Option<f64>,
    pub per_relation: Vec<RelationRow>,
    /// `confusion[gold][predicted]` over first gold labels.
    pub confusion: Vec<Vec<usize>>,
}

/// Fraction of predictions that hit any gold label.
pub fn accuracy(pred: &[usize], gold: &[Vec<usize>]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| g.contains(p)).count();
    hits as f64 / pred.len() as f64
}

fn prf(tp: usize, predicted: usize, support: usize) -> (f64, f64, f64) {
    let p = if predicted == 0 {
        0.0
    } else {
        tp as f64 / predicted as f64
    };
    let r = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Macro-F1 over the classes that occur in `gold` or `pred`; a class never
/// predicted, or never correct, contributes 0.
pub fn macro_f1(pred: &[usize], gold: &[usize]) -> f64 {
    let classes: BTreeSet<usize> = pred.iter().chain(gold).copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let tp = pred.iter().zip(gold).filter(|(p, g)| **p == c && **g == c).count();
            let np = pred.iter().filter(|&&p| p == c).count();
            let ns = gold.iter().filter(|&&g| g == c).count();
            prf(tp, np, ns).2
        })
        .sum();
    total / classes.len() as f64
}

/// One row per schema relation, in schema order.
pub fn per_relation_f1(pred: &[usize], gold: &[usize], relations: &[String]) -> Vec<RelationRow> {
    relations
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let tp = pred.iter().zip(gold).filter(|(p, g)| **p == c && **g == c).count();
            let predicted = pred.iter().filter(|&&p| p == c).count();
            let support = gold.iter().filter(|&&g| g == c).count();
            let (precision, recall, f1) = prf(tp, predicted, support);
            RelationRow {
                relation: name.clone(),
                precision,
                recall,
                f1,
                support,
                predicted,
                zero_support: support == 0,
            }
        })
        .collect()
}

pub fn confusion_matrix(pred: &[usize], gold: &[usize], n: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n]; n];
    for (&p, &g) in pred.iter().zip(gold) {
        m[g][p] += 1;
    }
    m
}

pub fn confusion_csv(matrix: &[Vec<usize>], relations: &[String]) -> String {
    let mut s = String::from("gold\\predicted");
    for r in relations {
        s.push(',');
        s.push_str(r);
    }
    s.push('\n');
    for (r, row) in relations.iter().zip(matrix) {
        s.push_str(r);
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Scores predictions against gold; `None` predictions count as skipped.
pub fn score(preds: &[Option<Prediction>], gold: &[Encoded], relations: &[String]) -> Result<MetricsReport> {
    if preds.len() != gold.len() {
        return Err(Error::Internal(format!(
            "{} predictions for {} instances",
            preds.len(),
            gold.len()
        )));
    }
    let mut p = Vec::new();
    let mut g_all = Vec::new();
    let mut g_first = Vec::new();
    let (mut conn_hits, mut conn_total) = (0usize, 0usize);
    for (pr, e) in preds.iter().zip(gold) {
        let Some(pr) = pr else { continue };
        if pr.relation >= relations.len() {
            return Err(Error::Schema(format!(
                "predicted relation {} outside schema",
                pr.relation
            )));
        }
        p.push(pr.relation);
        g_all.push(e.labels.clone());
        g_first.push(e.labels[0]);
        if let (Some(c), Some(gc)) = (pr.connective, e.conn) {
            conn_total += 1;
            conn_hits += usize::from(c == gc);
        }
    }
    Ok(MetricsReport {
        n: p.len(),
        skipped: preds.len() - p.len(),
        accuracy: accuracy(&p, &g_all),
        macro_f1: macro_f1(&p, &g_first),
        conn_accuracy: (conn_total > 0).then(|| conn_hits as f64 / conn_total as f64),
        per_relation: per_relation_f1(&p, &g_first, relations),
        confusion: confusion_matrix(&p, &g_first, relations.len()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub accuracy: f64,
    /// Accuracy of the baseline on the same instances.
    pub baseline_accuracy: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// Instances whose generated connective equals the annotated one.
    pub correct: Option<GroupStats>,
    pub incorrect: Option<GroupStats>,
    /// Instances without a generated or inventory connective.
    pub excluded: usize,
}

/// Splits instances by whether the generated connective was right and compares
/// relation accuracy within each group, optionally against a baseline.
pub fn group_analysis(
    preds: &[Option<Prediction>],
    gold: &[Encoded],
    baseline: Option<&[Option<Prediction>]>,
) -> Result<GroupReport> {
    if preds.len() != gold.len() || baseline.is_some_and(|b| b.len() != gold.len()) {
        return Err(Error::Internal("prediction and gold lengths differ".into()));
    }
    let mut groups: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut excluded = 0;
    for (i, (p, e)) in preds.iter().zip(gold).enumerate() {
        match (p.as_ref().and_then(|p| p.connective), e.conn) {
            (Some(c), Some(gc)) => groups[usize::from(c != gc)].push(i),
            _ => excluded += 1,
        }
    }
    let stats = |idx: &[usize]| -> Option<GroupStats> {
        if idx.is_empty() {
            return None;
        }
        let acc_of = |ps: &[Option<Prediction>]| -> Option<f64> {
            let pairs: Vec<(usize, Vec<usize>)> = idx
                .iter()
                .filter_map(|&i| ps[i].as_ref().map(|p| (p.relation, gold[i].labels.clone())))
                .collect();
            (!pairs.is_empty()).then(|| {
                let (p, g): (Vec<usize>, Vec<Vec<usize>>) = pairs.into_iter().unzip();
                accuracy(&p, &g)
            })
        };
        let acc = acc_of(preds).unwrap_or(0.0);
        let base = baseline.and_then(acc_of);
        Some(GroupStats {
            count: idx.len(),
            accuracy: acc,
            baseline_accuracy: base,
            delta: base.map(|b| acc - b),
        })
    };
    Ok(GroupReport {
        correct: stats(&groups[0]),
        incorrect: stats(&groups[1]),
        excluded,
    })
}
