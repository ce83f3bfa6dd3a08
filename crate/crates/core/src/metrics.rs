//! Fixed-length and adaptive-length sequence accuracy.
//!
//! Both metrics compare a predicted label sequence with the annotated one
//! position by position after padding with the "no manipulation" class:
//!
//! * fixed: both sides padded to `n_max`, accuracy = matches / n_max;
//! * adaptive: the shorter side padded to the longer length `L`, accuracy =
//!   matches / L, with an empty-vs-empty pair counted as 1/1.
//!
//! The adaptive aggregate is a micro average (Σ matches / Σ L). The per-pair
//! (macro) average is reported next to it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::LabelSequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub predicted: LabelSequence,
    pub annotated: LabelSequence,
}

impl EvalPair {
    pub fn new(predicted: LabelSequence, annotated: LabelSequence) -> Self {
        Self { predicted, annotated }
    }
}

/// Position-wise matches of the two sequences padded with NM to `len`.
fn padded_matches(a: &LabelSequence, b: &LabelSequence, len: usize) -> usize {
    (0..len).filter(|&i| a.0.get(i) == b.0.get(i)).count()
}

/// Match counts of one pair under both metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairScore {
    pub fixed_matches: usize,
    pub fixed_total: usize,
    pub adaptive_matches: usize,
    pub adaptive_total: usize,
}

pub fn score_pair(pair: &EvalPair, n_max: usize) -> Result<PairScore> {
    for (side, seq) in [("predicted", &pair.predicted), ("annotated", &pair.annotated)] {
        if seq.len() > n_max {
            return Err(Error::Contract(format!("{side} sequence of length {} exceeds {n_max}", seq.len())));
        }
    }
    let longest = pair.predicted.len().max(pair.annotated.len());
    let (adaptive_matches, adaptive_total) = if longest == 0 {
        (1, 1)
    } else {
        (padded_matches(&pair.predicted, &pair.annotated, longest), longest)
    };
    Ok(PairScore {
        fixed_matches: padded_matches(&pair.predicted, &pair.annotated, n_max),
        fixed_total: n_max,
        adaptive_matches,
        adaptive_total,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Tally {
    pairs: usize,
    fixed_matches: usize,
    fixed_total: usize,
    adaptive_matches: usize,
    adaptive_total: usize,
    adaptive_pair_sum: f64,
}

impl Tally {
    fn add(&mut self, s: PairScore) {
        self.pairs += 1;
        self.fixed_matches += s.fixed_matches;
        self.fixed_total += s.fixed_total;
        self.adaptive_matches += s.adaptive_matches;
        self.adaptive_total += s.adaptive_total;
        self.adaptive_pair_sum += s.adaptive_matches as f64 / s.adaptive_total as f64;
    }

    fn row(&self, key: String) -> Row {
        let fixed = self.fixed_matches as f64 / self.fixed_total as f64;
        let adaptive = self.adaptive_matches as f64 / self.adaptive_total as f64;
        Row {
            key,
            count: self.pairs,
            fixed_acc: fixed,
            adaptive_acc: adaptive,
            adaptive_acc_macro: self.adaptive_pair_sum / self.pairs as f64,
            gap: fixed - adaptive,
        }
    }
}

fn tally(pairs: &[EvalPair], n_max: usize) -> Result<Tally> {
    if pairs.is_empty() {
        return Err(Error::Contract("accuracy of an empty pair list is undefined".into()));
    }
    let mut t = Tally::default();
    for p in pairs {
        t.add(score_pair(p, n_max)?);
    }
    Ok(t)
}

pub fn fixed_acc(pairs: &[EvalPair], n_max: usize) -> Result<f64> {
    let t = tally(pairs, n_max)?;
    Ok(t.fixed_matches as f64 / t.fixed_total as f64)
}

/// Micro-averaged adaptive accuracy, Σ matches / Σ L.
pub fn adaptive_acc(pairs: &[EvalPair], n_max: usize) -> Result<f64> {
    let t = tally(pairs, n_max)?;
    Ok(t.adaptive_matches as f64 / t.adaptive_total as f64)
}

/// Mean of per-pair adaptive accuracies.
pub fn adaptive_acc_macro(pairs: &[EvalPair], n_max: usize) -> Result<f64> {
    let t = tally(pairs, n_max)?;
    Ok(t.adaptive_pair_sum / t.pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub key: String,
    pub count: usize,
    pub fixed_acc: f64,
    pub adaptive_acc: f64,
    pub adaptive_acc_macro: f64,
    /// fixed_acc − adaptive_acc.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub fixed_acc: f64,
    pub adaptive_acc: f64,
    pub adaptive_acc_macro: f64,
    /// One row per annotated sequence type (`original` for the empty one).
    pub per_type: Vec<Row>,
    /// One row per annotated length.
    pub per_length: Vec<Row>,
}

pub fn breakdown(pairs: &[EvalPair], n_max: usize) -> Result<EvalReport> {
    let total = tally(pairs, n_max)?;
    let mut by_type: BTreeMap<String, Tally> = BTreeMap::new();
    let mut by_len: BTreeMap<usize, Tally> = BTreeMap::new();
    for p in pairs {
        let s = score_pair(p, n_max)?;
        by_type.entry(p.annotated.type_key()).or_default().add(s);
        by_len.entry(p.annotated.len()).or_default().add(s);
    }
    let all = total.row("all".into());
    Ok(EvalReport {
        count: total.pairs,
        fixed_acc: all.fixed_acc,
        adaptive_acc: all.adaptive_acc,
        adaptive_acc_macro: all.adaptive_acc_macro,
        per_type: by_type.into_iter().map(|(k, t)| t.row(k)).collect(),
        per_length: by_len.into_iter().map(|(k, t)| t.row(k.to_string())).collect(),
    })
}

impl EvalReport {
    /// Long-format table: `group,key,count,fixed_acc,adaptive_acc,adaptive_acc_macro,gap`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,key,count,fixed_acc,adaptive_acc,adaptive_acc_macro,gap\n");
        let line = |group: &str, r: &Row| {
            format!(
                "{group},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.key, r.count, r.fixed_acc, r.adaptive_acc, r.adaptive_acc_macro, r.gap
            )
        };
        out += &line(
            "all",
            &Row {
                key: "all".into(),
                count: self.count,
                fixed_acc: self.fixed_acc,
                adaptive_acc: self.adaptive_acc,
                adaptive_acc_macro: self.adaptive_acc_macro,
                gap: self.fixed_acc - self.adaptive_acc,
            },
        );
        for r in &self.per_length {
            out += &line("length", r);
        }
        for r in &self.per_type {
            out += &line("type", r);
        }
        out
    }
}
