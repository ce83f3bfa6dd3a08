//! The four-configuration ablation over the autoregressive mask and SECA.

use serde::{Deserialize, Serialize};

use super::{evaluate_pairs, train, Example, TrainConfig};
use crate::decoder::SecaMode;
use crate::error::Result;
use crate::metrics::{adaptive_acc, fixed_acc};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::decoder::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub autoregressive: bool,
    pub seca: SecaMode,
    pub fixed_acc: f64,
    pub adaptive_acc: f64,
    pub per_seed_fixed: Vec<f64>,
    pub per_seed_adaptive: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Row order: neither component, SECA only, autoregressive only, both.
pub const CONFIGURATIONS: [(bool, SecaMode); 4] = [
    (false, SecaMode::Off),
    (false, SecaMode::MultiHead),
    (true, SecaMode::Off),
    (true, SecaMode::MultiHead),
];

/// Trains and tests one decoder configuration per seed; returns the
/// (fixed, adaptive) test accuracies per seed.
pub fn run_configuration(
    base: &ModelConfig,
    vocab: &Vocabulary,
    autoregressive: bool,
    seca: SecaMode,
    data: (&[Example], &[Example], &[Example]),
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<(f64, f64)>> {
    let mc = ModelConfig {
        kind: ModelKind::SeqFakeFormer,
        ..base.clone()
    }
    .with_ablation(seca, autoregressive);
    let (train_set, val_set, test_set) = data;
    seeds
        .iter()
        .map(|&seed| {
            let mut model = Model::new(&mc, vocab, seed)?;
            let tc = TrainConfig { seed, ..config.clone() };
            train(&mut model, train_set, val_set, &tc, |_| {})?;
            let pairs = evaluate_pairs(&model, test_set)?;
            Ok((fixed_acc(&pairs, model.max_len())?, adaptive_acc(&pairs, model.max_len())?))
        })
        .collect()
}

pub fn ablate(
    base: &ModelConfig,
    vocab: &Vocabulary,
    data: (&[Example], &[Example], &[Example]),
    config: &TrainConfig,
    seeds: &[u64],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (autoregressive, seca) in CONFIGURATIONS {
        let scores = run_configuration(base, vocab, autoregressive, seca, data, config, seeds)?;
        let n = scores.len().max(1) as f64;
        let row = AblationRow {
            autoregressive,
            seca,
            fixed_acc: scores.iter().map(|s| s.0).sum::<f64>() / n,
            adaptive_acc: scores.iter().map(|s| s.1).sum::<f64>() / n,
            per_seed_fixed: scores.iter().map(|s| s.0).collect(),
            per_seed_adaptive: scores.iter().map(|s| s.1).collect(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(AblationTable { rows })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("autoregressive,seca,fixed_acc,adaptive_acc\n");
        for r in &self.rows {
            out += &format!(
                "{},{},{:.6},{:.6}\n",
                if r.autoregressive { "on" } else { "off" },
                r.seca,
                r.fixed_acc,
                r.adaptive_acc
            );
        }
        out
    }
}
