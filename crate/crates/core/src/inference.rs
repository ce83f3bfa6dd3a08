//! Greedy decoding and batch inference reports.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::LabelSequence;
use crate::error::{Error, Result};
use crate::model::{image_tensor, Model, ModelKind};
use crate::synth::{Dataset, Image, SampleRecord};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLen,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub labels: LabelSequence,
    /// Logits of every decoding step (for the multi-classifier: every
    /// position, before NM entries are removed).
    pub step_logits: Vec<Tensor>,
    pub stop_reason: StopReason,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_finite(logits: &Tensor, step: usize) -> Result<()> {
    if logits.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite logits at decoding step {step}")))
    }
}

pub fn greedy_decode(model: &Model, image: &Image) -> Result<Prediction> {
    greedy_decode_tensor(model, &image_tensor(image))
}

/// Decodes from SOS, appending the argmax token until EOS or until
/// `max_len` labels have been emitted.
pub fn greedy_decode_tensor(model: &Model, image: &Tensor) -> Result<Prediction> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let img = tape.constant(image.clone());
    let vocab = &model.vocab;
    match model.kind() {
        ModelKind::SeqFakeFormer => {
            let decoder = model.decoder()?;
            let (memory, grid) = model.memory(&p, img)?;
            let mut prefix = vec![vocab.sos()];
            let mut step_logits = Vec::new();
            for step in 0..=model.max_len() {
                let logits = decoder.decode_step(&p, vocab, &prefix, memory, grid)?;
                check_finite(&logits, step)?;
                let next = argmax(logits.data());
                step_logits.push(logits);
                if next == vocab.eos() {
                    return Ok(finish(model, &prefix, step_logits, StopReason::Eos));
                }
                if step == model.max_len() {
                    break;
                }
                prefix.push(next);
            }
            Ok(finish(model, &prefix, step_logits, StopReason::MaxLen))
        }
        ModelKind::MultiCls => {
            let logits = model.multi_cls_logits(&p, img)?.value();
            let classes = logits.shape()[1];
            let nm = vocab.label_count();
            let mut labels = Vec::new();
            let mut step_logits = Vec::new();
            for (k, row) in logits.data().chunks_exact(classes).enumerate() {
                let row = Tensor::new(&[classes], row.to_vec())?;
                check_finite(&row, k)?;
                let c = argmax(row.data());
                if c != nm {
                    labels.push(vocab.labels()[c].clone());
                }
                step_logits.push(row);
            }
            Ok(Prediction {
                labels: LabelSequence(labels),
                step_logits,
                stop_reason: StopReason::MaxLen,
            })
        }
    }
}

fn finish(model: &Model, prefix: &[usize], step_logits: Vec<Tensor>, stop_reason: StopReason) -> Prediction {
    let labels = prefix[1..].iter().map(|&id| model.vocab.labels()[id].clone()).collect();
    Prediction {
        labels: LabelSequence(labels),
        step_logits,
        stop_reason,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub report: String,
    pub model: ModelKind,
    pub checkpoint_hash: String,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<LabelSequence>,
    pub truth: LabelSequence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Decodes every record (in parallel) and keeps manifest order.
pub fn infer_records(dataset: &Dataset, model: &Model, records: &[&SampleRecord]) -> Vec<ReportRecord> {
    records
        .par_iter()
        .map(|rec| {
            let outcome = dataset.image(rec).and_then(|img| greedy_decode(model, &img));
            match outcome {
                Ok(pred) => ReportRecord {
                    id: rec.id.clone(),
                    predicted: Some(pred.labels),
                    truth: rec.labels.clone(),
                    stop_reason: Some(pred.stop_reason),
                    error: None,
                },
                Err(e) => ReportRecord {
                    id: rec.id.clone(),
                    predicted: None,
                    truth: rec.labels.clone(),
                    stop_reason: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Writes a JSON-lines report: one header line, then one line per record.
pub fn write_report(path: &Path, header: &ReportHeader, records: &[ReportRecord]) -> Result<()> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<(ReportHeader, Vec<ReportRecord>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Manifest(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: ReportHeader = serde_json::from_str(&first)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok((header, records))
}

/// Runs inference over `records` and writes the report to `out_path`.
pub fn batch_infer(
    dataset: &Dataset,
    model: &Model,
    checkpoint_hash: &str,
    records: &[&SampleRecord],
    out_path: &Path,
) -> Result<Vec<ReportRecord>> {
    let rows = infer_records(dataset, model, records);
    let header = ReportHeader {
        report: "inference".into(),
        model: model.kind(),
        checkpoint_hash: checkpoint_hash.to_string(),
        records: rows.len(),
    };
    write_report(out_path, &header, &rows)?;
    Ok(rows)
}
