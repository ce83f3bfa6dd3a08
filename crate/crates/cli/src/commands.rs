use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use seqtrace::config::RunConfig;
use seqtrace::decoder::LabelSequence;
use seqtrace::inference::{greedy_decode, infer_records, read_report, write_report, ReportHeader};
use seqtrace::metrics::{breakdown, EvalPair};
use seqtrace::model::Model;
use seqtrace::synth::{identity_distance, recover as undo, write_dataset, Dataset, Image, RecoveryOrder, Split};
use seqtrace::train::checkpoint::file_digest;
use seqtrace::train::{self, ablate as run_ablation, log_csv, Checkpoint, Example};
use seqtrace::{Error, Result};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    std::fs::File::create(path).map_err(io)?.write_all(bytes).map_err(io)
}

fn load_split(ds: &Dataset, split: Split) -> Result<Vec<Example>> {
    ds.manifest
        .split(split)
        .map(|r| {
            Ok(Example {
                id: r.id.clone(),
                image: ds.image(r)?,
                labels: r.labels.clone(),
            })
        })
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok((Checkpoint::from_bytes(&bytes)?, file_digest(&bytes)))
}

pub fn generate(config: &RunConfig, out: &Path) -> Result<()> {
    let manifest = write_dataset(out, &config.generate_config())?;
    let count = |s| manifest.split(s).count();
    println!(
        "wrote {} samples to {} (train {}, val {}, test {}; config {})",
        manifest.records.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        manifest.header.config_hash
    );
    Ok(())
}

pub fn train(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    let train_set = load_split(&ds, Split::Train)?;
    let val_set = load_split(&ds, Split::Val)?;
    let tc = config.train_config();
    let mut model = Model::new(&config.model_config(), ds.manifest.vocab(), config.seed)?;
    eprintln!(
        "training {} on {} samples ({} val), {} parameters",
        model.kind(),
        train_set.len(),
        val_set.len(),
        model.params.numel()
    );
    let started = Instant::now();
    let outcome = train::train(&mut model, &train_set, &val_set, &tc, |e| {
        let val = match (e.val_fixed_acc, e.val_adaptive_acc) {
            (Some(f), Some(a)) => format!(", val fixed {f:.4} adaptive {a:.4}"),
            _ => String::new(),
        };
        eprintln!("epoch {:>3}: loss {:.4}{val}", e.epoch, e.train_loss);
    })?;
    let ck = Checkpoint::from_model(
        &model,
        Some(&outcome.momentum),
        outcome.best_epoch,
        Some(&tc),
        &ds.manifest.header.config_hash,
    );
    ck.save(out)?;
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".log.csv");
    write_file(Path::new(&log_path), log_csv(&outcome.log).as_bytes())?;
    eprintln!("finished in {:.1}s", started.elapsed().as_secs_f64());
    if let Some(msg) = outcome.diverged {
        return Err(Error::Numeric(format!("training diverged at {msg}; last good weights saved")));
    }
    println!("saved {} (epoch {}, config {})", out.display(), outcome.best_epoch, ck.header.config_hash);
    Ok(())
}

pub fn eval(config: &RunConfig, data: &Path, ckpt: &Path, report: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    let ds = Dataset::open(data)?;
    let (ck, digest) = load_checkpoint(ckpt)?;
    ck.check_vocab(ds.manifest.vocab())?;
    let (model, _) = ck.to_model()?;
    let records: Vec<_> = ds.manifest.split(config.split).collect();
    let rows = infer_records(&ds, &model, &records);
    if let Some(path) = report {
        let header = ReportHeader {
            report: format!("eval:{}", config.split),
            model: model.kind(),
            checkpoint_hash: digest,
            records: rows.len(),
        };
        write_report(path, &header, &rows)?;
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let pairs: Vec<EvalPair> = rows
        .iter()
        .filter_map(|r| Some(EvalPair::new(r.predicted.clone()?, r.truth.clone())))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Config(format!("the {} split has no scorable samples", config.split)));
    }
    let rep = breakdown(&pairs, model.max_len())?;
    if let Some(path) = csv {
        write_file(path, rep.to_csv().as_bytes())?;
    }
    println!("split {} ({} samples, {failed} unreadable)", config.split, rep.count);
    println!("fixed_acc {:.4}", rep.fixed_acc);
    println!("adaptive_acc {:.4}", rep.adaptive_acc);
    println!("adaptive_acc_macro {:.4}", rep.adaptive_acc_macro);
    println!("{:>6} {:>6} {:>9} {:>12} {:>7}", "length", "count", "fixed", "adaptive", "gap");
    for r in &rep.per_length {
        println!(
            "{:>6} {:>6} {:>9.4} {:>12.4} {:>7.4}",
            r.key, r.count, r.fixed_acc, r.adaptive_acc, r.gap
        );
    }
    Ok(())
}

pub fn infer(image: &Path, ckpt: &Path) -> Result<()> {
    let (ck, _) = load_checkpoint(ckpt)?;
    let (model, _) = ck.to_model()?;
    let pred = greedy_decode(&model, &Image::load(image)?)?;
    println!("{}", serde_json::to_string(&pred.labels)?);
    Ok(())
}

pub fn ablate(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    let (train_set, val_set, test_set) = (
        load_split(&ds, Split::Train)?,
        load_split(&ds, Split::Val)?,
        load_split(&ds, Split::Test)?,
    );
    if test_set.is_empty() {
        return Err(Error::Config("the dataset has no test split".into()));
    }
    let seeds: Vec<u64> = (0..config.seeds as u64).map(|i| config.seed + i).collect();
    println!("{:>14} {:>10} {:>9} {:>9}", "autoregressive", "seca", "fixed", "adaptive");
    let table = run_ablation(
        &config.model_config(),
        ds.manifest.vocab(),
        (&train_set, &val_set, &test_set),
        &config.train_config(),
        &seeds,
        |r| {
            let ar = if r.autoregressive { "on" } else { "off" };
            println!("{ar:>14} {:>10} {:>9.4} {:>9.4}", r.seca.to_string(), r.fixed_acc, r.adaptive_acc);
        },
    )?;
    write_file(out, table.to_csv().as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoverMode {
    /// Predicted labels, inverses in reverse order.
    Predicted,
    /// Annotated labels, inverses in reverse order.
    Truth,
    /// Annotated labels, inverses in application order.
    Shuffled,
}

#[derive(Serialize)]
struct RecoveryHeader<'a> {
    report: &'a str,
    mode: RecoverMode,
    checkpoint_hash: &'a str,
    records: usize,
    mean_distance: f64,
}

#[derive(Serialize)]
struct RecoveryRecord {
    id: String,
    labels: LabelSequence,
    image: String,
    distance: f64,
}

pub fn recover(data: &Path, report: &Path, out: &Path, mode: RecoverMode) -> Result<()> {
    let ds = Dataset::open(data)?;
    let (header, rows) = read_report(report)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for row in &rows {
        let rec = ds
            .manifest
            .record(&row.id)
            .ok_or_else(|| Error::Compat(format!("report id {} is not in the dataset", row.id)))?;
        let (labels, order) = match (mode, &row.predicted) {
            (RecoverMode::Predicted, Some(p)) => (p.clone(), RecoveryOrder::Correct),
            (RecoverMode::Predicted, None) => {
                skipped += 1;
                continue;
            }
            (RecoverMode::Truth, _) => (rec.labels.clone(), RecoveryOrder::Correct),
            (RecoverMode::Shuffled, _) => (rec.labels.clone(), RecoveryOrder::Shuffled),
        };
        let params = rec.params_for(&labels, true)?;
        let restored = undo(&ds.image(rec)?, &params, order)?;
        let distance = identity_distance(&restored, &ds.base(rec)?)?;
        let name = format!("{}.png", rec.id);
        restored.save(&out.join(&name))?;
        records.push(RecoveryRecord {
            id: rec.id.clone(),
            labels,
            image: name,
            distance,
        });
    }
    let n = records.len();
    let mean = records.iter().map(|r| r.distance).sum::<f64>() / n.max(1) as f64;
    let exact = records.iter().filter(|r| r.distance == 0.0).count();
    let head = RecoveryHeader {
        report: "recovery",
        mode,
        checkpoint_hash: &header.checkpoint_hash,
        records: n,
        mean_distance: mean,
    };
    let mut bytes = serde_json::to_vec(&head)?;
    bytes.push(b'\n');
    for r in &records {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    write_file(&out.join(RECOVERY_FILE), &bytes)?;
    println!("recovered {n} images ({skipped} skipped): mean identity distance {mean:.6}, {exact} exact");
    Ok(())
}

pub const RECOVERY_FILE: &str = "recovery.jsonl";
