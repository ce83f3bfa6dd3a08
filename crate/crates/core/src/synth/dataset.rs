//! Dataset generation, the JSON-lines manifest and on-disk layout.
//!
//! A dataset directory holds `manifest.jsonl`, the manipulated images as
//! `{id}.png` and the untouched faces under `base/{id}.png`. The first
//! manifest line is a header; every following line describes one sample.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::face::{render_face, FaceAnchor};
use super::image::{changed_fraction, quality_score, Image};
use super::ops::{canonical_params, replay, sample_params, OpParams, LABELS};
use crate::decoder::{LabelSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FORMAT_VERSION: u32 = 1;

/// Probabilities of sequence lengths 0..=5. Lengths 1 to 5 follow the
/// proportions reported for the facial-components data; unmanipulated
/// images get no mass by default.
pub const DEFAULT_LENGTH_DIST: [f64; 6] = [0.0, 0.2048, 0.2006, 0.1862, 0.2088, 0.1996];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub length_dist: Vec<f64>,
    /// Samples scoring below this quality are dropped.
    pub quality_threshold: f64,
    /// Upper bound on the mean fraction of pixels a sequence may change.
    pub changed_ceiling: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 0,
            length_dist: DEFAULT_LENGTH_DIST.to_vec(),
            quality_threshold: 0.0,
            changed_ceiling: 0.15,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.length_dist;
        if d.len() != crate::MAX_SEQ_LEN + 1 {
            return Err(Error::Config(format!(
                "length distribution needs {} entries (lengths 0..={}), got {}",
                crate::MAX_SEQ_LEN + 1,
                crate::MAX_SEQ_LEN,
                d.len()
            )));
        }
        if d.iter().any(|p| !p.is_finite() || *p < 0.0) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("length distribution {d:?} must be non-negative and sum to 1")));
        }
        if !(0.0..=1.0).contains(&self.quality_threshold) {
            return Err(Error::Config(format!("quality threshold {} outside [0, 1]", self.quality_threshold)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Short hex digest of a value's canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// 80/10/10 assignment from a hash of the sample id.
pub fn split_for(id: &str) -> Split {
    let digest = Sha256::digest(id.as_bytes());
    match u64::from_le_bytes(digest[..8].try_into().unwrap()) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub base_image: String,
    pub labels: LabelSequence,
    pub ops: Vec<OpParams>,
    pub anchor: FaceAnchor,
    pub split: Split,
    pub quality: f64,
}

impl SampleRecord {
    /// Parameters for `labels`, taken from the recorded ops. Labels the
    /// sample never received fall back to canonical parameters when
    /// `allow_fallback` is set, and are a manifest error otherwise.
    pub fn params_for(&self, labels: &LabelSequence, allow_fallback: bool) -> Result<Vec<OpParams>> {
        labels
            .iter()
            .map(|l| match self.ops.iter().find(|op| op.label == l) {
                Some(op) => Ok(op.clone()),
                None if allow_fallback => canonical_params(l, self.anchor),
                None => Err(Error::Manifest(format!("sample {} has no parameters for {l:?}", self.id))),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub record: SampleRecord,
    pub base: Image,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub config_hash: String,
    pub config: GenerateConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
}

pub fn default_vocab() -> Vocabulary {
    Vocabulary::new(LABELS).expect("built-in labels are valid")
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:06}")
}

/// Builds sample `index`; a pure function of the seed and index.
pub fn generate_sample(config: &GenerateConfig, index: usize) -> Result<Sample> {
    let mut r = rng::derive(config.seed, index as u64);
    let (base, anchor) = render_face(&mut r);
    let lengths = WeightedIndex::new(&config.length_dist).map_err(|e| Error::Config(e.to_string()))?;
    let n = lengths.sample(&mut r);
    let mut labels: Vec<&str> = LABELS.to_vec();
    labels.shuffle(&mut r);
    labels.truncate(n);
    let ops = labels
        .iter()
        .map(|l| sample_params(l, anchor, &mut r))
        .collect::<Result<Vec<_>>>()?;
    let image = replay(&base, &ops)?;
    let id = sample_id(index);
    let record = SampleRecord {
        image: format!("{id}.png"),
        base_image: format!("base/{id}.png"),
        labels: LabelSequence::new(labels),
        ops,
        anchor,
        split: split_for(&id),
        quality: quality_score(&image),
        id,
    };
    Ok(Sample { record, base, image })
}

/// Generates the whole dataset in memory, applying the quality filter and
/// the subtlety ceiling.
pub fn generate(config: &GenerateConfig) -> Result<(Manifest, Vec<Sample>)> {
    config.validate()?;
    let samples: Vec<Sample> = (0..config.n_samples)
        .into_par_iter()
        .map(|i| generate_sample(config, i))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|s| s.record.quality >= config.quality_threshold)
        .collect();
    if !samples.is_empty() {
        let mean = samples.iter().map(|s| changed_fraction(&s.base, &s.image)).sum::<f64>() / samples.len() as f64;
        if mean > config.changed_ceiling {
            return Err(Error::Config(format!(
                "manipulations change {:.1}% of pixels on average, above the {:.1}% ceiling",
                100.0 * mean,
                100.0 * config.changed_ceiling
            )));
        }
    }
    let manifest = Manifest {
        header: ManifestHeader {
            version: FORMAT_VERSION,
            seed: config.seed,
            vocab: default_vocab(),
            config_hash: config.hash(),
            config: config.clone(),
        },
        records: samples.iter().map(|s| s.record.clone()).collect(),
    };
    Ok((manifest, samples))
}

/// Generates a dataset and writes it under `dir`.
pub fn write_dataset(dir: &Path, config: &GenerateConfig) -> Result<Manifest> {
    let (manifest, samples) = generate(config)?;
    let base_dir = dir.join("base");
    std::fs::create_dir_all(&base_dir).map_err(|e| Error::io(&base_dir, e))?;
    samples.par_iter().try_for_each(|s| {
        s.image.save(&dir.join(&s.record.image))?;
        s.base.save(&dir.join(&s.record.base_image))
    })?;
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl Manifest {
    pub fn vocab(&self) -> &Vocabulary {
        &self.header.vocab
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_jsonl()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Manifest(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: ManifestHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::Manifest(format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Compat(format!("manifest version {} (expected {FORMAT_VERSION})", header.version)));
        }
        let mut records: Vec<SampleRecord> = Vec::new();
        let mut ids = std::collections::HashSet::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord =
                serde_json::from_str(&line).map_err(|e| Error::Manifest(format!("record {}: {e}", n + 1)))?;
            for l in rec.labels.iter() {
                header.vocab.id(l)?;
            }
            if !ids.insert(rec.id.clone()) {
                return Err(Error::Manifest(format!("duplicate id {}", rec.id)));
            }
            records.push(rec);
        }
        Ok(Manifest { header, records })
    }
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::read(&dir.join(MANIFEST_FILE))?,
        })
    }

    pub fn image(&self, record: &SampleRecord) -> Result<Image> {
        Image::load(&self.dir.join(&record.image))
    }

    pub fn base(&self, record: &SampleRecord) -> Result<Image> {
        Image::load(&self.dir.join(&record.base_image))
    }
}
