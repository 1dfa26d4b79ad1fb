//! On-disk artifacts. Every file carries the configuration hash and seed of
//! the run that produced it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtr_core::decoder::IntentionPoints;
use mtr_core::evaluation::{BenchReport, MetricsReport, PredictionSet};
use mtr_core::numerics::ParameterRecord;
use mtr_core::scene::is_header_line;
use mtr_core::training::{write_training_log, EpochLog};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::MissingFile;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Header {
    pub fn new(kind: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            seed,
        }
    }

    fn comment(&self) -> String {
        format!("kind={} config_hash={} seed={}", self.kind, self.config_hash, self.seed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: Header,
    pub config: RunConfig,
    pub intention_points: IntentionPoints,
    pub parameters: ParameterRecord,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsArtifact {
    pub header: Header,
    /// Which simplified metric definitions produced the numbers.
    pub notes: Vec<String>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchArtifact {
    pub header: Header,
    pub report: BenchReport,
}

pub const METRIC_NOTES: [&str; 2] = [
    "miss: static final-step displacement threshold, no velocity or horizon scaling",
    "mAP: all-point interpolated precision-recall per category, one true positive per ground truth, no trajectory-shape buckets",
];

/// Opens `path` for reading, mapping a missing file to [`MissingFile`].
pub fn open(path: &Path) -> Result<File> {
    match File::open(path) {
        Ok(f) => Ok(f),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(MissingFile(path.to_path_buf()).into()),
        Err(e) => Err(e).with_context(|| format!("opening {}", path.display())),
    }
}

pub fn require(path: &Path) -> Result<()> {
    open(path).map(|_| ())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(open(path)?);
    serde_json::from_reader(r).with_context(|| format!("parsing {}", path.display()))
}

/// `path` with its extension replaced by `ext`.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

pub fn write_predictions(path: &Path, header: &Header, sets: &[PredictionSet]) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, &serde_json::json!({ "header": header }))?;
    w.write_all(b"\n")?;
    for s in sets {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<(Option<Header>, Vec<PredictionSet>)> {
    #[derive(Deserialize)]
    struct Wrapped {
        header: Header,
    }
    let r = BufReader::new(open(path)?);
    let mut header = None;
    let mut sets = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && is_header_line(&line) {
            header = Some(serde_json::from_str::<Wrapped>(&line)?.header);
            continue;
        }
        let set: PredictionSet =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        sets.push(set);
    }
    if sets.is_empty() {
        bail!("{} contains no predictions", path.display());
    }
    Ok((header, sets))
}

pub fn write_training_csv(path: &Path, header: &Header, logs: &[EpochLog]) -> Result<()> {
    let mut w = create(path)?;
    write_training_log(&mut w, &[header.comment()], logs)?;
    w.flush()?;
    Ok(())
}

pub fn write_metrics(json: &Path, artifact: &MetricsArtifact) -> Result<()> {
    write_json(json, artifact)?;
    let mut w = create(&sibling(json, "csv"))?;
    writeln!(w, "# {}", artifact.header.comment())?;
    for n in &artifact.notes {
        writeln!(w, "# {n}")?;
    }
    let r = &artifact.report;
    writeln!(w, "# miss_threshold={} excluded={}", r.miss_threshold, r.excluded)?;
    writeln!(w, "category,samples,min_ade,min_fde,miss_rate,average_precision")?;
    for (name, c) in &r.per_category {
        writeln!(
            w,
            "{name},{},{},{},{},{}",
            c.samples, c.min_ade, c.min_fde, c.miss_rate, c.average_precision
        )?;
    }
    writeln!(w, "all,{},{},{},{},{}", r.samples, r.min_ade, r.min_fde, r.miss_rate, r.map)?;
    w.flush()?;
    Ok(())
}

pub fn write_bench(json: &Path, artifact: &BenchArtifact) -> Result<()> {
    write_json(json, artifact)?;
    let mut w = create(&sibling(json, "csv"))?;
    writeln!(w, "# {}", artifact.header.comment())?;
    writeln!(
        w,
        "variant,focal_agents,encoder_median_s,encoder_mad_s,total_median_s,total_mad_s,attention_buffer_bytes,low_resolution"
    )?;
    for e in &artifact.report.entries {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            e.variant,
            e.focal_agents,
            e.encoder.median,
            e.encoder.mad,
            e.total.median,
            e.total.mad,
            e.attention_buffer_bytes,
            e.encoder.low_resolution || e.total.low_resolution
        )?;
    }
    writeln!(w, "# attention memory sweep")?;
    writeln!(w, "tokens,neighbors,local_values,dense_values")?;
    for m in &artifact.report.memory {
        writeln!(w, "{},{},{},{}", m.tokens, m.neighbors, m.local_values, m.dense_values)?;
    }
    w.flush()?;
    Ok(())
}
