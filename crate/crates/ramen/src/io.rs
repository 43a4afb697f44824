//! On-disk formats: text banks, JSONL datasets with a metadata sidecar,
//! memory snapshots, outcome traces, and the CSV report tables.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ramen_core::analysis::EvalReport;
use ramen_core::datagen::StreamConfig;
use ramen_core::{AdaptOutcome, ClassMemory, Sample, TextBank, UNIT_NORM_TOL};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const METADATA_FILE: &str = "metadata.json";
pub const BANK_FILE: &str = "bank.json";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const MEMORY_FILE: &str = "memory.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PER_DOMAIN_FILE: &str = "per_domain.csv";
pub const COMPOSITION_FILE: &str = "composition.csv";
pub const BINS_FILE: &str = "bins.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Vectors whose norm is off by at most this much are renormalized on load;
/// larger deviations are rejected unless renormalization is requested.
pub const LOAD_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    log_temp: f64,
    class_names: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

/// Sidecar describing a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub class_names: Vec<String>,
    pub domains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_config: Option<StreamConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    v: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub bank: TextBank,
    pub metadata: Metadata,
}

impl Dataset {
    /// Metadata derived from the samples and bank themselves.
    pub fn describe(
        samples: &[Sample],
        bank: &TextBank,
        stream_config: Option<StreamConfig>,
    ) -> Metadata {
        let mut domains: Vec<String> = Vec::new();
        for s in samples {
            if let Some(d) = &s.domain_id {
                if !domains.contains(d) {
                    domains.push(d.clone());
                }
            }
        }
        domains.sort();
        Metadata {
            d: bank.dim(),
            c: bank.num_classes(),
            class_names: bank.class_names().to_vec(),
            domains,
            stream_config,
        }
    }
}

fn check_unit(v: Vec<f64>, renormalize: bool) -> std::result::Result<Vec<f64>, String> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err("non-finite entry".into());
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dev = (n - 1.0).abs();
    if dev <= UNIT_NORM_TOL {
        return Ok(v);
    }
    if n > 0.0 && (dev <= LOAD_NORM_TOL || renormalize) {
        return Ok(v.into_iter().map(|x| x / n).collect());
    }
    Err(format!(
        "norm {n} deviates from 1 by more than {LOAD_NORM_TOL} (use --renormalize)"
    ))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut de = serde_json::Deserializer::from_reader(BufReader::new(file));
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let at = e.path().to_string();
        let msg = if at == "." {
            e.inner().to_string()
        } else {
            format!("{at}: {}", e.inner())
        };
        Error::Config {
            path: path.to_path_buf(),
            msg,
        }
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::invalid(path, e.to_string()))?;
    w.write_all(b"\n").map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn read_bank(path: &Path, renormalize: bool) -> Result<TextBank> {
    let raw: BankFile = read_json(path)?;
    let rows = raw
        .embeddings
        .into_iter()
        .enumerate()
        .map(|(c, row)| {
            check_unit(row, renormalize)
                .map_err(|msg| Error::invalid(path, format!("embeddings[{c}]: {msg}")))
        })
        .collect::<Result<Vec<_>>>()?;
    TextBank::new(rows, raw.log_temp, raw.class_names).map_err(|e| Error::invalid(path, e.to_string()))
}

pub fn write_bank(path: &Path, bank: &TextBank) -> Result<()> {
    let raw = BankFile {
        log_temp: bank.log_temp(),
        class_names: bank.class_names().to_vec(),
        embeddings: bank.rows().map(<[f64]>::to_vec).collect(),
    };
    write_json(path, &raw)
}

/// Reads one sample per non-blank line. With `meta`, dimensions, labels, and
/// domains are checked against it.
pub fn read_samples(path: &Path, meta: Option<&Metadata>, renormalize: bool) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: SampleLine = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        if let Some(m) = meta {
            if rec.v.len() != m.d {
                return Err(fail(format!("expected {} coordinates, got {}", m.d, rec.v.len())));
            }
            if let Some(l) = rec.label {
                if l >= m.c {
                    return Err(fail(format!("label {l} out of range for {} classes", m.c)));
                }
            }
            if let Some(d) = &rec.domain {
                if !m.domains.contains(d) {
                    return Err(fail(format!("domain {d:?} not listed in metadata")));
                }
            }
        }
        let v = check_unit(rec.v, renormalize).map_err(fail)?;
        out.push(Sample::new(v, rec.label, rec.domain).map_err(|e| fail(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let rec = SampleLine {
            v: s.v.clone(),
            label: s.true_label,
            domain: s.domain_id.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::invalid(path, e.to_string()))?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Writes `dataset.jsonl`, `metadata.json`, and `bank.json` into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let paths = [dir.join(DATASET_FILE), dir.join(METADATA_FILE), dir.join(BANK_FILE)];
    write_samples(&paths[0], &data.samples)?;
    write_json(&paths[1], &data.metadata)?;
    write_bank(&paths[2], &data.bank)?;
    Ok(paths.to_vec())
}

pub fn load_dataset(dir: &Path, renormalize: bool) -> Result<Dataset> {
    let meta_path = dir.join(METADATA_FILE);
    let metadata: Metadata = read_json(&meta_path)?;
    let bank_path = dir.join(BANK_FILE);
    let bank = read_bank(&bank_path, renormalize)?;
    if bank.dim() != metadata.d || bank.num_classes() != metadata.c {
        return Err(Error::invalid(
            &bank_path,
            format!(
                "bank is {}x{}, metadata says C={} d={}",
                bank.num_classes(),
                bank.dim(),
                metadata.c,
                metadata.d
            ),
        ));
    }
    if bank.class_names() != metadata.class_names.as_slice() {
        return Err(Error::invalid(&bank_path, "class names differ from metadata"));
    }
    let samples = read_samples(&dir.join(DATASET_FILE), Some(&metadata), renormalize)?;
    Ok(Dataset {
        samples,
        bank,
        metadata,
    })
}

#[derive(Debug, Serialize)]
struct SnapshotLine<'a> {
    seq: u64,
    pseudo_class: usize,
    entropy: f64,
    domain_id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    z: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    g_w: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    g_b: Option<&'a [f64]>,
}

/// Memory contents in insertion order. Embeddings and gradients only when `full`.
pub fn write_snapshot(path: &Path, memory: &ClassMemory, full: bool) -> Result<()> {
    let mut entries: Vec<_> = memory.iter().collect();
    entries.sort_by_key(|e| e.seq);
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        let line = SnapshotLine {
            seq: e.seq,
            pseudo_class: e.pseudo_class,
            entropy: e.entropy,
            domain_id: e.domain_id.as_deref(),
            z: full.then_some(e.z.as_slice()),
            g_w: full.then_some(e.grad.g_w.as_slice()),
            g_b: full.then_some(e.grad.g_b.as_slice()),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::invalid(path, e.to_string()))?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn write_outcomes(path: &Path, outcomes: &[AdaptOutcome]) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for o in outcomes {
        serde_json::to_writer(&mut w, o).map_err(|e| Error::invalid(path, e.to_string()))?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_outcomes(path: &Path) -> Result<Vec<AdaptOutcome>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| Error::invalid(path, e.to_string()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::invalid(path, e.to_string())
}

pub fn write_per_domain_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["domain", "accuracy"]).map_err(csv_err(path))?;
    for (d, acc) in &report.per_domain_accuracy {
        w.write_record([d.as_str(), &acc.to_string()]).map_err(csv_err(path))?;
    }
    w.write_record(["macro_average", &report.macro_average.to_string()])
        .map_err(csv_err(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn write_composition_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["query_domain".to_string()];
    header.extend(report.domains.iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    for (d, row) in report.domains.iter().zip(&report.composition_matrix) {
        let mut rec = vec![d.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn write_bins_csv(path: &Path, bins: Option<&[f64]>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["bin", "same_domain_ratio"]).map_err(csv_err(path))?;
    for (i, b) in bins.unwrap_or_default().iter().enumerate() {
        w.write_record([(i + 1).to_string(), b.to_string()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_unit_tiers() {
        assert_eq!(check_unit(vec![1.0, 0.0], false).unwrap(), vec![1.0, 0.0]);
        let near = check_unit(vec![1.0 + 5e-7, 0.0], false).unwrap();
        assert!((near[0] - 1.0).abs() < 1e-15);
        assert!(check_unit(vec![1.1, 0.0], false).is_err());
        assert_eq!(check_unit(vec![2.0, 0.0], true).unwrap(), vec![1.0, 0.0]);
        assert!(check_unit(vec![0.0, 0.0], true).is_err());
        assert!(check_unit(vec![f64::NAN, 1.0], true).is_err());
    }
}
