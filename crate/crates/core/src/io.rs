//! File formats.
//!
//! Everything is JSONL except the detection feature table (CSV) and score
//! tables, which may be CSV or JSONL. Floats go through `serde_json`, whose
//! shortest round-trip formatting reads back bit-identical.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decay::{CurveKind, DecayCurve, EntropyProfile, FitResult, ModelFamilySpec};
use crate::detect::{DetectionFeatureVector, Label};
use crate::error::{Error, Result};
use crate::metrics::ScoreRow;

/// Default context window carried in record headers.
pub const DEFAULT_WINDOW_HINT: usize = 40;

fn default_window_hint() -> usize {
    DEFAULT_WINDOW_HINT
}

/// First line of a record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub family: ModelFamilySpec,
    #[serde(default)]
    pub corpus_name: Option<String>,
    /// Number of preceding tokens a context is meant to cover.
    #[serde(default = "default_window_hint")]
    pub window_hint: usize,
}

impl RecordHeader {
    pub fn new(family: ModelFamilySpec) -> Self {
        Self {
            family,
            corpus_name: None,
            window_hint: DEFAULT_WINDOW_HINT,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Non-blank lines with 1-based line numbers.
fn lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(Ok((i + 1, l))),
        Err(e) => Some(Err(Error::Io(e))),
    })
}

fn parse_line<T: DeserializeOwned>(line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Format {
        line: line_no,
        message: e.to_string(),
    })
}

/// Parses a record stream: header line, then one profile per line.
pub fn parse_records<R: BufRead>(reader: R) -> Result<(RecordHeader, Vec<EntropyProfile>)> {
    let mut it = lines(reader);
    let (line_no, first) = match it.next() {
        Some(l) => l?,
        None => {
            return Err(Error::Format {
                line: 1,
                message: "missing record header".into(),
            })
        }
    };
    let header: RecordHeader = parse_line(line_no, &first)?;
    let n = header.family.len();
    let mut profiles = Vec::new();
    for item in it {
        let (line_no, line) = item?;
        let p: EntropyProfile = parse_line(line_no, &line)?;
        p.validate(n).map_err(|e| Error::Format {
            line: line_no,
            message: e.to_string(),
        })?;
        profiles.push(p);
    }
    Ok((header, profiles))
}

pub fn read_records(path: &Path) -> Result<(RecordHeader, Vec<EntropyProfile>)> {
    parse_records(open(path)?)
}

/// Writes `path` via a temporary sibling file so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    tmp.set_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn write_line<T: Serialize>(w: &mut dyn Write, item: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, item)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_records(path: &Path, header: &RecordHeader, profiles: &[EntropyProfile]) -> Result<()> {
    for p in profiles {
        p.validate(header.family.len())?;
    }
    write_atomic(path, |w| {
        write_line(w, header)?;
        for p in profiles {
            write_line(w, p)?;
        }
        Ok(())
    })
}

pub fn parse_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    lines(reader)
        .map(|item| {
            let (line_no, line) = item?;
            parse_line(line_no, &line)
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(open(path)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, |w| {
        for item in items {
            write_line(w, item)?;
        }
        Ok(())
    })
}

/// One fitted curve as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub context_id: String,
    pub position: u64,
    pub kind: CurveKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub z: f64,
    pub b: f64,
    pub q: f64,
    pub g: f64,
    pub a_half: f64,
    pub a: Vec<f64>,
    pub loss: f64,
}

impl CurveRecord {
    pub fn new(profile: &EntropyProfile, fit: &FitResult) -> Self {
        let c = &fit.curve;
        Self {
            context_id: profile.context_id.clone(),
            position: profile.position,
            kind: c.kind,
            k: c.k(),
            z: c.z,
            b: c.b,
            q: c.q,
            g: c.g,
            a_half: c.a_half,
            a: c.a.clone(),
            loss: fit.loss,
        }
    }

    pub fn curve(&self) -> Result<DecayCurve> {
        if self.kind == CurveKind::FractionalPolynomial && self.a.len() != self.k {
            return Err(Error::Data(format!(
                "curve {}:{} declares K = {} but has {} coefficients",
                self.context_id,
                self.position,
                self.k,
                self.a.len()
            )));
        }
        DecayCurve::new(self.kind, self.z, self.b, self.q, self.g, self.a_half, self.a.clone())
    }

    pub fn key(&self) -> (String, u64) {
        (self.context_id.clone(), self.position)
    }
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRecord>> {
    let records: Vec<CurveRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        r.curve().map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(records)
}

/// One decoding step of logits. `context_id`/`position`, when present,
/// select the decay curve; otherwise curves are matched by line order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFrame {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<u64>,
    pub expert: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amateur: Option<Vec<f64>>,
}

/// A labeled token range of a context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanLabel {
    pub context_id: String,
    pub start: u64,
    pub end: u64,
    pub label: Label,
}

/// Reads score rows from CSV (by `.csv` extension) or JSONL.
pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut rdr = csv::Reader::from_reader(open(path)?);
        rdr.deserialize()
            .enumerate()
            .map(|(i, r)| {
                r.map_err(|e| Error::Format {
                    line: i + 2,
                    message: e.to_string(),
                })
            })
            .collect()
    } else {
        read_jsonl(path)
    }
}

/// One row of the detection feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub context_id: String,
    pub label: Label,
    pub features: DetectionFeatureVector,
}

/// CSV with a header row; absent perplexity features are empty cells.
pub fn write_feature_table(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["context_id", "label"];
        header.extend(DetectionFeatureVector::NAMES);
        out.write_record(&header).map_err(csv_err)?;
        for r in rows {
            let mut rec = vec![r.context_id.clone(), r.label.to_string()];
            rec.extend(
                r.features
                    .values()
                    .iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
            );
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
