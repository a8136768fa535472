//! Dataset readers and writers.
//!
//! JSONL holds one sequence per line:
//! `{"x": [..], "y": [..], "t": [..], "pen": [..], "label": "..", "metadata": {..}}`
//! with `t` optional and `pen` given as 0/1 or booleans.
//!
//! SVC text holds one or more blocks, each a point-count line followed by
//! that many whitespace-separated rows. [`ColumnMap::svc_columns`] names the
//! columns in order (`x`, `y`, `t`, `pen`; any other name is ignored). The
//! default is `x y t pen` with timestamps in milliseconds and a nonzero
//! button value meaning pen down.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use strokesyn_core::ink::{InkError, InkSample, InkSequence};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{source_name}:{line}: {message}")]
    Parse { source_name: String, line: usize, message: String },
    #[error("{source_name}:{line}: {error}")]
    Invalid { source_name: String, line: usize, error: InkError },
    #[error("unsupported dataset format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid column map: {0}")]
    ColumnMap(String),
    #[error("{path}: {error}")]
    File { path: String, error: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Jsonl,
    Svc,
}

impl Format {
    /// `.jsonl` and `.svc` (also `.txt`, as shipped by signature corpora).
    pub fn from_path(path: &Path) -> Result<Format, IoError> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        match ext.as_str() {
            "jsonl" => Ok(Format::Jsonl),
            "svc" | "txt" => Ok(Format::Svc),
            _ => Err(IoError::UnsupportedFormat(path.display().to_string())),
        }
    }
}

impl std::str::FromStr for Format {
    type Err = IoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "svc" => Ok(Format::Svc),
            other => Err(IoError::UnsupportedFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub svc_columns: Vec<String>,
    /// SVC timestamps are divided by this to get seconds.
    pub time_divisor: f64,
    /// JSONL field holding the label.
    pub label_field: String,
    /// Applied to the SVC file stem; the `label` group (or the whole match)
    /// becomes the label. Without it the stem itself is the label.
    pub label_regex: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            svc_columns: ["x", "y", "t", "pen"].map(String::from).to_vec(),
            time_divisor: 1000.0,
            label_field: "label".into(),
            label_regex: None,
        }
    }
}

/// Resolved SVC column positions.
#[derive(Debug, Clone, Copy)]
struct Columns {
    x: usize,
    y: usize,
    t: Option<usize>,
    pen: Option<usize>,
    width: usize,
}

impl ColumnMap {
    fn columns(&self) -> Result<Columns, IoError> {
        let find = |name: &str| -> Result<Option<usize>, IoError> {
            let mut hits = self.svc_columns.iter().enumerate().filter(|(_, c)| c.as_str() == name).map(|(i, _)| i);
            let first = hits.next();
            if hits.next().is_some() {
                return Err(IoError::ColumnMap(format!("column {name:?} appears twice")));
            }
            Ok(first)
        };
        let required = |name: &str| find(name)?.ok_or_else(|| IoError::ColumnMap(format!("no {name:?} column")));
        if !(self.time_divisor.is_finite() && self.time_divisor > 0.0) {
            return Err(IoError::ColumnMap("time_divisor must be positive".into()));
        }
        Ok(Columns { x: required("x")?, y: required("y")?, t: find("t")?, pen: find("pen")?, width: self.svc_columns.len() })
    }

    fn label_from_stem(&self, stem: &str) -> Result<String, IoError> {
        let Some(pattern) = &self.label_regex else {
            return Ok(stem.to_string());
        };
        let re = Regex::new(pattern).map_err(|e| IoError::ColumnMap(e.to_string()))?;
        Ok(match re.captures(stem) {
            Some(c) => c.name("label").or_else(|| c.get(0)).map_or(stem, |m| m.as_str()).to_string(),
            None => stem.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
enum PenValue {
    Bool(bool),
    Int(u8),
}

impl PenValue {
    fn down(self) -> Option<bool> {
        match self {
            PenValue::Bool(b) => Some(b),
            PenValue::Int(0) => Some(false),
            PenValue::Int(1) => Some(true),
            PenValue::Int(_) => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    x: Vec<f64>,
    y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<Vec<f64>>,
    pen: Vec<PenValue>,
    #[serde(flatten)]
    rest: BTreeMap<String, serde_json::Value>,
}

fn parse_err(source_name: &str, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { source_name: source_name.to_string(), line, message: message.into() }
}

fn checked(ink: InkSequence, source_name: &str, line: usize) -> Result<InkSequence, IoError> {
    let err = |error| IoError::Invalid { source_name: source_name.to_string(), line, error };
    if ink.len() < 2 {
        return Err(err(InkError::EmptySequence(ink.len())));
    }
    ink.validate().map_err(err)?;
    Ok(ink)
}

fn read_jsonl(reader: impl BufRead, map: &ColumnMap, source_name: &str) -> Result<Vec<InkSequence>, IoError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(source_name, n, e.to_string()))?;
        let len = rec.x.len();
        if rec.y.len() != len || rec.pen.len() != len || rec.t.as_ref().is_some_and(|t| t.len() != len) {
            return Err(parse_err(source_name, n, "x, y, t and pen arrays differ in length"));
        }
        let label = match rec.rest.remove(&map.label_field) {
            None | Some(serde_json::Value::Null) => String::new(),
            Some(serde_json::Value::String(s)) => s,
            Some(other) => other.to_string(),
        };
        let metadata = match rec.rest.remove("metadata") {
            None | Some(serde_json::Value::Null) => BTreeMap::new(),
            Some(v) => serde_json::from_value(v).map_err(|e| parse_err(source_name, n, format!("metadata: {e}")))?,
        };
        let mut samples = Vec::with_capacity(len);
        for k in 0..len {
            let pen_down = rec.pen[k].down().ok_or_else(|| parse_err(source_name, n, format!("pen[{k}] is not 0 or 1")))?;
            samples.push(InkSample { x: rec.x[k], y: rec.y[k], t: rec.t.as_ref().map(|t| t[k]), pen_down });
        }
        out.push(checked(InkSequence { samples, label, metadata }, source_name, n)?);
    }
    Ok(out)
}

fn read_svc(reader: impl BufRead, map: &ColumnMap, source_name: &str) -> Result<Vec<InkSequence>, IoError> {
    let stem = Path::new(source_name).file_stem().and_then(|s| s.to_str()).unwrap_or(source_name);
    let label = map.label_from_stem(stem)?;
    let cm = map.columns()?;
    let width = cm.width;
    let mut out = Vec::new();
    let mut lines = reader.lines().enumerate();
    let mut block = 0;
    while let Some((i, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let header_line = i + 1;
        let count: usize = line.trim().parse().map_err(|_| parse_err(source_name, header_line, "expected a point count"))?;
        let mut samples = Vec::with_capacity(count);
        while samples.len() < count {
            let Some((j, row)) = lines.next() else {
                return Err(parse_err(source_name, i + 1 + samples.len(), format!("expected {count} points, found {}", samples.len())));
            };
            let row = row?;
            let n = j + 1;
            let cols: Vec<f64> = row
                .split_whitespace()
                .map(|c| c.parse::<f64>().map_err(|_| parse_err(source_name, n, format!("bad number {c:?}"))))
                .collect::<Result<_, _>>()?;
            if cols.len() < width {
                return Err(parse_err(source_name, n, format!("expected at least {width} columns, found {}", cols.len())));
            }
            let pen_down = cm.pen.is_none_or(|p| cols[p] != 0.0);
            let t = cm.t.map(|c| cols[c] / map.time_divisor);
            samples.push(InkSample { x: cols[cm.x], y: cols[cm.y], t, pen_down });
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("source".to_string(), source_name.to_string());
        if block > 0 {
            metadata.insert("block".to_string(), block.to_string());
        }
        out.push(checked(InkSequence { samples, label: label.clone(), metadata }, source_name, header_line)?);
        block += 1;
    }
    Ok(out)
}

/// Parses every sequence in `reader`; `source_name` appears in errors and,
/// for SVC, supplies the label.
pub fn read_dataset(reader: impl BufRead, format: Format, map: &ColumnMap, source_name: &str) -> Result<Vec<InkSequence>, IoError> {
    map.columns()?;
    match format {
        Format::Jsonl => read_jsonl(reader, map, source_name),
        Format::Svc => read_svc(reader, map, source_name),
    }
}

/// Reads a file, or every `.jsonl`/`.svc`/`.txt` file of a directory in name order.
pub fn read_dataset_path(path: &Path, format: Option<Format>, map: &ColumnMap) -> Result<Vec<InkSequence>, IoError> {
    let file_err = |error| IoError::File { path: path.display().to_string(), error };
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)
            .map_err(file_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && Format::from_path(p).is_ok())
            .collect();
        entries.sort();
        let mut out = Vec::new();
        for p in entries {
            out.extend(read_dataset_path(&p, format, map)?);
        }
        return Ok(out);
    }
    let format = match format {
        Some(f) => f,
        None => Format::from_path(path)?,
    };
    let file = File::open(path).map_err(file_err)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("input");
    read_dataset(BufReader::new(file), format, map, name)
}

fn fmt_time(t: f64, divisor: f64) -> String {
    let raw = t * divisor;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-6 && rounded / divisor == t {
        format!("{rounded}")
    } else {
        format!("{raw}")
    }
}

pub fn write_dataset(mut writer: impl Write, seqs: &[InkSequence], format: Format, map: &ColumnMap) -> Result<(), IoError> {
    let cm = map.columns()?;
    match format {
        Format::Jsonl => {
            for s in seqs {
                let mut rest = BTreeMap::new();
                rest.insert(map.label_field.clone(), serde_json::Value::String(s.label.clone()));
                if !s.metadata.is_empty() {
                    rest.insert("metadata".to_string(), serde_json::to_value(&s.metadata).expect("string map"));
                }
                let rec = JsonRecord {
                    x: s.samples.iter().map(|p| p.x).collect(),
                    y: s.samples.iter().map(|p| p.y).collect(),
                    t: s.has_timestamps().then(|| s.samples.iter().map(|p| p.t.unwrap_or(0.0)).collect()),
                    pen: s.samples.iter().map(|p| PenValue::Int(u8::from(p.pen_down))).collect(),
                    rest,
                };
                serde_json::to_writer(&mut writer, &rec).map_err(std::io::Error::from)?;
                writer.write_all(b"\n")?;
            }
        }
        Format::Svc => {
            for s in seqs {
                writeln!(writer, "{}", s.len())?;
                for p in &s.samples {
                    let mut cols = vec![String::from("0"); cm.width];
                    cols[cm.x] = format!("{}", p.x);
                    cols[cm.y] = format!("{}", p.y);
                    if let Some(c) = cm.t {
                        cols[c] = fmt_time(p.t.unwrap_or(0.0), map.time_divisor);
                    }
                    if let Some(c) = cm.pen {
                        cols[c] = String::from(if p.pen_down { "1" } else { "0" });
                    }
                    writeln!(writer, "{}", cols.join(" "))?;
                }
            }
        }
    }
    Ok(())
}

pub fn write_dataset_path(path: &Path, seqs: &[InkSequence], format: Format, map: &ColumnMap) -> Result<(), IoError> {
    let file = File::create(path).map_err(|error| IoError::File { path: path.display().to_string(), error })?;
    let mut w = BufWriter::new(file);
    write_dataset(&mut w, seqs, format, map)?;
    w.flush()?;
    Ok(())
}
