//! Config loading and the on-disk formats: JSON documents stamped with the
//! schema version and config hash, and CSV files whose first line is a
//! comment carrying the same stamp.

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use spikelab_core::experiment::ExperimentConfig;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// Parses a JSON config that may contain `//` and `/* */` comments.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut stripped = String::new();
    json_comments::StripComments::new(raw.as_slice())
        .read_to_string(&mut stripped)
        .with_context(|| format!("stripping comments from {}", path.display()))?;
    serde_json::from_str(&stripped).with_context(|| format!("parsing {}", path.display()))
}

/// SHA-256 of the compact JSON form of the effective config, ignoring where
/// the outputs go.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output_dir = None;
    Ok(sha_hex(&serde_json::to_vec(&c)?))
}

pub fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub struct OutDir {
    pub dir: PathBuf,
    pub hash: String,
}

impl OutDir {
    pub fn create(dir: PathBuf, hash: String) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(OutDir { dir, hash })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `{schema_version, config_hash, kind, data}`.
    pub fn write_json<T: Serialize>(&self, name: &str, kind: &str, data: &T) -> Result<PathBuf> {
        let doc = json!({
            "schema_version": SCHEMA_VERSION,
            "config_hash": self.hash,
            "kind": kind,
            "data": data,
        });
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn csv(&self, name: &str, header: &[&str]) -> Csv {
        let mut body = format!("# schema_version={SCHEMA_VERSION} config_hash={}\n", self.hash);
        body.push_str(&header.join(","));
        body.push('\n');
        Csv {
            path: self.path(name),
            body,
            cols: header.len(),
        }
    }
}

/// A CSV file buffered in memory and written once.
pub struct Csv {
    path: PathBuf,
    body: String,
    cols: usize,
}

pub enum Cell {
    Int(usize),
    Float(f64),
    Text(String),
    Empty,
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

/// 17 significant digits: exact round trip for every f64.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl Csv {
    pub fn row(&mut self, cells: Vec<Cell>) {
        debug_assert_eq!(cells.len(), self.cols);
        let line: Vec<String> = cells
            .into_iter()
            .map(|c| match c {
                Cell::Int(v) => v.to_string(),
                Cell::Float(v) => fmt_float(v),
                Cell::Text(t) => t,
                Cell::Empty => String::new(),
            })
            .collect();
        self.body.push_str(&line.join(","));
        self.body.push('\n');
    }

    pub fn finish(self) -> Result<PathBuf> {
        fs::write(&self.path, self.body).with_context(|| format!("writing {}", self.path.display()))?;
        Ok(self.path)
    }
}

/// Merges every stamped JSON document in `dir`, except those named in
/// `exclude`, into one object keyed by file name.
pub fn merge_reports(dir: &Path, exclude: &[&str]) -> Result<Value> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter(|p| p.file_name().is_some_and(|n| !exclude.iter().any(|x| n == *x)))
        .collect();
    names.sort();
    let mut docs = serde_json::Map::new();
    for p in names {
        let text = fs::read_to_string(&p)?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        if v.get("schema_version").is_some() {
            let key = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            docs.insert(key, v);
        }
    }
    Ok(Value::Object(docs))
}
