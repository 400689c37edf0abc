//! Versioned CSV and JSON reports.
//!
//! Every CSV row ends with `schema_version,config_hash` columns; every JSON
//! document carries both at the top level together with the resolved
//! configuration it was produced under.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{EvalResult, LossPoint, Tier};
use crate::error::{Error, Result};
use crate::flow::{FlowProfile, Stage, StageSegmentation};
use crate::kape::{KapeRow, KapeTable, Selection, SelectionParams};

pub const SCHEMA_VERSION: u32 = 1;

/// Hex SHA-256 of the compact JSON encoding of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Identity stamped into every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: serde_json::Value,
}

impl ReportMeta {
    pub fn new<T: Serialize>(config: &T) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash(config)?,
            config: serde_json::to_value(config)?,
        })
    }
}

/// A JSON report: metadata, free-form notes and typed records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonReport<T> {
    pub kind: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub notes: Vec<String>,
    pub records: Vec<T>,
}

impl<T: Serialize + DeserializeOwned> JsonReport<T> {
    pub fn new(kind: &str, meta: &ReportMeta, records: Vec<T>) -> Self {
        Self {
            kind: kind.to_string(),
            schema_version: meta.schema_version,
            config_hash: meta.config_hash.clone(),
            config: meta.config.clone(),
            notes: Vec::new(),
            records,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&raw)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "{} has schema version {}, expected {SCHEMA_VERSION}",
                path.display(),
                r.schema_version
            )));
        }
        Ok(r)
    }
}

/// Fixed-column record for CSV output.
pub trait CsvRecord {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// CSV bytes for `rows`, header first, metadata columns last.
pub fn csv_bytes<R: CsvRecord>(rows: &[R], meta: &ReportMeta) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = R::HEADER
        .iter()
        .copied()
        .chain(["schema_version", "config_hash"])
        .collect();
    let csv_err = |e: csv::Error| Error::Format(format!("csv encoding failed: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut f = r.fields();
        f.push(meta.schema_version.to_string());
        f.push(meta.config_hash.clone());
        w.write_record(&f).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv flush failed: {e}")))
}

/// Rows of a CSV file as header-keyed string maps.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<std::collections::BTreeMap<String, String>>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        out.push(
            header
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect(),
        );
    }
    Ok(out)
}

/// Collects the files of one run; on failure, removes what was written.
pub struct OutputSet {
    dir: PathBuf,
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputSet {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            written: Vec::new(),
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes through a temporary file and renames into place.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.partial"));
        let res = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        })();
        if let Err(e) = res {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(&path, e));
        }
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn write_csv<R: CsvRecord>(
        &mut self,
        name: &str,
        rows: &[R],
        meta: &ReportMeta,
    ) -> Result<PathBuf> {
        let bytes = csv_bytes(rows, meta)?;
        self.write(name, &bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Keeps the written files.
    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRow {
    pub layer: usize,
    pub metric: String,
    pub value: f64,
    pub convention: String,
    pub normalization: String,
}

impl CsvRecord for FlowRow {
    const HEADER: &'static [&'static str] =
        &["layer", "metric", "value", "convention", "normalization"];

    fn fields(&self) -> Vec<String> {
        vec![
            self.layer.to_string(),
            self.metric.clone(),
            num(self.value),
            self.convention.clone(),
            self.normalization.clone(),
        ]
    }
}

/// Long-format rows, metric-major then layer.
pub fn flow_rows(profile: &FlowProfile) -> Vec<FlowRow> {
    let mut out = Vec::new();
    for (metric, curve) in profile.curves() {
        for (layer, &value) in curve.iter().enumerate() {
            out.push(FlowRow {
                layer,
                metric: metric.clone(),
                value,
                convention: profile.convention.to_string(),
                normalization: profile.normalization.to_string(),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: Stage,
    pub start: usize,
    pub end: usize,
    pub method: String,
}

impl CsvRecord for StageRow {
    const HEADER: &'static [&'static str] = &["stage", "start", "end", "method"];

    fn fields(&self) -> Vec<String> {
        vec![
            self.stage.to_string(),
            self.start.to_string(),
            self.end.to_string(),
            self.method.clone(),
        ]
    }
}

pub fn stage_rows(seg: &StageSegmentation) -> Vec<StageRow> {
    let method = serde_json::to_value(seg.method)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    Stage::ALL
        .into_iter()
        .map(|s| {
            let r = seg.range(s);
            StageRow {
                stage: s,
                start: r.start,
                end: r.end,
                method: method.clone(),
            }
        })
        .collect()
}

/// Mean probability drop from a key-to-query cut, per stage and tier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub stage: Stage,
    pub tier: Tier,
    pub layer_start: usize,
    pub layer_end: usize,
    /// Answer stated by the tier's passage.
    pub d_external: f64,
    /// The model's own closed-book answer; absent when never defined.
    pub d_internal: Option<f64>,
    pub n_external: usize,
    pub n_internal: usize,
    pub prob_mode: String,
}

impl CsvRecord for HeatmapRow {
    const HEADER: &'static [&'static str] = &[
        "stage",
        "tier",
        "layer_start",
        "layer_end",
        "d_external",
        "d_internal",
        "n_external",
        "n_internal",
        "prob_mode",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.stage.to_string(),
            self.tier.to_string(),
            self.layer_start.to_string(),
            self.layer_end.to_string(),
            num(self.d_external),
            opt(self.d_internal),
            self.n_external.to_string(),
            self.n_internal.to_string(),
            self.prob_mode.clone(),
        ]
    }
}

/// Mean logit-lens value of the internal or external answer token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensRow {
    pub layer: usize,
    pub source: String,
    pub mode: String,
    /// `internal` or `external`.
    pub answer: String,
    pub logit: f64,
    pub n: usize,
}

impl CsvRecord for LensRow {
    const HEADER: &'static [&'static str] = &["layer", "source", "mode", "answer", "logit", "n"];

    fn fields(&self) -> Vec<String> {
        vec![
            self.layer.to_string(),
            self.source.clone(),
            self.mode.clone(),
            self.answer.clone(),
            num(self.logit),
            self.n.to_string(),
        ]
    }
}

impl CsvRecord for KapeRow {
    const HEADER: &'static [&'static str] = &[
        "layer", "neuron", "raw_ik", "raw_ek", "p_ik", "p_ek", "kape", "class",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.layer.to_string(),
            self.neuron.to_string(),
            num(self.raw_ik),
            num(self.raw_ek),
            opt(self.p_ik),
            opt(self.p_ek),
            num(self.kape),
            self.class.to_string(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KapeSummary {
    pub n_neurons: usize,
    pub candidates: usize,
    pub ik: usize,
    pub ek: usize,
    pub none: usize,
    pub params: SelectionParams,
    pub positions: String,
    pub ik_examples: usize,
    pub ek_examples: usize,
    pub skipped_examples: usize,
}

impl KapeSummary {
    pub fn new(
        table: &KapeTable,
        sel: &Selection,
        params: SelectionParams,
        positions: &str,
    ) -> Self {
        Self {
            n_neurons: table.len(),
            candidates: sel.candidates,
            ik: sel.ik.len(),
            ek: sel.ek.len(),
            none: table.len() - sel.ik.len() - sel.ek.len(),
            params,
            positions: positions.to_string(),
            ik_examples: 0,
            ek_examples: 0,
            skipped_examples: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub document: String,
    pub intervention: String,
    pub n: usize,
    pub em: f64,
    pub cem: f64,
    pub f1: f64,
    pub fake_follow: Option<f64>,
}

impl EvalRow {
    pub fn of(r: &EvalResult) -> Self {
        Self {
            document: r.document.to_string(),
            intervention: r.intervention.clone(),
            n: r.examples.len(),
            em: r.em,
            cem: r.cem,
            f1: r.f1,
            fake_follow: r.fake_follow,
        }
    }
}

impl CsvRecord for EvalRow {
    const HEADER: &'static [&'static str] = &[
        "document",
        "intervention",
        "n",
        "em",
        "cem",
        "f1",
        "fake_follow",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.document.clone(),
            self.intervention.clone(),
            self.n.to_string(),
            num(self.em),
            num(self.cem),
            num(self.f1),
            opt(self.fake_follow),
        ]
    }
}

impl CsvRecord for LossPoint {
    const HEADER: &'static [&'static str] = &["step", "loss"];

    fn fields(&self) -> Vec<String> {
        vec![self.step.to_string(), num(self.loss)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"seed": 1})).unwrap();
        assert_eq!(a, config_hash(&serde_json::json!({"seed": 1})).unwrap());
        assert_ne!(a, config_hash(&serde_json::json!({"seed": 2})).unwrap());
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn empty_csv_has_header() {
        let meta = ReportMeta::new(&serde_json::json!({})).unwrap();
        let bytes = csv_bytes::<EvalRow>(&[], &meta).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "document,intervention,n,em,cem,f1,fake_follow,schema_version,config_hash\n"
        );
    }

    #[test]
    fn uncommitted_outputs_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        let path = {
            let mut out = OutputSet::create(dir.path()).unwrap();
            out.write("a.txt", b"x").unwrap()
        };
        assert!(!path.exists());
        let mut out = OutputSet::create(dir.path()).unwrap();
        let p = out.write("b.txt", b"y").unwrap();
        out.commit();
        assert!(p.exists());
    }
}
