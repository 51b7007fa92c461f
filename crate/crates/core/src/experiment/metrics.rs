//! Versioned CSV tables with JSON mirrors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::SCHEMA_VERSION;
use crate::error::{Error, Result};

/// A row type persisted as `<FILE>.csv` plus `<FILE>.json`.
pub trait Table: Serialize + DeserializeOwned + Clone {
    const FILE: &'static str;
    const COLUMNS: &'static [&'static str];
    fn schema_version(&self) -> u32;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub config_hash: String,
    pub run_id: String,
    pub phase: String,
    pub checkpoint: String,
    pub epoch: Option<usize>,
    pub eta_train: Option<f64>,
    pub eta_inf: Option<f64>,
    pub temporal_frac: Option<f64>,
    pub spatial_frac: Option<f64>,
    pub temperature: Option<f64>,
    pub alpha: Option<f64>,
    pub bits: Option<u32>,
    pub clean_acc: Option<f64>,
    pub noisy_acc_mean: Option<f64>,
    pub noisy_acc_std: Option<f64>,
    pub runs: Option<usize>,
    pub loss_hard: Option<f64>,
    pub loss_soft: Option<f64>,
    pub loss_reg: Option<f64>,
    pub loss_total: Option<f64>,
    /// Wall-clock time; the only non-deterministic column.
    pub seconds: Option<f64>,
}

impl Table for MetricsRow {
    const FILE: &'static str = "metrics";
    const COLUMNS: &'static [&'static str] = &[
        "schema_version",
        "config_hash",
        "run_id",
        "phase",
        "checkpoint",
        "epoch",
        "eta_train",
        "eta_inf",
        "temporal_frac",
        "spatial_frac",
        "temperature",
        "alpha",
        "bits",
        "clean_acc",
        "noisy_acc_mean",
        "noisy_acc_std",
        "runs",
        "loss_hard",
        "loss_soft",
        "loss_reg",
        "loss_total",
        "seconds",
    ];
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BvRow {
    pub schema_version: u32,
    pub config_hash: String,
    pub run_id: String,
    pub checkpoint: String,
    pub reference: String,
    pub eta: f64,
    pub l_var: f64,
    pub l_bias: f64,
    pub l_pretrained: f64,
    pub normalization: f64,
    pub n_instances: usize,
}

impl Table for BvRow {
    const FILE: &'static str = "bv";
    const COLUMNS: &'static [&'static str] = &[
        "schema_version",
        "config_hash",
        "run_id",
        "checkpoint",
        "reference",
        "eta",
        "l_var",
        "l_bias",
        "l_pretrained",
        "normalization",
        "n_instances",
    ];
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiRow {
    pub schema_version: u32,
    pub config_hash: String,
    pub run_id: String,
    pub checkpoint: String,
    pub seed: u64,
    pub eta: f64,
    pub h_y: f64,
    pub h_y_given_x: f64,
    pub mi: f64,
    pub normalized: Option<f64>,
    pub bins: usize,
    pub subset: usize,
    pub repeats: usize,
}

impl Table for MiRow {
    const FILE: &'static str = "mi";
    const COLUMNS: &'static [&'static str] = &[
        "schema_version",
        "config_hash",
        "run_id",
        "checkpoint",
        "seed",
        "eta",
        "h_y",
        "h_y_given_x",
        "mi",
        "normalized",
        "bins",
        "subset",
        "repeats",
    ];
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

/// Long-format record: one metric value with its identifying coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub schema_version: u32,
    pub table: String,
    pub run_id: String,
    pub phase: String,
    pub checkpoint: String,
    pub epoch: Option<usize>,
    pub eta_train: Option<f64>,
    pub eta_inf: Option<f64>,
    pub seed: Option<u64>,
    pub metric: String,
    pub value: f64,
}

impl Table for LongRow {
    const FILE: &'static str = "long";
    const COLUMNS: &'static [&'static str] = &[
        "schema_version",
        "table",
        "run_id",
        "phase",
        "checkpoint",
        "epoch",
        "eta_train",
        "eta_inf",
        "seed",
        "metric",
        "value",
    ];
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

pub fn csv_path<T: Table>(dir: &Path) -> PathBuf {
    dir.join(format!("{}.csv", T::FILE))
}

/// Writes `rows` as CSV (header first) and as a JSON array mirror.
pub fn write_table<T: Table>(dir: &Path, rows: &[T]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(csv_path::<T>(dir))?;
    if rows.is_empty() {
        w.write_record(T::COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join(format!("{}.json", T::FILE)), serde_json::to_vec_pretty(rows)?)?;
    Ok(())
}

/// Reads a table, failing on any header or schema-version mismatch.
pub fn read_table<T: Table>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != T::COLUMNS {
        return Err(Error::Report(format!(
            "{}: header does not match schema version {SCHEMA_VERSION} ({} columns found, {} expected)",
            path.display(),
            header.len(),
            T::COLUMNS.len()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<T>().enumerate() {
        let row = rec?;
        if row.schema_version() != SCHEMA_VERSION {
            return Err(Error::Report(format!(
                "{}: row {} has schema version {}, expected {SCHEMA_VERSION}",
                path.display(),
                i + 1,
                row.schema_version()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Reads a table if it exists; absent files are empty tables.
pub fn read_table_or_empty<T: Table>(dir: &Path) -> Result<Vec<T>> {
    let path = csv_path::<T>(dir);
    if path.exists() {
        read_table(&path)
    } else {
        Ok(Vec::new())
    }
}

fn push_long(out: &mut Vec<LongRow>, base: &LongRow, metrics: &[(&str, Option<f64>)]) {
    for (name, v) in metrics {
        if let Some(value) = v {
            out.push(LongRow {
                metric: name.to_string(),
                value: *value,
                ..base.clone()
            });
        }
    }
}

pub fn metrics_long(rows: &[MetricsRow]) -> Vec<LongRow> {
    let mut out = Vec::new();
    for r in rows {
        let base = LongRow {
            schema_version: SCHEMA_VERSION,
            table: MetricsRow::FILE.into(),
            run_id: r.run_id.clone(),
            phase: r.phase.clone(),
            checkpoint: r.checkpoint.clone(),
            epoch: r.epoch,
            eta_train: r.eta_train,
            eta_inf: r.eta_inf,
            ..LongRow::default()
        };
        push_long(
            &mut out,
            &base,
            &[
                ("clean_acc", r.clean_acc),
                ("noisy_acc_mean", r.noisy_acc_mean),
                ("noisy_acc_std", r.noisy_acc_std),
                ("loss_hard", r.loss_hard),
                ("loss_soft", r.loss_soft),
                ("loss_reg", r.loss_reg),
                ("loss_total", r.loss_total),
            ],
        );
    }
    out
}

pub fn bv_long(rows: &[BvRow]) -> Vec<LongRow> {
    let mut out = Vec::new();
    for r in rows {
        let base = LongRow {
            schema_version: SCHEMA_VERSION,
            table: BvRow::FILE.into(),
            run_id: r.run_id.clone(),
            phase: format!("bv-{}", r.reference),
            checkpoint: r.checkpoint.clone(),
            eta_inf: Some(r.eta),
            ..LongRow::default()
        };
        let n = r.normalization;
        let norm = |v: f64| (n > 0.0).then(|| v / n);
        push_long(
            &mut out,
            &base,
            &[
                ("l_var", Some(r.l_var)),
                ("l_bias", Some(r.l_bias)),
                ("l_pretrained", Some(r.l_pretrained)),
                ("l_var_normalized", norm(r.l_var)),
                ("l_bias_normalized", norm(r.l_bias)),
            ],
        );
    }
    out
}

pub fn mi_long(rows: &[MiRow]) -> Vec<LongRow> {
    let mut out = Vec::new();
    for r in rows {
        let base = LongRow {
            schema_version: SCHEMA_VERSION,
            table: MiRow::FILE.into(),
            run_id: r.run_id.clone(),
            phase: "mi".into(),
            checkpoint: r.checkpoint.clone(),
            eta_inf: Some(r.eta),
            seed: Some(r.seed),
            ..LongRow::default()
        };
        push_long(
            &mut out,
            &base,
            &[
                ("h_y", Some(r.h_y)),
                ("h_y_given_x", Some(r.h_y_given_x)),
                ("mi", Some(r.mi)),
                ("mi_normalized", r.normalized),
            ],
        );
    }
    out
}
