//! On-disk formats. CSV outputs start with a `# config_hash=<hex>` comment
//! line; JSON outputs carry a `config_hash` field.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use dualap_core::model_ctrl::{CtrlParams, IdentifiedSubset};
use dualap_core::sysid::IdDataset;
use dualap_core::trial::{Protocol, TrialRecord, VirtualPatient};
use serde::{Deserialize, Serialize};

pub const DEFAULT_PROTOCOL: &str = include_str!("../data/protocol.toml");
pub const DEFAULT_COHORT: &str = include_str!("../data/cohort.json");

pub const DATASET_HEADER: [&str; 6] = ["t_min", "cgm_mmolL", "uba_mUmin", "ubo_mUmin", "ug_ugmin", "meal_g"];
pub const TRAJECTORY_HEADER: [&str; 11] = [
    "t_min", "G", "cgm", "uba", "ubo", "ug", "mode", "g_hat", "log_si_hat", "source", "solver",
];
pub const SUMMARY_HEADER: [&str; 12] = [
    "patient",
    "valid",
    "severe_hypo_pct",
    "hypo_pct",
    "normo_pct",
    "hyper_pct",
    "severe_hyper_pct",
    "mean_glucose",
    "basal_U_per_day",
    "bolus_U_per_day",
    "glucagon_ug_per_day",
    "error",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortFile {
    pub config_hash: String,
    pub seed: u64,
    pub patients: Vec<VirtualPatient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedFile {
    pub config_hash: String,
    pub patient: usize,
    pub converged: bool,
    pub nll: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Noise-free model fit to the CGM data [mmol/L].
    pub rmse: f64,
    pub theta: IdentifiedSubset,
    pub fixed: CtrlParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSeed {
    pub patient: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub command: String,
    pub version: String,
    pub seeds: Vec<PatientSeed>,
    pub config: String,
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_protocol(text: &str) -> Result<Protocol> {
    let protocol: Protocol = toml::from_str(text)?;
    protocol.validate()?;
    Ok(protocol)
}

pub fn read_protocol(path: Option<&Path>) -> Result<Protocol> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading protocol {}", p.display()))?;
            parse_protocol(&text).with_context(|| format!("parsing protocol {}", p.display()))
        }
        None => parse_protocol(DEFAULT_PROTOCOL).context("bundled protocol"),
    }
}

pub fn read_cohort(path: Option<&Path>) -> Result<CohortFile> {
    let cohort: CohortFile = match path {
        Some(p) => read_json(p)?,
        None => serde_json::from_str(DEFAULT_COHORT).context("bundled cohort")?,
    };
    for p in &cohort.patients {
        p.validate()?;
    }
    Ok(cohort)
}

fn hash_line(hash: &str) -> String {
    format!("# config_hash={hash}\n")
}

/// Reads the hash from the leading comment line of a CSV output.
pub fn read_csv_hash(path: &Path) -> Result<String> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first)?;
    match first.trim_end().strip_prefix("# config_hash=") {
        Some(h) => Ok(h.to_string()),
        None => bail!("{} has no config hash line", path.display()),
    }
}

fn csv_bytes(hash: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut out = hash_line(hash).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(out)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))
}

pub fn write_dataset(path: &Path, data: &IdDataset, hash: &str) -> Result<()> {
    let rows = (0..data.len()).map(|k| {
        [data.t[k], data.cgm[k], data.uba[k], data.ubo[k], data.ug[k], data.meal_g[k]]
            .iter()
            .map(|v| v.to_string())
            .collect()
    });
    write_atomic(path, &csv_bytes(hash, &DATASET_HEADER, rows)?)
}

pub fn read_dataset(path: &Path) -> Result<IdDataset> {
    let mut reader = csv_reader(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(DATASET_HEADER) {
        bail!("{}: expected columns {}", path.display(), DATASET_HEADER.join(","));
    }
    let mut data = IdDataset::default();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let v: Vec<f64> = record
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("{}: row {}", path.display(), line + 1))?;
        data.t.push(v[0]);
        data.cgm.push(v[1]);
        data.uba.push(v[2]);
        data.ubo.push(v[3]);
        data.ug.push(v[4]);
        data.meal_g.push(v[5]);
    }
    data.validate()?;
    Ok(data)
}

pub fn write_trajectory(path: &Path, record: &TrialRecord, hash: &str) -> Result<()> {
    let rows = record.intervals.iter().map(|l| {
        let source = serde_json::to_value(l.source).ok().and_then(|v| v.as_str().map(String::from));
        let solver = l
            .status
            .and_then(|s| serde_json::to_value(s).ok())
            .and_then(|v| v.as_str().map(String::from));
        vec![
            l.t.to_string(),
            format!("{:.6}", l.g),
            format!("{:.6}", l.cgm),
            format!("{:.6}", l.uba),
            format!("{:.6}", l.ubo),
            format!("{:.6}", l.ug),
            l.mode.as_str().to_string(),
            format!("{:.6}", l.g_hat),
            format!("{:.6}", l.log_si_hat),
            source.unwrap_or_default(),
            solver.unwrap_or_default(),
        ]
    });
    write_atomic(path, &csv_bytes(hash, &TRAJECTORY_HEADER, rows)?)
}

/// Identification data next to the noise-free fit of the identified model.
pub fn write_fit(path: &Path, data: &IdDataset, fit: &[f64], true_g: &[f64], hash: &str) -> Result<()> {
    let rows = (0..data.len()).map(|k| {
        vec![
            data.t[k].to_string(),
            format!("{:.6}", data.cgm[k]),
            format!("{:.6}", fit[k]),
            format!("{:.6}", true_g.get(k).copied().unwrap_or(f64::NAN)),
        ]
    });
    write_atomic(path, &csv_bytes(hash, &["t_min", "cgm", "model", "G"], rows)?)
}

/// One summary row as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub patient: String,
    pub valid: bool,
    pub bands: [f64; 5],
    pub mean_glucose: f64,
    pub basal: f64,
    pub bolus: f64,
    pub glucagon: f64,
}

fn summary_values(bands: &[f64; 5], mean_g: f64, basal: f64, bolus: f64, glucagon: f64) -> Vec<String> {
    bands
        .iter()
        .chain([mean_g, basal, bolus, glucagon].iter())
        .map(|v| format!("{v:.6}"))
        .collect()
}

/// Per-patient rows sorted by id, then a `mean` row over the valid records.
pub fn summary_csv(records: &[TrialRecord], hash: &str) -> Result<Vec<u8>> {
    let mut sorted: Vec<&TrialRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.patient);
    let mut rows: Vec<Vec<String>> = sorted
        .iter()
        .map(|r| {
            let s = &r.stats;
            let mut row = vec![r.patient.to_string(), r.valid.to_string()];
            row.extend(summary_values(&s.bands, s.mean_glucose, s.basal_per_day, s.bolus_per_day, s.glucagon_per_day));
            row.push(r.error.clone().unwrap_or_default());
            row
        })
        .collect();
    let valid: Vec<_> = sorted.iter().filter(|r| r.valid).collect();
    if !valid.is_empty() {
        let n = valid.len() as f64;
        let mean = |f: &dyn Fn(&TrialRecord) -> f64| valid.iter().map(|r| f(r)).sum::<f64>() / n;
        let bands: [f64; 5] = std::array::from_fn(|i| mean(&|r| r.stats.bands[i]));
        let mut row = vec!["mean".to_string(), "true".to_string()];
        row.extend(summary_values(
            &bands,
            mean(&|r| r.stats.mean_glucose),
            mean(&|r| r.stats.basal_per_day),
            mean(&|r| r.stats.bolus_per_day),
            mean(&|r| r.stats.glucagon_per_day),
        ));
        row.push(String::new());
        rows.push(row);
    }
    csv_bytes(hash, &SUMMARY_HEADER, rows)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut reader = csv_reader(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record?;
        let num = |i: usize| -> Result<f64> {
            r.get(i)
                .unwrap_or_default()
                .parse::<f64>()
                .with_context(|| format!("{}: column {}", path.display(), SUMMARY_HEADER[i]))
        };
        rows.push(SummaryRow {
            patient: r.get(0).unwrap_or_default().to_string(),
            valid: r.get(1) == Some("true"),
            bands: [num(2)?, num(3)?, num(4)?, num(5)?, num(6)?],
            mean_glucose: num(7)?,
            basal: num(8)?,
            bolus: num(9)?,
            glucagon: num(10)?,
        });
    }
    Ok(rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.write_all(text.as_bytes())?;
    write_atomic(path, &bytes)
}
