//! Study data: CSV ingestion, patient filters, class bins and features.
//!
//! Two files describe a study:
//!
//! * `patients.csv` with header `id,age,pre_treatment` (extra columns after
//!   these are carried along unparsed),
//! * `observations.csv` with header `id,month,value`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curves::fit_shape;
use crate::model::{Dataset, Observation, PatientData};
use crate::SURVEY_MONTHS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub file: String,
    /// 1-based line number, header included.
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: expected header starting with {expected:?}, found {found:?}")]
    Header { file: String, expected: Vec<String>, found: Vec<String> },
    #[error("{} bad row(s); first: {}:{}: {}", .0.len(), .0[0].file, .0[0].line, .0[0].message)]
    Rows(Vec<RowError>),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("pre-treatment level is zero for patient {0}")]
    ZeroPreTreatment(String),
    #[error("feature statistics have not been fitted")]
    Unfitted,
    #[error("cannot fit features on an empty training set")]
    EmptyTraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Age at treatment, years.
    pub age: f64,
    /// Pre-treatment level `S` in `[0, 1]`.
    pub pre_treatment: f64,
    /// Month -> observed value in `[0, 1]`.
    pub observations: BTreeMap<u32, f64>,
    pub extra: BTreeMap<String, String>,
}

/// Rows rejected during a lenient load.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub errors: Vec<RowError>,
}

fn check_header(file: &str, found: &csv::StringRecord, expected: &[&str], exact: bool) -> Result<(), DataError> {
    let f: Vec<String> = found.iter().map(|s| s.trim().to_string()).collect();
    let ok = if exact { f == expected } else { f.len() >= expected.len() && f[..expected.len()] == *expected };
    if ok {
        Ok(())
    } else {
        Err(DataError::Header {
            file: file.into(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: f,
        })
    }
}

fn parse_unit(field: &str, what: &str) -> Result<f64, String> {
    let v: f64 = field.trim().parse().map_err(|_| format!("{what} `{field}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{what} {v} is outside [0, 1]"))
    }
}

/// Parses both files from readers. In strict mode any bad row fails the
/// whole load; otherwise bad rows are skipped and reported.
pub fn read_patients<P: Read, O: Read>(
    patients: P,
    observations: O,
    strict: bool,
) -> Result<(Vec<PatientRecord>, LoadReport), DataError> {
    let mut errors = Vec::new();
    let mut records: Vec<PatientRecord> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();

    let mut pr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(false).from_reader(patients);
    let header = pr.headers()?.clone();
    check_header("patients.csv", &header, &["id", "age", "pre_treatment"], false)?;
    let extra_cols: Vec<String> = header.iter().skip(3).map(str::to_string).collect();
    for (n, row) in pr.records().enumerate() {
        let line = n as u64 + 2;
        let mut err = |message: String| errors.push(RowError { file: "patients.csv".into(), line, message });
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                err(e.to_string());
                continue;
            }
        };
        let id = row[0].to_string();
        if id.is_empty() {
            err("empty id".into());
            continue;
        }
        if index.contains_key(&id) {
            err(format!("duplicate patient id `{id}`"));
            continue;
        }
        let age = match row[1].parse::<f64>() {
            Ok(a) if a > 0.0 && a.is_finite() => a,
            _ => {
                err(format!("age `{}` is not a positive number", &row[1]));
                continue;
            }
        };
        let s = match parse_unit(&row[2], "pre_treatment") {
            Ok(s) => s,
            Err(m) => {
                err(m);
                continue;
            }
        };
        let extra = extra_cols.iter().cloned().zip(row.iter().skip(3).map(str::to_string)).collect();
        index.insert(id.clone(), records.len());
        records.push(PatientRecord { id, age, pre_treatment: s, observations: BTreeMap::new(), extra });
    }

    let mut or = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(false).from_reader(observations);
    check_header("observations.csv", or.headers()?, &["id", "month", "value"], true)?;
    for (n, row) in or.records().enumerate() {
        let line = n as u64 + 2;
        let mut err = |message: String| errors.push(RowError { file: "observations.csv".into(), line, message });
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                err(e.to_string());
                continue;
            }
        };
        let Some(&pi) = index.get(&row[0]) else {
            err(format!("unknown patient id `{}`", &row[0]));
            continue;
        };
        let month = match row[1].parse::<u32>() {
            Ok(m) if m > 0 => m,
            _ => {
                err(format!("month `{}` is not a positive integer", &row[1]));
                continue;
            }
        };
        let value = match parse_unit(&row[2], "value") {
            Ok(v) => v,
            Err(m) => {
                err(m);
                continue;
            }
        };
        let obs = &mut records[pi].observations;
        if obs.contains_key(&month) {
            err(format!("duplicate observation for `{}` at month {month}", &row[0]));
            continue;
        }
        obs.insert(month, value);
    }

    if strict && !errors.is_empty() {
        return Err(DataError::Rows(errors));
    }
    Ok((records, LoadReport { errors }))
}

pub fn load_patients(
    patients: impl AsRef<Path>,
    observations: impl AsRef<Path>,
    strict: bool,
) -> Result<(Vec<PatientRecord>, LoadReport), DataError> {
    let open = |p: &Path| std::fs::File::open(p).map_err(|e| DataError::Io(p.display().to_string(), e));
    read_patients(open(patients.as_ref())?, open(observations.as_ref())?, strict)
}

/// Writes the two-file format read by [`read_patients`].
pub fn write_patients<P: Write, O: Write>(
    records: &[PatientRecord],
    patients: P,
    observations: O,
) -> Result<(), DataError> {
    let extra: BTreeSet<&String> = records.iter().flat_map(|r| r.extra.keys()).collect();
    let mut pw = csv::Writer::from_writer(patients);
    let mut header = vec!["id".to_string(), "age".into(), "pre_treatment".into()];
    header.extend(extra.iter().map(|s| s.to_string()));
    pw.write_record(&header)?;
    for r in records {
        let mut row = vec![r.id.clone(), r.age.to_string(), r.pre_treatment.to_string()];
        row.extend(extra.iter().map(|k| r.extra.get(*k).cloned().unwrap_or_default()));
        pw.write_record(&row)?;
    }
    pw.flush().map_err(|e| DataError::Io("patients".into(), e))?;
    let mut ow = csv::Writer::from_writer(observations);
    ow.write_record(["id", "month", "value"])?;
    for r in records {
        for (m, v) in &r.observations {
            ow.write_record([r.id.clone(), m.to_string(), v.to_string()])?;
        }
    }
    ow.flush().map_err(|e| DataError::Io("observations".into(), e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    PreTreatmentLow,
    TooFewTimepoints,
    FittedAbovePreTreatment,
    ConsecutiveZeros,
}

impl RemovalReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::PreTreatmentLow => "pre_treatment_low",
            Self::TooFewTimepoints => "too_few_timepoints",
            Self::FittedAbovePreTreatment => "fitted_above_pre_treatment",
            Self::ConsecutiveZeros => "consecutive_zeros",
        }
    }
}

pub const MIN_PRE_TREATMENT: f64 = 0.1;
pub const MIN_TIMEPOINTS: usize = 6;
pub const ZERO_RUN: usize = 3;
pub const FILTER_MONTH: f64 = 48.0;

/// Every rule the record fails, in declaration order.
pub fn removal_reasons(r: &PatientRecord) -> Vec<RemovalReason> {
    let mut reasons = Vec::new();
    if r.pre_treatment < MIN_PRE_TREATMENT {
        reasons.push(RemovalReason::PreTreatmentLow);
    }
    if r.observations.len() < MIN_TIMEPOINTS {
        reasons.push(RemovalReason::TooFewTimepoints);
    }
    let points: Vec<(f64, f64)> = r.observations.iter().map(|(&m, &v)| (f64::from(m), v)).collect();
    if let Ok(fit) = fit_shape(&points, false) {
        if fit.eval(FILTER_MONTH) > r.pre_treatment {
            reasons.push(RemovalReason::FittedAbovePreTreatment);
        }
    }
    if has_zero_run(&r.observations, ZERO_RUN) {
        reasons.push(RemovalReason::ConsecutiveZeros);
    }
    reasons
}

/// Whether `run` consecutive scheduled months were all observed as zero. The
/// schedule is the survey months plus any other observed month; a scheduled
/// month with no observation breaks a run.
pub fn has_zero_run(obs: &BTreeMap<u32, f64>, run: usize) -> bool {
    let schedule: BTreeSet<u32> = SURVEY_MONTHS.iter().copied().chain(obs.keys().copied()).collect();
    let mut count = 0;
    for m in schedule {
        match obs.get(&m) {
            Some(&v) if v == 0.0 => {
                count += 1;
                if count >= run {
                    return true;
                }
            }
            _ => count = 0,
        }
    }
    false
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<PatientRecord>,
    pub removed: Vec<(PatientRecord, Vec<RemovalReason>)>,
}

impl FilterOutcome {
    /// Number of removed patients carrying each reason.
    pub fn counts(&self) -> BTreeMap<RemovalReason, usize> {
        let mut c = BTreeMap::new();
        for (_, rs) in &self.removed {
            for r in rs {
                *c.entry(*r).or_insert(0) += 1;
            }
        }
        c
    }

    /// CSV with columns `id,reasons`, reasons separated by `;`.
    pub fn write_report<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "reasons"])?;
        for (r, rs) in &self.removed {
            let joined: Vec<&str> = rs.iter().map(RemovalReason::as_str).collect();
            out.write_record([r.id.as_str(), &joined.join(";")])?;
        }
        out.flush().map_err(|e| DataError::Io("filter report".into(), e))?;
        Ok(())
    }
}

pub fn filter_patients(records: &[PatientRecord]) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for r in records {
        let reasons = removal_reasons(r);
        if reasons.is_empty() {
            out.kept.push(r.clone());
        } else {
            out.removed.push((r.clone(), reasons));
        }
    }
    out
}

pub const AGE_EDGES: [f64; 2] = [55.0, 65.0];
pub const INIT_EDGES: [f64; 3] = [0.41, 0.60, 0.80];
pub const N_AGE_BINS: usize = AGE_EDGES.len() + 1;
pub const N_INIT_BINS: usize = INIT_EDGES.len() + 1;

/// Half-open bins `[lo, hi)`: a value on an edge goes to the upper bin.
fn bin(v: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|&&e| v >= e).count()
}

pub fn bin_age(age: f64) -> usize {
    bin(age, &AGE_EDGES)
}

pub fn bin_init(s: f64) -> usize {
    bin(s, &INIT_EDGES)
}

/// Class index in `0..12`, age-major.
pub fn class_index(age_bin: usize, init_bin: usize) -> usize {
    age_bin * N_INIT_BINS + init_bin
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub index: usize,
    pub age_bin: usize,
    pub init_bin: usize,
    /// `[lo, hi)`; `None` for an open end.
    pub age_range: (Option<f64>, Option<f64>),
    pub init_range: (Option<f64>, Option<f64>),
}

fn range(edges: &[f64], b: usize) -> (Option<f64>, Option<f64>) {
    (b.checked_sub(1).map(|i| edges[i]), edges.get(b).copied())
}

pub fn classes() -> Vec<ClassInfo> {
    let mut out = Vec::with_capacity(N_AGE_BINS * N_INIT_BINS);
    for a in 0..N_AGE_BINS {
        for i in 0..N_INIT_BINS {
            let mut init_range = range(&INIT_EDGES, i);
            init_range.0 = init_range.0.or(Some(0.0));
            init_range.1 = init_range.1.or(Some(1.0));
            out.push(ClassInfo {
                index: class_index(a, i),
                age_bin: a,
                init_bin: i,
                age_range: range(&AGE_EDGES, a),
                init_range,
            });
        }
    }
    out
}

/// Standardized class indicators plus a constant bias column.
///
/// Columns: age bins 1 and 2, init bins 1 to 3 (bin 0 is the reference),
/// each standardized with training-set mean and standard deviation (a
/// constant column keeps unit scale), then an unnormalized 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// `(mean, sd)` per indicator column.
    pub stats: Option<Vec<(f64, f64)>>,
}

pub const N_FEATURES: usize = N_AGE_BINS - 1 + N_INIT_BINS - 1 + 1;

fn indicators(age_bin: usize, init_bin: usize) -> [f64; N_FEATURES - 1] {
    let mut v = [0.0; N_FEATURES - 1];
    if age_bin > 0 {
        v[age_bin - 1] = 1.0;
    }
    if init_bin > 0 {
        v[N_AGE_BINS - 1 + init_bin - 1] = 1.0;
    }
    v
}

impl FeatureSpec {
    /// Learns standardization statistics from training classes.
    pub fn fit_bins(bins: &[(usize, usize)]) -> Result<Self, DataError> {
        if bins.is_empty() {
            return Err(DataError::EmptyTraining);
        }
        let rows: Vec<_> = bins.iter().map(|&(a, i)| indicators(a, i)).collect();
        let n = rows.len() as f64;
        let stats = (0..N_FEATURES - 1)
            .map(|j| {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                (mean, if sd > 0.0 { sd } else { 1.0 })
            })
            .collect();
        Ok(Self { stats: Some(stats) })
    }

    pub fn fit(records: &[PatientRecord]) -> Result<Self, DataError> {
        let bins: Vec<_> = records.iter().map(|r| (bin_age(r.age), bin_init(r.pre_treatment))).collect();
        Self::fit_bins(&bins)
    }

    pub fn encode_bins(&self, age_bin: usize, init_bin: usize) -> Result<Vec<f64>, DataError> {
        let stats = self.stats.as_ref().ok_or(DataError::Unfitted)?;
        let mut v: Vec<f64> =
            indicators(age_bin, init_bin).iter().zip(stats).map(|(x, (m, sd))| (x - m) / sd).collect();
        v.push(1.0);
        Ok(v)
    }

    pub fn encode(&self, age: f64, pre_treatment: f64) -> Result<Vec<f64>, DataError> {
        self.encode_bins(bin_age(age), bin_init(pre_treatment))
    }

    pub fn encode_record(&self, r: &PatientRecord) -> Result<Vec<f64>, DataError> {
        self.encode(r.age, r.pre_treatment)
    }
}

/// Model input value used for scaled observations above 1.
pub const CLIP_VALUE: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledObservations {
    pub values: BTreeMap<u32, f64>,
    pub clipped: usize,
}

/// Observations divided by the pre-treatment level; values above 1 become
/// [`CLIP_VALUE`] and are counted.
pub fn scaled_observations(r: &PatientRecord) -> Result<ScaledObservations, DataError> {
    if r.pre_treatment <= 0.0 {
        return Err(DataError::ZeroPreTreatment(r.id.clone()));
    }
    let mut clipped = 0;
    let values = r
        .observations
        .iter()
        .map(|(&m, &y)| {
            let v = y / r.pre_treatment;
            if v > 1.0 {
                clipped += 1;
                (m, CLIP_VALUE)
            } else {
                (m, v)
            }
        })
        .collect();
    Ok(ScaledObservations { values, clipped })
}

/// Model-ready dataset of scaled observations; returns the clip count too.
/// Values are already divided by `S`, so every model patient has `S = 1`.
pub fn to_dataset(records: &[PatientRecord], spec: &FeatureSpec) -> Result<(Dataset, usize), DataError> {
    let mut clipped = 0;
    let mut patients = Vec::with_capacity(records.len());
    for r in records {
        let scaled = scaled_observations(r)?;
        clipped += scaled.clipped;
        patients.push(PatientData {
            id: r.id.clone(),
            x: spec.encode_record(r)?,
            s: 1.0,
            obs: scaled.values.iter().map(|(&m, &y)| Observation { t: f64::from(m), y }).collect(),
        });
    }
    Ok((Dataset { k: N_FEATURES, patients }, clipped))
}
