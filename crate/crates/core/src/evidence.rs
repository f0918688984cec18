//! Study-level aggregate records, their CSV form, and subset classification.
//!
//! The CSV schema has one row per arm:
//!
//! ```text
//! study,group,arm,patients,duration_yr,rate,std_err,total,zeroes
//! ```
//!
//! `arm` is `P` (placebo) or `L` (active), empty cells are absent values, and
//! consecutive rows with the same `study` form one study. `group` is the label
//! the data source assigned; it is kept for reference and recomputed by
//! [`classify_subset`].

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{domain, Error, Result};
use crate::nbcore::AggregateObservation;

pub const CSV_HEADER: [&str; 9] =
    ["study", "group", "arm", "patients", "duration_yr", "rate", "std_err", "total", "zeroes"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TreatmentClass {
    Placebo,
    Active,
}

impl TreatmentClass {
    fn code(self) -> &'static str {
        match self {
            TreatmentClass::Placebo => "P",
            TreatmentClass::Active => "L",
        }
    }
}

/// Nested study subsets: A (rate with standard error) within B (plus both
/// counts) within C (plus either count).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SubsetLabel {
    A,
    B,
    C,
}

impl fmt::Display for SubsetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SubsetLabel::A => "A",
            SubsetLabel::B => "B",
            SubsetLabel::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for SubsetLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(SubsetLabel::A),
            "B" | "b" => Ok(SubsetLabel::B),
            "C" | "c" => Ok(SubsetLabel::C),
            other => Err(domain(format!("unknown subset label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmRecord {
    pub treatment: TreatmentClass,
    pub n_patients: u64,
    pub rate_est: Option<f64>,
    pub std_err: Option<f64>,
    pub total: Option<u64>,
    pub zeroes: Option<u64>,
}

impl ArmRecord {
    pub fn is_placebo(&self) -> bool {
        self.treatment == TreatmentClass::Placebo
    }

    /// Rate estimate together with its standard error.
    pub fn has_rate_se(&self) -> bool {
        self.rate_est.is_some() && self.std_err.is_some()
    }

    /// A total count, either reported or derivable from a rate.
    pub fn has_total_info(&self) -> bool {
        self.total.is_some() || self.rate_est.is_some()
    }

    pub fn has_zeroes(&self) -> bool {
        self.zeroes.is_some()
    }

    pub fn has_evidence(&self) -> bool {
        self.has_rate_se() || self.has_total_info() || self.has_zeroes()
    }

    /// Reported total, or `round(rate * n * duration)` when only a rate is given.
    pub fn total_or_derived(&self, duration: f64) -> Option<u64> {
        self.total.or_else(|| self.rate_est.map(|r| derive_total(r, self.n_patients, duration)))
    }

    pub fn observation(&self) -> AggregateObservation {
        AggregateObservation {
            n_patients: self.n_patients,
            total: self.total,
            zeroes: self.zeroes,
            rate_est: self.rate_est,
            std_err: self.std_err,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRecord {
    pub study_id: String,
    /// Follow-up duration in years, shared by all arms.
    pub duration: f64,
    pub arms: Vec<ArmRecord>,
    /// Group label as given in the input, if any.
    pub reported_group: Option<SubsetLabel>,
}

impl StudyRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(domain(format!("{}: duration must be positive", self.study_id)));
        }
        if self.arms.len() < 2 {
            return Err(domain(format!("{}: a study needs at least two arms", self.study_id)));
        }
        let placebos = self.arms.iter().filter(|a| a.is_placebo()).count();
        if placebos != 1 {
            return Err(domain(format!("{}: expected exactly one placebo arm, found {placebos}", self.study_id)));
        }
        for arm in &self.arms {
            if arm.n_patients == 0 {
                return Err(domain(format!("{}: arm without patients", self.study_id)));
            }
            if let Some(z) = arm.zeroes {
                if z > arm.n_patients {
                    return Err(domain(format!(
                        "{}: zeroes {z} exceed patients {}",
                        self.study_id, arm.n_patients
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn placebo(&self) -> &ArmRecord {
        self.arms.iter().find(|a| a.is_placebo()).expect("validated study has a placebo arm")
    }

    pub fn active_arms(&self) -> impl Iterator<Item = &ArmRecord> {
        self.arms.iter().filter(|a| !a.is_placebo())
    }
}

/// Labels of one study plus any arms ignored for lack of evidence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub labels: BTreeSet<SubsetLabel>,
    /// Indices of arms carrying no total, zero count, or rate.
    pub excluded_arms: Vec<usize>,
}

impl Classification {
    /// Most restrictive label, e.g. `A` for a study in all three subsets.
    pub fn primary(&self) -> Option<SubsetLabel> {
        self.labels.iter().next().copied()
    }

    pub fn contains(&self, label: SubsetLabel) -> bool {
        self.labels.contains(&label)
    }
}

pub fn classify_subset(study: &StudyRecord) -> Classification {
    let excluded_arms: Vec<usize> =
        study.arms.iter().enumerate().filter(|(_, a)| !a.has_evidence()).map(|(i, _)| i).collect();
    let usable: Vec<&ArmRecord> = study.arms.iter().filter(|a| a.has_evidence()).collect();
    let mut labels = BTreeSet::new();
    let viable = usable.len() >= 2 && usable.iter().any(|a| a.is_placebo());
    if viable {
        let in_a = usable.iter().all(|a| a.has_rate_se());
        let in_b = in_a || usable.iter().all(|a| a.has_total_info() && a.has_zeroes());
        let in_c = in_b || usable.iter().all(|a| a.has_total_info() || a.has_zeroes());
        for (flag, label) in [(in_a, SubsetLabel::A), (in_b, SubsetLabel::B), (in_c, SubsetLabel::C)] {
            if flag {
                labels.insert(label);
            }
        }
    }
    Classification { labels, excluded_arms }
}

/// Studies belonging to `label`, in input order, without their evidence-free arms.
pub fn select_subset(studies: &[StudyRecord], label: SubsetLabel) -> Vec<StudyRecord> {
    studies
        .iter()
        .filter_map(|s| {
            let class = classify_subset(s);
            class.contains(label).then(|| {
                let mut kept = s.clone();
                kept.arms = s
                    .arms
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !class.excluded_arms.contains(i))
                    .map(|(_, a)| a.clone())
                    .collect();
                kept
            })
        })
        .collect()
}

/// Study counts by reporting format.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SubsetTally {
    pub subset_a: usize,
    pub subset_b: usize,
    pub subset_c: usize,
    /// Studies outside A by which counts every arm provides.
    pub total_only: usize,
    pub zeroes_only: usize,
    pub both: usize,
    pub neither: usize,
}

pub fn tally_subsets(studies: &[StudyRecord]) -> SubsetTally {
    let mut tally = SubsetTally::default();
    for study in studies {
        let class = classify_subset(study);
        tally.subset_a += class.contains(SubsetLabel::A) as usize;
        tally.subset_b += class.contains(SubsetLabel::B) as usize;
        tally.subset_c += class.contains(SubsetLabel::C) as usize;
        if class.contains(SubsetLabel::A) {
            continue;
        }
        let totals = study.arms.iter().all(|a| a.has_total_info());
        let zeroes = study.arms.iter().all(|a| a.has_zeroes());
        match (totals, zeroes) {
            (true, true) => tally.both += 1,
            (true, false) => tally.total_only += 1,
            (false, true) => tally.zeroes_only += 1,
            (false, false) => tally.neither += 1,
        }
    }
    tally
}

/// Total events implied by a rate over `n` patients followed for `duration`,
/// rounded to the nearest integer (ties to even).
pub fn derive_total(rate_est: f64, n: u64, duration: f64) -> u64 {
    (rate_est * n as f64 * duration).round_ties_even() as u64
}

/// Standard error from a symmetric normal-theory confidence interval.
pub fn se_from_ci(lower: f64, upper: f64, level: f64) -> Result<f64> {
    if !(upper - lower > 0.0) {
        return Err(domain(format!("interval [{lower}, {upper}] has no positive width")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(domain(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let z = Normal::standard().inverse_cdf((1.0 + level) / 2.0);
    Ok((upper - lower) / (2.0 * z))
}

fn parse_err(row: usize, message: impl Into<String>) -> Error {
    Error::Parse { row, message: message.into() }
}

fn opt_field<T: FromStr>(cell: &str, column: &str, row: usize) -> Result<Option<T>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<T>()
        .map(Some)
        .map_err(|_| parse_err(row, format!("malformed {column} value {cell:?}")))
}

fn req_field<T: FromStr>(cell: &str, column: &str, row: usize) -> Result<T> {
    opt_field(cell, column, row)?.ok_or_else(|| parse_err(row, format!("missing {column}")))
}

fn positive(v: Option<f64>, column: &str, row: usize) -> Result<Option<f64>> {
    match v {
        Some(x) if !(x.is_finite() && x > 0.0) => Err(parse_err(row, format!("{column} must be positive, got {x}"))),
        other => Ok(other),
    }
}

struct PendingStudy {
    record: StudyRecord,
    first_row: usize,
    placebo_row: Option<usize>,
}

fn finish(pending: PendingStudy) -> Result<StudyRecord> {
    let PendingStudy { record, first_row, placebo_row } = pending;
    if placebo_row.is_none() {
        return Err(parse_err(first_row, format!("study {:?} has no placebo arm", record.study_id)));
    }
    if record.arms.len() < 2 {
        return Err(parse_err(first_row, format!("study {:?} has no active arm", record.study_id)));
    }
    Ok(record)
}

/// Parses the arm-per-row CSV form. Row numbers in errors are file line numbers.
pub fn parse_dataset<R: Read>(mut source: R) -> Result<Vec<StudyRecord>> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|e| parse_err(0, format!("unreadable input: {e}")))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != CSV_HEADER {
        return Err(parse_err(1, format!("header must be {:?}, got {names:?}", CSV_HEADER.join(","))));
    }

    let mut studies = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut pending: Option<PendingStudy> = None;
    for result in reader.records() {
        let rec = result.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line() as usize);
            parse_err(row, e.to_string())
        })?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let study_id = rec[0].trim().to_string();
        if study_id.is_empty() {
            return Err(parse_err(row, "empty study name"));
        }
        let group: Option<SubsetLabel> = match rec[1].trim() {
            "" => None,
            g => Some(g.parse().map_err(|_| parse_err(row, format!("malformed group value {g:?}")))?),
        };
        let treatment = match rec[2].trim() {
            "P" => TreatmentClass::Placebo,
            "L" => TreatmentClass::Active,
            other => return Err(parse_err(row, format!("arm must be P or L, got {other:?}"))),
        };
        let n_patients: u64 = req_field(&rec[3], "patients", row)?;
        if n_patients == 0 {
            return Err(parse_err(row, "patients must be positive"));
        }
        let duration: f64 = req_field(&rec[4], "duration_yr", row)?;
        if !(duration.is_finite() && duration > 0.0) {
            return Err(parse_err(row, format!("duration_yr must be positive, got {duration}")));
        }
        let arm = ArmRecord {
            treatment,
            n_patients,
            rate_est: positive(opt_field(&rec[5], "rate", row)?, "rate", row)?,
            std_err: positive(opt_field(&rec[6], "std_err", row)?, "std_err", row)?,
            total: opt_field(&rec[7], "total", row)?,
            zeroes: opt_field(&rec[8], "zeroes", row)?,
        };
        if let Some(z) = arm.zeroes {
            if z > n_patients {
                return Err(parse_err(row, format!("zeroes {z} exceed patients {n_patients}")));
            }
            if z == n_patients && arm.total.is_some_and(|t| t > 0) {
                return Err(parse_err(row, "all patients event-free but total is positive"));
            }
        }
        if !arm.has_evidence() {
            return Err(parse_err(row, "arm reports no rate, total, or zero count"));
        }

        let continues = pending.as_ref().is_some_and(|p| p.record.study_id == study_id);
        if !continues {
            if let Some(done) = pending.take() {
                studies.push(finish(done)?);
            }
            if !seen.insert(study_id.clone()) {
                return Err(parse_err(row, format!("study {study_id:?} appears in non-consecutive rows")));
            }
            pending = Some(PendingStudy {
                record: StudyRecord { study_id, duration, arms: Vec::new(), reported_group: group },
                first_row: row,
                placebo_row: None,
            });
        }
        let current = pending.as_mut().expect("pending study");
        if current.record.duration != duration {
            return Err(parse_err(row, "duration differs between arms of one study"));
        }
        if let (Some(g), Some(prev)) = (group, current.record.reported_group) {
            if g != prev {
                return Err(parse_err(row, "group differs between arms of one study"));
            }
        }
        current.record.reported_group = current.record.reported_group.or(group);
        if treatment == TreatmentClass::Placebo {
            if let Some(first) = current.placebo_row {
                return Err(parse_err(row, format!("duplicate placebo arm (first at row {first})")));
            }
            current.placebo_row = Some(row);
        }
        current.record.arms.push(arm);
    }
    if let Some(done) = pending.take() {
        studies.push(finish(done)?);
    }
    Ok(studies)
}

fn fmt_opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the canonical CSV form; parsing its output reproduces `studies`.
pub fn serialize_dataset<W: Write>(studies: &[StudyRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for study in studies {
        let group = fmt_opt(study.reported_group);
        for arm in &study.arms {
            let id = if study.study_id.contains([',', '"']) {
                format!("\"{}\"", study.study_id.replace('"', "\"\""))
            } else {
                study.study_id.clone()
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                id,
                group,
                arm.treatment.code(),
                arm.n_patients,
                study.duration,
                fmt_opt(arm.rate_est),
                fmt_opt(arm.std_err),
                fmt_opt(arm.total),
                fmt_opt(arm.zeroes),
            )?;
        }
    }
    Ok(())
}
