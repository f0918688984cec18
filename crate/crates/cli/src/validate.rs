//! `validate`: structural checks, subset tallies and derived totals.

use std::fmt::Write as _;

use nbsynth::evidence::{classify_subset, derive_total, tally_subsets, StudyRecord, SubsetLabel, SubsetTally};
use serde::Serialize;

/// One arm reporting both a rate and a total.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedTotal {
    pub study_id: String,
    pub arm: usize,
    pub reported: u64,
    pub derived: u64,
    pub exact: f64,
}

impl DerivedTotal {
    pub fn matches(&self) -> bool {
        self.reported == self.derived
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_studies: usize,
    pub n_arms: usize,
    pub tally: SubsetTally,
    pub derived_totals: Vec<DerivedTotal>,
    /// Problems that make the input unusable.
    pub violations: Vec<String>,
    /// Observations that do not block fitting.
    pub notes: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn render(&self) -> String {
        let t = &self.tally;
        let mut s = String::new();
        let _ = writeln!(s, "studies: {}  arms: {}", self.n_studies, self.n_arms);
        let _ = writeln!(s, "subsets: A {}  B {}  C {}", t.subset_a, t.subset_b, t.subset_c);
        let _ = writeln!(
            s,
            "outside A: total only {}  zeroes only {}  both {}  neither {}",
            t.total_only, t.zeroes_only, t.both, t.neither
        );
        if !self.derived_totals.is_empty() {
            let agree = self.derived_totals.iter().filter(|d| d.matches()).count();
            let _ = writeln!(s, "derived totals: {agree}/{} agree with round(rate*n*duration)", self.derived_totals.len());
            for d in self.derived_totals.iter().filter(|d| !d.matches()) {
                let _ = writeln!(
                    s,
                    "  {} arm {}: reported {} vs {:.2}",
                    d.study_id,
                    d.arm + 1,
                    d.reported,
                    d.exact
                );
            }
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        for v in &self.violations {
            let _ = writeln!(s, "violation: {v}");
        }
        let _ = writeln!(s, "{}", if self.is_clean() { "ok" } else { "invalid" });
        s
    }
}

pub fn derived_totals(studies: &[StudyRecord]) -> Vec<DerivedTotal> {
    let mut out = Vec::new();
    for study in studies {
        for (a, arm) in study.arms.iter().enumerate() {
            if let (Some(rate), Some(total)) = (arm.rate_est, arm.total) {
                out.push(DerivedTotal {
                    study_id: study.study_id.clone(),
                    arm: a,
                    reported: total,
                    derived: derive_total(rate, arm.n_patients, study.duration),
                    exact: rate * arm.n_patients as f64 * study.duration,
                });
            }
        }
    }
    out
}

/// Checks already-parsed studies. An empty list is a violation.
pub fn validate_studies(studies: &[StudyRecord]) -> ValidationReport {
    let mut violations = Vec::new();
    let mut notes = Vec::new();
    if studies.is_empty() {
        violations.push("no studies in input".to_string());
    }
    for study in studies {
        if let Err(e) = study.validate() {
            violations.push(e.to_string());
        }
        let class = classify_subset(study);
        if class.labels.is_empty() {
            notes.push(format!("{}: belongs to no subset and is never fitted", study.study_id));
        }
        if let (Some(reported), Some(computed)) = (study.reported_group, class.primary()) {
            if reported != computed {
                notes.push(format!(
                    "{}: labelled {reported} in the input, classified as {computed}",
                    study.study_id
                ));
            }
        }
    }
    let derived = derived_totals(studies);
    let mismatched = derived.iter().filter(|d| !d.matches()).count();
    if mismatched > 0 {
        notes.push(format!("{mismatched} reported totals differ from the rounded rate-implied total"));
    }
    ValidationReport {
        n_studies: studies.len(),
        n_arms: studies.iter().map(|s| s.arms.len()).sum(),
        tally: tally_subsets(studies),
        derived_totals: derived,
        violations,
        notes,
    }
}

/// Studies in the subset, in input order, for quick reporting.
pub fn subset_members(studies: &[StudyRecord], label: SubsetLabel) -> Vec<String> {
    studies
        .iter()
        .filter(|s| classify_subset(s).contains(label))
        .map(|s| s.study_id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nbsynth::evidence::parse_dataset;

    const SMALL: &str = "\
study,group,arm,patients,duration_yr,rate,std_err,total,zeroes
Tashkin (2008),A,P,3006,4,0.85,0.02,10220,955
Tashkin (2008),A,L,2987,4,0.73,0.02,8722,1072
Ambrosino (2008),B,P,106,0.4808,,,26,85
Ambrosino (2008),B,L,103,0.4808,,,19,89
";

    #[test]
    fn small_file_is_clean() {
        let studies = parse_dataset(SMALL.as_bytes()).unwrap();
        let r = validate_studies(&studies);
        assert!(r.is_clean(), "{:?}", r.violations);
        assert_eq!((r.n_studies, r.n_arms), (2, 4));
        assert_eq!((r.tally.subset_a, r.tally.subset_b, r.tally.subset_c), (1, 2, 2));
        assert_eq!(r.derived_totals.len(), 2);
        assert_eq!(r.derived_totals[0].derived, 10220);
        assert!(r.render().ends_with("ok\n"));
        assert_eq!(subset_members(&studies, SubsetLabel::A), vec!["Tashkin (2008)".to_string()]);
    }

    #[test]
    fn empty_list_is_a_violation() {
        let r = validate_studies(&[]);
        assert!(!r.is_clean());
        assert!(r.render().contains("no studies"));
    }

    #[test]
    fn mismatched_total_is_a_note() {
        let text = SMALL.replace("10220", "10000");
        let r = validate_studies(&parse_dataset(text.as_bytes()).unwrap());
        assert!(r.is_clean());
        assert_eq!(r.derived_totals.iter().filter(|d| !d.matches()).count(), 1);
        assert!(r.render().contains("reported 10000 vs 10220.40"));
    }
}
