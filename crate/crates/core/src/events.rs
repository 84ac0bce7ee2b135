//! Patient event store.
//!
//! Ingests line-delimited encounter records and a covariate table, assigns a
//! dense condition vocabulary, and applies the preprocessing used before
//! rules are counted: the recurrence window that collapses repeated reports
//! of the same condition into incidents, and the injection of preexisting
//! conditions into every encounter.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense index into the condition vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionId(pub u32);

impl ConditionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub id: ConditionId,
    pub label: String,
}

/// One provider visit. `conditions` is in report order and holds each
/// condition at most once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encounter {
    pub seq_index: usize,
    pub day: i64,
    pub conditions: Vec<ConditionId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub encounters: Vec<Encounter>,
    pub preexisting: BTreeSet<ConditionId>,
    pub covariates: Vec<u8>,
}

impl PatientRecord {
    pub fn n_reports(&self) -> usize {
        self.encounters.iter().map(|e| e.conditions.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EventDatabase {
    pub patients: Vec<PatientRecord>,
    pub vocabulary: Vec<Condition>,
    pub covariate_names: Vec<String>,
}

/// Which report a recurrence window is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrenceAnchor {
    /// From the last report that was kept.
    #[default]
    Retained,
    /// From the most recent report, kept or not: an incident lasts while
    /// reports keep arriving within the window and only its first report
    /// is kept.
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrencePolicy {
    pub window_days: i64,
    pub anchor: RecurrenceAnchor,
}

impl Default for RecurrencePolicy {
    fn default() -> Self {
        RecurrencePolicy { window_days: 30, anchor: RecurrenceAnchor::Retained }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Drop the first (sorted) category of race and treatment so the coded
    /// matrix stays full rank next to an intercept.
    pub reference_coding: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { reference_coding: true }
    }
}

pub const DEMOGRAPHIC_HEADER: [&str; 5] = ["patient_id", "gender", "age", "race", "treatment"];

pub const AGE_GROUP_NAMES: [&str; 4] = ["age_40_49", "age_50_59", "age_60_69", "age_70_plus"];

/// Indicator coding over the four age groups 40–49, 50–59, 60–69 and 70+.
pub fn age_group_indicators(age: u32) -> Result<[u8; 4]> {
    let slot = match age {
        40..=49 => 0,
        50..=59 => 1,
        60..=69 => 2,
        a if a >= 70 => 3,
        a => return Err(Error::Config(format!("age {a} is below 40"))),
    };
    let mut out = [0u8; 4];
    out[slot] = 1;
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct RawEncounter {
    patient_id: String,
    day: i64,
    conditions: Vec<String>,
}

struct RawDemographics {
    male: u8,
    age: u32,
    race: String,
    treatment: String,
}

enum CovariateRows {
    Demographic(BTreeMap<String, RawDemographics>),
    Coded { names: Vec<String>, rows: BTreeMap<String, Vec<u8>> },
}

fn parse_gender(raw: &str, line: usize) -> Result<u8> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "m" | "male" => Ok(1),
        "f" | "female" => Ok(0),
        other => Err(Error::parse(line, format!("unrecognised gender '{other}'"))),
    }
}

fn read_covariates(reader: impl BufRead) -> Result<Option<CovariateRows>> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Ok(None),
            Some((_, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if columns.first().map(String::as_str) != Some("patient_id") {
        return Err(Error::parse(1, "covariate header must start with patient_id"));
    }
    let demographic = columns.iter().map(String::as_str).eq(DEMOGRAPHIC_HEADER.iter().copied());

    let mut demo = BTreeMap::new();
    let mut coded = BTreeMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::parse(
                lineno,
                format!("expected {} fields, found {}", columns.len(), fields.len()),
            ));
        }
        let pid = fields[0].to_string();
        if pid.is_empty() {
            return Err(Error::parse(lineno, "empty patient_id"));
        }
        if fields[1..].iter().any(|f| f.is_empty()) {
            return Err(Error::parse(lineno, format!("missing covariate for patient {pid}")));
        }
        let duplicate = if demographic {
            let age: u32 = fields[2]
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad age '{}'", fields[2])))?;
            let treatment = fields[4].to_string();
            if treatment != "T" && treatment != "P" {
                return Err(Error::parse(lineno, format!("treatment must be T or P, got '{treatment}'")));
            }
            let row = RawDemographics {
                male: parse_gender(fields[1], lineno)?,
                age,
                race: fields[3].to_string(),
                treatment,
            };
            demo.insert(pid.clone(), row).is_some()
        } else {
            let row = fields[1..]
                .iter()
                .map(|f| match *f {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(Error::parse(lineno, format!("covariate '{other}' is not 0/1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            coded.insert(pid.clone(), row).is_some()
        };
        if duplicate {
            return Err(Error::parse(lineno, format!("duplicate patient_id {pid}")));
        }
    }
    Ok(Some(if demographic {
        CovariateRows::Demographic(demo)
    } else {
        CovariateRows::Coded { names: columns[1..].to_vec(), rows: coded }
    }))
}

fn code_demographics(
    rows: BTreeMap<String, RawDemographics>,
    opts: &IngestOptions,
) -> Result<(Vec<String>, BTreeMap<String, Vec<u8>>)> {
    let races: BTreeSet<&str> = rows.values().map(|r| r.race.as_str()).collect();
    let treatments: BTreeSet<&str> = rows.values().map(|r| r.treatment.as_str()).collect();
    let skip = usize::from(opts.reference_coding);
    let race_levels: Vec<String> = races.iter().skip(skip).map(|r| r.to_string()).collect();
    let treatment_levels: Vec<String> = if opts.reference_coding {
        vec!["T".to_string()]
    } else {
        treatments.iter().map(|t| t.to_string()).collect()
    };

    let mut names = vec!["male".to_string()];
    names.extend(AGE_GROUP_NAMES.iter().map(|s| s.to_string()));
    names.extend(race_levels.iter().map(|r| format!("race_{r}")));
    names.extend(treatment_levels.iter().map(|t| format!("treatment_{t}")));

    let mut coded = BTreeMap::new();
    for (pid, row) in rows {
        let mut v = vec![row.male];
        v.extend(age_group_indicators(row.age)?);
        v.extend(race_levels.iter().map(|r| u8::from(*r == row.race)));
        v.extend(treatment_levels.iter().map(|t| u8::from(*t == row.treatment)));
        coded.insert(pid, v);
    }
    Ok((names, coded))
}

/// Builds a database from an encounter stream, a covariate table and an
/// optional `patient_id,condition` table of preexisting conditions.
///
/// Patients are ordered by id, encounters by day with ties kept in input
/// order, and condition ids are assigned in sorted label order.
pub fn ingest(
    encounters: impl BufRead,
    covariates: impl BufRead,
    preexisting: Option<&mut dyn BufRead>,
    opts: &IngestOptions,
) -> Result<EventDatabase> {
    let mut raw: Vec<(usize, RawEncounter)> = Vec::new();
    for (idx, line) in encounters.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawEncounter =
            serde_json::from_str(&line).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        raw.push((idx + 1, rec));
    }

    let (covariate_names, mut cov_rows) = match read_covariates(covariates)? {
        None => (Vec::new(), BTreeMap::new()),
        Some(CovariateRows::Demographic(rows)) => code_demographics(rows, opts)?,
        Some(CovariateRows::Coded { names, rows }) => (names, rows),
    };

    let mut pre: BTreeMap<String, Vec<String>> = BTreeMap::new();
    if let Some(reader) = preexisting {
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || (idx == 0 && trimmed == "patient_id,condition") {
                continue;
            }
            let (pid, cond) = trimmed
                .split_once(',')
                .ok_or_else(|| Error::parse(idx + 1, "expected patient_id,condition"))?;
            pre.entry(pid.trim().to_string()).or_default().push(cond.trim().to_string());
        }
    }

    for (line, rec) in &raw {
        if !cov_rows.contains_key(&rec.patient_id) {
            return Err(Error::Referential(format!(
                "encounter at line {line} references patient {} with no covariates",
                rec.patient_id
            )));
        }
    }
    for pid in pre.keys() {
        if !cov_rows.contains_key(pid) {
            return Err(Error::Referential(format!(
                "preexisting condition for unknown patient {pid}"
            )));
        }
    }
    if !cov_rows.is_empty() && covariate_names.len() <= 1 {
        return Err(Error::Config(format!(
            "need more than one covariate column, found {}",
            covariate_names.len()
        )));
    }

    let labels: BTreeSet<&str> = raw
        .iter()
        .flat_map(|(_, r)| r.conditions.iter().map(String::as_str))
        .chain(pre.values().flatten().map(String::as_str))
        .collect();
    let vocabulary: Vec<Condition> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| Condition { id: ConditionId(i as u32), label: l.to_string() })
        .collect();
    let lookup: HashMap<&str, ConditionId> =
        vocabulary.iter().map(|c| (c.label.as_str(), c.id)).collect();

    let mut by_patient: BTreeMap<String, Vec<(i64, Vec<ConditionId>)>> = BTreeMap::new();
    for (_, rec) in raw {
        let mut conditions = Vec::with_capacity(rec.conditions.len());
        for label in &rec.conditions {
            let id = lookup[label.as_str()];
            if !conditions.contains(&id) {
                conditions.push(id);
            }
        }
        by_patient.entry(rec.patient_id).or_default().push((rec.day, conditions));
    }

    let mut patients = Vec::with_capacity(cov_rows.len());
    for (pid, covariates) in std::mem::take(&mut cov_rows) {
        let mut visits = by_patient.remove(&pid).unwrap_or_default();
        visits.sort_by_key(|(day, _)| *day);
        let encounters = visits
            .into_iter()
            .enumerate()
            .map(|(seq_index, (day, conditions))| Encounter { seq_index, day, conditions })
            .collect();
        let preexisting = pre
            .remove(&pid)
            .unwrap_or_default()
            .iter()
            .map(|l| lookup[l.as_str()])
            .collect();
        patients.push(PatientRecord { patient_id: pid, encounters, preexisting, covariates });
    }

    let db = EventDatabase { patients, vocabulary, covariate_names };
    db.validate()?;
    Ok(db)
}

impl EventDatabase {
    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn n_conditions(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn label(&self, id: ConditionId) -> &str {
        &self.vocabulary[id.index()].label
    }

    pub fn condition_id(&self, label: &str) -> Option<ConditionId> {
        self.vocabulary.iter().find(|c| c.label == label).map(|c| c.id)
    }

    pub fn patient_index(&self, patient_id: &str) -> Option<usize> {
        self.patients.iter().position(|p| p.patient_id == patient_id)
    }

    /// Checks every structural invariant of the database.
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.vocabulary.iter().enumerate() {
            if c.id.index() != i {
                return Err(Error::Contract(format!("condition ids not dense at {i}")));
            }
        }
        let labels: BTreeSet<&str> = self.vocabulary.iter().map(|c| c.label.as_str()).collect();
        if labels.len() != self.vocabulary.len() {
            return Err(Error::Contract("duplicate condition labels".into()));
        }
        let ids: BTreeSet<&str> = self.patients.iter().map(|p| p.patient_id.as_str()).collect();
        if ids.len() != self.patients.len() {
            return Err(Error::Contract("duplicate patient ids".into()));
        }
        let v = self.vocabulary.len();
        let d = self.covariate_names.len();
        for p in &self.patients {
            if p.covariates.len() != d {
                return Err(Error::Config(format!(
                    "patient {} has {} covariates, expected {d}",
                    p.patient_id,
                    p.covariates.len()
                )));
            }
            if p.covariates.iter().any(|&x| x > 1) {
                return Err(Error::Config(format!("patient {} has non-binary covariates", p.patient_id)));
            }
            if p.preexisting.iter().any(|c| c.index() >= v) {
                return Err(Error::Referential(format!(
                    "patient {} has an unknown preexisting condition",
                    p.patient_id
                )));
            }
            let mut last_day = i64::MIN;
            for (k, e) in p.encounters.iter().enumerate() {
                if e.seq_index != k {
                    return Err(Error::Contract(format!(
                        "patient {} encounter {k} has seq_index {}",
                        p.patient_id, e.seq_index
                    )));
                }
                if e.day < last_day {
                    return Err(Error::Contract(format!("patient {} days decrease", p.patient_id)));
                }
                last_day = e.day;
                if e.conditions.iter().any(|c| c.index() >= v) {
                    return Err(Error::Referential(format!(
                        "patient {} references an unknown condition",
                        p.patient_id
                    )));
                }
                let distinct: BTreeSet<_> = e.conditions.iter().collect();
                if distinct.len() != e.conditions.len() {
                    return Err(Error::Contract(format!(
                        "patient {} repeats a condition within one encounter",
                        p.patient_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of reports of each condition over the whole database.
    pub fn condition_support(&self) -> Vec<usize> {
        let mut support = vec![0; self.vocabulary.len()];
        for p in &self.patients {
            for e in &p.encounters {
                for c in &e.conditions {
                    support[c.index()] += 1;
                }
            }
        }
        support
    }

    /// Keeps only the listed conditions in every encounter and preexisting set.
    /// The vocabulary and ids are left untouched.
    pub fn restrict_to(&self, keep: &[ConditionId]) -> EventDatabase {
        let mut mask = vec![false; self.vocabulary.len()];
        for c in keep {
            mask[c.index()] = true;
        }
        let mut out = self.clone();
        for p in &mut out.patients {
            p.preexisting.retain(|c| mask[c.index()]);
            for e in &mut p.encounters {
                e.conditions.retain(|c| mask[c.index()]);
            }
        }
        out
    }

    pub fn write_encounter_stream(&self, mut out: impl Write) -> Result<()> {
        for p in &self.patients {
            for e in &p.encounters {
                let labels: Vec<&str> = e.conditions.iter().map(|c| self.label(*c)).collect();
                let line = serde_json::json!({
                    "patient_id": p.patient_id,
                    "day": e.day,
                    "conditions": labels,
                });
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }

    /// Writes the already-coded 0/1 covariates under their column names.
    pub fn write_covariate_table(&self, mut out: impl Write) -> Result<()> {
        let mut header = vec!["patient_id"];
        header.extend(self.covariate_names.iter().map(String::as_str));
        writeln!(out, "{}", header.join(","))?;
        for p in &self.patients {
            let mut fields = vec![p.patient_id.clone()];
            fields.extend(p.covariates.iter().map(|x| x.to_string()));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn write_preexisting(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "patient_id,condition")?;
        for p in &self.patients {
            for c in &p.preexisting {
                writeln!(out, "{},{}", p.patient_id, self.label(*c))?;
            }
        }
        Ok(())
    }
}

/// Collapses repeated reports of a condition that fall within the window.
///
/// A report at most `window_days` after the anchoring report of the same
/// condition is dropped. Preexisting conditions are never suppressed.
pub fn apply_recurrence_policy(db: &EventDatabase, policy: RecurrencePolicy) -> Result<EventDatabase> {
    if policy.window_days <= 0 {
        return Err(Error::Config(format!(
            "recurrence window must be positive, got {}",
            policy.window_days
        )));
    }
    let mut out = db.clone();
    for p in &mut out.patients {
        let mut anchor: HashMap<ConditionId, i64> = HashMap::new();
        for e in &mut p.encounters {
            let day = e.day;
            let preexisting = &p.preexisting;
            e.conditions.retain(|c| {
                if preexisting.contains(c) {
                    return true;
                }
                match anchor.get(c) {
                    Some(&last) if day - last <= policy.window_days => {
                        if policy.anchor == RecurrenceAnchor::First {
                            anchor.insert(*c, day);
                        }
                        false
                    }
                    _ => {
                        anchor.insert(*c, day);
                        true
                    }
                }
            });
        }
    }
    Ok(out)
}

/// Prepends each patient's preexisting conditions, in id order, to every
/// encounter. A condition already reported in the encounter is not repeated.
pub fn materialize_preexisting(db: &EventDatabase) -> EventDatabase {
    let mut out = db.clone();
    for p in &mut out.patients {
        if p.preexisting.is_empty() {
            continue;
        }
        for e in &mut p.encounters {
            let mut merged: Vec<ConditionId> = p.preexisting.iter().copied().collect();
            merged.extend(e.conditions.iter().filter(|c| !p.preexisting.contains(c)));
            e.conditions = merged;
        }
    }
    out
}

/// Row-major I×D matrix of patient covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl CovariateMatrix {
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = names.len();
        let mut values = Vec::with_capacity(rows.len() * n_cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_cols {
                return Err(Error::Config(format!(
                    "covariate row {i} has length {}, expected {n_cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Ok(CovariateMatrix { n_rows: rows.len(), n_cols, names, values })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, d: usize) -> f64 {
        self.values[i * self.n_cols + d]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> CovariateMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols);
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        CovariateMatrix { n_rows: rows.len(), n_cols: self.n_cols, names: self.names.clone(), values }
    }
}

pub const INTERCEPT_NAME: &str = "intercept";

/// The I×D indicator matrix, optionally with a leading all-ones column.
pub fn build_covariate_matrix(db: &EventDatabase, intercept: bool) -> Result<CovariateMatrix> {
    let mut names = Vec::with_capacity(db.n_covariates() + 1);
    if intercept {
        names.push(INTERCEPT_NAME.to_string());
    }
    names.extend(db.covariate_names.iter().cloned());
    let rows: Vec<Vec<f64>> = db
        .patients
        .iter()
        .map(|p| {
            let mut r = Vec::with_capacity(names.len());
            if intercept {
                r.push(1.0);
            }
            r.extend(p.covariates.iter().map(|&x| f64::from(x)));
            r
        })
        .collect();
    CovariateMatrix::from_rows(names, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db_from(encounters: &str, covariates: &str) -> EventDatabase {
        ingest(encounters.as_bytes(), covariates.as_bytes(), None, &IngestOptions::default()).unwrap()
    }

    const COV: &str = "patient_id,gender,age,race,treatment\nP1,M,55,white,T\nP2,F,72,black,P\n";

    #[test]
    fn empty_streams_give_empty_database() {
        let db = db_from("", "");
        assert_eq!(db.n_patients(), 0);
        assert_eq!(db.n_conditions(), 0);
    }

    #[test]
    fn single_encounter_builds_two_condition_vocabulary() {
        let db = db_from(
            r#"{"patient_id":"P1","day":0,"conditions":["a","b"]}"#,
            "patient_id,x,y\nP1,0,1\n",
        );
        assert_eq!(db.n_conditions(), 2);
        assert_eq!(db.n_patients(), 1);
        assert_eq!(db.patients[0].encounters[0].conditions, vec![ConditionId(0), ConditionId(1)]);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let enc = "{\"patient_id\":\"P1\",\"day\":0,\"conditions\":[]}\n\nnot json\n";
        let err = ingest(enc.as_bytes(), COV.as_bytes(), None, &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_patient_is_referential_error() {
        let enc = r#"{"patient_id":"P9","day":0,"conditions":["a"]}"#;
        let err = ingest(enc.as_bytes(), COV.as_bytes(), None, &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Referential(_)));
    }

    #[test]
    fn single_covariate_column_is_rejected() {
        let enc = r#"{"patient_id":"P1","day":0,"conditions":["a"]}"#;
        let err = ingest(enc.as_bytes(), "patient_id,x\nP1,1\n".as_bytes(), None, &IngestOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn missing_covariate_is_rejected() {
        let cov = "patient_id,gender,age,race,treatment\nP1,M,,white,T\n";
        assert!(ingest("".as_bytes(), cov.as_bytes(), None, &IngestOptions::default()).is_err());
    }

    #[test]
    fn encounters_sorted_by_day_keeping_input_order() {
        let enc = [
            r#"{"patient_id":"P1","day":5,"conditions":["c"]}"#,
            r#"{"patient_id":"P1","day":1,"conditions":["a"]}"#,
            r#"{"patient_id":"P1","day":5,"conditions":["b"]}"#,
        ]
        .join("\n");
        let db = db_from(&enc, COV);
        let p = &db.patients[0];
        let labels: Vec<&str> = p.encounters.iter().map(|e| db.label(e.conditions[0])).collect();
        assert_eq!(labels, ["a", "c", "b"]);
        assert_eq!(p.encounters.iter().map(|e| e.seq_index).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn duplicate_within_encounter_collapses() {
        let db = db_from(r#"{"patient_id":"P1","day":0,"conditions":["a","b","a"]}"#, COV);
        assert_eq!(db.patients[0].encounters[0].conditions.len(), 2);
    }

    #[test]
    fn demographic_coding() {
        let db = db_from("", COV);
        assert_eq!(
            db.covariate_names,
            ["male", "age_40_49", "age_50_59", "age_60_69", "age_70_plus", "race_white", "treatment_T"]
        );
        assert_eq!(db.patients[0].covariates, [1, 0, 1, 0, 0, 1, 1]);
        assert_eq!(db.patients[1].covariates, [0, 0, 0, 0, 1, 0, 0]);
    }

    #[test]
    fn full_one_hot_without_reference_coding() {
        let opts = IngestOptions { reference_coding: false };
        let db = ingest("".as_bytes(), COV.as_bytes(), None, &opts).unwrap();
        assert_eq!(db.n_covariates(), 1 + 4 + 2 + 2);
    }

    #[test]
    fn age_55_falls_in_second_group() {
        assert_eq!(age_group_indicators(55).unwrap(), [0, 1, 0, 0]);
        assert_eq!(age_group_indicators(70).unwrap(), [0, 0, 0, 1]);
        assert!(age_group_indicators(39).is_err());
    }

    fn days(days: &[i64]) -> EventDatabase {
        let enc: Vec<String> = days
            .iter()
            .map(|d| format!(r#"{{"patient_id":"P1","day":{d},"conditions":["a"]}}"#))
            .collect();
        db_from(&enc.join("\n"), COV)
    }

    fn retained_days(db: &EventDatabase) -> Vec<i64> {
        db.patients[0]
            .encounters
            .iter()
            .filter(|e| !e.conditions.is_empty())
            .map(|e| e.day)
            .collect()
    }

    #[test]
    fn report_within_window_dropped() {
        let out = apply_recurrence_policy(&days(&[0, 10]), RecurrencePolicy::default()).unwrap();
        assert_eq!(retained_days(&out), [0]);
    }

    #[test]
    fn report_after_window_is_separate_incident() {
        let out = apply_recurrence_policy(&days(&[0, 31]), RecurrencePolicy::default()).unwrap();
        assert_eq!(retained_days(&out), [0, 31]);
    }

    #[test]
    fn chain_anchored_on_retained_report() {
        let out = apply_recurrence_policy(&days(&[0, 10, 40]), RecurrencePolicy::default()).unwrap();
        assert_eq!(retained_days(&out), [0, 40]);
    }

    #[test]
    fn chain_anchored_on_first_report_of_incident() {
        let policy = RecurrencePolicy { window_days: 30, anchor: RecurrenceAnchor::First };
        let out = apply_recurrence_policy(&days(&[0, 10, 40]), policy).unwrap();
        assert_eq!(retained_days(&out), [0]);
        let out = apply_recurrence_policy(&days(&[0, 10, 41]), policy).unwrap();
        assert_eq!(retained_days(&out), [0, 41]);
    }

    #[test]
    fn window_boundary_is_inclusive() {
        let out = apply_recurrence_policy(&days(&[0, 30]), RecurrencePolicy::default()).unwrap();
        assert_eq!(retained_days(&out), [0]);
    }

    #[test]
    fn nonpositive_window_rejected() {
        let policy = RecurrencePolicy { window_days: 0, anchor: RecurrenceAnchor::Retained };
        assert!(apply_recurrence_policy(&days(&[0]), policy).is_err());
    }

    fn with_preexisting(enc: &str, pre: &str) -> EventDatabase {
        let mut pre = pre.as_bytes();
        ingest(enc.as_bytes(), COV.as_bytes(), Some(&mut pre), &IngestOptions::default()).unwrap()
    }

    #[test]
    fn preexisting_injected_into_every_encounter() {
        let enc = "{\"patient_id\":\"P1\",\"day\":0,\"conditions\":[\"a\"]}\n\
                   {\"patient_id\":\"P1\",\"day\":3,\"conditions\":[\"b\"]}";
        let db = materialize_preexisting(&with_preexisting(enc, "patient_id,condition\nP1,c\n"));
        let c = db.condition_id("c").unwrap();
        for e in &db.patients[0].encounters {
            assert_eq!(e.conditions[0], c);
        }
        // injections survive the recurrence window
        let again = apply_recurrence_policy(&db, RecurrencePolicy::default()).unwrap();
        assert_eq!(again, db);
    }

    #[test]
    fn preexisting_not_duplicated() {
        let enc = r#"{"patient_id":"P1","day":0,"conditions":["a","c"]}"#;
        let db = materialize_preexisting(&with_preexisting(enc, "P1,c\n"));
        let conds = &db.patients[0].encounters[0].conditions;
        assert_eq!(conds.len(), 2);
        assert_eq!(conds[0], db.condition_id("c").unwrap());
    }

    #[test]
    fn empty_preexisting_is_identity() {
        let db = days(&[0, 5]);
        assert_eq!(materialize_preexisting(&db), db);
    }

    #[test]
    fn covariate_matrix_with_intercept() {
        let db = db_from("", "patient_id,male,old\nP1,1,0\nP2,0,1\n");
        let m = build_covariate_matrix(&db, true).unwrap();
        assert_eq!((m.n_rows, m.n_cols), (2, 3));
        assert_eq!(m.row(0), [1.0, 1.0, 0.0]);
        assert_eq!(m.row(1), [1.0, 0.0, 1.0]);
    }

    #[test]
    fn inconsistent_covariates_rejected() {
        let mut db = db_from("", "patient_id,male,old\nP1,1,0\nP2,0,1\n");
        db.patients[1].covariates.pop();
        assert!(build_covariate_matrix(&db, false).is_err());
        assert!(db.validate().is_err());
    }
}
