//! Real-time updating with frozen prior shapes.
//!
//! After a fit, each π_ir and τ_i is fixed at its posterior mean. New
//! observations then only add to (y, n), and by Beta-Binomial conjugacy
//! the expected propensity becomes (y + π̂)/(n + π̂ + τ̂).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Condition, ConditionId};
use crate::model::PosteriorSummary;
use crate::rules::{enumerate_rules, RuleCounts, RuleSet};

/// What a patient unseen at fit time starts from: the posterior-mean
/// coefficients, the population mean of the random effect, and τ̂ at the
/// exponentiated average posterior mean of log τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub n_covariates: usize,
    /// Link-scale β, R×D.
    pub beta_mean: Vec<f64>,
    pub gamma_center: f64,
    pub tau_hat: f64,
}

impl Population {
    pub fn pi_hat(&self, covariates: &[f64], r: usize) -> f64 {
        let d = self.n_covariates;
        let xb: f64 = covariates.iter().zip(&self.beta_mean[r * d..(r + 1) * d]).map(|(x, b)| x * b).sum();
        (xb + self.gamma_center).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenPosterior {
    pub n_rules: usize,
    pi_hat: Vec<f64>,
    tau_hat: Vec<f64>,
    counts: RuleCounts,
    pub population: Option<Population>,
}

fn check_positive(what: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !(*x > 0.0) || !x.is_finite()) {
        Some(k) => Err(Error::Contract(format!("{what}[{k}] = {} is not a positive number", xs[k]))),
        None => Ok(()),
    }
}

/// Fixes π̂ and τ̂ at the posterior means of `summary` with `counts` as the
/// starting totals.
pub fn freeze(summary: &PosteriorSummary, counts: &RuleCounts) -> Result<FrozenPosterior> {
    if counts.n_patients != summary.n_patients || counts.n_rules != summary.n_rules {
        return Err(Error::Contract("summary and counts differ in shape".into()));
    }
    let log_tau = summary.log_tau_mean.iter().sum::<f64>() / summary.n_patients.max(1) as f64;
    let population = Population {
        n_covariates: summary.n_covariates,
        beta_mean: summary.beta_mean.clone(),
        gamma_center: summary.gamma_center_mean,
        tau_hat: log_tau.exp(),
    };
    FrozenPosterior::new(summary.pi_mean.clone(), summary.tau_mean.clone(), counts.clone(), Some(population))
}

impl FrozenPosterior {
    pub fn new(pi_hat: Vec<f64>, tau_hat: Vec<f64>, counts: RuleCounts, population: Option<Population>) -> Result<Self> {
        if pi_hat.len() != counts.n_patients * counts.n_rules || tau_hat.len() != counts.n_patients {
            return Err(Error::Contract("frozen shapes do not match the counts".into()));
        }
        check_positive("pi_hat", &pi_hat)?;
        check_positive("tau_hat", &tau_hat)?;
        if !counts.is_consistent() {
            return Err(Error::Contract("y exceeds n".into()));
        }
        if let Some(p) = &population {
            if p.beta_mean.len() != counts.n_rules * p.n_covariates {
                return Err(Error::Contract("population coefficients do not match the rule count".into()));
            }
            if !(p.tau_hat > 0.0) || !p.gamma_center.is_finite() {
                return Err(Error::Contract("population prior is not usable".into()));
            }
        }
        Ok(FrozenPosterior { n_rules: counts.n_rules, pi_hat, tau_hat, counts, population })
    }

    pub fn n_patients(&self) -> usize {
        self.counts.n_patients
    }

    pub fn counts(&self) -> &RuleCounts {
        &self.counts
    }

    pub fn pi_hat(&self, i: usize, r: usize) -> f64 {
        self.pi_hat[i * self.n_rules + r]
    }

    pub fn tau_hat(&self, i: usize) -> f64 {
        self.tau_hat[i]
    }

    /// (y + π̂)/(n + π̂ + τ̂) on the accumulated counts.
    pub fn expected_p(&self, i: usize, r: usize) -> f64 {
        let pi = self.pi_hat(i, r);
        (f64::from(self.counts.y(i, r)) + pi) / (f64::from(self.counts.n(i, r)) + pi + self.tau_hat[i])
    }

    pub fn expected_row(&self, i: usize) -> Vec<f64> {
        (0..self.n_rules).map(|r| self.expected_p(i, r)).collect()
    }

    /// Adds count deltas for every patient.
    pub fn absorb(&self, delta: &RuleCounts) -> Result<FrozenPosterior> {
        if delta.n_patients != self.n_patients() || delta.n_rules != self.n_rules {
            return Err(Error::Contract("delta shape does not match".into()));
        }
        let mut out = self.clone();
        for i in 0..delta.n_patients {
            out.absorb_patient_in_place(i, delta.row_y(i), delta.row_n(i))?;
        }
        Ok(out)
    }

    pub fn absorb_patient(&self, i: usize, dy: &[u32], dn: &[u32]) -> Result<FrozenPosterior> {
        let mut out = self.clone();
        out.absorb_patient_in_place(i, dy, dn)?;
        Ok(out)
    }

    /// Mutating form of [`absorb_patient`](Self::absorb_patient); callers
    /// holding a shared posterior must serialise these per patient.
    pub fn absorb_patient_in_place(&mut self, i: usize, dy: &[u32], dn: &[u32]) -> Result<()> {
        if i >= self.n_patients() {
            return Err(Error::Contract(format!("patient {i} out of range")));
        }
        if dy.len() != self.n_rules || dn.len() != self.n_rules {
            return Err(Error::Contract("delta row length differs from rule count".into()));
        }
        if let Some(r) = (0..self.n_rules).find(|&r| dy[r] > dn[r]) {
            return Err(Error::Contract(format!("delta y exceeds delta n for rule {r}")));
        }
        let y: Vec<u32> = self.counts.row_y(i).iter().zip(dy).map(|(a, b)| a + b).collect();
        let n: Vec<u32> = self.counts.row_n(i).iter().zip(dn).map(|(a, b)| a + b).collect();
        self.counts.set_row(i, &y, &n);
        Ok(())
    }

    /// Replaces patient `i`'s totals outright, as a tracker replaying the
    /// patient's history would produce them.
    pub fn set_counts(&mut self, i: usize, y: &[u32], n: &[u32]) -> Result<()> {
        if y.len() != self.n_rules || n.len() != self.n_rules || i >= self.n_patients() {
            return Err(Error::Contract("count row does not fit".into()));
        }
        if y.iter().zip(n).any(|(a, b)| a > b) {
            return Err(Error::Contract("y exceeds n".into()));
        }
        self.counts.set_row(i, y, n);
        Ok(())
    }

    /// Appends a patient unseen at freeze time, with zero counts and π̂, τ̂
    /// from the population prior. Returns the new row index.
    pub fn add_patient(&mut self, covariates: &[f64]) -> Result<usize> {
        let pop = self
            .population
            .as_ref()
            .ok_or_else(|| Error::Contract("no population prior to build a new patient from".into()))?;
        if covariates.len() != pop.n_covariates {
            return Err(Error::Contract(format!(
                "expected {} covariates, got {}",
                pop.n_covariates,
                covariates.len()
            )));
        }
        let row: Vec<f64> = (0..self.n_rules).map(|r| pop.pi_hat(covariates, r)).collect();
        check_positive("pi_hat", &row)?;
        self.pi_hat.extend(row);
        self.tau_hat.push(pop.tau_hat);
        let zeros = vec![0; self.n_rules];
        self.counts.push_row(&zeros, &zeros)?;
        Ok(self.counts.n_patients - 1)
    }
}

/// A frozen posterior with the labels needed to resume it elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub vocabulary: Vec<Condition>,
    pub active: Vec<ConditionId>,
    pub patient_ids: Vec<String>,
    pub covariate_names: Vec<String>,
    pub frozen: FrozenPosterior,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Meta {
        vocabulary: Vec<String>,
        active: Vec<String>,
        covariate_names: Vec<String>,
        n_patients: usize,
        n_rules: usize,
    },
    Population {
        tau_hat: f64,
        gamma_center: f64,
    },
    Coefficients {
        lhs: Option<String>,
        rhs: String,
        beta_mean: Vec<f64>,
    },
    Patient {
        patient_id: String,
        tau_hat: f64,
    },
    Cell {
        patient_id: String,
        lhs: Option<String>,
        rhs: String,
        pi_hat: f64,
        y: u32,
        n: u32,
        expected_p: f64,
    },
}

impl Snapshot {
    pub fn rules(&self) -> Result<RuleSet> {
        enumerate_rules(&self.vocabulary, Some(&self.active))
    }

    pub fn patient_index(&self, id: &str) -> Option<usize> {
        self.patient_ids.iter().position(|p| p == id)
    }

    /// Line-delimited JSON: a header, the population prior, per-rule
    /// coefficients, per-patient τ̂, then one record per (patient, rule).
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let rules = self.rules()?;
        let fp = &self.frozen;
        if rules.len() != fp.n_rules || self.patient_ids.len() != fp.n_patients() {
            return Err(Error::Contract("snapshot labels do not match the frozen posterior".into()));
        }
        let label = |c: ConditionId| self.vocabulary[c.index()].label.clone();
        let mut emit = |rec: &Record| -> Result<()> {
            serde_json::to_writer(&mut out, rec)?;
            writeln!(out)?;
            Ok(())
        };
        emit(&Record::Meta {
            vocabulary: self.vocabulary.iter().map(|c| c.label.clone()).collect(),
            active: self.active.iter().map(|c| label(*c)).collect(),
            covariate_names: self.covariate_names.clone(),
            n_patients: fp.n_patients(),
            n_rules: fp.n_rules,
        })?;
        if let Some(pop) = &fp.population {
            emit(&Record::Population { tau_hat: pop.tau_hat, gamma_center: pop.gamma_center })?;
            let d = pop.n_covariates;
            for rule in rules.rules() {
                let r = rule.id.index();
                emit(&Record::Coefficients {
                    lhs: rule.lhs().map(label),
                    rhs: label(rule.rhs()),
                    beta_mean: pop.beta_mean[r * d..(r + 1) * d].to_vec(),
                })?;
            }
        }
        for (i, id) in self.patient_ids.iter().enumerate() {
            emit(&Record::Patient { patient_id: id.clone(), tau_hat: fp.tau_hat(i) })?;
        }
        for (i, id) in self.patient_ids.iter().enumerate() {
            for rule in rules.rules() {
                let r = rule.id.index();
                emit(&Record::Cell {
                    patient_id: id.clone(),
                    lhs: rule.lhs().map(label),
                    rhs: label(rule.rhs()),
                    pi_hat: fp.pi_hat(i, r),
                    y: fp.counts.y(i, r),
                    n: fp.counts.n(i, r),
                    expected_p: fp.expected_p(i, r),
                })?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Snapshot> {
        let mut meta = None;
        let mut population: Option<(f64, f64)> = None;
        let mut beta_mean = Vec::new();
        let mut n_coef = 0usize;
        let mut patient_ids = Vec::new();
        let mut tau_hat = Vec::new();
        let mut pi_hat = Vec::new();
        let mut ys = Vec::new();
        let mut ns = Vec::new();
        for (k, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::parse(k + 1, e.to_string()))?;
            match rec {
                Record::Meta { vocabulary, active, covariate_names, n_patients, n_rules } => {
                    meta = Some((vocabulary, active, covariate_names, n_patients, n_rules));
                }
                Record::Population { tau_hat, gamma_center } => population = Some((tau_hat, gamma_center)),
                Record::Coefficients { beta_mean: b, .. } => {
                    n_coef = b.len();
                    beta_mean.extend(b);
                }
                Record::Patient { patient_id, tau_hat: t } => {
                    patient_ids.push(patient_id);
                    tau_hat.push(t);
                }
                Record::Cell { pi_hat: p, y, n, .. } => {
                    pi_hat.push(p);
                    ys.push(y);
                    ns.push(n);
                }
            }
        }
        let (vocab, active, covariate_names, n_patients, n_rules) =
            meta.ok_or_else(|| Error::parse(1, "snapshot has no meta record"))?;
        let vocabulary: Vec<Condition> = vocab
            .into_iter()
            .enumerate()
            .map(|(k, label)| Condition { id: ConditionId(k as u32), label })
            .collect();
        let find = |l: &str| {
            vocabulary
                .iter()
                .find(|c| c.label == l)
                .map(|c| c.id)
                .ok_or_else(|| Error::Referential(format!("active condition {l} not in vocabulary")))
        };
        let active: Vec<ConditionId> = active.iter().map(|l| find(l)).collect::<Result<_>>()?;
        if patient_ids.len() != n_patients || pi_hat.len() != n_patients * n_rules {
            return Err(Error::Contract("snapshot record counts do not match its header".into()));
        }
        let mut counts = RuleCounts::zeros(0, n_rules);
        for i in 0..n_patients {
            let range = i * n_rules..(i + 1) * n_rules;
            counts.push_row(&ys[range.clone()], &ns[range])?;
        }
        let population = population.map(|(tau_hat, gamma_center)| Population {
            n_covariates: n_coef,
            beta_mean,
            gamma_center,
            tau_hat,
        });
        let frozen = FrozenPosterior::new(pi_hat, tau_hat, counts, population)?;
        let snap = Snapshot { vocabulary, active, patient_ids, covariate_names, frozen };
        if snap.rules()?.len() != n_rules {
            return Err(Error::Contract("rule count does not match the active set".into()));
        }
        Ok(snap)
    }
}
