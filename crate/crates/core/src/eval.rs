//! Sequential next-condition prediction experiments.
//!
//! Each run selects a condition set, samples patients, cuts every sampled
//! history at a uniformly drawn encounter, trains on the prefixes and then
//! walks through the remaining encounters one reveal at a time. Before each
//! reveal every algorithm recommends `c` conditions and earns a point when
//! the revealed condition is among them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{build_covariate_matrix, ConditionId, CovariateMatrix, Encounter, EventDatabase};
use crate::model::{fit, ChainConfig};
use crate::online::{freeze, FrozenPosterior};
use crate::rules::{adjusted_confidence, confidence, count_patient, enumerate_rules, rank_order, Cursor, PatientTracker, RuleCounts, RuleId, RuleSet};
use crate::stats::{mean, paired_t_test, quantile_sorted, variance, PairedTTest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Algorithm {
    Harm,
    AdjustedConfidence(f64),
    MinSupport(u32),
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::Harm => write!(f, "harm"),
            Algorithm::AdjustedConfidence(k) => write!(f, "adjconf:{k}"),
            Algorithm::MinSupport(t) => write!(f, "minsup:{t}"),
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown algorithm {s:?}; expected harm, adjconf:K or minsup:THETA"));
        match s.split_once(':') {
            None if s == "harm" => Ok(Algorithm::Harm),
            Some(("adjconf", k)) => {
                let k: f64 = k.parse().map_err(|_| bad())?;
                if !(k >= 0.0) || !k.is_finite() {
                    return Err(bad());
                }
                Ok(Algorithm::AdjustedConfidence(k))
            }
            Some(("minsup", t)) => Ok(Algorithm::MinSupport(t.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Algorithm {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Algorithm> for String {
    fn from(a: Algorithm) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Recommendations per reveal.
    pub c: usize,
    pub runs: usize,
    /// Inclusion probability per patient; when absent it is
    /// `n_target / I`.
    pub patient_sample_prob: Option<f64>,
    pub n_target: f64,
    pub n_popular: usize,
    pub n_random: usize,
    pub algorithms: Vec<Algorithm>,
    pub seed: u64,
    /// Refit the model once this many test encounters have been absorbed,
    /// checked between patients; 0 freezes once.
    pub refit_every: usize,
    /// Chain used for every HARM fit. Its seed is replaced per run.
    pub chain: ChainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            c: 3,
            runs: 500,
            patient_sample_prob: None,
            n_target: 200.0,
            n_popular: 25,
            n_random: 25,
            algorithms: vec![
                Algorithm::Harm,
                Algorithm::AdjustedConfidence(0.0),
                Algorithm::AdjustedConfidence(1.0),
                Algorithm::AdjustedConfidence(5.0),
                Algorithm::MinSupport(2),
                Algorithm::MinSupport(3),
            ],
            seed: 0,
            refit_every: 0,
            chain: ChainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(Error::Config("c must be at least 1".into()));
        }
        if self.n_popular + self.n_random < self.c {
            return Err(Error::Config("n_popular + n_random must be at least c".into()));
        }
        if let Some(p) = self.patient_sample_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("patient_sample_prob {p} is not a probability")));
            }
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms to evaluate".into()));
        }
        if self.algorithms.contains(&Algorithm::Harm) {
            self.chain.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sample_prob(&self, n_patients: usize) -> f64 {
        self.patient_sample_prob.unwrap_or_else(|| (self.n_target / n_patients.max(1) as f64).min(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    All,
    FullyObserved,
    PartiallyObserved,
    New,
}

impl Stratum {
    pub fn name(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::FullyObserved => "fully_observed",
            Stratum::PartiallyObserved => "partially_observed",
            Stratum::New => "new",
        }
    }
}

/// Sampled patients with their cut points. Encounters before `cut[k]`
/// are training data for `patients[k]`, the rest are test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub patients: Vec<usize>,
    pub cut: Vec<usize>,
    pub strata: Vec<Stratum>,
}

/// Bernoulli patient inclusion and a uniform cut in `0..=E_i`. Patients
/// without encounters are never included.
pub fn sample_experiment<R: Rng + ?Sized>(db: &EventDatabase, cfg: &ExperimentConfig, rng: &mut R) -> Experiment {
    let prob = cfg.sample_prob(db.n_patients());
    let mut out = Experiment { patients: Vec::new(), cut: Vec::new(), strata: Vec::new() };
    for (i, p) in db.patients.iter().enumerate() {
        let include = rng.random::<f64>() < prob;
        let e = p.encounters.len();
        if !include || e == 0 {
            continue;
        }
        let t = rng.random_range(0..=e);
        out.patients.push(i);
        out.cut.push(t);
        out.strata.push(if t == e {
            Stratum::FullyObserved
        } else if t == 0 {
            Stratum::New
        } else {
            Stratum::PartiallyObserved
        });
    }
    out
}

/// The `n_popular` conditions with the most reports (ties to the lower
/// id) plus `n_random` drawn uniformly from the rest, in id order.
pub fn select_conditions<R: Rng + ?Sized>(db: &EventDatabase, cfg: &ExperimentConfig, rng: &mut R) -> Result<Vec<ConditionId>> {
    let v = db.n_conditions();
    let want = cfg.n_popular + cfg.n_random;
    if v < want {
        return Err(Error::Config(format!("vocabulary has {v} conditions but {want} are requested")));
    }
    let support = db.condition_support();
    let mut by_support: Vec<usize> = (0..v).collect();
    by_support.sort_by(|&a, &b| support[b].cmp(&support[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = by_support[..cfg.n_popular].to_vec();
    let rest = &by_support[cfg.n_popular..];
    chosen.extend(sample(rng, rest.len(), cfg.n_random).into_iter().map(|k| rest[k]));
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|k| ConditionId(k as u32)).collect())
}

/// Top `c` conditions for the tracker's patient before its next reveal.
///
/// Only rules with an empty or already experienced lhs are considered,
/// and conditions revealed earlier in the same encounter are skipped. A
/// condition takes the rank of its best rule. Rules `score` declines are
/// used afterwards, by support and then id, to fill a short list.
pub fn recommend<F>(tracker: &PatientTracker<'_>, c: usize, mut score: F) -> Vec<ConditionId>
where
    F: FnMut(RuleId, u32, u32) -> Option<f64>,
{
    let rules = tracker.rules();
    let (y, n) = (tracker.y(), tracker.n());
    let mut scored = Vec::new();
    let mut fallback = Vec::new();
    for rule in rules.rules() {
        let r = rule.id;
        if !tracker.is_applicable(r) || tracker.revealed_in_encounter(rules.rhs_slot(r)) {
            continue;
        }
        let (yr, nr) = (y[r.index()], n[r.index()]);
        match score(r, yr, nr) {
            Some(s) => scored.push((s, nr, r)),
            None => fallback.push((0.0, nr, r)),
        }
    }
    scored.sort_by(|a, b| rank_order(*a, *b));
    fallback.sort_by(|a, b| rank_order(*a, *b));
    let short = scored.len();
    let mut out: Vec<ConditionId> = Vec::with_capacity(c);
    for (k, (_, _, r)) in scored.iter().chain(&fallback).enumerate() {
        if out.len() == c {
            break;
        }
        let rhs = rules.rule(*r).rhs();
        if !out.contains(&rhs) {
            if k >= short {
                debug!("padding recommendations with unscored rule {}", r.index());
            }
            out.push(rhs);
        }
    }
    out
}

/// Scores of one algorithm on one patient.
pub fn algorithm_score(alg: Algorithm, y: u32, n: u32) -> Option<f64> {
    match alg {
        Algorithm::AdjustedConfidence(k) => adjusted_confidence(y, n, k).ok(),
        Algorithm::MinSupport(theta) => (n >= theta).then(|| confidence(y, n).ok()).flatten(),
        Algorithm::Harm => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcome {
    pub points: u32,
    pub reveals: u32,
}

impl PatientOutcome {
    pub fn score(&self) -> Option<f64> {
        (self.reveals > 0).then(|| f64::from(self.points) / f64::from(self.reveals))
    }
}

/// Walks one patient's test encounters starting from `tracker`, calling
/// `score` with the tracker's current counts before each reveal.
pub fn run_patient<F>(
    tracker: &mut PatientTracker<'_>,
    encounters: &[Encounter],
    c: usize,
    mut score: F,
    mut after_encounter: impl FnMut(&PatientTracker<'_>),
) -> PatientOutcome
where
    F: FnMut(RuleId, u32, u32) -> Option<f64>,
{
    let rules = tracker.rules();
    let mut out = PatientOutcome { points: 0, reveals: 0 };
    for e in encounters {
        let mut any = false;
        for &x in &e.conditions {
            if rules.slot(x).is_none() {
                continue;
            }
            any = true;
            let recs = recommend(tracker, c, &mut score);
            out.reveals += 1;
            out.points += u32::from(recs.contains(&x));
            tracker.reveal(x);
        }
        if !any {
            tracker.open_encounter();
        }
        tracker.close_encounter();
        after_encounter(tracker);
    }
    out
}

/// Per-patient outcomes of one algorithm on an experiment over a
/// database already restricted to the active conditions.
pub fn run_sequential_prediction(
    alg: Algorithm,
    db: &EventDatabase,
    rules: &RuleSet,
    exp: &Experiment,
    c: usize,
    harm: Option<&HarmState>,
) -> Result<Vec<Option<PatientOutcome>>> {
    if alg == Algorithm::Harm && harm.is_none() {
        return Err(Error::Contract("HARM needs a fitted model".into()));
    }
    let mut harm = harm.cloned();
    let mut since_refit = 0usize;
    let mut out = Vec::with_capacity(exp.patients.len());
    for (k, &i) in exp.patients.iter().enumerate() {
        let enc = &db.patients[i].encounters;
        let t = exp.cut[k];
        if t == enc.len() {
            out.push(None);
            continue;
        }
        let mut tracker = PatientTracker::replay(rules, &enc[..t]);
        let outcome = match (alg, harm.as_mut()) {
            (Algorithm::Harm, Some(h)) => {
                let row = h.row_of[k];
                let mut pending_refit = false;
                let res = {
                    let fp = &h.frozen;
                    run_patient(
                        &mut tracker,
                        &enc[t..],
                        c,
                        |r, y, n| {
                            let pi = fp.pi_hat(row, r.index());
                            Some((f64::from(y) + pi) / (f64::from(n) + pi + fp.tau_hat(row)))
                        },
                        |_| {
                            since_refit += 1;
                            if h.refit_every > 0 && since_refit >= h.refit_every {
                                pending_refit = true;
                            }
                        },
                    )
                };
                h.frozen.set_counts(row, tracker.y(), tracker.n())?;
                if pending_refit {
                    since_refit = 0;
                    h.refit()?;
                }
                res
            }
            _ => run_patient(&mut tracker, &enc[t..], c, |_, y, n| algorithm_score(alg, y, n), |_| {}),
        };
        out.push(Some(outcome));
    }
    Ok(out)
}

/// A frozen HARM posterior for the patients of one experiment.
#[derive(Debug, Clone)]
pub struct HarmState {
    pub frozen: FrozenPosterior,
    /// Row of the frozen posterior for each sampled patient.
    pub row_of: Vec<usize>,
    /// Rows that were part of the fit, with their covariates.
    fitted_rows: usize,
    covariates: CovariateMatrix,
    new_covariates: Vec<Vec<f64>>,
    chain: ChainConfig,
    refit_every: usize,
}

impl HarmState {
    /// Fits on the training prefixes of patients with at least one
    /// training encounter; patients without one join from the
    /// population prior.
    pub fn train(db: &EventDatabase, rules: &RuleSet, exp: &Experiment, chain: &ChainConfig, refit_every: usize) -> Result<Self> {
        let m_all = build_covariate_matrix(db, false)?;
        let fitted: Vec<usize> = (0..exp.patients.len()).filter(|&k| exp.cut[k] > 0).collect();
        let newcomers: Vec<usize> = (0..exp.patients.len()).filter(|&k| exp.cut[k] == 0).collect();
        let mut row_of = vec![0; exp.patients.len()];
        let mut counts = RuleCounts::zeros(0, rules.len());
        for (row, &k) in fitted.iter().enumerate() {
            let p = &db.patients[exp.patients[k]];
            let (y, n) = count_patient(rules, &p.encounters, Cursor { encounter: exp.cut[k], revealed: 0 });
            counts.push_row(&y, &n)?;
            row_of[k] = row;
        }
        let covariates = m_all.select_rows(&fitted.iter().map(|&k| exp.patients[k]).collect::<Vec<_>>());
        let new_covariates: Vec<Vec<f64>> = newcomers.iter().map(|&k| m_all.row(exp.patients[k]).to_vec()).collect();
        for (j, &k) in newcomers.iter().enumerate() {
            row_of[k] = fitted.len() + j;
        }
        let mut state = HarmState {
            frozen: FrozenPosterior::new(vec![], vec![], RuleCounts::zeros(0, rules.len()), None)?,
            row_of,
            fitted_rows: fitted.len(),
            covariates,
            new_covariates,
            chain: *chain,
            refit_every,
        };
        state.fit_from(counts)?;
        Ok(state)
    }

    fn fit_from(&mut self, counts: RuleCounts) -> Result<()> {
        let summary = fit(&counts, &self.covariates, &self.chain)?;
        let mut fp = freeze(&summary, &counts)?;
        for x in &self.new_covariates {
            let row = fp.add_patient(x)?;
            if row < self.frozen.n_patients() {
                let old = self.frozen.counts();
                fp.set_counts(row, old.row_y(row), old.row_n(row))?;
            }
        }
        self.frozen = fp;
        Ok(())
    }

    fn refit(&mut self) -> Result<()> {
        let rows: Vec<usize> = (0..self.fitted_rows).collect();
        let counts = self.frozen.counts().select_rows(&rows);
        self.chain.seed = self.chain.seed.wrapping_add(1);
        self.fit_from(counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub run: usize,
    pub algorithm: Algorithm,
    pub stratum: Stratum,
    /// Mean patient score, absent when the stratum had no scored patient.
    pub score: Option<f64>,
    pub n_patients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub stratum: Stratum,
    pub a: Algorithm,
    pub b: Algorithm,
    pub test: Option<PairedTTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub algorithms: Vec<Algorithm>,
    pub runs: Vec<RunScore>,
    pub tests: Vec<PairTest>,
}

pub const REPORTED_STRATA: [Stratum; 4] = [Stratum::All, Stratum::PartiallyObserved, Stratum::New, Stratum::FullyObserved];

/// One repetition: condition selection, sampling, training, testing.
pub fn run_once(db: &EventDatabase, cfg: &ExperimentConfig, run: usize) -> Result<Vec<RunScore>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(run as u64);
    let active = select_conditions(db, cfg, &mut rng)?;
    let sub = db.restrict_to(&active);
    let rules = enumerate_rules(&sub.vocabulary, Some(&active))?;
    let exp = sample_experiment(&sub, cfg, &mut rng);
    let harm = if cfg.algorithms.contains(&Algorithm::Harm) && exp.cut.iter().any(|&t| t > 0) {
        let mut chain = cfg.chain;
        chain.seed = rng.random();
        Some(HarmState::train(&sub, &rules, &exp, &chain, cfg.refit_every)?)
    } else {
        None
    };
    let mut out = Vec::new();
    for &alg in &cfg.algorithms {
        let outcomes = if alg == Algorithm::Harm && harm.is_none() {
            // nothing to train on: every sampled patient is new
            vec![None; exp.patients.len()]
        } else {
            run_sequential_prediction(alg, &sub, &rules, &exp, cfg.c, harm.as_ref())?
        };
        for stratum in REPORTED_STRATA {
            let scores: Vec<f64> = outcomes
                .iter()
                .zip(&exp.strata)
                .filter(|(_, s)| stratum == Stratum::All || **s == stratum)
                .filter_map(|(o, _)| o.and_then(|o| o.score()))
                .collect();
            out.push(RunScore { run, algorithm: alg, stratum, score: mean(&scores), n_patients: scores.len() });
        }
    }
    Ok(out)
}

/// Repeats the experiment `cfg.runs` times. Runs use independent random
/// streams and may run in parallel; results are ordered by run.
pub fn run_study(db: &EventDatabase, cfg: &ExperimentConfig) -> Result<ScoreReport> {
    cfg.validate()?;
    let per_run: Vec<Result<Vec<RunScore>>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let r = run_once(db, cfg, run);
            info!("run {} of {} done", run + 1, cfg.runs);
            r
        })
        .collect();
    let mut runs = Vec::new();
    for r in per_run {
        runs.extend(r?);
    }
    let tests = pairwise_tests(&cfg.algorithms, &runs);
    Ok(ScoreReport { algorithms: cfg.algorithms.clone(), runs, tests })
}

fn paired_scores(runs: &[RunScore], stratum: Stratum, a: Algorithm, b: Algorithm) -> (Vec<f64>, Vec<f64>) {
    let mut by_run: BTreeMap<usize, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.stratum == stratum) {
        let e = by_run.entry(r.run).or_default();
        if r.algorithm == a {
            e.0 = r.score;
        }
        if r.algorithm == b {
            e.1 = r.score;
        }
    }
    by_run.values().filter_map(|(x, y)| Some(((*x)?, (*y)?))).unzip()
}

fn pairwise_tests(algs: &[Algorithm], runs: &[RunScore]) -> Vec<PairTest> {
    let mut out = Vec::new();
    for stratum in [Stratum::All, Stratum::PartiallyObserved, Stratum::New] {
        for (k, &a) in algs.iter().enumerate() {
            for &b in &algs[k + 1..] {
                let (xa, xb) = paired_scores(runs, stratum, a, b);
                out.push(PairTest { stratum, a, b, test: paired_t_test(&xa, &xb) });
            }
        }
    }
    out
}

impl ScoreReport {
    pub fn scores(&self, alg: Algorithm, stratum: Stratum) -> Vec<f64> {
        self.runs.iter().filter(|r| r.algorithm == alg && r.stratum == stratum).filter_map(|r| r.score).collect()
    }

    pub fn mean_score(&self, alg: Algorithm, stratum: Stratum) -> Option<f64> {
        mean(&self.scores(alg, stratum))
    }

    pub fn test(&self, stratum: Stratum, a: Algorithm, b: Algorithm) -> Option<PairedTTest> {
        self.tests.iter().find_map(|t| {
            if t.stratum != stratum {
                return None;
            }
            if t.a == a && t.b == b {
                t.test
            } else if t.a == b && t.b == a {
                t.test.map(|mut x| {
                    x.t = -x.t;
                    x.mean_difference = -x.mean_difference;
                    x
                })
            } else {
                None
            }
        })
    }

    /// `run,algorithm,stratum,score`, skipping empty strata.
    pub fn write_scores_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "run,algorithm,stratum,score")?;
        for r in &self.runs {
            if let Some(s) = r.score {
                writeln!(out, "{},{},{},{}", r.run, r.algorithm, r.stratum.name(), s)?;
            }
        }
        Ok(())
    }

    /// Per-algorithm means and the paired tests, human readable.
    pub fn write_summary(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "algorithm,stratum,runs,mean,sd")?;
        for stratum in [Stratum::All, Stratum::PartiallyObserved, Stratum::New] {
            for &a in &self.algorithms {
                let s = self.scores(a, stratum);
                let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
                writeln!(out, "{a},{},{},{},{}", stratum.name(), s.len(), fmt(mean(&s)), fmt(variance(&s).map(f64::sqrt)))?;
            }
        }
        writeln!(out)?;
        writeln!(out, "stratum,a,b,n,mean_difference,t,p_value,degenerate")?;
        for t in &self.tests {
            match t.test {
                Some(x) => writeln!(
                    out,
                    "{},{},{},{},{:.6},{:.4},{:.6e},{}",
                    t.stratum.name(),
                    t.a,
                    t.b,
                    x.n,
                    x.mean_difference,
                    x.t,
                    x.p_value,
                    x.degenerate
                )?,
                None => writeln!(out, "{},{},{},,,,,", t.stratum.name(), t.a, t.b)?,
            }
        }
        Ok(())
    }

    /// Boxplot statistics of per-run scores for the all, partially
    /// observed and new panels.
    pub fn write_plot_data(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "panel,algorithm,n,min,q25,median,q75,max,mean")?;
        for stratum in [Stratum::All, Stratum::PartiallyObserved, Stratum::New] {
            for &a in &self.algorithms {
                let mut s = self.scores(a, stratum);
                s.sort_by(f64::total_cmp);
                let q = |p| quantile_sorted(&s, p).map_or_else(String::new, |x| x.to_string());
                let m = mean(&s).map_or_else(String::new, |x| x.to_string());
                writeln!(
                    out,
                    "{},{a},{},{},{},{},{},{},{m}",
                    stratum.name(),
                    s.len(),
                    q(0.0),
                    q(0.25),
                    q(0.5),
                    q(0.75),
                    q(1.0)
                )?;
            }
        }
        Ok(())
    }
}
