//! Synthetic patient histories drawn from the hierarchical model itself.
//!
//! Covariates, random effects, dispersions and coefficients are sampled
//! from their priors, p is drawn from Beta(π, τ), and encounter sequences
//! are realised rule by rule: within an encounter every applicable rule
//! (the empty-lhs rule, plus every rule whose lhs the patient has already
//! experienced) gets one Bernoulli(p) draw for its rhs, and a condition is
//! reported at most once per encounter.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Condition, ConditionId, Encounter, EventDatabase, PatientRecord, INTERCEPT_NAME};
use crate::model::dist::{ln_beta_variate, standard_normal};
use crate::model::{CoefficientPrior, Hyperparameters, ModelState};
use crate::rules::{enumerate_rules, RuleSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_conditions: usize,
    /// Binary covariates besides the intercept column.
    pub n_binary_covariates: usize,
    pub covariate_prob: f64,
    /// Poisson mean of the number of encounters per patient.
    pub mean_encounters: f64,
    /// Days between consecutive encounters are drawn from
    /// `min_gap_days..=max_gap_days`.
    pub min_gap_days: i64,
    pub max_gap_days: i64,
    pub seed: u64,
    pub truth: Hyperparameters,
    pub prior: CoefficientPrior,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 100,
            n_conditions: 20,
            n_binary_covariates: 3,
            covariate_prob: 0.5,
            mean_encounters: 15.0,
            min_gap_days: 31,
            max_gap_days: 120,
            seed: 0,
            truth: Hyperparameters {
                mu_beta: -4.0,
                sigma2_beta: 1.0,
                mu_gamma: 0.0,
                sigma2_gamma: 0.05,
                sigma2_tau: 0.05,
            },
            prior: CoefficientPrior::Gaussian,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_conditions < 2 {
            return Err(Error::Config("at least two conditions are needed".into()));
        }
        if !(0.0..=1.0).contains(&self.covariate_prob) {
            return Err(Error::Config("covariate_prob must lie in [0, 1]".into()));
        }
        if !(self.mean_encounters >= 0.0) || !self.mean_encounters.is_finite() {
            return Err(Error::Config("mean_encounters must be a nonnegative number".into()));
        }
        if self.min_gap_days < 1 || self.max_gap_days < self.min_gap_days {
            return Err(Error::Config("need 1 <= min_gap_days <= max_gap_days".into()));
        }
        // zero variances are allowed here: they pin the effect at its mean
        let h = &self.truth;
        for v in [h.sigma2_beta, h.sigma2_gamma, h.sigma2_tau] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config("generating variances must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Generated data with the state that produced it. Rule indices of the
/// truth follow `rules`, which spans the whole vocabulary.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub db: EventDatabase,
    pub rules: RuleSet,
    pub truth: ModelState,
}

pub fn condition_label(k: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len();
    format!("c{k:0width$}")
}

pub fn synthesize(cfg: &SynthConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = cfg.n_conditions;
    let vocabulary: Vec<Condition> = (0..v)
        .map(|k| Condition { id: ConditionId(k as u32), label: condition_label(k, v) })
        .collect();
    let rules = enumerate_rules(&vocabulary, None)?;
    let (i_n, r_n, d_n) = (cfg.n_patients, rules.len(), cfg.n_binary_covariates + 1);
    let h = cfg.truth;

    let mut covariate_names = vec![INTERCEPT_NAME.to_string()];
    covariate_names.extend((1..d_n).map(|d| format!("x{d}")));
    let covariates: Vec<Vec<u8>> = (0..i_n)
        .map(|_| std::iter::once(1).chain((1..d_n).map(|_| u8::from(rng.random::<f64>() < cfg.covariate_prob))).collect())
        .collect();

    let normal = |rng: &mut ChaCha8Rng, mean: f64, var: f64| mean + var.sqrt() * standard_normal(rng);
    let beta: Vec<f64> = (0..r_n * d_n).map(|_| normal(&mut rng, h.mu_beta, h.sigma2_beta)).collect();
    let gamma: Vec<f64> = (0..i_n).map(|_| normal(&mut rng, h.mu_gamma, h.sigma2_gamma)).collect();
    let log_tau: Vec<f64> = (0..i_n).map(|_| normal(&mut rng, 0.0, h.sigma2_tau)).collect();

    let mut log_pi = vec![0.0; i_n * r_n];
    let mut log_p = vec![0.0; i_n * r_n];
    let mut log_q = vec![0.0; i_n * r_n];
    for i in 0..i_n {
        let g = cfg.prior.link_value(gamma[i]);
        let tau = log_tau[i].exp();
        for r in 0..r_n {
            let c = i * r_n + r;
            let xb: f64 = (0..d_n).map(|d| f64::from(covariates[i][d]) * cfg.prior.link_value(beta[r * d_n + d])).sum();
            log_pi[c] = xb + g;
            let (lp, lq) = ln_beta_variate(log_pi[c].exp(), tau, &mut rng);
            log_p[c] = lp;
            log_q[c] = lq;
        }
    }
    let truth = ModelState {
        n_patients: i_n,
        n_rules: r_n,
        n_covariates: d_n,
        log_p,
        log_q,
        log_pi,
        log_tau,
        beta,
        gamma,
        hyper: h,
        prior: cfg.prior,
    };

    let visits = if cfg.mean_encounters > 0.0 {
        Some(Poisson::new(cfg.mean_encounters).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let id_width = i_n.saturating_sub(1).to_string().len();
    let mut patients = Vec::with_capacity(i_n);
    for (i, cov) in covariates.into_iter().enumerate() {
        let e_i = visits.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let mut day: i64 = rng.random_range(0..365);
        let mut active = vec![false; v];
        let mut encounters = Vec::with_capacity(e_i);
        for e in 0..e_i {
            if e > 0 {
                day += rng.random_range(cfg.min_gap_days..=cfg.max_gap_days);
            }
            let reported = simulate_encounter(&truth, &rules, i, &mut active, &mut rng);
            encounters.push(Encounter { seq_index: e, day, conditions: reported });
        }
        patients.push(PatientRecord {
            patient_id: format!("p{i:0id_width$}"),
            encounters,
            preexisting: BTreeSet::new(),
            covariates: cov,
        });
    }
    let db = EventDatabase { patients, vocabulary, covariate_names };
    Ok(Synthetic { db, rules, truth })
}

fn fires(truth: &ModelState, cell: usize, rng: &mut impl Rng) -> bool {
    rng.random::<f64>().ln() < truth.log_p[cell]
}

/// Candidates are visited in random order. A condition that becomes
/// active mid-encounter also gets its draws for the candidates already
/// visited and not reported, so every applicable rule is tried once.
fn simulate_encounter(
    truth: &ModelState,
    rules: &RuleSet,
    i: usize,
    active: &mut [bool],
    rng: &mut impl Rng,
) -> Vec<ConditionId> {
    let v = active.len();
    let row = i * truth.n_rules;
    let mut order: Vec<usize> = (0..v).collect();
    order.shuffle(rng);
    let mut visited = vec![false; v];
    let mut revealed = vec![false; v];
    let mut reported = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    for &x in &order {
        visited[x] = true;
        let mut hit = fires(truth, row + rules.empty_rule(x).index(), rng);
        for a in 0..v {
            if a != x && active[a] && fires(truth, row + rules.pair_rule(a, x).index(), rng) {
                hit = true;
            }
        }
        if !hit {
            continue;
        }
        pending.push(x);
        while let Some(b) = pending.pop() {
            revealed[b] = true;
            reported.push(ConditionId(b as u32));
            if active[b] {
                continue;
            }
            active[b] = true;
            for y in 0..v {
                if y != b
                    && visited[y]
                    && !revealed[y]
                    && !pending.contains(&y)
                    && fires(truth, row + rules.pair_rule(b, y).index(), rng)
                {
                    pending.push(y);
                }
            }
        }
    }
    reported
}
