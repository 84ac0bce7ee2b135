//! Posterior summaries, rankings and exports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::sampler::{BlockTallies, ChainConfig, Sampler};
use super::state::{log_joint, CoefficientPrior, Hyperparameters, Kernel, ModelState};
use crate::error::{Error, Result};
use crate::events::{CovariateMatrix, EventDatabase};
use crate::rules::{rank_order, Rule, RuleCounts, RuleId, RuleSet};
use crate::stats::{mean, quantile_sorted};

/// One retained draw's scalar diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sweep: usize,
    pub log_joint: f64,
    pub hyper: Hyperparameters,
    pub mean_log_tau: f64,
    /// Post-burn-in acceptance so far, per block.
    pub acceptance: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRates {
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl From<BlockTallies> for AcceptanceRates {
    fn from(t: BlockTallies) -> Self {
        AcceptanceRates { tau: t.tau.rate(), beta: t.beta.rate(), gamma: t.gamma.rate() }
    }
}

/// Posterior means over the retained draws of a chain.
///
/// `p_mean` averages the conditional means E[p | y, n, π, τ] of each draw
/// rather than the sampled p themselves; both estimate the same posterior
/// mean and the former has lower Monte Carlo variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n_patients: usize,
    pub n_rules: usize,
    pub n_covariates: usize,
    pub kernel: Kernel,
    pub prior: CoefficientPrior,
    pub retained: usize,
    pub p_mean: Vec<f64>,
    pub pi_mean: Vec<f64>,
    pub tau_mean: Vec<f64>,
    pub log_tau_mean: Vec<f64>,
    /// Link-scale β, R×D.
    pub beta_mean: Vec<f64>,
    /// Link-scale γ, length I.
    pub gamma_mean: Vec<f64>,
    /// Population mean of the link-scale random effect.
    pub gamma_center_mean: f64,
    pub hyper_mean: Hyperparameters,
    pub acceptance: AcceptanceRates,
    pub trace: Vec<TraceRow>,
    /// q05, q25, q75, q95 of the sampled p, present when draws were kept.
    pub p_quantiles: Option<Vec<[f64; 4]>>,
    /// Retained p draws, draw-major, present when draws were kept.
    #[serde(skip)]
    pub p_draws: Option<Vec<f32>>,
    pub counts: RuleCounts,
    pub covariates: CovariateMatrix,
}

impl PosteriorSummary {
    #[inline]
    pub fn cell(&self, i: usize, r: usize) -> usize {
        i * self.n_rules + r
    }

    pub fn p(&self, i: usize, r: usize) -> f64 {
        self.p_mean[self.cell(i, r)]
    }

    /// The retained draws of p_ir, when kept.
    pub fn draws(&self, i: usize, r: usize) -> Option<Vec<f32>> {
        let cells = self.n_patients * self.n_rules;
        let c = self.cell(i, r);
        self.p_draws.as_ref().map(|d| d.chunks(cells).map(|draw| draw[c]).collect())
    }
}

pub(crate) struct Accumulator {
    kernel: Kernel,
    prior: CoefficientPrior,
    keep_draws: bool,
    retained: usize,
    p_sum: Vec<f64>,
    pi_sum: Vec<f64>,
    tau_sum: Vec<f64>,
    log_tau_sum: Vec<f64>,
    beta_sum: Vec<f64>,
    gamma_sum: Vec<f64>,
    gamma_center_sum: f64,
    hyper_sum: [f64; 5],
    trace: Vec<TraceRow>,
    draws: Vec<f32>,
    dims: (usize, usize, usize),
}

impl Accumulator {
    pub(crate) fn new(state: &ModelState, cfg: &ChainConfig) -> Self {
        let (i_n, r_n, d_n) = (state.n_patients, state.n_rules, state.n_covariates);
        Accumulator {
            kernel: cfg.kernel,
            prior: cfg.prior,
            keep_draws: cfg.keep_draws,
            retained: 0,
            p_sum: vec![0.0; i_n * r_n],
            pi_sum: vec![0.0; i_n * r_n],
            tau_sum: vec![0.0; i_n],
            log_tau_sum: vec![0.0; i_n],
            beta_sum: vec![0.0; r_n * d_n],
            gamma_sum: vec![0.0; i_n],
            gamma_center_sum: 0.0,
            hyper_sum: [0.0; 5],
            trace: Vec::new(),
            draws: Vec::new(),
            dims: (i_n, r_n, d_n),
        }
    }

    pub(crate) fn add(&mut self, sweep: usize, sampler: &Sampler<'_>) -> Result<()> {
        let st = sampler.state();
        let counts = sampler.counts();
        let (i_n, r_n, _) = self.dims;
        for i in 0..i_n {
            let tau = st.tau(i);
            self.tau_sum[i] += tau;
            self.log_tau_sum[i] += st.log_tau[i];
            self.gamma_sum[i] += st.gamma_value(i);
            for r in 0..r_n {
                let c = i * r_n + r;
                let pi = st.log_pi[c].exp();
                self.pi_sum[c] += pi;
                let (y, n) = (f64::from(counts.y(i, r)), f64::from(counts.n(i, r)));
                self.p_sum[c] += self.kernel.conditional_mean(y, n, pi, tau);
            }
        }
        for (k, b) in st.beta.iter().enumerate() {
            self.beta_sum[k] += self.prior.link_value(*b);
        }
        let h = st.hyper;
        self.gamma_center_sum += match self.prior {
            CoefficientPrior::Gaussian => h.mu_gamma,
            CoefficientPrior::LogNormal => (h.mu_gamma + h.sigma2_gamma / 2.0).exp(),
        };
        for (s, v) in self.hyper_sum.iter_mut().zip([h.mu_beta, h.sigma2_beta, h.mu_gamma, h.sigma2_gamma, h.sigma2_tau]) {
            *s += v;
        }
        if self.keep_draws {
            self.draws.extend(st.log_p.iter().map(|lp| lp.exp() as f32));
        }
        let lj = log_joint(st, counts, sampler.covariates(), self.kernel)?;
        let t = sampler.tallies();
        self.trace.push(TraceRow {
            sweep,
            log_joint: lj,
            hyper: h,
            mean_log_tau: mean(&st.log_tau).unwrap_or(0.0),
            acceptance: [t.tau.rate(), t.beta.rate(), t.gamma.rate()],
        });
        self.retained += 1;
        Ok(())
    }

    pub(crate) fn finish(self, tallies: BlockTallies, counts: &RuleCounts, m: &CovariateMatrix) -> PosteriorSummary {
        let (i_n, r_n, d_n) = self.dims;
        let k = self.retained.max(1) as f64;
        let scale = |v: Vec<f64>| v.into_iter().map(|x| x / k).collect::<Vec<f64>>();
        let hs = self.hyper_sum.map(|x| x / k);
        let cells = i_n * r_n;
        let p_quantiles = if self.keep_draws && self.retained > 0 {
            let mut out = Vec::with_capacity(cells);
            let mut column = Vec::with_capacity(self.retained);
            for c in 0..cells {
                column.clear();
                column.extend(self.draws.chunks(cells).map(|d| f64::from(d[c])));
                column.sort_by(f64::total_cmp);
                let q = |p| quantile_sorted(&column, p).expect("non-empty column");
                out.push([q(0.05), q(0.25), q(0.75), q(0.95)]);
            }
            Some(out)
        } else {
            None
        };
        PosteriorSummary {
            n_patients: i_n,
            n_rules: r_n,
            n_covariates: d_n,
            kernel: self.kernel,
            prior: self.prior,
            retained: self.retained,
            p_mean: scale(self.p_sum),
            pi_mean: scale(self.pi_sum),
            tau_mean: scale(self.tau_sum),
            log_tau_mean: scale(self.log_tau_sum),
            beta_mean: scale(self.beta_sum),
            gamma_mean: scale(self.gamma_sum),
            gamma_center_mean: self.gamma_center_sum / k,
            hyper_mean: Hyperparameters {
                mu_beta: hs[0],
                sigma2_beta: hs[1],
                mu_gamma: hs[2],
                sigma2_gamma: hs[3],
                sigma2_tau: hs[4],
            },
            acceptance: tallies.into(),
            trace: self.trace,
            p_quantiles,
            p_draws: if self.keep_draws { Some(self.draws) } else { None },
            counts: counts.clone(),
            covariates: m.clone(),
        }
    }
}

/// Candidate rules ordered by posterior-mean p for one patient, ties
/// broken by support and then rule id.
pub fn rank_harm<F>(summary: &PosteriorSummary, rules: &RuleSet, patient: usize, mut keep: F) -> Result<Vec<(Rule, f64)>>
where
    F: FnMut(&Rule) -> bool,
{
    if patient >= summary.n_patients {
        return Err(Error::Contract(format!("patient {patient} not covered by the summary")));
    }
    if rules.len() != summary.n_rules {
        return Err(Error::Contract("rule set does not match the summary".into()));
    }
    let mut scored: Vec<(f64, u32, RuleId)> = rules
        .rules()
        .iter()
        .filter(|r| keep(r))
        .map(|r| {
            let k = r.id.index();
            (summary.p(patient, k), summary.counts.n(patient, k), r.id)
        })
        .collect();
    scored.sort_by(|a, b| rank_order(*a, *b));
    Ok(scored.into_iter().map(|(s, _, id)| (*rules.rule(id), s)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBand {
    pub group: BTreeMap<String, u8>,
    pub rule: RuleId,
    pub n_patients: usize,
    pub mean: Option<f64>,
    pub q05: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
    pub q95: Option<f64>,
}

/// Spread of the per-patient posterior-mean p within each demographic
/// group.
///
/// Groups are every 0/1 combination of the named indicator columns, so a
/// combination without patients still appears, with empty bands.
pub fn group_risk_report(summary: &PosteriorSummary, grouping: &[&str], rules: &[RuleId]) -> Result<Vec<GroupBand>> {
    let m = &summary.covariates;
    let cols: Vec<usize> = grouping
        .iter()
        .map(|name| m.column_index(name).ok_or_else(|| Error::Config(format!("no covariate column named {name}"))))
        .collect::<Result<_>>()?;
    if cols.len() > 16 {
        return Err(Error::Config("too many grouping columns".into()));
    }
    for &r in rules {
        if r.index() >= summary.n_rules {
            return Err(Error::Config(format!("rule {} out of range", r.index())));
        }
    }
    let mut out = Vec::new();
    for code in 0..(1usize << cols.len()) {
        let key: Vec<u8> = (0..cols.len()).map(|k| ((code >> (cols.len() - 1 - k)) & 1) as u8).collect();
        let members: Vec<usize> = (0..summary.n_patients)
            .filter(|&i| cols.iter().zip(&key).all(|(&d, &v)| m.get(i, d) == f64::from(v)))
            .collect();
        let group: BTreeMap<String, u8> = grouping.iter().map(|s| s.to_string()).zip(key.iter().copied()).collect();
        for &r in rules {
            let mut vals: Vec<f64> = members.iter().map(|&i| summary.p(i, r.index())).collect();
            vals.sort_by(f64::total_cmp);
            let q = |p| quantile_sorted(&vals, p);
            out.push(GroupBand {
                group: group.clone(),
                rule: r,
                n_patients: members.len(),
                mean: mean(&vals),
                q05: q(0.05),
                q25: q(0.25),
                q75: q(0.75),
                q95: q(0.95),
            });
        }
    }
    Ok(out)
}

pub fn write_group_report(
    bands: &[GroupBand],
    db: &EventDatabase,
    rules: &RuleSet,
    mut out: impl Write,
) -> Result<()> {
    let group_cols: Vec<String> = bands.first().map(|b| b.group.keys().cloned().collect()).unwrap_or_default();
    let mut header = group_cols.clone();
    header.extend(["rule", "n_patients", "mean", "q05", "q25", "q75", "q95"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for b in bands {
        let mut fields: Vec<String> = b.group.values().map(|v| v.to_string()).collect();
        fields.push(rules.rule(b.rule).describe(db));
        fields.push(b.n_patients.to_string());
        for v in [b.mean, b.q05, b.q25, b.q75, b.q95] {
            fields.push(fmt(v));
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PosteriorRecord<'a> {
    patient_id: &'a str,
    lhs: Option<&'a str>,
    rhs: &'a str,
    p_mean: f64,
    q05: Option<f64>,
    q25: Option<f64>,
    q75: Option<f64>,
    q95: Option<f64>,
}

/// One JSON object per (patient, rule).
pub fn write_posterior_jsonl(
    summary: &PosteriorSummary,
    db: &EventDatabase,
    rules: &RuleSet,
    mut out: impl Write,
) -> Result<()> {
    if db.n_patients() != summary.n_patients || rules.len() != summary.n_rules {
        return Err(Error::Contract("database or rule set does not match the summary".into()));
    }
    for (i, patient) in db.patients.iter().enumerate() {
        for rule in rules.rules() {
            let c = summary.cell(i, rule.id.index());
            let q = summary.p_quantiles.as_ref().map(|qs| qs[c]);
            let rec = PosteriorRecord {
                patient_id: &patient.patient_id,
                lhs: rule.lhs().map(|a| db.label(a)),
                rhs: db.label(rule.rhs()),
                p_mean: summary.p_mean[c],
                q05: q.map(|q| q[0]),
                q25: q.map(|q| q[1]),
                q75: q.map(|q| q[2]),
                q95: q.map(|q| q[3]),
            };
            serde_json::to_writer(&mut out, &rec)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

/// The retained-draw trace with running per-block acceptance rates.
pub fn write_diagnostics_csv(summary: &PosteriorSummary, mut out: impl Write) -> Result<()> {
    writeln!(
        out,
        "sweep,log_joint,mu_beta,sigma2_beta,mu_gamma,sigma2_gamma,sigma2_tau,mean_log_tau,accept_tau,accept_beta,accept_gamma"
    )?;
    for t in &summary.trace {
        let h = t.hyper;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            t.sweep,
            t.log_joint,
            h.mu_beta,
            h.sigma2_beta,
            h.mu_gamma,
            h.sigma2_gamma,
            h.sigma2_tau,
            t.mean_log_tau,
            t.acceptance[0],
            t.acceptance[1],
            t.acceptance[2]
        )?;
    }
    Ok(())
}
