use serde::{Deserialize, Serialize};

use super::dist::{ln_beta_fn, ln_normal_pdf};
use crate::error::{Error, Result};
use crate::events::CovariateMatrix;
use crate::rules::RuleCounts;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub mu_beta: f64,
    pub sigma2_beta: f64,
    pub mu_gamma: f64,
    pub sigma2_gamma: f64,
    pub sigma2_tau: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters { mu_beta: 0.0, sigma2_beta: 1.0, mu_gamma: 0.0, sigma2_gamma: 1.0, sigma2_tau: 1.0 }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2_beta", self.sigma2_beta),
            ("sigma2_gamma", self.sigma2_gamma),
            ("sigma2_tau", self.sigma2_tau),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a positive finite variance, got {v}")));
            }
        }
        if !self.mu_beta.is_finite() || !self.mu_gamma.is_finite() {
            return Err(Error::Config("hyperparameter means must be finite".into()));
        }
        Ok(())
    }
}

/// Shape parameters of the Beta prior on p given (π, τ).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// p ~ Beta(π, τ); full conditional Beta(y + π, n − y + τ).
    #[default]
    StandardBeta,
    /// Exponents y + π and n − y + τ on p and 1 − p, i.e. the full
    /// conditional Beta(y + π + 1, n − y + τ + 1).
    ShiftedBeta,
}

impl Kernel {
    pub fn shift(self) -> f64 {
        match self {
            Kernel::StandardBeta => 0.0,
            Kernel::ShiftedBeta => 1.0,
        }
    }

    /// E[p | y, n, π, τ].
    pub fn conditional_mean(self, y: f64, n: f64, pi: f64, tau: f64) -> f64 {
        let s = self.shift();
        (y + pi + s) / (n + pi + tau + 2.0 * s)
    }
}

/// How the regression coefficients and random effects enter the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientPrior {
    /// β and γ are themselves Gaussian.
    #[default]
    Gaussian,
    /// log β and log γ are Gaussian, so both are positive.
    LogNormal,
}

impl CoefficientPrior {
    /// Maps a stored Gaussian variate to its value in the link.
    #[inline]
    pub fn link_value(self, variate: f64) -> f64 {
        match self {
            CoefficientPrior::Gaussian => variate,
            CoefficientPrior::LogNormal => variate.exp(),
        }
    }
}

/// All latent quantities of one chain state.
///
/// τ, β and γ are stored as the Gaussian variates their priors are placed
/// on: `log_tau[i] = log τ_i`, and `beta`/`gamma` hold β and γ (or their
/// logs under [`CoefficientPrior::LogNormal`]). `p` is stored as
/// `log p` and `log(1 − p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub n_patients: usize,
    pub n_rules: usize,
    pub n_covariates: usize,
    pub log_p: Vec<f64>,
    pub log_q: Vec<f64>,
    pub log_pi: Vec<f64>,
    pub log_tau: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub hyper: Hyperparameters,
    pub prior: CoefficientPrior,
}

/// Starting coefficients: per rule, a ridge-weighted least-squares fit of
/// the smoothed empirical log-odds of each cell on M, weighted by n. With
/// τ = 1 the log-odds of E[p] is log π, so the chain starts near the level
/// the data support instead of at π = 1. A first pass shrinks toward zero;
/// the second shrinks toward the mean of the first pass over rules with
/// data, which is also where rules without data start.
fn empirical_start(counts: &RuleCounts, m: &CovariateMatrix) -> Vec<f64> {
    let (r_n, d_n) = (counts.n_rules, m.n_cols);
    let zero = vec![0.0; d_n];
    let first: Vec<Option<Vec<f64>>> = (0..r_n).map(|r| ridge_fit(counts, m, r, &zero)).collect();
    let fitted: Vec<&Vec<f64>> = first.iter().flatten().collect();
    if fitted.is_empty() {
        return vec![0.0; r_n * d_n];
    }
    let centre: Vec<f64> = (0..d_n).map(|k| fitted.iter().map(|b| b[k]).sum::<f64>() / fitted.len() as f64).collect();
    let mut beta = Vec::with_capacity(r_n * d_n);
    for r in 0..r_n {
        match first[r] {
            Some(_) => beta.extend(ridge_fit(counts, m, r, &centre).unwrap_or_else(|| centre.clone())),
            None => beta.extend_from_slice(&centre),
        }
    }
    beta
}

/// Ridge fit of one rule shrunk toward `centre`; None when the rule has no
/// observed opportunities.
fn ridge_fit(counts: &RuleCounts, m: &CovariateMatrix, r: usize, centre: &[f64]) -> Option<Vec<f64>> {
    const RIDGE: f64 = 1.0;
    let d_n = m.n_cols;
    let mut gram = vec![0.0; d_n * d_n];
    let mut rhs: Vec<f64> = centre.iter().map(|c| RIDGE * c).collect();
    for k in 0..d_n {
        gram[k * d_n + k] = RIDGE;
    }
    let mut seen = false;
    for i in 0..counts.n_patients {
        let n = f64::from(counts.n(i, r));
        if n == 0.0 {
            continue;
        }
        seen = true;
        let y = f64::from(counts.y(i, r));
        let z = ((y + 0.5) / (n - y + 0.5)).ln();
        let row = m.row(i);
        for a in 0..d_n {
            rhs[a] += n * row[a] * z;
            for b in 0..d_n {
                gram[a * d_n + b] += n * row[a] * row[b];
            }
        }
    }
    if !seen {
        return None;
    }
    solve_spd(&mut gram, &rhs, d_n)
}

/// Solves A x = b for symmetric positive definite A by Cholesky, in place.
fn solve_spd(a: &mut [f64], b: &[f64], d: usize) -> Option<Vec<f64>> {
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if !(diag > 0.0) {
            return None;
        }
        let l_jj = diag.sqrt();
        a[j * d + j] = l_jj;
        for i in j + 1..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = v / l_jj;
        }
    }
    let mut x = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            x[i] -= a[i * d + k] * x[k];
        }
        x[i] /= a[i * d + i];
    }
    for i in (0..d).rev() {
        for k in i + 1..d {
            x[i] -= a[k * d + i] * x[k];
        }
        x[i] /= a[i * d + i];
    }
    Some(x)
}

impl ModelState {
    /// Starting point of a chain: p = (y + 1)/(n + 2), τ = 1, and β, γ at
    /// zero (at the prior mean of their logs under the log-normal prior).
    pub fn initial(
        counts: &RuleCounts,
        m: &CovariateMatrix,
        hyper: Hyperparameters,
        prior: CoefficientPrior,
    ) -> Result<ModelState> {
        check_dims(counts, m)?;
        let (i_n, r_n, d_n) = (counts.n_patients, counts.n_rules, m.n_cols);
        let mut log_p = Vec::with_capacity(i_n * r_n);
        let mut log_q = Vec::with_capacity(i_n * r_n);
        for i in 0..i_n {
            for r in 0..r_n {
                let (y, n) = (f64::from(counts.y(i, r)), f64::from(counts.n(i, r)));
                log_p.push(((y + 1.0) / (n + 2.0)).ln());
                log_q.push(((n - y + 1.0) / (n + 2.0)).ln());
            }
        }
        let (beta, gamma0) = match prior {
            CoefficientPrior::Gaussian => (empirical_start(counts, m), 0.0),
            CoefficientPrior::LogNormal => (vec![hyper.mu_beta; r_n * d_n], hyper.mu_gamma),
        };
        let mut state = ModelState {
            n_patients: i_n,
            n_rules: r_n,
            n_covariates: d_n,
            log_p,
            log_q,
            log_pi: vec![0.0; i_n * r_n],
            log_tau: vec![0.0; i_n],
            beta,
            gamma: vec![gamma0; i_n],
            hyper,
            prior,
        };
        state.refresh_link(m);
        Ok(state)
    }

    #[inline]
    pub fn cell(&self, i: usize, r: usize) -> usize {
        i * self.n_rules + r
    }

    pub fn p(&self, i: usize, r: usize) -> f64 {
        self.log_p[self.cell(i, r)].exp()
    }

    pub fn pi(&self, i: usize, r: usize) -> f64 {
        self.log_pi[self.cell(i, r)].exp()
    }

    pub fn tau(&self, i: usize) -> f64 {
        self.log_tau[i].exp()
    }

    /// β_{r,d} as it enters the link.
    pub fn beta_value(&self, r: usize, d: usize) -> f64 {
        self.prior.link_value(self.beta[r * self.n_covariates + d])
    }

    pub fn beta_row(&self, r: usize) -> &[f64] {
        &self.beta[r * self.n_covariates..(r + 1) * self.n_covariates]
    }

    /// γ_i as it enters the link.
    pub fn gamma_value(&self, i: usize) -> f64 {
        self.prior.link_value(self.gamma[i])
    }

    /// M_i'β_r + γ_i computed from scratch.
    pub fn linear_predictor(&self, m: &CovariateMatrix, i: usize, r: usize) -> f64 {
        let row = m.row(i);
        let beta = self.beta_row(r);
        let xb: f64 = row.iter().zip(beta).map(|(x, b)| x * self.prior.link_value(*b)).sum();
        xb + self.gamma_value(i)
    }

    /// Recomputes log π = M'β + γ for every cell.
    pub fn refresh_link(&mut self, m: &CovariateMatrix) {
        for i in 0..self.n_patients {
            for r in 0..self.n_rules {
                let c = self.cell(i, r);
                self.log_pi[c] = self.linear_predictor(m, i, r);
            }
        }
    }

    /// Largest |π − exp(M'β + γ)| over all cells.
    pub fn link_residual(&self, m: &CovariateMatrix) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n_patients {
            for r in 0..self.n_rules {
                let expect = self.linear_predictor(m, i, r).exp();
                worst = worst.max((self.pi(i, r) - expect).abs());
            }
        }
        worst
    }
}

pub(crate) fn check_dims(counts: &RuleCounts, m: &CovariateMatrix) -> Result<()> {
    if counts.n_patients != m.n_rows {
        return Err(Error::Config(format!(
            "counts cover {} patients but the covariate matrix has {} rows",
            counts.n_patients, m.n_rows
        )));
    }
    Ok(())
}

/// Log of the unnormalised posterior density at `state`.
///
/// Sums, over every cell, the Beta-Binomial kernel
/// `(y + a − 1) log p + (n − y + b − 1) log(1 − p) − log B(a, b)` with
/// `(a, b)` the prior shapes of the kernel, plus the Gaussian priors on the
/// stored β, γ and log τ variates.
pub fn log_joint(state: &ModelState, counts: &RuleCounts, m: &CovariateMatrix, kernel: Kernel) -> Result<f64> {
    check_dims(counts, m)?;
    if state.n_patients != counts.n_patients || state.n_rules != counts.n_rules || state.n_covariates != m.n_cols {
        return Err(Error::Config("state dimensions differ from counts or covariates".into()));
    }
    let s = kernel.shift();
    let h = &state.hyper;
    let mut total = 0.0;
    for i in 0..state.n_patients {
        let tau = state.tau(i);
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Domain(format!("tau[{i}] = {tau}")));
        }
        for r in 0..state.n_rules {
            let c = state.cell(i, r);
            let (lp, lq) = (state.log_p[c], state.log_q[c]);
            if !(lp.is_finite() && lq.is_finite() && lp <= 0.0 && lq <= 0.0) {
                return Err(Error::Domain(format!("p[{i},{r}] outside (0, 1)")));
            }
            let pi = state.pi(i, r);
            if !(pi > 0.0) || !pi.is_finite() {
                return Err(Error::Domain(format!("pi[{i},{r}] = {pi}")));
            }
            let (y, n) = (f64::from(counts.y(i, r)), f64::from(counts.n(i, r)));
            let (a, b) = (pi + s, tau + s);
            total += (y + a - 1.0) * lp + (n - y + b - 1.0) * lq - ln_beta_fn(a, b);
        }
        total += ln_normal_pdf(state.gamma[i], h.mu_gamma, h.sigma2_gamma);
        total += ln_normal_pdf(state.log_tau[i], 0.0, h.sigma2_tau);
    }
    for b in &state.beta {
        total += ln_normal_pdf(*b, h.mu_beta, h.sigma2_beta);
    }
    Ok(total)
}
