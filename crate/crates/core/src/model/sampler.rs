//! Metropolis-within-Gibbs sampler.
//!
//! One sweep runs, in order: conjugate Beta draws of every p; a random-walk
//! Metropolis step on each log τ_i; a block random-walk step on each rule's
//! coefficient vector β_r; a random-walk step on each γ_i; the refresh of
//! π = exp(M'β + γ); and the five hyperparameter draws.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::dist::{ln_beta_variate, scaled_inv_chi2, standard_normal};
use super::state::{check_dims, log_joint, CoefficientPrior, Hyperparameters, Kernel, ModelState};
use super::summary::{Accumulator, PosteriorSummary};
use crate::error::{Error, Result};
use crate::events::CovariateMatrix;
use crate::rules::RuleCounts;

/// Form of the hyperparameter draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperUpdates {
    /// Normalisers and degrees of freedom taken literally from the
    /// published algorithm: μ̂_β = Σβ/(D+R), σ²_β ~ Inv-χ²(D−1,
    /// Σ(β−μ_β)²/(D+R−1)), σ²_τ ~ Inv-χ²(I−1, Στ²/(I−1)), and unscaled
    /// variances on the means. With R > D the μ_β draw is a multiple of the
    /// coefficient mean and the chain drifts off to infinity.
    Printed,
    /// Conventional conjugate forms: means over all D·R coefficients (or
    /// I effects) with variance divided by the count, scaled Inv-χ² with
    /// the full count as degrees of freedom, and σ²_τ built from log τ.
    #[default]
    Normalized,
    /// Hyperparameters stay at their initial values.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub scale_tau: f64,
    pub scale_beta: f64,
    pub scale_gamma: f64,
    pub adapt: bool,
    pub kernel: Kernel,
    pub prior: CoefficientPrior,
    pub hyper_updates: HyperUpdates,
    #[serde(flatten)]
    pub init: Hyperparameters,
    /// Keep every retained p draw so quantiles can be reported.
    pub keep_draws: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            iterations: 5000,
            burn_in: 1000,
            thin: 10,
            seed: 0,
            scale_tau: 0.1,
            scale_beta: 0.1,
            scale_gamma: 0.1,
            adapt: true,
            kernel: Kernel::StandardBeta,
            prior: CoefficientPrior::Gaussian,
            hyper_updates: HyperUpdates::Normalized,
            init: Hyperparameters::default(),
            keep_draws: false,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.thin == 0 {
            return Err(Error::Config("iterations and thin must be positive".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in {} must be below iterations {}",
                self.burn_in, self.iterations
            )));
        }
        for (name, s) in [("scale_tau", self.scale_tau), ("scale_beta", self.scale_beta), ("scale_gamma", self.scale_gamma)] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {s}")));
            }
        }
        self.init.validate()
    }

    pub fn retained_draws(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    pub fn from_toml(text: &str) -> Result<ChainConfig> {
        let cfg: ChainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("chain config serialises")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub accepted: u64,
    pub proposed: u64,
}

impl Tally {
    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Per-block Metropolis acceptance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockTallies {
    pub tau: Tally,
    pub beta: Tally,
    pub gamma: Tally,
}

const ADAPT_BATCH: usize = 25;
const TARGET_LOW: f64 = 0.3;
const TARGET_HIGH: f64 = 0.5;

/// Random-walk scale per conditional sd near the middle of the target band.
const SCALE_PER_SD: f64 = 2.4;

#[derive(Debug, Clone)]
struct Walk {
    scale: Vec<f64>,
    batch_accepts: Vec<u32>,
    // prior variance seen during the current batch, and its mean over the
    // last completed batch
    var_sum: f64,
    var_n: u32,
    last_var: f64,
    // per coordinate: data precision h and total precision at the anchor
    anchor: Option<Vec<(f64, f64)>>,
}

impl Walk {
    fn new(n: usize, scale: f64) -> Self {
        Walk { scale: vec![scale; n], batch_accepts: vec![0; n], var_sum: 0.0, var_n: 0, last_var: f64::NAN, anchor: None }
    }

    /// Step size for coordinate `k` given the prior variance of the block.
    /// Before anchoring this is the adapted scale. Afterwards the scale
    /// follows the conditional precision 1/var + h as var moves; var is held
    /// fixed within the step, so the proposal stays symmetric.
    fn width(&self, k: usize, var: f64) -> f64 {
        match &self.anchor {
            None => self.scale[k],
            Some(a) => {
                let (h, total) = a[k];
                self.scale[k] * (total / (var.recip() + h)).sqrt()
            }
        }
    }

    fn observe_var(&mut self, var: f64) {
        self.var_sum += var;
        self.var_n += 1;
    }

    /// Freezes the adapted scales. Each scale is read as SCALE_PER_SD
    /// conditional sds; the part of that precision not explained by the
    /// prior (mean variance over the last batch) is kept as data precision.
    fn anchor(&mut self) {
        let var = self.last_var;
        if !(var.is_finite() && var > 0.0) {
            return;
        }
        let prior = var.recip();
        self.anchor = Some(
            self.scale
                .iter()
                .map(|&s| {
                    let h = ((SCALE_PER_SD / s).powi(2) - prior).max(0.0);
                    (h, prior + h)
                })
                .collect(),
        );
    }

    /// Nudges each scale toward the target acceptance band. The step
    /// shrinks with the batch number.
    fn adapt(&mut self, batch: usize) {
        let step = 1.0 / (batch as f64).sqrt();
        for (s, acc) in self.scale.iter_mut().zip(self.batch_accepts.iter_mut()) {
            let rate = f64::from(*acc) / ADAPT_BATCH as f64;
            if rate < TARGET_LOW {
                *s *= (-step).exp();
            } else if rate > TARGET_HIGH {
                *s *= step.exp();
            }
            *acc = 0;
        }
        if self.var_n > 0 {
            self.last_var = self.var_sum / f64::from(self.var_n);
        }
        self.var_sum = 0.0;
        self.var_n = 0;
    }
}

/// A chain in progress, with the caches the Metropolis steps need.
pub struct Sampler<'a> {
    counts: &'a RuleCounts,
    m: &'a CovariateMatrix,
    cfg: ChainConfig,
    state: ModelState,
    // M_i'β_r as it enters the link
    xb: Vec<f64>,
    // prior shapes a = π + shift and their log-gamma values
    a: Vec<f64>,
    lg_a: Vec<f64>,
    lg_ab: Vec<f64>,
    lg_b: Vec<f64>,
    tau_walk: Walk,
    beta_walk: Walk,
    gamma_walk: Walk,
    tallies: BlockTallies,
    sweeps: usize,
    warned: bool,
    scratch: Vec<[f64; 4]>,
}

impl<'a> Sampler<'a> {
    pub fn new(counts: &'a RuleCounts, m: &'a CovariateMatrix, cfg: ChainConfig) -> Result<Self> {
        cfg.validate()?;
        if counts.n_patients == 0 {
            return Err(Error::Config("cannot fit a model with no patients".into()));
        }
        let state = ModelState::initial(counts, m, cfg.init, cfg.prior)?;
        Sampler::from_state(state, counts, m, cfg)
    }

    pub fn from_state(state: ModelState, counts: &'a RuleCounts, m: &'a CovariateMatrix, cfg: ChainConfig) -> Result<Self> {
        check_dims(counts, m)?;
        let lj = log_joint(&state, counts, m, cfg.kernel)?;
        if !lj.is_finite() {
            return Err(Error::Numerical(format!("log posterior is {lj} at the initial state")));
        }
        let (i_n, r_n) = (state.n_patients, state.n_rules);
        let mut sampler = Sampler {
            counts,
            m,
            cfg,
            xb: vec![0.0; i_n * r_n],
            a: vec![0.0; i_n * r_n],
            lg_a: vec![0.0; i_n * r_n],
            lg_ab: vec![0.0; i_n * r_n],
            lg_b: vec![0.0; i_n],
            tau_walk: Walk::new(i_n, cfg.scale_tau),
            beta_walk: Walk::new(r_n, cfg.scale_beta),
            gamma_walk: Walk::new(i_n, cfg.scale_gamma),
            tallies: BlockTallies::default(),
            sweeps: 0,
            warned: false,
            scratch: vec![[0.0; 4]; i_n.max(r_n)],
            state,
        };
        sampler.rebuild_caches();
        Ok(sampler)
    }

    fn rebuild_caches(&mut self) {
        let s = self.cfg.kernel.shift();
        let st = &mut self.state;
        for i in 0..st.n_patients {
            let b = st.log_tau[i].exp() + s;
            self.lg_b[i] = ln_gamma(b);
            let g = st.prior.link_value(st.gamma[i]);
            for r in 0..st.n_rules {
                let c = i * st.n_rules + r;
                let xb: f64 = self
                    .m
                    .row(i)
                    .iter()
                    .zip(&st.beta[r * st.n_covariates..(r + 1) * st.n_covariates])
                    .map(|(x, v)| x * st.prior.link_value(*v))
                    .sum();
                self.xb[c] = xb;
                st.log_pi[c] = xb + g;
                self.a[c] = st.log_pi[c].exp() + s;
                self.lg_a[c] = ln_gamma(self.a[c]);
                self.lg_ab[c] = ln_gamma(self.a[c] + b);
            }
        }
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn into_state(self) -> ModelState {
        self.state
    }

    pub fn config(&self) -> &ChainConfig {
        &self.cfg
    }

    pub fn sweeps_done(&self) -> usize {
        self.sweeps
    }

    /// Acceptance counts accumulated after burn-in.
    pub fn tallies(&self) -> BlockTallies {
        self.tallies
    }

    pub fn counts(&self) -> &RuleCounts {
        self.counts
    }

    pub fn covariates(&self) -> &CovariateMatrix {
        self.m
    }

    /// One full sweep of the ten updates.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let post_burn = self.sweeps >= self.cfg.burn_in;
        self.update_p(rng);
        self.update_tau(rng, post_burn);
        self.update_beta(rng, post_burn);
        self.update_gamma(rng, post_burn);
        self.refresh_pi();
        self.update_hyperparameters(rng);
        self.sweeps += 1;
        if self.cfg.adapt && !post_burn && self.sweeps.is_multiple_of(ADAPT_BATCH) {
            let batch = self.sweeps / ADAPT_BATCH;
            self.tau_walk.adapt(batch);
            self.beta_walk.adapt(batch);
            self.gamma_walk.adapt(batch);
        }
        if self.cfg.adapt && self.sweeps == self.cfg.burn_in {
            self.tau_walk.anchor();
            self.gamma_walk.anchor();
        }
    }

    fn update_p<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let s = self.cfg.kernel.shift();
        let st = &mut self.state;
        for i in 0..st.n_patients {
            let b = st.log_tau[i].exp() + s;
            let y_row = self.counts.row_y(i);
            let n_row = self.counts.row_n(i);
            for r in 0..st.n_rules {
                let c = i * st.n_rules + r;
                let (y, n) = (f64::from(y_row[r]), f64::from(n_row[r]));
                let (lp, lq) = ln_beta_variate(y + self.a[c], n - y + b, rng);
                st.log_p[c] = lp;
                st.log_q[c] = lq;
            }
        }
    }

    fn update_tau<R: Rng + ?Sized>(&mut self, rng: &mut R, post_burn: bool) {
        let s = self.cfg.kernel.shift();
        let r_n = self.state.n_rules;
        let var = self.state.hyper.sigma2_tau;
        self.tau_walk.observe_var(var);
        for i in 0..self.state.n_patients {
            let t = self.state.log_tau[i];
            let t_new = t + self.tau_walk.width(i, var) * standard_normal(rng);
            let u: f64 = rng.random();
            let b_old = t.exp() + s;
            let b_new = t_new.exp() + s;
            let mut accepted = false;
            if b_new.is_finite() && b_new > 0.0 {
                let lg_b_new = ln_gamma(b_new);
                let row = i * r_n..(i + 1) * r_n;
                let sum_lq: f64 = self.state.log_q[row.clone()].iter().sum();
                let mut delta = (t * t - t_new * t_new) / (2.0 * var) + (b_new - b_old) * sum_lq
                    - r_n as f64 * (lg_b_new - self.lg_b[i]);
                for (k, c) in row.clone().enumerate() {
                    let v = ln_gamma(self.a[c] + b_new);
                    self.scratch[k][0] = v;
                    delta += v - self.lg_ab[c];
                }
                if delta.is_finite() && u.ln() < delta {
                    accepted = true;
                    self.state.log_tau[i] = t_new;
                    self.lg_b[i] = lg_b_new;
                    for (k, c) in row.enumerate() {
                        self.lg_ab[c] = self.scratch[k][0];
                    }
                }
            }
            self.tau_walk.batch_accepts[i] += u32::from(accepted);
            if post_burn {
                self.tallies.tau.record(accepted);
            }
        }
    }

    fn update_beta<R: Rng + ?Sized>(&mut self, rng: &mut R, post_burn: bool) {
        let s = self.cfg.kernel.shift();
        let (i_n, r_n, d_n) = (self.state.n_patients, self.state.n_rules, self.state.n_covariates);
        let prior = self.state.prior;
        let (mu, var) = (self.state.hyper.mu_beta, self.state.hyper.sigma2_beta);
        let mut proposal = vec![0.0; d_n];
        let mut link = vec![0.0; d_n];
        let gamma_link: Vec<f64> = self.state.gamma.iter().map(|g| prior.link_value(*g)).collect();
        for r in 0..r_n {
            let scale = self.beta_walk.scale[r];
            let current = &self.state.beta[r * d_n..(r + 1) * d_n];
            let mut delta = 0.0;
            for d in 0..d_n {
                proposal[d] = current[d] + scale * standard_normal(rng);
                link[d] = prior.link_value(proposal[d]);
                delta += ((current[d] - mu).powi(2) - (proposal[d] - mu).powi(2)) / (2.0 * var);
            }
            let u: f64 = rng.random();
            let mut ok = true;
            for i in 0..i_n {
                let c = i * r_n + r;
                let xb: f64 = self.m.row(i).iter().zip(&link).map(|(x, b)| x * b).sum();
                let a_new = (xb + gamma_link[i]).exp() + s;
                if !(a_new.is_finite() && a_new > 0.0) {
                    ok = false;
                    break;
                }
                let b = self.state.log_tau[i].exp() + s;
                let lg_a_new = ln_gamma(a_new);
                let lg_ab_new = ln_gamma(a_new + b);
                delta += (a_new - self.a[c]) * self.state.log_p[c] - (lg_a_new - self.lg_a[c]) + (lg_ab_new - self.lg_ab[c]);
                self.scratch[i] = [xb, a_new, lg_a_new, lg_ab_new];
            }
            let accepted = ok && delta.is_finite() && u.ln() < delta;
            if accepted {
                self.state.beta[r * d_n..(r + 1) * d_n].copy_from_slice(&proposal);
                for i in 0..i_n {
                    let c = i * r_n + r;
                    let [xb, a_new, lg_a_new, lg_ab_new] = self.scratch[i];
                    self.xb[c] = xb;
                    self.state.log_pi[c] = xb + gamma_link[i];
                    self.a[c] = a_new;
                    self.lg_a[c] = lg_a_new;
                    self.lg_ab[c] = lg_ab_new;
                }
            }
            self.beta_walk.batch_accepts[r] += u32::from(accepted);
            if post_burn {
                self.tallies.beta.record(accepted);
            }
        }
    }

    fn update_gamma<R: Rng + ?Sized>(&mut self, rng: &mut R, post_burn: bool) {
        let s = self.cfg.kernel.shift();
        let r_n = self.state.n_rules;
        let prior = self.state.prior;
        let (mu, var) = (self.state.hyper.mu_gamma, self.state.hyper.sigma2_gamma);
        self.gamma_walk.observe_var(var);
        for i in 0..self.state.n_patients {
            let g = self.state.gamma[i];
            let g_new = g + self.gamma_walk.width(i, var) * standard_normal(rng);
            let u: f64 = rng.random();
            let link_new = prior.link_value(g_new);
            let b = self.state.log_tau[i].exp() + s;
            let mut delta = ((g - mu).powi(2) - (g_new - mu).powi(2)) / (2.0 * var);
            let mut ok = true;
            for r in 0..r_n {
                let c = i * r_n + r;
                let a_new = (self.xb[c] + link_new).exp() + s;
                if !(a_new.is_finite() && a_new > 0.0) {
                    ok = false;
                    break;
                }
                let lg_a_new = ln_gamma(a_new);
                let lg_ab_new = ln_gamma(a_new + b);
                delta += (a_new - self.a[c]) * self.state.log_p[c] - (lg_a_new - self.lg_a[c]) + (lg_ab_new - self.lg_ab[c]);
                self.scratch[r] = [0.0, a_new, lg_a_new, lg_ab_new];
            }
            let accepted = ok && delta.is_finite() && u.ln() < delta;
            if accepted {
                self.state.gamma[i] = g_new;
                for r in 0..r_n {
                    let c = i * r_n + r;
                    let [_, a_new, lg_a_new, lg_ab_new] = self.scratch[r];
                    self.state.log_pi[c] = self.xb[c] + link_new;
                    self.a[c] = a_new;
                    self.lg_a[c] = lg_a_new;
                    self.lg_ab[c] = lg_ab_new;
                }
            }
            self.gamma_walk.batch_accepts[i] += u32::from(accepted);
            if post_burn {
                self.tallies.gamma.record(accepted);
            }
        }
    }

    /// π_ir = exp(M_i'β_r + γ_i) from the current coefficients.
    fn refresh_pi(&mut self) {
        let st = &mut self.state;
        for i in 0..st.n_patients {
            let g = st.prior.link_value(st.gamma[i]);
            for r in 0..st.n_rules {
                let c = i * st.n_rules + r;
                st.log_pi[c] = self.xb[c] + g;
            }
        }
    }

    fn hold(&mut self, what: &str) {
        if !self.warned {
            warn!("{what} draw is degenerate; holding it fixed this sweep");
            self.warned = true;
        }
    }

    fn update_hyperparameters<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mode = self.cfg.hyper_updates;
        if mode == HyperUpdates::Fixed {
            return;
        }
        let printed = mode == HyperUpdates::Printed;
        let (i_n, r_n, d_n) = (self.state.n_patients as f64, self.state.n_rules as f64, self.state.n_covariates as f64);
        let dr = d_n * r_n;

        let sum_beta: f64 = self.state.beta.iter().sum();
        let (mean, var) = if printed {
            (sum_beta / (d_n + r_n), self.state.hyper.sigma2_beta)
        } else {
            (sum_beta / dr, self.state.hyper.sigma2_beta / dr)
        };
        self.state.hyper.mu_beta = mean + var.sqrt() * standard_normal(rng);

        let mu_beta = self.state.hyper.mu_beta;
        let ss_beta: f64 = self.state.beta.iter().map(|b| (b - mu_beta).powi(2)).sum();
        let (dof, scale) = if printed { (d_n - 1.0, ss_beta / (d_n + r_n - 1.0)) } else { (dr, ss_beta / dr) };
        match scaled_inv_chi2(dof, scale, rng) {
            Some(v) => self.state.hyper.sigma2_beta = v,
            None => self.hold("sigma2_beta"),
        }

        // the log-τ prior is centred at zero
        let (dof, scale) = if printed {
            let ss: f64 = self.state.log_tau.iter().map(|t| t.exp().powi(2)).sum();
            (i_n - 1.0, ss / (i_n - 1.0))
        } else {
            let ss: f64 = self.state.log_tau.iter().map(|t| t * t).sum();
            (i_n, ss / i_n)
        };
        match scaled_inv_chi2(dof, scale, rng) {
            Some(v) => self.state.hyper.sigma2_tau = v,
            None => self.hold("sigma2_tau"),
        }

        let mean_gamma = self.state.gamma.iter().sum::<f64>() / i_n;
        let var = if printed { self.state.hyper.sigma2_gamma } else { self.state.hyper.sigma2_gamma / i_n };
        self.state.hyper.mu_gamma = mean_gamma + var.sqrt() * standard_normal(rng);

        let mu_gamma = self.state.hyper.mu_gamma;
        let ss_gamma: f64 = self.state.gamma.iter().map(|g| (g - mu_gamma).powi(2)).sum();
        let (dof, scale) = if printed { (i_n - 1.0, ss_gamma / (i_n - 1.0)) } else { (i_n, ss_gamma / i_n) };
        match scaled_inv_chi2(dof, scale, rng) {
            Some(v) => self.state.hyper.sigma2_gamma = v,
            None => self.hold("sigma2_gamma"),
        }
    }
}

/// One draw of p from its full conditional Beta(y + π + s, n − y + τ + s),
/// the same update the sweep applies to every cell.
pub fn draw_conditional_p<R: Rng + ?Sized>(kernel: Kernel, y: u32, n: u32, pi: f64, tau: f64, rng: &mut R) -> f64 {
    let s = kernel.shift();
    let (y, n) = (f64::from(y), f64::from(n));
    ln_beta_variate(y + pi + s, n - y + tau + s, rng).0.exp()
}

/// Advances `state` by one sweep.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: ModelState,
    counts: &RuleCounts,
    m: &CovariateMatrix,
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<ModelState> {
    let mut cfg = *cfg;
    // a single sweep is never part of an adaptation schedule
    cfg.adapt = false;
    cfg.burn_in = 0;
    cfg.iterations = cfg.iterations.max(1);
    let mut sampler = Sampler::from_state(state, counts, m, cfg)?;
    sampler.sweep(rng);
    Ok(sampler.into_state())
}

/// Runs the chain and summarises the retained draws.
pub fn fit(counts: &RuleCounts, m: &CovariateMatrix, cfg: &ChainConfig) -> Result<PosteriorSummary> {
    let mut sampler = Sampler::new(counts, m, *cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut acc = Accumulator::new(sampler.state(), cfg);
    for v in 1..=cfg.iterations {
        sampler.sweep(&mut rng);
        if v > cfg.burn_in && (v - cfg.burn_in).is_multiple_of(cfg.thin) {
            let st = sampler.state();
            if st.log_p.iter().chain(&st.log_q).any(|x| !x.is_finite() || *x > 0.0) {
                return Err(Error::Numerical(format!("chain diverged: p left (0, 1) at sweep {v}")));
            }
            acc.add(v, &sampler)?;
        }
    }
    Ok(acc.finish(sampler.tallies(), counts, m))
}
