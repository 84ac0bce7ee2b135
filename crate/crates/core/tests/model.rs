use std::fs;
use std::path::PathBuf;

use harm_core::events::CovariateMatrix;
use harm_core::model::{
    draw_conditional_p, fit, group_risk_report, log_joint, rank_harm, ChainConfig, HyperUpdates, Hyperparameters, Kernel,
    ModelState, Sampler,
};
use harm_core::rules::{enumerate_rules, RuleCounts};
use harm_core::events::{Condition, ConditionId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution};

fn matrix(names: &[&str], rows: &[Vec<f64>]) -> CovariateMatrix {
    CovariateMatrix::from_rows(names.iter().map(|s| s.to_string()).collect(), rows).unwrap()
}

/// A 2×2×2 state with every quantity set by hand.
fn hand_state() -> (ModelState, RuleCounts, CovariateMatrix) {
    let counts = RuleCounts::from_rows(vec![(vec![1, 2], vec![3, 4]), (vec![0, 3], vec![2, 5])], 2).unwrap();
    let m = matrix(&["intercept", "x"], &[vec![1.0, 0.5], vec![1.0, 1.0]]);
    let hyper = Hyperparameters { mu_beta: -0.5, sigma2_beta: 0.8, mu_gamma: 0.2, sigma2_gamma: 0.5, sigma2_tau: 0.7 };
    let mut s = ModelState::initial(&counts, &m, hyper, Default::default()).unwrap();
    let p = [0.3, 0.6, 0.45, 0.2];
    s.log_p = p.iter().map(|v: &f64| v.ln()).collect();
    s.log_q = p.iter().map(|v: &f64| (1.0 - v).ln()).collect();
    s.beta = vec![0.3, -0.2, -0.5, 0.1];
    s.gamma = vec![0.1, -0.4];
    s.log_tau = vec![0.2, -0.3];
    s.refresh_link(&m);
    (s, counts, m)
}

#[test]
fn log_joint_matches_independent_evaluation() {
    // scipy: sum of beta.logpdf + binomial kernel + normal.logpdf terms
    let (s, counts, m) = hand_state();
    let standard = log_joint(&s, &counts, &m, Kernel::StandardBeta).unwrap();
    let shifted = log_joint(&s, &counts, &m, Kernel::ShiftedBeta).unwrap();
    assert!((standard - -18.660797104143388).abs() < 1e-10, "{standard}");
    assert!((shifted - -17.32090085156497).abs() < 1e-10, "{shifted}");
}

#[test]
fn uniform_cell_adds_nothing_beyond_the_priors() {
    let counts = RuleCounts::from_rows(vec![(vec![0], vec![0])], 1).unwrap();
    let m = matrix(&["x1", "x2"], &[vec![0.0, 0.0]]);
    let mut s = ModelState::initial(&counts, &m, Hyperparameters::default(), Default::default()).unwrap();
    s.beta = vec![0.0, 0.0];
    s.gamma = vec![0.0];
    s.log_tau = vec![0.0];
    s.log_p = vec![0.37f64.ln()];
    s.log_q = vec![0.63f64.ln()];
    s.refresh_link(&m);
    assert_eq!(s.pi(0, 0), 1.0);
    let ln_std_normal_at_zero = -0.5 * (2.0 * std::f64::consts::PI).ln();
    let priors = 4.0 * ln_std_normal_at_zero;
    let lj = log_joint(&s, &counts, &m, Kernel::StandardBeta).unwrap();
    assert!((lj - priors).abs() < 1e-12, "{lj} vs {priors}");
}

#[test]
fn log_joint_increases_with_successes_when_p_is_high() {
    let (s, _, m) = hand_state();
    assert!(s.p(0, 1) > 0.5);
    let lower = RuleCounts::from_rows(vec![(vec![1, 2], vec![3, 4]), (vec![0, 3], vec![2, 5])], 2).unwrap();
    let higher = RuleCounts::from_rows(vec![(vec![1, 3], vec![3, 4]), (vec![0, 3], vec![2, 5])], 2).unwrap();
    let a = log_joint(&s, &lower, &m, Kernel::StandardBeta).unwrap();
    let b = log_joint(&s, &higher, &m, Kernel::StandardBeta).unwrap();
    assert!(b > a);
}

#[test]
fn conjugate_draws_have_the_closed_form_mean() {
    const N: usize = 50_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<f64> = (0..N).map(|_| draw_conditional_p(Kernel::StandardBeta, 3, 10, 1.0, 1.0, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / N as f64;
    // Beta(4, 8): mean 1/3, variance 4·8 / (12² · 13)
    let se = (32.0 / (144.0 * 13.0) / N as f64).sqrt();
    assert!((mean - 1.0 / 3.0).abs() < 3.0 * se, "{mean}");
}

#[test]
fn zero_tau_scale_leaves_tau_unchanged() {
    let (s, counts, m) = hand_state();
    let cfg = ChainConfig { scale_tau: 0.0, adapt: false, ..ChainConfig::default() };
    let mut sampler = Sampler::from_state(s.clone(), &counts, &m, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        sampler.sweep(&mut rng);
    }
    assert_eq!(sampler.state().log_tau, s.log_tau);
    assert_ne!(sampler.state().beta, s.beta);
}

#[test]
fn first_five_sweeps_match_golden_trace() {
    let counts = RuleCounts::from_rows(vec![(vec![2], vec![5]), (vec![0], vec![3])], 1).unwrap();
    let m = matrix(&["intercept", "x"], &[vec![1.0, 0.0], vec![1.0, 1.0]]);
    let cfg = ChainConfig { seed: 17, ..ChainConfig::default() };
    let mut sampler = Sampler::new(&counts, &m, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    for _ in 0..5 {
        sampler.sweep(&mut rng);
        trace.push(sampler.state().clone());
    }
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_trace.json");
    if std::env::var_os("HARM_UPDATE_GOLDEN").is_some() {
        fs::write(&golden, serde_json::to_string_pretty(&trace).unwrap()).unwrap();
    }
    let stored: Vec<ModelState> = serde_json::from_str(&fs::read_to_string(&golden).unwrap()).unwrap();
    assert_eq!(stored, trace);
}

#[test]
fn defaults_retain_four_hundred_draws() {
    let cfg = ChainConfig::default();
    assert_eq!((cfg.iterations, cfg.burn_in, cfg.thin), (5000, 1000, 10));
    assert_eq!(cfg.retained_draws(), 400);
}

fn short_chain(seed: u64) -> ChainConfig {
    ChainConfig { iterations: 1500, burn_in: 500, thin: 2, seed, ..ChainConfig::default() }
}

#[test]
fn no_data_gives_prior_predictive_means() {
    let counts = RuleCounts::zeros(3, 2);
    let m = matrix(&["intercept", "x"], &[vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 0.0]]);
    let s = fit(&counts, &m, &ChainConfig { keep_draws: true, ..short_chain(3) }).unwrap();
    for i in 0..3 {
        for r in 0..2 {
            let p = s.p(i, r);
            assert!(p > 0.0 && p < 1.0);
            let draws = s.draws(i, r).unwrap();
            let raw = draws.iter().map(|&v| f64::from(v)).sum::<f64>() / draws.len() as f64;
            assert!((p - raw).abs() < 0.06, "{p} vs {raw}");
        }
    }
}

#[test]
fn identical_patients_agree_when_random_effects_are_pinned() {
    let counts = RuleCounts::from_rows(vec![(vec![3, 1], vec![6, 4]), (vec![3, 1], vec![6, 4]), (vec![0, 2], vec![2, 2])], 2).unwrap();
    let m = matrix(&["intercept", "x"], &[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.0]]);
    let init = Hyperparameters { sigma2_gamma: 1e-8, ..Hyperparameters::default() };
    let cfg = ChainConfig { iterations: 20_000, burn_in: 2_000, thin: 2, hyper_updates: HyperUpdates::Fixed, init, ..short_chain(4) };
    let s = fit(&counts, &m, &cfg).unwrap();
    for r in 0..2 {
        assert!((s.p(0, r) - s.p(1, r)).abs() < 0.01, "{} vs {}", s.p(0, r), s.p(1, r));
    }
}

#[test]
fn same_seed_same_summary() {
    let counts = RuleCounts::from_rows(vec![(vec![1, 0], vec![2, 1]), (vec![2, 2], vec![4, 3])], 2).unwrap();
    let m = matrix(&["intercept", "x"], &[vec![1.0, 0.0], vec![1.0, 1.0]]);
    let a = fit(&counts, &m, &short_chain(9)).unwrap();
    let b = fit(&counts, &m, &short_chain(9)).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = fit(&counts, &m, &short_chain(10)).unwrap();
    assert_ne!(a.p_mean, c.p_mean);
}

#[test]
fn single_patient_holds_degenerate_variances() {
    let counts = RuleCounts::from_rows(vec![(vec![1, 2], vec![3, 3])], 2).unwrap();
    let m = matrix(&["intercept", "x"], &[vec![1.0, 1.0]]);
    let init = Hyperparameters::default();
    let cfg = ChainConfig { iterations: 30, burn_in: 0, thin: 1, hyper_updates: HyperUpdates::Printed, ..short_chain(2) };
    let s = fit(&counts, &m, &cfg).unwrap();
    assert_eq!(s.trace.len(), 30);
    for row in &s.trace {
        assert_eq!(row.hyper.sigma2_tau, init.sigma2_tau);
        assert_eq!(row.hyper.sigma2_gamma, init.sigma2_gamma);
    }
}

fn three_condition_rules() -> harm_core::rules::RuleSet {
    let vocab: Vec<Condition> =
        ["a", "b", "c"].iter().enumerate().map(|(k, l)| Condition { id: ConditionId(k as u32), label: l.to_string() }).collect();
    enumerate_rules(&vocab, None).unwrap()
}

#[test]
fn unseen_rules_still_score() {
    let rules = three_condition_rules();
    let mut y = vec![0; rules.len()];
    let mut n = vec![0; rules.len()];
    y[0] = 2;
    n[0] = 3;
    let counts = RuleCounts::from_rows(vec![(y, n), (vec![0; 9], vec![1; 9])], rules.len()).unwrap();
    let m = matrix(&["intercept", "x"], &[vec![1.0, 0.0], vec![1.0, 1.0]]);
    let s = fit(&counts, &m, &short_chain(6)).unwrap();
    let ranked = rank_harm(&s, &rules, 0, |_| true).unwrap();
    assert_eq!(ranked.len(), 9);
    assert_eq!(ranked[0].0.id.index(), 0);
    assert!(ranked.iter().all(|(_, p)| *p > 0.0));
}

fn summary_with_p(values: &[f64], groups: &[f64]) -> harm_core::model::PosteriorSummary {
    let i_n = values.len();
    let counts = RuleCounts::zeros(i_n, 1);
    let rows: Vec<Vec<f64>> = groups.iter().map(|&g| vec![1.0, g]).collect();
    let m = matrix(&["intercept", "male"], &rows);
    let mut s = fit(&counts, &m, &ChainConfig { iterations: 20, burn_in: 10, thin: 1, ..ChainConfig::default() }).unwrap();
    s.p_mean = values.to_vec();
    s
}

#[test]
fn group_bands_from_posterior_means() {
    let s = summary_with_p(&[0.1, 0.3, 0.2, 0.7], &[0.0, 0.0, 0.0, 1.0]);
    let bands = group_risk_report(&s, &["male"], &[harm_core::rules::RuleId(0)]).unwrap();
    assert_eq!(bands.len(), 2);
    let women = &bands[0];
    assert_eq!((women.group["male"], women.n_patients), (0, 3));
    assert!((women.mean.unwrap() - 0.2).abs() < 1e-15);
    let men = &bands[1];
    assert_eq!(men.n_patients, 1);
    for v in [men.mean, men.q05, men.q25, men.q75, men.q95] {
        assert_eq!(v, Some(0.7));
    }
}

#[test]
fn empty_group_has_no_band() {
    let s = summary_with_p(&[0.4, 0.5], &[0.0, 0.0]);
    let bands = group_risk_report(&s, &["male"], &[harm_core::rules::RuleId(0)]).unwrap();
    assert_eq!(bands[1].n_patients, 0);
    assert_eq!(bands[1].mean, None);
    assert!(group_risk_report(&s, &["missing"], &[]).is_err());
}

#[test]
fn group_with_higher_generating_coefficient_reports_higher_risk() {
    // log π = -1 + 1.5·male, τ = 1, twenty opportunities per patient
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut rows = Vec::new();
    let mut cov = Vec::new();
    for i in 0..40 {
        let male = (i % 2) as f64;
        let pi = (-1.0 + 1.5 * male).exp();
        let p = Beta::new(pi, 1.0).unwrap().sample(&mut rng);
        let y = Binomial::new(20, p).unwrap().sample(&mut rng) as u32;
        rows.push((vec![y], vec![20]));
        cov.push(vec![1.0, male]);
    }
    let counts = RuleCounts::from_rows(rows, 1).unwrap();
    let m = matrix(&["intercept", "male"], &cov);
    let s = fit(&counts, &m, &short_chain(8)).unwrap();
    let bands = group_risk_report(&s, &["male"], &[harm_core::rules::RuleId(0)]).unwrap();
    assert!(bands[1].mean.unwrap() > bands[0].mean.unwrap());
}
