//! Random variates and densities used by the sampler.
//!
//! Beta draws are produced on the log scale: with small shape parameters a
//! Beta variate routinely lies below the smallest positive double, and the
//! sampler needs `log p` and `log(1 - p)` rather than `p` itself.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

/// log of a Gamma(shape, 1) variate.
pub fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0);
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("positive shape");
        let x: f64 = g.sample(rng);
        x.ln()
    } else {
        // G(a) = G(a + 1) * U^(1/a)
        let u: f64 = rng.random::<f64>();
        ln_gamma_variate(shape + 1.0, rng) + u.max(f64::MIN_POSITIVE).ln() / shape
    }
}

/// Draws p ~ Beta(a, b) and returns `(log p, log(1 - p))`.
pub fn ln_beta_variate<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> (f64, f64) {
    let lx = ln_gamma_variate(a, rng);
    let ly = ln_gamma_variate(b, rng);
    let hi = lx.max(ly);
    let lse = hi + ((lx - hi).exp() + (ly - hi).exp()).ln();
    (lx - lse, ly - lse)
}

pub fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Beta log density evaluated from `log p` and `log(1 - p)`.
pub fn ln_beta_pdf(log_p: f64, log_q: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * log_p + (b - 1.0) * log_q - ln_beta_fn(a, b)
}

pub fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = x - mean;
    -0.5 * (std::f64::consts::TAU * var).ln() - z * z / (2.0 * var)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Scaled inverse chi-squared draw; `None` when the degrees of freedom or
/// scale leave it undefined.
pub fn scaled_inv_chi2<R: Rng + ?Sized>(dof: f64, scale: f64, rng: &mut R) -> Option<f64> {
    if !(dof > 0.0) || !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let x: f64 = ChiSquared::new(dof).ok()?.sample(rng);
    let v = dof * scale / x;
    (v.is_finite() && v > 0.0).then_some(v)
}
