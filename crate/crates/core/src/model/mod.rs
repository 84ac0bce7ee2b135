//! The hierarchical Beta-Binomial model over per-patient rule propensities.

pub mod dist;
mod sampler;
mod state;
mod summary;

pub use sampler::{draw_conditional_p, fit, gibbs_sweep, BlockTallies, ChainConfig, HyperUpdates, Sampler, Tally};
pub use state::{log_joint, CoefficientPrior, Hyperparameters, Kernel, ModelState};
pub use summary::{
    group_risk_report, rank_harm, write_diagnostics_csv, write_group_report, write_posterior_jsonl,
    AcceptanceRates, GroupBand, PosteriorSummary, TraceRow,
};
