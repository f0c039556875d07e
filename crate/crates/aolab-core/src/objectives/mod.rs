//! Training and evaluation objectives.
//!
//! Three losses live here, all reported in nats per token:
//!
//! * left-to-right autoregressive ([`ar_nll`]),
//! * any-order autoregressive, averaged over sampled factorization
//!   orders ([`aoar_nll`]),
//! * the masked-diffusion ELBO ([`mdm_nll`]), whose expectation equals
//!   the any-order loss term for term.
//!
//! The equality is checked two ways: [`exhaustive_aoar_nll`] and
//! [`exhaustive_mdm_nll`] enumerate both objectives on short blocks,
//! and [`probe::equivalence_probe`] runs the Monte-Carlo z-test.
//! Alongside the losses sit the AdamW optimizer, EMA weight averaging,
//! and the training loop that drives them.

pub mod loss;
pub mod optim;
pub mod probe;
pub mod trainer;

pub use loss::{
    aoar_nll, ar_nll, chain_nll_terms, exhaustive_aoar_nll, exhaustive_mdm_nll, mdm_masked_terms,
    mdm_nll, mdm_suffix_terms, LossEstimate, MdmWeighting,
};
pub use optim::{AdamW, EmaState};
pub use probe::{equivalence_probe, ProbeReport, PROBE_Z_PASS};
pub use trainer::{LrSchedule, TrainConfig, Trainer};
