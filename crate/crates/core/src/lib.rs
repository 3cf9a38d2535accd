//! Fixed-confidence best-arm identification for restless Markov bandits.
//!
//! Arms are ergodic Markov chains from a one-parameter exponential family
//! of transition matrices. The crate provides the family itself
//! ([`family`]), the delay / last-observed-state MDP ([`mdp`]), the
//! instance-dependent lower bound ([`oracle`]), the Rstl-Dtrack policy
//! ([`policy`]) and a seeded Monte Carlo harness ([`sim`]).

pub mod config;
pub mod error;
pub mod family;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod report;
pub mod sim;
pub mod validate;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/family.md")]
    pub struct Family;
    #[doc = include_str!("../../../book/src/mdp.md")]
    pub struct Mdp;
    #[doc = include_str!("../../../book/src/lower_bound.md")]
    pub struct LowerBound;
    #[doc = include_str!("../../../book/src/policy.md")]
    pub struct Policy;
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub struct Simulation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
