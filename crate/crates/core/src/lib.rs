//! Self-improving evolutionary program synthesis for ARC-style grid tasks.
//!
//! The crate is organised by pipeline stage: [`arc`] holds the domain types,
//! [`executor`] runs candidate programs, [`gateway`] talks to language and
//! embedding models, [`search`] implements sampling plus bandit refinement,
//! [`ensemble`] votes over candidate pools, [`selfimprove`] turns search
//! traces into fine-tuning data and [`orchestrator`] drives iterations.
//! Interchangeable algorithms are looked up by name through [`registry`].

pub mod arc;
pub mod ensemble;
pub mod executor;
pub mod gateway;
pub mod mock;
pub mod orchestrator;
pub mod registry;
pub mod search;
pub mod seed;
pub mod selfimprove;
