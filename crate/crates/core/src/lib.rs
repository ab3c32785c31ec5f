//! Design-build-test-learn engine for a three-gene operon.
//!
//! * [`design`]: the discrete design space (promoter, gene order, RBS levels).
//! * [`kinetics`]: the mechanistic simulator that plays the role of the lab.
//! * [`hypothesis`]: the rate-law language ODE structures are written in.
//! * [`fitter`]: multi-start simplex fitting of parameter slots.
//! * [`search`]: structure enumeration from background knowledge, scoring and ranking.
//! * [`active`]: committee-based experiment selection and the closed loop.

pub mod active;
pub mod config;
pub mod design;
pub mod fitter;
pub mod hypothesis;
pub mod io;
pub mod kinetics;
pub mod search;
mod util;
