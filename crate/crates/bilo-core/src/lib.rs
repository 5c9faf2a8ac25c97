//! Bilevel local-operator learning for 1D PDE inverse problems.
//!
//! The crate provides the full stack for its companion CLI: a reverse-mode
//! tape with forward Taylor-jet propagation ([`tape`], [`jet`]), operator
//! networks with hard boundary-condition transforms ([`net`]), the loss
//! functions ([`loss`]), the benchmark inverse problems ([`problems`]),
//! classical finite-difference reference solvers ([`fdm`]), the adjoint-state
//! baseline ([`adjoint`]), and the optimization loops ([`train`]).

pub mod fdcheck;
pub mod fdm;
pub mod jet;
pub mod net;
pub mod rng;
pub mod tape;
