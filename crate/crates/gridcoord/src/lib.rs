//! Transmission expansion planning with decentralized coordination.
//!
//! The crate models a multi-region DC power network in which independent
//! regional planners and a neutral transmission coordinator negotiate which
//! candidate lines to build. It provides:
//!
//! - [`netmodel`]: network data model, case file I/O, validation, and a
//!   synthetic case generator.
//! - [`solver`]: self-contained LP / MILP / QP solvers plus an independent
//!   solution checker. No external solver processes or libraries are used.
//! - [`centralized`]: the single-operator benchmark, a mixed-integer build
//!   plan optimizer, and an exhaustive brute-force reference.
//! - [`stage1`]: the investment negotiation. Regions and the coordinator
//!   iterate reward/penalty prices over build decisions and boundary flows
//!   until their proposals agree or a bound gap closes.
//! - [`stage2`]: operational consensus on boundary voltage angles for a
//!   fixed build plan, via auxiliary-problem-principle iterations.
//! - [`runtime`]: a deterministic message-passing driver that runs both
//!   stages end to end, synchronously or with simulated loose coordination.
//! - [`gametool`]: a small game-theoretic audit of two-region build games
//!   (Nash equilibria vs. the social optimum under side-payment rules).
//! - [`cli`]: the command-line front end.

pub mod centralized;
pub mod cli;
pub mod gametool;
pub mod netmodel;
pub mod output;
pub mod runtime;
pub mod solver;
pub mod stage1;
pub mod stage2;
