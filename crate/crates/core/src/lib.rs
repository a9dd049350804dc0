//! Mixed-CVaR portfolio selection with cardinality constraints.
//!
//! The crate builds two models as mixed-integer second-order cone programs:
//!
//! * the nominal mixed-CVaR model (`NoM`), a Rockafellar–Uryasev style LP with
//!   binary selection variables and a hard expected-return row;
//! * the robust model (`RoM-RKHS`), which robustifies every CVaR row against an
//!   ellipsoidal return support and replaces the hard return row by a
//!   distributionally robust CVaR chance constraint over an MMD ball of
//!   distributions in a reproducing kernel Hilbert space.
//!
//! Programs are solved by [`solver::branch_and_bound`] on top of an
//! interior-point conic solver, and evaluated out of sample by the rolling
//! window engine in [`backtest`] with the performance suite in [`metrics`].

pub mod backtest;
pub mod error;
pub mod experiment;
pub mod formulation;
pub mod kernel;
pub mod metrics;
pub mod risk;
pub mod scenarios;
pub mod solver;
pub mod synthetic;

pub use backtest::{OosReturns, StrategyKind, StrategySpec};
pub use error::{Error, Result};
pub use formulation::{MixedConicProgram, ModelConfig, Portfolio};
pub use kernel::{ExpansionSet, GramFactors, KernelSpec};
pub use metrics::MetricsTable;
pub use risk::McvarSpec;
pub use scenarios::{PriceSeries, ScenarioMatrix, WindowPlan};
pub use solver::{BnbConfig, Solution, SolveStatus};
