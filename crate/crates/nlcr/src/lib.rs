//! Reconciliation of multivariate point forecasts under mixed linear and
//! non-linear equality constraints.
//!
//! A forecast vector is *coherent* when it satisfies every constraint
//! `g_c(y) = 0` of a [`constraints::ConstraintSystem`]. Incoherent forecasts
//! are repaired by projecting them onto the constraint manifold in a
//! weighted least-squares metric (module [`reconcile`]), using an
//! equality-constrained SQP solver (module [`sqp`]). Module [`guarantee`]
//! computes the ball around a reconciled forecast inside which reconciliation
//! is certain to have reduced the distance to any coherent target, module
//! [`simlab`] reproduces the two seeded simulation studies, and module
//! [`evalstats`] provides the forecast-accuracy statistics (RMSE, geometric
//! mean relative RMSE, Diebold-Mariano, MCB/Nemenyi).

pub mod constraints;
pub mod evalstats;
pub mod expr;
pub mod fixtures;
pub mod guarantee;
pub mod reconcile;
pub mod simlab;
pub mod sqp;
pub mod weights;
