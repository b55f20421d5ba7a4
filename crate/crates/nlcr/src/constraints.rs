//! Constraint systems: C parsed equality constraints over an ordered
//! n-series vocabulary.
//!
//! A constraint file holds one `lhs = rhs` line per constraint; blank lines
//! and `#` comments are skipped. Each line is normalised to a residual
//! `g_c(y) = lhs - rhs`, so a coherent vector satisfies `g(y) = 0`. The
//! Jacobian is assembled column-per-constraint (n×C), and every partial
//! derivative is differentiated once at construction time.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::expr::{differentiate, parse_constraint, EvalError, Expr, ParseError, SliceBinding};

/// Default tolerance on `max |g_c|` below which a point counts as coherent.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Errors raised while building a [`ConstraintSystem`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BuildError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: ParseError,
    },
    #[error("line {line}: series `{name}` is not in the vocabulary")]
    UnknownSeries { name: String, line: usize },
    #[error("duplicate series name `{0}` in vocabulary")]
    DuplicateSeries(String),
    #[error("{constraints} constraints over {series} series; need fewer constraints than series")]
    TooManyConstraints { constraints: usize, series: usize },
}

/// Errors raised while evaluating residuals or the Jacobian at a point.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConstraintError {
    #[error("constraint {index} (`{text}`): {source}")]
    Residual {
        index: usize,
        text: String,
        #[source]
        source: EvalError,
    },
    #[error("jacobian entry (series `{series}`, constraint {constraint}): {source}")]
    Jacobian {
        series: String,
        constraint: usize,
        #[source]
        source: EvalError,
    },
    #[error("point has {got} entries, system has {expected} series")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Side of a constraint's manifold a point falls on.
///
/// For a residual `g`, negative values are the epigraph side and positive
/// values the hypograph side: writing a single-constraint system as
/// `f(rest) = target` with `g = f(rest) - target`, the epigraph
/// `{target ≥ f}` is exactly `{g ≤ 0}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Epigraph,
    Hypograph,
    OnManifold,
}

/// Coherence verdict for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceReport {
    pub residuals: DVector<f64>,
    pub max_abs_residual: f64,
    pub coherent: bool,
}

/// One parsed constraint plus its cached partial derivatives.
#[derive(Debug, Clone)]
struct Constraint {
    text: String,
    residual: Expr,
    /// Partial derivative per vocabulary slot, in series order.
    partials: Vec<Expr>,
    linear: bool,
}

/// C equality constraints over an ordered vocabulary of n series.
///
/// Immutable after construction; shared references may evaluate concurrently.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    series: Vec<String>,
    constraints: Vec<Constraint>,
}

impl ConstraintSystem {
    /// Parses `text` (one constraint per line) against the vocabulary.
    pub fn parse(series: Vec<String>, text: &str) -> Result<Self, BuildError> {
        let mut exprs = Vec::new();
        for (li, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let residual =
                parse_constraint(trimmed).map_err(|source| BuildError::Parse {
                    line: li + 1,
                    source,
                })?;
            exprs.push((li + 1, trimmed.to_string(), residual));
        }
        Self::from_residuals(series, exprs)
    }

    /// Builds from already-parsed residual expressions.
    pub fn from_exprs(series: Vec<String>, residuals: Vec<Expr>) -> Result<Self, BuildError> {
        let exprs = residuals
            .into_iter()
            .enumerate()
            .map(|(i, e)| (i + 1, e.to_string(), e))
            .collect();
        Self::from_residuals(series, exprs)
    }

    fn from_residuals(
        series: Vec<String>,
        exprs: Vec<(usize, String, Expr)>,
    ) -> Result<Self, BuildError> {
        for (i, name) in series.iter().enumerate() {
            if series[..i].contains(name) {
                return Err(BuildError::DuplicateSeries(name.clone()));
            }
        }
        if exprs.len() >= series.len() {
            return Err(BuildError::TooManyConstraints {
                constraints: exprs.len(),
                series: series.len(),
            });
        }
        let mut constraints = Vec::with_capacity(exprs.len());
        for (line, text, residual) in exprs {
            for var in residual.variables() {
                if !series.contains(&var) {
                    return Err(BuildError::UnknownSeries { name: var, line });
                }
            }
            let partials: Vec<Expr> = series
                .iter()
                .map(|s| differentiate(&residual, s))
                .collect();
            let linear = partials.iter().all(|p| matches!(p, Expr::Constant(_)));
            constraints.push(Constraint {
                text,
                residual,
                partials,
                linear,
            });
        }
        Ok(ConstraintSystem {
            series,
            constraints,
        })
    }

    /// Ordered vocabulary of series names.
    pub fn series(&self) -> &[String] {
        &self.series
    }

    /// Number of series n.
    pub fn dim(&self) -> usize {
        self.series.len()
    }

    /// Number of constraints C.
    pub fn count(&self) -> usize {
        self.constraints.len()
    }

    /// Source text of constraint `c`.
    pub fn text(&self, c: usize) -> &str {
        &self.constraints[c].text
    }

    /// Whether constraint `c` is linear (all partials constant).
    pub fn is_linear(&self, c: usize) -> bool {
        self.constraints[c].linear
    }

    /// Series names referenced by at least one constraint.
    pub fn variables(&self) -> BTreeSet<String> {
        self.constraints
            .iter()
            .flat_map(|c| c.residual.variables())
            .collect()
    }

    fn check_dim(&self, y: &[f64]) -> Result<(), ConstraintError> {
        if y.len() != self.series.len() {
            return Err(ConstraintError::DimensionMismatch {
                got: y.len(),
                expected: self.series.len(),
            });
        }
        Ok(())
    }

    /// Evaluates the residual vector g(y).
    pub fn evaluate_g(&self, y: &[f64]) -> Result<DVector<f64>, ConstraintError> {
        self.check_dim(y)?;
        let binding = SliceBinding {
            names: &self.series,
            values: y,
        };
        let mut g = DVector::zeros(self.constraints.len());
        for (c, constraint) in self.constraints.iter().enumerate() {
            g[c] = constraint
                .residual
                .evaluate(&binding)
                .map_err(|source| ConstraintError::Residual {
                    index: c,
                    text: constraint.text.clone(),
                    source,
                })?;
        }
        Ok(g)
    }

    /// Evaluates the n×C Jacobian: entry (i, c) is ∂g_c/∂y_i at y.
    pub fn jacobian(&self, y: &[f64]) -> Result<DMatrix<f64>, ConstraintError> {
        self.check_dim(y)?;
        let binding = SliceBinding {
            names: &self.series,
            values: y,
        };
        let n = self.series.len();
        let mut j = DMatrix::zeros(n, self.constraints.len());
        for (c, constraint) in self.constraints.iter().enumerate() {
            for (i, partial) in constraint.partials.iter().enumerate() {
                j[(i, c)] =
                    partial
                        .evaluate(&binding)
                        .map_err(|source| ConstraintError::Jacobian {
                            series: self.series[i].clone(),
                            constraint: c,
                            source,
                        })?;
            }
        }
        Ok(j)
    }

    /// Classifies y against each constraint under `tol`.
    pub fn classify_region(&self, y: &[f64], tol: f64) -> Result<Vec<Region>, ConstraintError> {
        let g = self.evaluate_g(y)?;
        Ok(g
            .iter()
            .map(|&gc| {
                if gc.abs() <= tol {
                    Region::OnManifold
                } else if gc < 0.0 {
                    Region::Epigraph
                } else {
                    Region::Hypograph
                }
            })
            .collect())
    }

    /// Coherence of y under `tol` on the max absolute residual.
    pub fn check_coherence(&self, y: &[f64], tol: f64) -> Result<CoherenceReport, ConstraintError> {
        let residuals = self.evaluate_g(y)?;
        let max_abs_residual = residuals.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
        Ok(CoherenceReport {
            residuals,
            max_abs_residual,
            coherent: max_abs_residual <= tol,
        })
    }
}

/// Evaluation interface the solver and guarantee machinery consume.
///
/// Implementors must be deterministic: identical inputs produce bitwise
/// identical outputs.
pub trait ConstraintOracle {
    /// Dimension n of the forecast space.
    fn dim(&self) -> usize;
    /// Number of constraints C.
    fn count(&self) -> usize;
    /// Residual vector g(y), length C.
    fn residuals(&self, y: &DVector<f64>) -> Result<DVector<f64>, ConstraintError>;
    /// Jacobian, n×C, column per constraint.
    fn jacobian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>, ConstraintError>;
}

impl ConstraintOracle for ConstraintSystem {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn count(&self) -> usize {
        self.count()
    }

    fn residuals(&self, y: &DVector<f64>) -> Result<DVector<f64>, ConstraintError> {
        self.evaluate_g(y.as_slice())
    }

    fn jacobian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>, ConstraintError> {
        ConstraintSystem::jacobian(self, y.as_slice())
    }
}

impl<O: ConstraintOracle + ?Sized> ConstraintOracle for &O {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn count(&self) -> usize {
        (**self).count()
    }

    fn residuals(&self, y: &DVector<f64>) -> Result<DVector<f64>, ConstraintError> {
        (**self).residuals(y)
    }

    fn jacobian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>, ConstraintError> {
        (**self).jacobian(y)
    }
}
