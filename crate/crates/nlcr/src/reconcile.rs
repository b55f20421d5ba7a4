//! Non-linearly constrained reconciliation: project a base forecast ŷ onto
//! the coherent manifold in the metric of a weight matrix W.
//!
//! The projection minimises `(z−ŷ)ᵀW⁻¹(z−ŷ)` subject to `g(z)=0` with the
//! SQP engine, starting from ŷ. The reported multipliers are re-derived from
//! the solution-form identity `ỹ = ŷ + W J̃ λ` by a least-squares solve, so
//! they are independent of the solver's internal scaling conventions.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::constraints::{CoherenceReport, ConstraintOracle, ConstraintSystem};
use crate::expr::{differentiate, EvalError, Expr};
use crate::sqp::{sqp_solve, Objective, SqpError, SqpProblem, SqpResult, SqpSettings, SqpStatus};
use crate::weights::WeightMatrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReconcileError {
    #[error("forecast has {got} entries, system has {expected} series")]
    Dimension { got: usize, expected: usize },
    #[error("weight matrix is {w_dim}×{w_dim}, system has {n} series")]
    WeightDimension { w_dim: usize, n: usize },
    #[error("evaluation failed at the base forecast: {0}")]
    StartPoint(String),
    #[error("invalid solver settings: {0}")]
    Settings(String),
}

impl From<SqpError> for ReconcileError {
    fn from(e: SqpError) -> Self {
        match e {
            SqpError::StartPoint(msg) => ReconcileError::StartPoint(msg),
            SqpError::Dimension { got, expected } => ReconcileError::Dimension { got, expected },
            SqpError::InvalidSettings(msg) => ReconcileError::Settings(msg),
        }
    }
}

/// Squared W-metric distance to a fixed centre: `f(z) = (z−c)ᵀW⁻¹(z−c)`.
pub struct WeightedDistance<'a> {
    pub center: &'a DVector<f64>,
    pub weight: &'a WeightMatrix,
}

impl Objective for WeightedDistance<'_> {
    fn value(&self, y: &DVector<f64>) -> Option<f64> {
        let d = y - self.center;
        Some(d.dot(&self.weight.solve(&d)))
    }

    fn gradient(&self, y: &DVector<f64>) -> Option<DVector<f64>> {
        let d = y - self.center;
        Some(2.0 * self.weight.solve(&d))
    }
}

/// Outcome of reconciling one forecast vector.
#[derive(Debug, Clone)]
pub struct ReconciliationResult {
    pub y_hat: DVector<f64>,
    pub y_tilde: DVector<f64>,
    /// Multipliers of the solution form ỹ = ŷ + W J̃ λ.
    pub lambda: DVector<f64>,
    /// Residual norm of the least-squares recovery of λ.
    pub lambda_residual: f64,
    pub solver: SqpResult,
    pub coherence: CoherenceReport,
}

impl ReconciliationResult {
    pub fn converged(&self) -> bool {
        self.solver.status == SqpStatus::Converged
    }
}

fn solve_projection<O: ConstraintOracle>(
    center: &DVector<f64>,
    sys: &O,
    w: &WeightMatrix,
    settings: &SqpSettings,
) -> Result<SqpResult, ReconcileError> {
    let objective = WeightedDistance { center, weight: w };
    Ok(sqp_solve(&SqpProblem {
        objective: &objective,
        constraints: sys,
        start: center.clone(),
        settings: *settings,
    })?)
}

/// Projects `y_hat` onto the manifold of `sys` in the metric of `w`.
///
/// Non-convergence is not an error: the result carries the best iterate with
/// its solver status and a coherence report that will read incoherent.
///
/// For a non-identity W the solve runs in whitened coordinates `u = L⁻¹z`
/// with `W = LLᵀ`, where the same objective becomes the plain squared
/// distance and the iteration is indifferent to the scale of the series;
/// the reported solution, multipliers and coherence are in the original
/// coordinates either way.
pub fn reconcile<O: ConstraintOracle>(
    y_hat: &DVector<f64>,
    sys: &O,
    w: &WeightMatrix,
    settings: &SqpSettings,
) -> Result<ReconciliationResult, ReconcileError> {
    let n = sys.dim();
    if y_hat.len() != n {
        return Err(ReconcileError::Dimension {
            got: y_hat.len(),
            expected: n,
        });
    }
    if w.dim() != n {
        return Err(ReconcileError::WeightDimension { w_dim: w.dim(), n });
    }

    let identity = WeightMatrix::identity(n);
    let (y_tilde, solver) = if w.tag() == crate::weights::WeightTag::Ols {
        let solver = solve_projection(y_hat, sys, w, settings)?;
        (solver.solution.clone(), solver)
    } else {
        let white = WhitenedSystem::new(sys, w);
        let u_hat = white.whiten_point(y_hat);
        let mut solver = solve_projection(&u_hat, &white, &identity, settings)?;
        let y_tilde = white.unwhiten_point(&solver.solution);
        solver.solution = y_tilde.clone();
        (y_tilde, solver)
    };

    // The solution is an accepted iterate, so the oracles evaluate there.
    let residuals = sys
        .residuals(&y_tilde)
        .map_err(|e| ReconcileError::StartPoint(e.to_string()))?;
    let max_abs_residual = residuals.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
    let coherence = CoherenceReport {
        residuals,
        max_abs_residual,
        coherent: max_abs_residual <= settings.eps_feasibility,
    };

    let diff = &y_tilde - y_hat;
    let (lambda, lambda_residual) = if sys.count() == 0 {
        (DVector::zeros(0), diff.norm())
    } else {
        let j_tilde = sys
            .jacobian(&y_tilde)
            .map_err(|e| ReconcileError::StartPoint(e.to_string()))?;
        let a = w.matrix() * &j_tilde;
        let svd = a.clone().svd(true, true);
        let lambda = svd
            .solve(&diff, 1e-13)
            .unwrap_or_else(|_| DVector::zeros(sys.count()));
        let residual = (&a * &lambda - &diff).norm();
        (lambda, residual)
    };

    Ok(ReconciliationResult {
        y_hat: y_hat.clone(),
        y_tilde,
        lambda,
        lambda_residual,
        solver,
        coherence,
    })
}

/// Reconciles many forecast vectors, preserving order. Items fail
/// independently; the batch always completes.
pub fn reconcile_batch<O: ConstraintOracle + Sync>(
    batch: &[DVector<f64>],
    sys: &O,
    w: &WeightMatrix,
    settings: &SqpSettings,
) -> Vec<Result<ReconciliationResult, ReconcileError>> {
    batch
        .par_iter()
        .map(|y_hat| reconcile(y_hat, sys, w, settings))
        .collect()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BottomUpError {
    #[error("bottom series `{0}` is not in the vocabulary")]
    UnknownBottomSeries(String),
    #[error("series `{0}` cannot be derived from the bottom set")]
    NotDerivable(String),
    #[error("constraint `{constraint}` is non-linear in `{series}`; cannot solve for it")]
    NonLinear { series: String, constraint: String },
    #[error("constraint `{0}` has zero coefficient on its unknown")]
    DegenerateEquation(String),
    #[error("constraint `{constraint}`: {source}")]
    Eval {
        constraint: String,
        #[source]
        source: EvalError,
    },
}

struct PartialBinding<'a> {
    names: &'a [String],
    values: &'a [f64],
    known: &'a [bool],
}

impl crate::expr::Binding for PartialBinding<'_> {
    fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .filter(|&i| self.known[i])
            .map(|i| self.values[i])
    }
}

/// Benchmark reconciliation: copy the bottom-level series from ŷ and derive
/// every other series by solving the constraint equations one unknown at a
/// time (aggregates resolve before the ratios that consume them).
pub fn bottom_up(
    y_hat: &DVector<f64>,
    sys: &ConstraintSystem,
    bottom_set: &[String],
) -> Result<DVector<f64>, BottomUpError> {
    let series = sys.series();
    for b in bottom_set {
        if !series.contains(b) {
            return Err(BottomUpError::UnknownBottomSeries(b.clone()));
        }
    }
    let mut values: Vec<f64> = y_hat.iter().copied().collect();
    let mut known: Vec<bool> = series.iter().map(|s| bottom_set.contains(s)).collect();
    let mut resolved: Vec<bool> = vec![false; sys.count()];

    // Residual expressions, reparsed from the canonical text so the solve is
    // independent of the system's cached derivative grid.
    let residuals: Vec<(String, Expr)> = (0..sys.count())
        .map(|c| {
            let text = sys.text(c).to_string();
            let expr = crate::expr::parse_constraint(&text)
                .expect("system text reparses by construction");
            (text, expr)
        })
        .collect();

    loop {
        let mut progress = false;
        let mut nonlinear_block: Option<(String, String)> = None;
        for (c, (text, residual)) in residuals.iter().enumerate() {
            if resolved[c] {
                continue;
            }
            let vars = residual.variables();
            let unknowns: Vec<usize> = series
                .iter()
                .enumerate()
                .filter(|(i, s)| !known[*i] && vars.contains(*s))
                .map(|(i, _)| i)
                .collect();
            match unknowns.len() {
                0 => {
                    resolved[c] = true;
                }
                1 => {
                    let u = unknowns[0];
                    let derivative = differentiate(residual, &series[u]);
                    if derivative.variables().contains(&series[u]) {
                        nonlinear_block = Some((series[u].clone(), text.clone()));
                        continue;
                    }
                    // Solve the affine equation through one exact Newton
                    // step anchored at zero, where the intercept reads off
                    // directly: u* = −g(0)/g′.
                    let mut trial = values.clone();
                    let mut trial_known = known.clone();
                    trial[u] = 0.0;
                    trial_known[u] = true;
                    let binding = PartialBinding {
                        names: series,
                        values: &trial,
                        known: &trial_known,
                    };
                    let g0 = residual.evaluate(&binding).map_err(|source| {
                        BottomUpError::Eval {
                            constraint: text.clone(),
                            source,
                        }
                    })?;
                    let slope =
                        derivative
                            .evaluate(&binding)
                            .map_err(|source| BottomUpError::Eval {
                                constraint: text.clone(),
                                source,
                            })?;
                    if slope == 0.0 {
                        return Err(BottomUpError::DegenerateEquation(text.clone()));
                    }
                    values[u] = -g0 / slope;
                    known[u] = true;
                    resolved[c] = true;
                    progress = true;
                }
                _ => {}
            }
        }
        if known.iter().all(|&k| k) {
            return Ok(DVector::from_vec(values));
        }
        if !progress {
            if let Some((series, constraint)) = nonlinear_block {
                return Err(BottomUpError::NonLinear { series, constraint });
            }
            let missing = series
                .iter()
                .enumerate()
                .find(|(i, _)| !known[*i])
                .map(|(_, s)| s.clone())
                .expect("some series is unresolved");
            return Err(BottomUpError::NotDerivable(missing));
        }
    }
}

/// A constraint oracle in whitened coordinates `u = L⁻¹ y`, where
/// `W = L Lᵀ`. Projection with the identity metric in `u`-space is exactly
/// W-metric projection in `y`-space, which reduces general-W guarantee
/// computations to the identity-metric case.
pub struct WhitenedSystem<O> {
    inner: O,
    l: DMatrix<f64>,
}

impl<O: ConstraintOracle> WhitenedSystem<O> {
    pub fn new(inner: O, w: &WeightMatrix) -> Self {
        WhitenedSystem {
            inner,
            l: w.cholesky_l(),
        }
    }

    /// u = L⁻¹ y.
    pub fn whiten_point(&self, y: &DVector<f64>) -> DVector<f64> {
        self.l
            .solve_lower_triangular(y)
            .expect("Cholesky factor has positive diagonal")
    }

    /// y = L u.
    pub fn unwhiten_point(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.l * u
    }
}

impl<O: ConstraintOracle> ConstraintOracle for WhitenedSystem<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn residuals(
        &self,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>, crate::constraints::ConstraintError> {
        self.inner.residuals(&self.unwhiten_point(u))
    }

    fn jacobian(
        &self,
        u: &DVector<f64>,
    ) -> Result<DMatrix<f64>, crate::constraints::ConstraintError> {
        let j = self.inner.jacobian(&self.unwhiten_point(u))?;
        Ok(self.l.transpose() * j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::weights::{ResidualSample, WeightTag};
    use approx::assert_relative_eq;

    fn defaults() -> SqpSettings {
        SqpSettings::default()
    }

    fn identity_for(sys: &ConstraintSystem) -> WeightMatrix {
        WeightMatrix::identity(sys.dim())
    }

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn coherent_input_is_returned_unchanged() {
        let sys = fixtures::quartic_system();
        let w = identity_for(&sys);
        let y_hat = vec2(16.0, 2.0);
        let r = reconcile(&y_hat, &sys, &w, &defaults()).unwrap();
        assert!(r.converged());
        assert_eq!(r.solver.iterations, 0);
        assert_eq!(r.y_tilde.as_slice(), y_hat.as_slice());
        assert_eq!(r.lambda.as_slice(), &[0.0]);
        assert!(r.coherence.coherent);
    }

    /// 1-D projection oracle for the quartic: minimise the distance from a
    /// target to (t⁴, t) by scanning t and golden-section refining.
    fn quartic_projection_oracle(target: &[f64; 2]) -> Vec<DVector<f64>> {
        let dist2 = |t: f64| (t.powi(4) - target[0]).powi(2) + (t - target[1]).powi(2);
        let mut minima = Vec::new();
        let step = 1e-3;
        let mut t = -3.0;
        let mut prev = dist2(t - step);
        let mut here = dist2(t);
        while t <= 3.0 {
            let next = dist2(t + step);
            if here <= prev && here <= next {
                // Golden-section refine inside (t−step, t+step).
                let (mut lo, mut hi) = (t - step, t + step);
                let phi = (5.0f64.sqrt() - 1.0) / 2.0;
                for _ in 0..200 {
                    let a = hi - phi * (hi - lo);
                    let b = lo + phi * (hi - lo);
                    if dist2(a) < dist2(b) {
                        hi = b;
                    } else {
                        lo = a;
                    }
                }
                let tm = 0.5 * (lo + hi);
                minima.push(DVector::from_vec(vec![tm.powi(4), tm]));
            }
            prev = here;
            here = next;
            t += step;
        }
        minima.sort_by(|a, b| {
            let da = (a[0] - target[0]).powi(2) + (a[1] - target[1]).powi(2);
            let db = (b[0] - target[0]).powi(2) + (b[1] - target[1]).powi(2);
            da.partial_cmp(&db).unwrap()
        });
        minima
    }

    #[test]
    fn off_axis_projection_matches_curve_oracle() {
        let sys = fixtures::quartic_system();
        let w = identity_for(&sys);
        let y_hat = vec2(1.0, 0.35);
        let r = reconcile(&y_hat, &sys, &w, &defaults()).unwrap();
        assert!(r.converged());
        let oracle = quartic_projection_oracle(&[1.0, 0.35]);
        let best = &oracle[0];
        assert_relative_eq!(r.y_tilde, best.clone(), epsilon = 1e-4);
    }

    #[test]
    fn on_axis_projection_reaches_the_symmetric_stationary_point() {
        // From (1, 0) the deterministic iteration lands on the stationary
        // point (0, 0) that sits between the two global minimisers; the
        // solver reports the local solution it reached.
        let sys = fixtures::quartic_system();
        let w = identity_for(&sys);
        let r = reconcile(&vec2(1.0, 0.0), &sys, &w, &defaults()).unwrap();
        assert!(r.converged());
        assert!(r.y_tilde[0].abs() <= 1e-7);
        assert!(r.y_tilde[1].abs() <= 1e-7);
        // The 1-D oracle shows the two symmetric global minimisers.
        let oracle = quartic_projection_oracle(&[1.0, 0.0]);
        assert!(oracle.len() >= 2);
        assert_relative_eq!(oracle[0][1].abs(), oracle[1][1].abs(), epsilon = 1e-6);
    }

    #[test]
    fn linear_system_matches_oblique_projection() {
        let series: Vec<String> = ["USA", "NE", "MA"].iter().map(|s| s.to_string()).collect();
        let sys = ConstraintSystem::parse(series, "USA = NE + MA").unwrap();
        let rows: Vec<Vec<f64>> = vec![
            vec![1.2, 0.4, 0.9],
            vec![-0.7, 0.1, -0.3],
            vec![0.3, -0.6, 0.2],
            vec![0.9, 0.5, -0.8],
            vec![-1.1, -0.2, 0.4],
        ];
        let sample = ResidualSample::new(
            ["USA", "NE", "MA"].iter().map(|s| s.to_string()).collect(),
            rows,
        )
        .unwrap();
        let w = WeightMatrix::from_residuals(&sample, WeightTag::Shr).unwrap();
        let y_hat = DVector::from_vec(vec![10.0, 4.0, 3.0]);
        let r = reconcile(&y_hat, &sys, &w, &defaults()).unwrap();
        assert!(r.converged());
        // Closed form: ŷ − W J (Jᵀ W J)⁻¹ g(ŷ).
        let j = sys.jacobian(y_hat.as_slice()).unwrap();
        let g = sys.evaluate_g(y_hat.as_slice()).unwrap();
        let jtwj = j.transpose() * w.matrix() * &j;
        let expected = &y_hat - w.matrix() * &j * jtwj.try_inverse().unwrap() * g;
        assert_relative_eq!(r.y_tilde, expected, epsilon = 1e-8);
    }

    #[test]
    fn lambda_solves_the_solution_form() {
        let sys = fixtures::ratio_system();
        let w = WeightMatrix::identity(3);
        let y_hat = DVector::from_vec(vec![50.0, 100.0, 300.0]);
        let r = reconcile(&y_hat, &sys, &w, &defaults()).unwrap();
        assert!(r.converged());
        let diff = &r.y_tilde - &y_hat;
        assert!(r.lambda_residual <= 1e-6 * (1.0 + diff.norm()));
        // Rebuild ỹ from the solution form ŷ + W J̃ λ.
        let j = sys.jacobian(r.y_tilde.as_slice()).unwrap();
        let rebuilt = &y_hat + w.matrix() * &j * &r.lambda;
        assert_relative_eq!(rebuilt, r.y_tilde, epsilon = 1e-6);
    }

    #[test]
    fn idempotence_within_tolerance() {
        let sys = fixtures::quartic_system();
        let w = identity_for(&sys);
        let first = reconcile(&vec2(1.0, 0.35), &sys, &w, &defaults()).unwrap();
        assert!(first.converged());
        let second = reconcile(&first.y_tilde, &sys, &w, &defaults()).unwrap();
        assert!(second.converged());
        assert!((&second.y_tilde - &first.y_tilde).norm() <= 1e-6);
    }

    #[test]
    fn batch_matches_individual_calls_and_preserves_order() {
        let sys = fixtures::ratio_system();
        let w = WeightMatrix::identity(3);
        let items: Vec<DVector<f64>> = vec![
            DVector::from_vec(vec![50.0, 100.0, 300.0]),
            DVector::from_vec(vec![30.0, 110.0, 280.0]),
            DVector::from_vec(vec![40.0, 90.0, 320.0]),
        ];
        let batch = reconcile_batch(&items, &sys, &w, &defaults());
        assert_eq!(batch.len(), 3);
        for (item, out) in items.iter().zip(&batch) {
            let single = reconcile(item, &sys, &w, &defaults()).unwrap();
            let out = out.as_ref().unwrap();
            assert_eq!(out.y_tilde.as_slice(), single.y_tilde.as_slice());
            assert_eq!(out.y_hat.as_slice(), item.as_slice());
        }
    }

    #[test]
    fn batch_records_failures_and_continues() {
        let sys = fixtures::ratio_system();
        let w = WeightMatrix::identity(3);
        let items = vec![
            DVector::from_vec(vec![50.0, 100.0, 0.0]),
            DVector::from_vec(vec![50.0, 100.0, 300.0]),
        ];
        let batch = reconcile_batch(&items, &sys, &w, &defaults());
        assert!(batch[0].is_err());
        assert!(batch[1].as_ref().unwrap().converged());
    }

    #[test]
    fn linear_projection_never_hurts_against_coherent_points() {
        let series: Vec<String> = ["USA", "NE", "MA"].iter().map(|s| s.to_string()).collect();
        let sys = ConstraintSystem::parse(series, "USA = NE + MA").unwrap();
        let w = WeightMatrix::identity(3);
        let y_hat = DVector::from_vec(vec![10.0, 4.0, 3.0]);
        let r = reconcile(&y_hat, &sys, &w, &defaults()).unwrap();
        let mut state = 0x6c078965u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            10.0 * ((state >> 11) as f64 / (1u64 << 53) as f64) - 5.0
        };
        for _ in 0..500 {
            let (ne, ma) = (next(), next());
            let y = DVector::from_vec(vec![ne + ma, ne, ma]);
            assert!((&r.y_tilde - &y).norm() <= (&y_hat - &y).norm() + 1e-12);
        }
    }

    #[test]
    fn below_curve_base_improves_on_every_coherent_point() {
        let sys = fixtures::quartic_system();
        let w = identity_for(&sys);
        // Strictly below the curve.
        let y_hat = vec2(-0.4, 0.3);
        let r = reconcile(&y_hat, &sys, &w, &defaults()).unwrap();
        assert!(r.converged());
        let mut t = -2.0;
        while t <= 2.0 {
            let y = DVector::from_vec(vec![t * t * t * t, t]);
            let d_tilde = (&r.y_tilde - &y).norm();
            let d_hat = (&y_hat - &y).norm();
            assert!(d_tilde < d_hat, "worse at t={t}: {d_tilde} vs {d_hat}");
            t += 0.05;
        }
    }

    #[test]
    fn whitened_identity_projection_equals_direct_weighted_projection() {
        let series: Vec<String> = ["USA", "NE", "MA"].iter().map(|s| s.to_string()).collect();
        let rows = vec![
            vec![0.9, 0.5, 0.3],
            vec![-0.4, 0.2, -0.6],
            vec![0.1, -0.8, 0.5],
            vec![0.7, 0.3, -0.2],
            vec![-0.5, -0.1, 0.6],
            vec![0.2, 0.6, -0.4],
        ];
        let sample = ResidualSample::new(series, rows).unwrap();
        let tight = SqpSettings {
            eps_stationarity: 1e-11,
            eps_feasibility: 1e-11,
            ..SqpSettings::default()
        };
        for tag in [WeightTag::Wls, WeightTag::Shr] {
            let w = WeightMatrix::from_residuals(&sample, tag).unwrap();
            let y_hat = DVector::from_vec(vec![10.0, 4.0, 3.0]);
            let direct = reconcile(&y_hat, &sys2(), &w, &tight).unwrap();

            let white = WhitenedSystem::new(sys2(), &w);
            let u_hat = white.whiten_point(&y_hat);
            let wi = WeightMatrix::identity(3);
            let in_white = reconcile(&u_hat, &white, &wi, &tight).unwrap();
            let back = white.unwhiten_point(&in_white.y_tilde);
            assert_relative_eq!(back, direct.y_tilde, epsilon = 1e-8);
        }

        fn sys2() -> ConstraintSystem {
            let series: Vec<String> =
                ["USA", "NE", "MA"].iter().map(|s| s.to_string()).collect();
            ConstraintSystem::parse(series, "USA = NE + MA").unwrap()
        }
    }

    #[test]
    fn bottom_up_mortality() {
        let sys = fixtures::mortality_system();
        let bottoms: Vec<String> = ["D_NE", "P_NE", "D_MA", "P_MA"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        // Base forecast with garbage in the derived slots.
        let mut y_hat = DVector::zeros(9);
        let idx = |name: &str| {
            sys.series()
                .iter()
                .position(|s| s == name)
                .unwrap()
        };
        y_hat[idx("D_NE")] = 10.0;
        y_hat[idx("P_NE")] = 100.0;
        y_hat[idx("D_MA")] = 20.0;
        y_hat[idx("P_MA")] = 200.0;
        y_hat[idx("R_USA")] = 99.0;
        y_hat[idx("D_USA")] = 99.0;
        y_hat[idx("P_USA")] = 99.0;
        y_hat[idx("R_NE")] = 99.0;
        y_hat[idx("R_MA")] = 99.0;
        let out = bottom_up(&y_hat, &sys, &bottoms).unwrap();
        assert_eq!(out[idx("D_USA")], 30.0);
        assert_eq!(out[idx("P_USA")], 300.0);
        assert_relative_eq!(out[idx("R_USA")], 0.1, max_relative = 1e-14);
        assert_relative_eq!(out[idx("R_NE")], 0.1, max_relative = 1e-14);
        let report = sys
            .check_coherence(out.as_slice(), 1e-10)
            .unwrap();
        assert!(report.coherent);
    }

    #[test]
    fn bottom_up_unemployment_full_chain() {
        let sys = fixtures::unemployment_system();
        let bottoms: Vec<String> = ["E_NSW", "U_NSW", "E_VIC", "U_VIC"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let coherent = fixtures::unemployment_coherent_point();
        // Start from the coherent point with the derived slots corrupted.
        let mut y_hat = coherent.clone();
        for (i, name) in sys.series().iter().enumerate() {
            if !bottoms.contains(name) {
                y_hat[i] = -1.0;
            }
        }
        let out = bottom_up(&y_hat, &sys, &bottoms).unwrap();
        assert_relative_eq!(out, coherent, max_relative = 1e-12);
    }

    #[test]
    fn bottom_up_errors() {
        let sys = fixtures::mortality_system();
        let err = bottom_up(
            &DVector::zeros(9),
            &sys,
            &["D_XX".to_string()],
        )
        .unwrap_err();
        assert_eq!(err, BottomUpError::UnknownBottomSeries("D_XX".into()));

        // Missing P_MA: population aggregate and the MA rate are stuck.
        let bottoms: Vec<String> = ["D_NE", "P_NE", "D_MA"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let err = bottom_up(&DVector::from_element(9, 1.0), &sys, &bottoms).unwrap_err();
        assert!(matches!(err, BottomUpError::NotDerivable(_)));
    }

    #[test]
    fn dimension_checks() {
        let sys = fixtures::quartic_system();
        let w3 = WeightMatrix::identity(3);
        let err = reconcile(&vec2(1.0, 0.0), &sys, &w3, &defaults()).unwrap_err();
        assert!(matches!(err, ReconcileError::WeightDimension { .. }));
        let w2 = WeightMatrix::identity(2);
        let err = reconcile(
            &DVector::from_vec(vec![1.0]),
            &sys,
            &w2,
            &defaults(),
        )
        .unwrap_err();
        assert!(matches!(err, ReconcileError::Dimension { .. }));
    }

    #[test]
    fn singular_start_is_an_error() {
        let sys = fixtures::ratio_system();
        let w = WeightMatrix::identity(3);
        let err = reconcile(
            &DVector::from_vec(vec![50.0, 100.0, 0.0]),
            &sys,
            &w,
            &defaults(),
        )
        .unwrap_err();
        assert!(matches!(err, ReconcileError::StartPoint(_)));
    }
}
