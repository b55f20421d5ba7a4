//! Accuracy-guarantee balls around reconciled forecasts.
//!
//! Everything here works in the identity metric (for a general W, whiten
//! coordinates first — see `reconcile::WhitenedSystem`). Given an incoherent
//! base ŷ and its projection ỹ, the perpendicular bisector of the segment
//! [ŷ, ỹ] separates points closer to ỹ from points closer to ŷ. The nearest
//! point y̆ to ỹ where the manifold crosses that hyperplane bounds a ball
//! around ỹ: every coherent point strictly inside it is closer to ỹ than to
//! ŷ, i.e. reconciliation improved the forecast for that realisation. If
//! the manifold never crosses the hyperplane, improvement is global and the
//! radius is infinite — always the case for purely linear constraints.
//!
//! The radius is reported as the direct distance ‖ỹ−y̆‖ and cross-checked
//! against its algebraic multiplier form, which reproduces the distance
//! exactly when the critical-point Jacobian is halved and the projection
//! Jacobian is left unscaled.

use nalgebra::{DMatrix, DVector};

use crate::constraints::{ConstraintError, ConstraintOracle, Region};
use crate::sqp::{sqp_solve, SqpProblem, SqpSettings, SqpStatus, SquaredDistance};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GuaranteeError {
    #[error("base and reconciled forecasts coincide; no separating hyperplane exists")]
    DegenerateHyperplane,
    #[error("constraint evaluation failed: {0}")]
    Constraint(#[from] ConstraintError),
    #[error("critical-point search failed: {0}")]
    CriticalPointFailed(String),
    #[error(
        "radius conventions disagree: direct distance {direct}, \
         algebraic {algebraic} (unscaled-Jacobian variant {unscaled})"
    )]
    ConventionMismatch {
        direct: f64,
        algebraic: f64,
        unscaled: f64,
    },
}

/// The set `{v : normalᵀv = offset}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    pub normal: DVector<f64>,
    pub offset: f64,
}

impl Hyperplane {
    /// Signed residual `normalᵀv − offset`.
    pub fn residual(&self, v: &DVector<f64>) -> f64 {
        self.normal.dot(v) - self.offset
    }
}

/// The guarantee ball around a reconciled forecast.
#[derive(Debug, Clone)]
pub struct GuaranteeBall {
    /// ỹ.
    pub center: DVector<f64>,
    /// Distance to the critical point, or `f64::INFINITY` when the manifold
    /// never meets the bisecting hyperplane.
    pub radius: f64,
    /// Critical point y̆; absent for infinite radius.
    pub y_breve: Option<DVector<f64>>,
    /// Constraint multipliers of the critical-point problem.
    pub kappa: Option<DVector<f64>>,
    /// Hyperplane multiplier of the critical-point problem.
    pub mu: Option<f64>,
    pub hyperplane: Hyperplane,
}

impl GuaranteeBall {
    /// Strict interior membership, with the margin used by sampling tests.
    pub fn contains(&self, y: &DVector<f64>) -> bool {
        (y - &self.center).norm() < self.radius
    }
}

/// True when `y` is strictly closer to the reconciled forecast than to the
/// base forecast.
pub fn improvement_holds(y: &DVector<f64>, y_hat: &DVector<f64>, y_tilde: &DVector<f64>) -> bool {
    (y - y_tilde).norm() < (y - y_hat).norm()
}

/// True when every constraint classifies `y_hat` on its hypograph side.
///
/// Meaningful as an improvement guarantee only when every constraint
/// residual is convex (the caller's responsibility); the shipped quartic
/// fixture is written in its convex orientation.
pub fn hypograph_guarantee<O>(y_hat: &DVector<f64>, sys: &O) -> Result<bool, ConstraintError>
where
    O: ConstraintOracle,
{
    let g = sys.residuals(y_hat)?;
    Ok(g.iter().all(|&gc| region_of(gc) == Region::Hypograph))
}

fn region_of(g: f64) -> Region {
    if g.abs() <= crate::constraints::FEASIBILITY_TOL {
        Region::OnManifold
    } else if g < 0.0 {
        Region::Epigraph
    } else {
        Region::Hypograph
    }
}

/// Least-squares multipliers of `J̃ λ = ỹ − ŷ` in the identity metric.
fn recover_lambda<O: ConstraintOracle>(
    y_hat: &DVector<f64>,
    y_tilde: &DVector<f64>,
    sys: &O,
) -> Result<DVector<f64>, GuaranteeError> {
    let j = sys.jacobian(y_tilde)?;
    let diff = y_tilde - y_hat;
    let svd = j.clone().svd(true, true);
    Ok(svd
        .solve(&diff, 1e-13)
        .unwrap_or_else(|_| DVector::zeros(sys.count())))
}

/// The perpendicular bisector of [ŷ, ỹ], with normal J̃λ and offset fixed by
/// the midpoint.
pub fn separating_hyperplane<O: ConstraintOracle>(
    y_hat: &DVector<f64>,
    y_tilde: &DVector<f64>,
    sys: &O,
) -> Result<Hyperplane, GuaranteeError> {
    let lambda = recover_lambda(y_hat, y_tilde, sys)?;
    let j = sys.jacobian(y_tilde)?;
    let normal = &j * &lambda;
    let scale = y_hat.norm().max(1.0);
    if normal.norm() <= 1e-12 * scale {
        return Err(GuaranteeError::DegenerateHyperplane);
    }
    let midpoint = 0.5 * (y_hat + y_tilde);
    let offset = normal.dot(&midpoint);
    Ok(Hyperplane { normal, offset })
}

/// Constraint oracle of the critical-point problem: the base system plus
/// the hyperplane as one extra linear constraint.
struct AugmentedOracle<'a, O> {
    inner: &'a O,
    plane: &'a Hyperplane,
}

impl<O: ConstraintOracle> ConstraintOracle for AugmentedOracle<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn count(&self) -> usize {
        self.inner.count() + 1
    }

    fn residuals(&self, y: &DVector<f64>) -> Result<DVector<f64>, ConstraintError> {
        let g = self.inner.residuals(y)?;
        let mut out = DVector::zeros(g.len() + 1);
        out.rows_mut(0, g.len()).copy_from(&g);
        out[g.len()] = self.plane.residual(y);
        Ok(out)
    }

    fn jacobian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>, ConstraintError> {
        let j = self.inner.jacobian(y)?;
        let (n, c) = (j.nrows(), j.ncols());
        let mut out = DMatrix::zeros(n, c + 1);
        out.view_mut((0, 0), (n, c)).copy_from(&j);
        out.column_mut(c).copy_from(&self.plane.normal);
        Ok(out)
    }
}

/// Nearest manifold point to ỹ on the hyperplane, plus its multipliers in
/// the convention `ỹ − y̆ = ½ J̆ κ + (μ/2) J̃λ`.
#[derive(Debug, Clone)]
pub struct CriticalPoint {
    pub y_breve: DVector<f64>,
    pub kappa: DVector<f64>,
    pub mu: f64,
}

/// Outcome of the critical-point search.
#[derive(Debug, Clone)]
pub enum CriticalPointOutcome {
    Found(CriticalPoint),
    /// The solver could not reach feasibility from any start: the manifold
    /// does not meet the hyperplane near ỹ.
    NoIntersection,
}

/// Searches for y̆ by minimising ‖ỹ−v‖² over the augmented constraint set.
///
/// At ỹ itself the constraint gradient and hyperplane normal are parallel
/// (that is the stationarity condition of the projection), so the search
/// starts from the foot of the perpendicular from ỹ onto the hyperplane and
/// from deterministic tangential nudges of it, keeping the nearest converged
/// candidate. The nudge ladder spans several orders of magnitude because the
/// distance to the crossing is governed by manifold curvature, which can be
/// much larger than the hyperplane offset.
pub fn critical_point<O: ConstraintOracle>(
    y_tilde: &DVector<f64>,
    sys: &O,
    plane: &Hyperplane,
    settings: &SqpSettings,
) -> Result<CriticalPointOutcome, GuaranteeError> {
    let n2 = plane.normal.norm_squared();
    if n2 <= 0.0 {
        return Err(GuaranteeError::DegenerateHyperplane);
    }
    // Foot of the perpendicular from ỹ (the midpoint, for a bisector built
    // from ỹ and ŷ).
    let foot = y_tilde - (plane.residual(y_tilde) / n2) * &plane.normal;
    let tangent = first_tangent(&plane.normal);
    let scale = plane.normal.norm().max(1e-3);

    let objective = SquaredDistance {
        center: y_tilde.clone(),
    };
    let augmented = AugmentedOracle { inner: sys, plane };

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut best_feasibility = f64::INFINITY;
    for delta in [
        0.0, 0.01, -0.01, 0.1, -0.1, 1.0, -1.0, 10.0, -10.0, 100.0, -100.0,
    ] {
        let start = &foot + (delta * scale) * &tangent;
        let solved = sqp_solve(&SqpProblem {
            objective: &objective,
            constraints: &augmented,
            start,
            settings: *settings,
        });
        let result = match solved {
            Ok(r) => r,
            Err(_) => continue,
        };
        best_feasibility = best_feasibility.min(result.final_feas_norm);
        if result.status == SqpStatus::Converged {
            let distance = (&result.solution - y_tilde).norm();
            if best.as_ref().map_or(true, |(d, _)| distance < *d) {
                best = Some((distance, result.solution));
            }
        }
    }

    let y_breve = match best {
        Some((_, v)) => v,
        None => {
            if best_feasibility > 1e-6 {
                return Ok(CriticalPointOutcome::NoIntersection);
            }
            return Err(GuaranteeError::CriticalPointFailed(format!(
                "no start converged; best feasibility norm {best_feasibility:.3e}"
            )));
        }
    };

    // Multipliers from the first-order condition
    // ỹ − y̆ = ½ J(y̆) κ + (μ/2) n, solved jointly by least squares.
    let j_breve = sys.jacobian(&y_breve)?;
    let c = sys.count();
    let n = sys.dim();
    let mut design = DMatrix::zeros(n, c + 1);
    design
        .view_mut((0, 0), (n, c))
        .copy_from(&(0.5 * &j_breve));
    design.column_mut(c).copy_from(&(0.5 * &plane.normal));
    let rhs = y_tilde - &y_breve;
    let svd = design.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-13)
        .map_err(|e| GuaranteeError::CriticalPointFailed(e.to_string()))?;
    let kappa = DVector::from_fn(c, |i, _| sol[i]);
    let mu = sol[c];
    Ok(CriticalPointOutcome::Found(CriticalPoint {
        y_breve,
        kappa,
        mu,
    }))
}

/// First standard basis vector with a stable component orthogonal to
/// `normal`, normalised.
fn first_tangent(normal: &DVector<f64>) -> DVector<f64> {
    let unit = normal / normal.norm();
    let n = normal.len();
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        let residual = &e - unit.dot(&e) * &unit;
        let norm = residual.norm();
        if norm >= 0.5 {
            return residual / norm;
        }
    }
    // Unreachable for n ≥ 2: some basis vector keeps most of its length.
    DVector::zeros(n)
}

/// The multiplier form of the radius:
/// `r² = κᵀJ̆ₛᵀJ̆ₛκ + μ κᵀJ̆ₛᵀ(J̃λ) + (μ²/4)‖J̃λ‖²`, with `J̆ₛ` the
/// critical-point Jacobian scaled by ½ and `J̃λ` the hyperplane normal.
pub fn radius_formula(
    kappa: &DVector<f64>,
    mu: f64,
    j_breve: &DMatrix<f64>,
    normal: &DVector<f64>,
) -> f64 {
    let j_scaled = 0.5 * j_breve;
    let a = &j_scaled * kappa;
    let r2 = a.norm_squared() + mu * a.dot(normal) + 0.25 * mu * mu * normal.norm_squared();
    r2.max(0.0).sqrt()
}

/// Builds the guarantee ball for a reconciled pair (ŷ, ỹ) under the
/// identity metric.
pub fn guarantee_ball<O: ConstraintOracle>(
    y_hat: &DVector<f64>,
    y_tilde: &DVector<f64>,
    sys: &O,
    settings: &SqpSettings,
) -> Result<GuaranteeBall, GuaranteeError> {
    let plane = separating_hyperplane(y_hat, y_tilde, sys)?;
    match critical_point(y_tilde, sys, &plane, settings)? {
        CriticalPointOutcome::NoIntersection => Ok(GuaranteeBall {
            center: y_tilde.clone(),
            radius: f64::INFINITY,
            y_breve: None,
            kappa: None,
            mu: None,
            hyperplane: plane,
        }),
        CriticalPointOutcome::Found(cp) => {
            let direct = (y_tilde - &cp.y_breve).norm();
            let j_breve = sys.jacobian(&cp.y_breve)?;
            let algebraic = radius_formula(&cp.kappa, cp.mu, &j_breve, &plane.normal);
            if (algebraic - direct).abs() > 1e-4 * direct.max(1.0) {
                let unscaled = {
                    let a = &j_breve * &cp.kappa;
                    let r2 = a.norm_squared()
                        + cp.mu * a.dot(&plane.normal)
                        + 0.25 * cp.mu * cp.mu * plane.normal.norm_squared();
                    r2.max(0.0).sqrt()
                };
                return Err(GuaranteeError::ConventionMismatch {
                    direct,
                    algebraic,
                    unscaled,
                });
            }
            Ok(GuaranteeBall {
                center: y_tilde.clone(),
                radius: direct,
                y_breve: Some(cp.y_breve),
                kappa: Some(cp.kappa),
                mu: Some(cp.mu),
                hyperplane: plane,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ConstraintSystem;
    use crate::fixtures;
    use crate::reconcile::reconcile;
    use crate::weights::WeightMatrix;
    use approx::assert_relative_eq;

    fn defaults() -> SqpSettings {
        SqpSettings::default()
    }

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn reconciled_quartic(y_hat: &DVector<f64>) -> DVector<f64> {
        let sys = fixtures::quartic_system();
        let w = WeightMatrix::identity(2);
        let r = reconcile(y_hat, &sys, &w, &defaults()).unwrap();
        assert!(r.converged());
        r.y_tilde
    }

    #[test]
    fn hyperplane_bisects_the_segment() {
        let sys = fixtures::quartic_system();
        let y_hat = vec2(-1.0, 0.0);
        let y_tilde = reconciled_quartic(&y_hat);
        let plane = separating_hyperplane(&y_hat, &y_tilde, &sys).unwrap();
        let midpoint = 0.5 * (&y_hat + &y_tilde);
        assert!(plane.residual(&midpoint).abs() <= 1e-8);
        assert!(((&midpoint - &y_hat).norm() - (&midpoint - &y_tilde).norm()).abs() <= 1e-8);
        // Normal is parallel to the projection direction ỹ − ŷ.
        let dir = &y_tilde - &y_hat;
        let cosine = plane.normal.dot(&dir) / (plane.normal.norm() * dir.norm());
        assert_relative_eq!(cosine.abs(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn linear_constraint_hyperplane_is_parallel_to_manifold() {
        let series: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let sys = ConstraintSystem::parse(series, "a + 2*b = 3").unwrap();
        let w = WeightMatrix::identity(2);
        let y_hat = vec2(4.0, 4.0);
        let r = reconcile(&y_hat, &sys, &w, &defaults()).unwrap();
        let plane = separating_hyperplane(&y_hat, &r.y_tilde, &sys).unwrap();
        // The manifold direction (2, −1) must be orthogonal to the normal.
        let along = vec2(2.0, -1.0);
        assert!(plane.normal.dot(&along).abs() <= 1e-8 * plane.normal.norm());
    }

    #[test]
    fn coherent_input_degenerates() {
        let sys = fixtures::quartic_system();
        let y = vec2(16.0, 2.0);
        let err = separating_hyperplane(&y, &y, &sys).unwrap_err();
        assert_eq!(err, GuaranteeError::DegenerateHyperplane);
    }

    #[test]
    fn linear_constraint_has_infinite_ball() {
        let series: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let sys = ConstraintSystem::parse(series, "a + 2*b = 3").unwrap();
        let w = WeightMatrix::identity(2);
        let y_hat = vec2(4.0, 4.0);
        let r = reconcile(&y_hat, &sys, &w, &defaults()).unwrap();
        let ball = guarantee_ball(&y_hat, &r.y_tilde, &sys, &defaults()).unwrap();
        assert!(ball.radius.is_infinite());
        assert!(ball.y_breve.is_none());
    }

    /// Sweep oracle: walk the curve (t⁴, t), find where it crosses the
    /// hyperplane by sign changes and bisection, return the crossing nearest
    /// to the centre.
    fn sweep_oracle(plane: &Hyperplane, center: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        let point = |t: f64| DVector::from_vec(vec![t.powi(4), t]);
        let h = |t: f64| plane.residual(&point(t));
        let mut best: Option<(DVector<f64>, f64)> = None;
        let step = 1e-4;
        let mut t = -2.0;
        let mut prev = h(t);
        while t < 2.0 {
            let next_t = t + step;
            let next = h(next_t);
            if prev == 0.0 || prev.signum() != next.signum() {
                let (mut lo, mut hi) = (t, next_t);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if h(lo).signum() == h(mid).signum() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let root = point(0.5 * (lo + hi));
                let d = (&root - center).norm();
                if best.as_ref().map_or(true, |(_, bd)| d < *bd) {
                    best = Some((root, d));
                }
            }
            prev = next;
            t = next_t;
        }
        best
    }

    #[test]
    fn quartic_ball_matches_sweep_oracle_and_closed_form() {
        let sys = fixtures::quartic_system();
        let y_hat = vec2(1.0, 0.0);
        let y_tilde = reconciled_quartic(&y_hat);
        let ball = guarantee_ball(&y_hat, &y_tilde, &sys, &defaults()).unwrap();
        assert!(ball.radius.is_finite());
        let (_, oracle_dist) = sweep_oracle(&ball.hyperplane, &ball.center).unwrap();
        assert_relative_eq!(ball.radius, oracle_dist, epsilon = 1e-6);
        // Closed form for this configuration: the bisector sits at height
        // y₁ = 1/2, the curve crosses it at (1/2, ±(1/2)^{1/4}); both
        // crossings are equidistant, so check the solution against the pair.
        let y_breve = ball.y_breve.as_ref().unwrap();
        assert_relative_eq!(y_breve[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(y_breve[1].abs(), 0.5f64.powf(0.25), epsilon = 1e-6);
        let expected = (0.25f64 + 0.5f64.sqrt()).sqrt();
        assert_relative_eq!(ball.radius, expected, epsilon = 1e-6);
    }

    #[test]
    fn off_axis_ball_matches_sweep_oracle() {
        let sys = fixtures::quartic_system();
        let y_hat = vec2(1.0, 0.2);
        let y_tilde = reconciled_quartic(&y_hat);
        let ball = guarantee_ball(&y_hat, &y_tilde, &sys, &defaults()).unwrap();
        assert!(ball.radius.is_finite());
        let (oracle_point, oracle_dist) = sweep_oracle(&ball.hyperplane, &ball.center).unwrap();
        assert_relative_eq!(ball.radius, oracle_dist, epsilon = 1e-6);
        let y_breve = ball.y_breve.as_ref().unwrap();
        assert_relative_eq!((y_breve - &oracle_point).norm(), 0.0, epsilon = 1e-5);
    }

    #[test]
    fn ball_invariants_hold() {
        let sys = fixtures::quartic_system();
        let y_hat = vec2(1.0, 0.2);
        let y_tilde = reconciled_quartic(&y_hat);
        let ball = guarantee_ball(&y_hat, &y_tilde, &sys, &defaults()).unwrap();
        let y_breve = ball.y_breve.as_ref().unwrap();
        // y̆ on the manifold and on the hyperplane.
        let g = sys.residuals(y_breve).unwrap();
        assert!(g.amax() <= 1e-8);
        assert!(ball.hyperplane.residual(y_breve).abs() <= 1e-6);
        // The radius is literally the distance to y̆.
        assert!(((y_breve - &ball.center).norm() - ball.radius).abs() <= 1e-6);
        // y̆ is equidistant from ŷ and ỹ (it lies on the bisector).
        assert!(((y_breve - &y_hat).norm() - (y_breve - &y_tilde).norm()).abs() <= 1e-6);
    }

    #[test]
    fn scalar_radius_form_matches_general_form() {
        let sys = fixtures::quartic_system();
        let y_hat = vec2(1.0, 0.0);
        let y_tilde = reconciled_quartic(&y_hat);
        let ball = guarantee_ball(&y_hat, &y_tilde, &sys, &defaults()).unwrap();
        let y_breve = ball.y_breve.as_ref().unwrap();
        let kappa = ball.kappa.as_ref().unwrap()[0];
        let mu = ball.mu.unwrap();
        // One-constraint inner-product form with j̆ the halved gradient at
        // y̆ and j̃λ expanded through the hyperplane normal.
        let j_breve = 0.5
            * sys
                .jacobian(y_breve.as_slice())
                .unwrap()
                .column(0)
                .clone_owned();
        let n = &ball.hyperplane.normal;
        let r2 = kappa * kappa * j_breve.dot(&j_breve)
            + mu * kappa * j_breve.dot(n)
            + 0.25 * mu * mu * n.dot(n);
        let general = radius_formula(
            ball.kappa.as_ref().unwrap(),
            mu,
            &sys.jacobian(y_breve.as_slice()).unwrap(),
            n,
        );
        assert_relative_eq!(r2.max(0.0).sqrt(), general, epsilon = 1e-10);
        assert_relative_eq!(general, ball.radius, epsilon = 1e-6);
    }

    #[test]
    fn radius_shrinks_as_base_approaches_the_manifold() {
        let sys = fixtures::quartic_system();
        let mut last = f64::INFINITY;
        for s in [1.0, 0.5, 0.25, 0.1, 0.05] {
            let y_hat = vec2(s, 0.0);
            let y_tilde = reconciled_quartic(&y_hat);
            let ball = guarantee_ball(&y_hat, &y_tilde, &sys, &defaults()).unwrap();
            assert!(ball.radius.is_finite());
            // Closed form along this homotopy: bisector at height s/2.
            let expected = ((s / 2.0).powi(2) + (s / 2.0).sqrt()).sqrt();
            assert_relative_eq!(ball.radius, expected, epsilon = 1e-6);
            assert!(
                ball.radius < last,
                "radius did not shrink at s={s}: {} >= {last}",
                ball.radius
            );
            last = ball.radius;
        }
    }

    #[test]
    fn below_curve_base_has_infinite_ball() {
        let sys = fixtures::quartic_system();
        let y_hat = vec2(-1.0, 0.0);
        let y_tilde = reconciled_quartic(&y_hat);
        let ball = guarantee_ball(&y_hat, &y_tilde, &sys, &defaults()).unwrap();
        assert!(ball.radius.is_infinite());
    }

    #[test]
    fn critical_point_moves_continuously_under_small_shifts() {
        let sys = fixtures::quartic_system();
        let y_hat = vec2(1.0, 0.2);
        let y_tilde = reconciled_quartic(&y_hat);
        let ball = guarantee_ball(&y_hat, &y_tilde, &sys, &defaults()).unwrap();
        let shift = 1e-6;
        let y_hat2 = vec2(1.0, 0.2 + shift);
        let y_tilde2 = reconciled_quartic(&y_hat2);
        let ball2 = guarantee_ball(&y_hat2, &y_tilde2, &sys, &defaults()).unwrap();
        let jump = (ball2.y_breve.as_ref().unwrap() - ball.y_breve.as_ref().unwrap()).norm();
        assert!(jump <= 10.0 * shift * 100.0, "critical point jumped {jump}");
        assert!((ball2.radius - ball.radius).abs() <= 1e-3);
    }

    #[test]
    fn in_ball_coherent_points_all_improve() {
        let sys = fixtures::quartic_system();
        let y_hat = vec2(1.0, 0.0);
        let y_tilde = reconciled_quartic(&y_hat);
        let ball = guarantee_ball(&y_hat, &y_tilde, &sys, &defaults()).unwrap();
        let margin = ball.radius * (1.0 - 1e-6);
        let mut state = 0xda3e39cb94b95bdbu64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut accepted = 0;
        while accepted < 200 {
            let t = (2.0 * next() - 1.0) * ball.radius;
            let y = vec2(t.powi(4), t);
            if (&y - &y_tilde).norm() < margin {
                accepted += 1;
                assert!(
                    improvement_holds(&y, &y_hat, &y_tilde),
                    "no improvement at t={t}"
                );
            }
        }
    }

    #[test]
    fn improvement_edge_cases() {
        let y_hat = vec2(1.0, 0.0);
        let y_tilde = vec2(0.0, 0.0);
        assert!(improvement_holds(&y_tilde, &y_hat, &y_tilde));
        assert!(!improvement_holds(&y_hat, &y_hat, &y_tilde));
        // Any point equidistant from both ends fails the strict test.
        let on_bisector = vec2(0.5, 0.7);
        assert!(!improvement_holds(&on_bisector, &y_hat, &y_tilde));
    }

    #[test]
    fn hypograph_guarantee_tags() {
        let sys = fixtures::quartic_system();
        // Below the curve: guaranteed side.
        assert!(hypograph_guarantee(&vec2(-1.0, 0.0), &sys).unwrap());
        // Above the curve: finite ball side.
        assert!(!hypograph_guarantee(&vec2(1.0, 0.0), &sys).unwrap());
        // Mixed system: one epigraph tag spoils the guarantee.
        let series: Vec<String> = ["y1", "y2", "y3"].iter().map(|s| s.to_string()).collect();
        let mixed = ConstraintSystem::parse(series, "y2^4 = y1\ny3 = y1 + y2").unwrap();
        let point = DVector::from_vec(vec![-1.0, 0.0, -5.0]);
        let regions = mixed
            .classify_region(point.as_slice(), crate::constraints::FEASIBILITY_TOL)
            .unwrap();
        assert_eq!(regions[0], Region::Hypograph);
        assert_eq!(regions[1], Region::Epigraph);
        assert!(!hypograph_guarantee(&point, &mixed).unwrap());
    }
}
