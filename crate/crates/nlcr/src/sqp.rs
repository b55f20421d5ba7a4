//! Equality-constrained sequential quadratic programming.
//!
//! Each iteration solves the KKT system of a quadratic subproblem for a
//! search direction, globalises it with a backtracking Armijo line search on
//! the L1 merit function `φ(y) = f(y) + ρ‖g(y)‖₁`, and maintains a dense
//! Hessian approximation via Powell-damped BFGS updates starting from the
//! identity. Convergence requires both stationarity `‖∇f − J λ‖₂ ≤ ε₁`
//! (with the multipliers of the last subproblem) and feasibility
//! `‖g‖₂ ≤ ε₂`, tested before each step so a stationary feasible start
//! exits untouched at iteration zero.
//!
//! Everything is deterministic: no randomised pivoting, no parallel
//! reductions; identical inputs produce bitwise-identical iterates.

use nalgebra::{DMatrix, DVector};

use crate::constraints::ConstraintOracle;

/// Objective oracle: value and gradient, `None` when evaluation fails at a
/// point (the line search treats that as merit `+∞` and backtracks).
pub trait Objective {
    fn value(&self, y: &DVector<f64>) -> Option<f64>;
    fn gradient(&self, y: &DVector<f64>) -> Option<DVector<f64>>;
}

/// Squared Euclidean distance to a fixed centre: `f(y) = ‖y − c‖²`.
pub struct SquaredDistance {
    pub center: DVector<f64>,
}

impl Objective for SquaredDistance {
    fn value(&self, y: &DVector<f64>) -> Option<f64> {
        Some((y - &self.center).norm_squared())
    }

    fn gradient(&self, y: &DVector<f64>) -> Option<DVector<f64>> {
        Some(2.0 * (y - &self.center))
    }
}

/// Solver tolerances and line-search controls.
#[derive(Debug, Clone, Copy)]
pub struct SqpSettings {
    /// ε₁: bound on the stationarity norm ‖∇f − Jλ‖₂.
    pub eps_stationarity: f64,
    /// ε₂: bound on the feasibility norm ‖g‖₂.
    pub eps_feasibility: f64,
    /// Iteration cap K.
    pub max_iterations: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    /// Smallest step length before the line search gives up.
    pub min_step: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        SqpSettings {
            eps_stationarity: 1e-8,
            eps_feasibility: 1e-8,
            max_iterations: 500,
            armijo_c1: 1e-4,
            min_step: 1e-12,
        }
    }
}

/// A solve request: oracles, start point, controls.
pub struct SqpProblem<'a> {
    pub objective: &'a dyn Objective,
    pub constraints: &'a dyn ConstraintOracle,
    pub start: DVector<f64>,
    pub settings: SqpSettings,
}

/// Terminal state of a solve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SqpStatus {
    Converged,
    MaxIterations,
    /// The quadratic subproblem was unsolvable; `constraint` is the index of
    /// the first constraint whose Jacobian row is linearly dependent on its
    /// predecessors (or the weakest row when the solve failed outright).
    QpFailure { constraint: usize },
    LineSearchFailure,
}

/// Solution plus diagnostics. On non-converged statuses the fields carry the
/// best iterate reached.
#[derive(Debug, Clone)]
pub struct SqpResult {
    pub solution: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub iterations: usize,
    pub status: SqpStatus,
    pub final_kkt_norm: f64,
    pub final_feas_norm: f64,
    /// Merit value (before, after) per accepted step, both under the ρ in
    /// force for that step.
    pub merit_history: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SqpError {
    #[error("oracle evaluation failed at the start point: {0}")]
    StartPoint(String),
    #[error("start point has {got} entries, constraint system has {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
}

struct Point {
    y: DVector<f64>,
    f: f64,
    grad: DVector<f64>,
    g: DVector<f64>,
    /// n×C, one column per constraint.
    j: DMatrix<f64>,
}

fn eval_point(
    objective: &dyn Objective,
    constraints: &dyn ConstraintOracle,
    y: DVector<f64>,
) -> Option<Point> {
    let f = objective.value(&y)?;
    let grad = objective.gradient(&y)?;
    let g = constraints.residuals(&y).ok()?;
    let j = constraints.jacobian(&y).ok()?;
    if !f.is_finite()
        || grad.iter().any(|v| !v.is_finite())
        || g.iter().any(|v| !v.is_finite())
        || j.iter().any(|v| !v.is_finite())
    {
        return None;
    }
    Some(Point { y, f, grad, g, j })
}

/// Solves the equality-constrained quadratic subproblem
/// `min ½dᵀBd + gradᵀd  s.t.  J d = −g`
/// through its KKT system `[B Jᵀ; J 0]·[d; −λ] = [−grad; −g]`, so that
/// `B d + grad = Jᵀλ`.
///
/// `j` has one row per constraint (C×n). Rank of `j` is pre-checked by an
/// unpivoted Cholesky factorization of `J Jᵀ`; a collapsed pivot identifies
/// the first row that is linearly dependent on its predecessors.
pub fn solve_qp_subproblem(
    b: &DMatrix<f64>,
    grad: &DVector<f64>,
    g: &DVector<f64>,
    j: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>), SqpStatus> {
    let n = b.nrows();
    let c = j.nrows();

    // Equilibrate the constraint rows to unit norm. The feasible set is
    // unchanged and the multipliers rescale back exactly, but the rank
    // pre-check then measures genuine deficiency instead of scale spread
    // between constraints, and the bordered solve stays well conditioned.
    let mut row_scale = vec![1.0f64; c];
    let mut j_s = j.clone();
    let mut g_s = g.clone();
    for k in 0..c {
        let norm = j.row(k).norm();
        if norm == 0.0 {
            return Err(SqpStatus::QpFailure { constraint: k });
        }
        row_scale[k] = norm;
        for i in 0..n {
            j_s[(k, i)] /= norm;
        }
        g_s[k] /= norm;
    }

    let weakest = if c > 0 {
        let m = &j_s * j_s.transpose();
        let scale = (0..c).map(|i| m[(i, i)]).fold(0.0f64, f64::max);
        let threshold = 1e-12 * scale;
        let mut l = DMatrix::zeros(c, c);
        let mut weakest = (0usize, f64::INFINITY);
        for k in 0..c {
            let mut pivot = m[(k, k)];
            for t in 0..k {
                pivot -= l[(k, t)] * l[(k, t)];
            }
            if pivot <= threshold {
                return Err(SqpStatus::QpFailure { constraint: k });
            }
            if pivot < weakest.1 {
                weakest = (k, pivot);
            }
            l[(k, k)] = pivot.sqrt();
            for r in (k + 1)..c {
                let mut v = m[(r, k)];
                for t in 0..k {
                    v -= l[(r, t)] * l[(k, t)];
                }
                l[(r, k)] = v / l[(k, k)];
            }
        }
        weakest.0
    } else {
        0
    };

    let dim = n + c;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(b);
    if c > 0 {
        kkt.view_mut((0, n), (n, c)).copy_from(&j_s.transpose());
        kkt.view_mut((n, 0), (c, n)).copy_from(&j_s);
    }
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        rhs[i] = -grad[i];
    }
    for i in 0..c {
        rhs[n + i] = -g_s[i];
    }

    let rhs_scale = rhs.norm().max(1.0);
    let accept = |x: &DVector<f64>| (&kkt * x - &rhs).norm() / rhs_scale <= 1e-10;

    let lu_solution = kkt.clone().lu().solve(&rhs);
    let x = match lu_solution {
        Some(x) if x.iter().all(|v| v.is_finite()) && accept(&x) => x,
        _ => {
            let svd = kkt.clone().svd(true, true);
            match svd.solve(&rhs, 1e-13) {
                Ok(x) if x.iter().all(|v| v.is_finite()) && accept(&x) => x,
                _ => return Err(SqpStatus::QpFailure { constraint: weakest }),
            }
        }
    };

    let d = DVector::from_fn(n, |i, _| x[i]);
    // The block solve produces ν = −λ, in the equilibrated row scaling.
    let lambda = DVector::from_fn(c, |i, _| -x[n + i] / row_scale[i]);
    Ok((d, lambda))
}

/// Runs the SQP loop on `p`.
///
/// Oracle failures at trial points shrink the line-search step; only a
/// failure at the start point is a hard error.
pub fn sqp_solve(p: &SqpProblem<'_>) -> Result<SqpResult, SqpError> {
    let s = &p.settings;
    if !(s.eps_stationarity > 0.0) || !(s.eps_feasibility > 0.0) {
        return Err(SqpError::InvalidSettings(
            "tolerances must be positive".into(),
        ));
    }
    if s.max_iterations < 1 {
        return Err(SqpError::InvalidSettings(
            "max_iterations must be at least 1".into(),
        ));
    }
    let n = p.constraints.dim();
    let c = p.constraints.count();
    if p.start.len() != n {
        return Err(SqpError::Dimension {
            got: p.start.len(),
            expected: n,
        });
    }

    let mut pt = eval_point(p.objective, p.constraints, p.start.clone())
        .ok_or_else(|| SqpError::StartPoint("objective or constraints undefined".into()))?;
    let mut b = DMatrix::identity(n, n);
    let mut lambda = DVector::zeros(c);
    let mut rho = 0.0f64;
    let mut merit_history = Vec::new();

    macro_rules! finish {
        ($status:expr, $k:expr, $kkt:expr, $feas:expr) => {
            return Ok(SqpResult {
                solution: pt.y.clone(),
                multipliers: lambda.clone(),
                iterations: $k,
                status: $status,
                final_kkt_norm: $kkt,
                final_feas_norm: $feas,
                merit_history,
            })
        };
    }

    for k in 0..=s.max_iterations {
        let kkt_norm = (&pt.grad - &pt.j * &lambda).norm();
        let feas_norm = pt.g.norm();
        if kkt_norm <= s.eps_stationarity && feas_norm <= s.eps_feasibility {
            finish!(SqpStatus::Converged, k, kkt_norm, feas_norm);
        }
        if k == s.max_iterations {
            finish!(SqpStatus::MaxIterations, k, kkt_norm, feas_norm);
        }

        let j_rows = pt.j.transpose();
        let (d, new_lambda) = match solve_qp_subproblem(&b, &pt.grad, &pt.g, &j_rows) {
            Ok(sol) => sol,
            Err(status) => finish!(status, k, kkt_norm, feas_norm),
        };
        lambda = new_lambda;
        rho = rho.max(2.0 * lambda.amax());

        let g_l1 = pt.g.iter().map(|v| v.abs()).sum::<f64>();
        let merit_0 = pt.f + rho * g_l1;
        // Directional derivative of the merit along d; negative before
        // convergence because J d = −g kills the penalty term at rate ‖g‖₁.
        let slope = pt.grad.dot(&d) - rho * g_l1;

        let mut alpha = 1.0f64;
        let accepted = loop {
            let trial_y = &pt.y + alpha * &d;
            let trial = eval_point(p.objective, p.constraints, trial_y);
            if let Some(trial) = trial {
                let trial_l1 = trial.g.iter().map(|v| v.abs()).sum::<f64>();
                let merit_trial = trial.f + rho * trial_l1;
                if merit_trial <= merit_0 + s.armijo_c1 * alpha * slope {
                    merit_history.push((merit_0, merit_trial));
                    break Some(trial);
                }
            }
            alpha *= 0.5;
            if alpha < s.min_step {
                break None;
            }
        };
        let new_pt = match accepted {
            Some(pt) => pt,
            None => finish!(SqpStatus::LineSearchFailure, k, kkt_norm, feas_norm),
        };

        // Powell-damped BFGS on the Lagrangian gradient difference, holding
        // the freshly computed multipliers fixed at both points.
        let step = &new_pt.y - &pt.y;
        let grad_l_new = &new_pt.grad - &new_pt.j * &lambda;
        let grad_l_old = &pt.grad - &pt.j * &lambda;
        let q = grad_l_new - grad_l_old;
        let bs = &b * &step;
        let s_bs = step.dot(&bs);
        if s_bs > 0.0 {
            let s_q = step.dot(&q);
            let theta = if s_q >= 0.2 * s_bs {
                1.0
            } else {
                0.8 * s_bs / (s_bs - s_q)
            };
            let q_tilde = theta * &q + (1.0 - theta) * &bs;
            let s_qt = step.dot(&q_tilde);
            if s_qt > 0.0 {
                b -= (&bs * bs.transpose()) / s_bs;
                b += (&q_tilde * q_tilde.transpose()) / s_qt;
            }
        }
        pt = new_pt;
    }
    unreachable!("loop always returns by k == max_iterations");
}
