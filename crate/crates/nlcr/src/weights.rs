//! Metric matrices W estimated from one-step-ahead in-sample residuals.
//!
//! Three estimators: `ols` (identity), `wls` (diagonal of the residual
//! covariance), `shr` (shrinkage of the full covariance towards its
//! diagonal). The residual covariance is uncentered with divisor T,
//! Ŵ = (1/T) Σ_t ê_t ê_tᵀ. The shrinkage intensity is the correlation-target
//! estimator λ̂ = Σ_{i≠j} Var̂(r̂_ij) / Σ_{i≠j} r̂_ij², clamped to [0, 1],
//! with λ̂ = 1 when the denominator vanishes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Which W estimator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightTag {
    Ols,
    Wls,
    Shr,
}

impl WeightTag {
    pub fn parse(text: &str) -> Option<WeightTag> {
        match text {
            "ols" => Some(WeightTag::Ols),
            "wls" => Some(WeightTag::Wls),
            "shr" => Some(WeightTag::Shr),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeightTag::Ols => "ols",
            WeightTag::Wls => "wls",
            WeightTag::Shr => "shr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WeightError {
    #[error("residual sample needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("residual row {row} has {got} values, expected {expected}")]
    RowLength {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite residual at row {row}, series `{series}`")]
    NonFinite { row: usize, series: String },
    #[error("series `{series}` has zero residual variance; {tag} weights are undefined")]
    ZeroVariance { series: String, tag: &'static str },
    #[error("estimated weight matrix is not positive definite")]
    NotPositiveDefinite,
}

/// T×n matrix of in-sample residuals; rows are time points, columns follow
/// the constraint-system series order.
#[derive(Debug, Clone)]
pub struct ResidualSample {
    data: DMatrix<f64>,
    names: Vec<String>,
}

impl ResidualSample {
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, WeightError> {
        if rows.len() < 2 {
            return Err(WeightError::TooFewRows(rows.len()));
        }
        let n = names.len();
        for (ri, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(WeightError::RowLength {
                    row: ri + 1,
                    got: row.len(),
                    expected: n,
                });
            }
            for (ci, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(WeightError::NonFinite {
                        row: ri + 1,
                        series: names[ci].clone(),
                    });
                }
            }
        }
        let data = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
        Ok(ResidualSample { data, names })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn series(&self) -> &[String] {
        &self.names
    }
}

/// Uncentered residual covariance Ŵ = (1/T) Σ_t ê_t ê_tᵀ.
pub fn estimate_full_cov(r: &ResidualSample) -> DMatrix<f64> {
    let t = r.data.nrows() as f64;
    (r.data.transpose() * &r.data) / t
}

/// Shrinkage intensity towards the diagonal, clamped to [0, 1].
pub fn shrinkage_lambda(r: &ResidualSample) -> Result<f64, WeightError> {
    let covm = estimate_full_cov(r);
    let n = covm.nrows();
    let t = r.data.nrows();
    let sd: Vec<f64> = (0..n).map(|i| covm[(i, i)].sqrt()).collect();
    for (i, s) in sd.iter().enumerate() {
        if *s <= 0.0 {
            return Err(WeightError::ZeroVariance {
                series: r.names[i].clone(),
                tag: "shr",
            });
        }
    }
    // Standardised residuals x_ti = ê_ti / sd_i.
    let xs = DMatrix::from_fn(t, n, |ti, i| r.data[(ti, i)] / sd[i]);
    let tf = t as f64;
    let mut numer = 0.0;
    let mut denom = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let r_ij = covm[(i, j)] / (sd[i] * sd[j]);
            let sum_sq: f64 = (0..t).map(|ti| xs[(ti, i)].powi(2) * xs[(ti, j)].powi(2)).sum();
            let var_r = (sum_sq - tf * r_ij * r_ij) / (tf * (tf - 1.0));
            numer += var_r;
            denom += r_ij * r_ij;
        }
    }
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((numer / denom).clamp(0.0, 1.0))
}

/// Symmetric positive-definite metric with a cached Cholesky factorization.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    tag: WeightTag,
    w: DMatrix<f64>,
    lambda: Option<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl WeightMatrix {
    /// The `ols` metric: W = Iₙ.
    pub fn identity(n: usize) -> WeightMatrix {
        let w = DMatrix::identity(n, n);
        let chol = Cholesky::new(w.clone()).expect("identity is positive definite");
        WeightMatrix {
            tag: WeightTag::Ols,
            w,
            lambda: None,
            chol,
        }
    }

    /// Estimates W from residuals under `tag`.
    pub fn from_residuals(r: &ResidualSample, tag: WeightTag) -> Result<WeightMatrix, WeightError> {
        let n = r.names.len();
        let (w, lambda) = match tag {
            WeightTag::Ols => (DMatrix::identity(n, n), None),
            WeightTag::Wls => {
                let covm = estimate_full_cov(r);
                for i in 0..n {
                    if covm[(i, i)] <= 0.0 {
                        return Err(WeightError::ZeroVariance {
                            series: r.names[i].clone(),
                            tag: "wls",
                        });
                    }
                }
                (DMatrix::from_fn(n, n, |i, j| if i == j { covm[(i, i)] } else { 0.0 }), None)
            }
            WeightTag::Shr => {
                let lam = shrinkage_lambda(r)?;
                (shrunk_matrix(&estimate_full_cov(r), lam), Some(lam))
            }
        };
        let chol = Cholesky::new(w.clone()).ok_or(WeightError::NotPositiveDefinite)?;
        Ok(WeightMatrix {
            tag,
            w,
            lambda,
            chol,
        })
    }

    pub fn tag(&self) -> WeightTag {
        self.tag
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// λ̂ for `shr`; absent otherwise.
    pub fn shrinkage(&self) -> Option<f64> {
        self.lambda
    }

    /// Solves W x = b.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// W x.
    pub fn multiply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x
    }

    /// Lower-triangular factor L with W = L Lᵀ, used for whitening.
    pub fn cholesky_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// λ·diag(cov) + (1−λ)·cov.
fn shrunk_matrix(cov: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let n = cov.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            cov[(i, i)]
        } else {
            (1.0 - lambda) * cov[(i, j)]
        }
    })
}
