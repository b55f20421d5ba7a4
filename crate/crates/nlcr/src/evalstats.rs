//! Forecast-accuracy evaluation: combined RMSE, geometric-mean relative
//! accuracy, Diebold–Mariano pairwise tests, and mean-rank comparison with
//! the Nemenyi critical distance.
//!
//! Conventions fixed here: the DM long-run variance uses the rectangular
//! (truncated) kernel with h−1 autocovariance lags, the
//! Harvey–Leybourne–Newbold small-sample factor multiplies the statistic,
//! and p-values come from the two-sided Normal reference. A non-positive
//! variance estimate (possible under the rectangular kernel) is treated as
//! the degenerate zero-variance case. DM rows need at least five origins.

use std::collections::BTreeMap;

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("empty selection")]
    EmptySelection,
    #[error("series `{0}` missing from panel")]
    MissingSeries(String),
    #[error("panels do not cover the same index set: {0}")]
    IndexMismatch(String),
    #[error("base RMSE is zero for series `{0}`")]
    ZeroBaseRmse(String),
    #[error("duplicate panel entry (series `{series}`, horizon {horizon}, origin {origin})")]
    DuplicateEntry {
        series: String,
        horizon: u32,
        origin: u32,
    },
    #[error("loss sequences have different lengths ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least {minimum} observations, got {got}")]
    TooFewObservations { got: usize, minimum: usize },
    #[error("invalid horizon: {0}")]
    InvalidHorizon(String),
    #[error("need at least {minimum} {what}, got {got}")]
    TooFew {
        what: &'static str,
        got: usize,
        minimum: usize,
    },
    #[error("critical values tabulated only for 2..=20 methods, got {0}")]
    TooManyMethods(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Forecast/actual pairs indexed by (series, horizon, origin); origin
/// counts may differ across horizons.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForecastPanel {
    entries: BTreeMap<(String, u32, u32), (f64, f64)>,
}

impl ForecastPanel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        series: &str,
        horizon: u32,
        origin: u32,
        forecast: f64,
        actual: f64,
    ) -> Result<(), EvalError> {
        if !forecast.is_finite() || !actual.is_finite() {
            return Err(EvalError::NonFinite(format!(
                "entry (series `{series}`, horizon {horizon}, origin {origin})"
            )));
        }
        let key = (series.to_string(), horizon, origin);
        if self.entries.contains_key(&key) {
            return Err(EvalError::DuplicateEntry {
                series: series.to_string(),
                horizon,
                origin,
            });
        }
        self.entries.insert(key, (forecast, actual));
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn series(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.keys().map(|(s, _, _)| s.clone()).collect();
        out.dedup();
        out
    }

    /// Horizons present for a series, ascending.
    pub fn horizons(&self, series: &str) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .entries
            .keys()
            .filter(|(s, _, _)| s == series)
            .map(|&(_, h, _)| h)
            .collect();
        out.dedup();
        out
    }

    /// Forecast errors (forecast − actual) for one (series, horizon),
    /// ordered by origin.
    pub fn errors(&self, series: &str, horizon: u32) -> Vec<f64> {
        self.entries
            .range((series.to_string(), horizon, 0)..=(series.to_string(), horizon, u32::MAX))
            .map(|(_, &(f, a))| f - a)
            .collect()
    }

    /// Squared errors keyed by the full index, for rank-based comparisons.
    pub fn squared_errors(&self) -> BTreeMap<(String, u32, u32), f64> {
        self.entries
            .iter()
            .map(|(k, &(f, a))| (k.clone(), (f - a) * (f - a)))
            .collect()
    }

    fn index_set(&self) -> Vec<&(String, u32, u32)> {
        self.entries.keys().collect()
    }
}

/// Combined RMSE of one series over the given horizons: the square root of
/// the average over horizons of the per-horizon mean squared error, so
/// horizons with fewer origins are not down-weighted.
pub fn rmse_combined(
    panel: &ForecastPanel,
    series: &str,
    horizons: &[u32],
) -> Result<f64, EvalError> {
    if horizons.is_empty() {
        return Err(EvalError::EmptySelection);
    }
    let mut sum = 0.0;
    for &h in horizons {
        let errors = panel.errors(series, h);
        if errors.is_empty() {
            return Err(EvalError::InvalidHorizon(format!(
                "no origins for series `{series}` at horizon {h}"
            )));
        }
        let mse = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
        sum += mse;
    }
    Ok((sum / horizons.len() as f64).sqrt())
}

/// Geometric mean over the series set of the ratio RMSE(method)/RMSE(base),
/// each series combined over all of its horizons.
///
/// Computed as exp of the mean log-ratio, so a panel scored against itself
/// is exactly 1.
pub fn gm_rmse(
    method: &ForecastPanel,
    base: &ForecastPanel,
    series: &[String],
) -> Result<f64, EvalError> {
    if series.is_empty() {
        return Err(EvalError::EmptySelection);
    }
    let mut log_sum = 0.0;
    for s in series {
        let horizons = base.horizons(s);
        if horizons.is_empty() {
            return Err(EvalError::MissingSeries(s.clone()));
        }
        if method.horizons(s) != horizons {
            return Err(EvalError::IndexMismatch(format!(
                "series `{s}` has different horizons in the two panels"
            )));
        }
        for &h in &horizons {
            if method.errors(s, h).len() != base.errors(s, h).len() {
                return Err(EvalError::IndexMismatch(format!(
                    "series `{s}` horizon {h} has different origin counts"
                )));
            }
        }
        let rm = rmse_combined(method, s, &horizons)?;
        let rb = rmse_combined(base, s, &horizons)?;
        if rb == 0.0 {
            return Err(EvalError::ZeroBaseRmse(s.clone()));
        }
        log_sum += (rm / rb).ln();
    }
    Ok((log_sum / series.len() as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Set when the long-run variance estimate was non-positive; the
    /// p-value is then 0 (non-zero mean differential) or 1 (all-zero).
    pub degenerate: bool,
}

/// Diebold–Mariano test of equal predictive accuracy for h-step forecasts,
/// on per-origin losses.
pub fn diebold_mariano(loss_a: &[f64], loss_b: &[f64], h: usize) -> Result<DmResult, EvalError> {
    if loss_a.len() != loss_b.len() {
        return Err(EvalError::LengthMismatch {
            a: loss_a.len(),
            b: loss_b.len(),
        });
    }
    let n = loss_a.len();
    if n < 5 {
        return Err(EvalError::TooFewObservations { got: n, minimum: 5 });
    }
    if h < 1 || h > n {
        return Err(EvalError::InvalidHorizon(format!(
            "h must be in 1..={n}, got {h}"
        )));
    }
    let nf = n as f64;
    let hf = h as f64;
    let hln_arg = (nf + 1.0 - 2.0 * hf + hf * (hf - 1.0) / nf) / nf;
    if hln_arg <= 0.0 {
        return Err(EvalError::InvalidHorizon(format!(
            "small-sample factor undefined for h={h}, n={n}"
        )));
    }

    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / nf;
    let gamma = |k: usize| -> f64 {
        d[k..]
            .iter()
            .zip(&d[..n - k])
            .map(|(x, y)| (x - mean) * (y - mean))
            .sum::<f64>()
            / nf
    };
    let mut variance = gamma(0);
    for k in 1..h {
        variance += 2.0 * gamma(k);
    }

    if variance <= 0.0 {
        return Ok(if mean == 0.0 {
            DmResult {
                statistic: 0.0,
                p_value: 1.0,
                degenerate: true,
            }
        } else {
            DmResult {
                statistic: if mean > 0.0 {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                },
                p_value: 0.0,
                degenerate: true,
            }
        });
    }

    let statistic = mean / (variance / nf).sqrt() * hln_arg.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_value = 2.0 * (1.0 - normal.cdf(statistic.abs()));
    Ok(DmResult {
        statistic,
        p_value: p_value.clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Ascending average ranks (1-based); tied values share the mean of the
/// positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("comparable values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &slot in &idx[i..=j] {
            ranks[slot] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (average ranks for ties). NaN when either
/// input has no rank variation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman inputs must have equal length");
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..ra.len() {
        num += (ra[i] - ma) * (rb[i] - mb);
        var_a += (ra[i] - ma) * (ra[i] - ma);
        var_b += (rb[i] - mb) * (rb[i] - mb);
    }
    num / (var_a.sqrt() * var_b.sqrt())
}

/// Nemenyi critical values q₀.₀₅ for k = 2..=20 compared methods.
const NEMENYI_Q_05: [f64; 19] = [
    1.959964233,
    2.343700476,
    2.569032073,
    2.727774717,
    2.849705382,
    2.948319908,
    3.030878867,
    3.101730651,
    3.163684442,
    3.218653901,
    3.268003591,
    3.312738701,
    3.353617959,
    3.391230382,
    3.426041249,
    3.458424619,
    3.488684546,
    3.517072762,
    3.543799277,
];

#[derive(Debug, Clone, PartialEq)]
pub struct McbReport {
    /// Mean rank per method, in input order; lower is better.
    pub mean_ranks: Vec<f64>,
    /// Nemenyi critical distance at α = 0.05.
    pub critical_distance: f64,
    /// mean rank ± CD/2 per method.
    pub intervals: Vec<(f64, f64)>,
    pub friedman_statistic: f64,
    pub friedman_p: f64,
    /// Set when every case ranked all methods identically.
    pub degenerate: bool,
}

/// Mean-rank comparison: `losses[j]` holds method j's losses over N common
/// cases (lower better). Ranks are averaged over cases; the Friedman test
/// and the Nemenyi critical distance qualify the differences.
pub fn mcb_nemenyi(losses: &[Vec<f64>]) -> Result<McbReport, EvalError> {
    let k = losses.len();
    if k < 2 {
        return Err(EvalError::TooFew {
            what: "methods",
            got: k,
            minimum: 2,
        });
    }
    if k > 20 {
        return Err(EvalError::TooManyMethods(k));
    }
    let n = losses[0].len();
    if n < 2 {
        return Err(EvalError::TooFew {
            what: "cases",
            got: n,
            minimum: 2,
        });
    }
    for (j, l) in losses.iter().enumerate() {
        if l.len() != n {
            return Err(EvalError::LengthMismatch { a: n, b: l.len() });
        }
        if let Some(bad) = l.iter().find(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite(format!("loss {bad} of method {j}")));
        }
    }

    let kf = k as f64;
    let nf = n as f64;
    let mut rank_sums = vec![0.0; k];
    let mut any_spread = false;
    let mut case = vec![0.0; k];
    for c in 0..n {
        for j in 0..k {
            case[j] = losses[j][c];
        }
        let ranks = average_ranks(&case);
        if ranks.iter().any(|&r| r != ranks[0]) {
            any_spread = true;
        }
        for j in 0..k {
            rank_sums[j] += ranks[j];
        }
    }
    let mean_ranks: Vec<f64> = rank_sums.iter().map(|s| s / nf).collect();

    let critical_distance = NEMENYI_Q_05[k - 2] * (kf * (kf + 1.0) / (12.0 * nf)).sqrt();
    let intervals: Vec<(f64, f64)> = mean_ranks
        .iter()
        .map(|&r| (r - critical_distance / 2.0, r + critical_distance / 2.0))
        .collect();

    let center = (kf + 1.0) / 2.0;
    let friedman_statistic = 12.0 * nf / (kf * (kf + 1.0))
        * mean_ranks
            .iter()
            .map(|&r| (r - center) * (r - center))
            .sum::<f64>();
    let chi = ChiSquared::new(kf - 1.0).expect("valid dof");
    let friedman_p = (1.0 - chi.cdf(friedman_statistic)).clamp(0.0, 1.0);

    Ok(McbReport {
        mean_ranks,
        critical_distance,
        intervals,
        friedman_statistic,
        friedman_p,
        degenerate: !any_spread,
    })
}

/// One DM row of an accuracy report.
#[derive(Debug, Clone, PartialEq)]
pub struct DmRow {
    pub method: String,
    pub series: String,
    pub horizon: u32,
    pub result: DmResult,
}

/// Full evaluation of named method panels against a base panel.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    /// (method name, series, combined RMSE); the base panel is included
    /// under its own name.
    pub rmse: Vec<(String, String, f64)>,
    /// (method name, gmRMSE vs base).
    pub gm_rmse: Vec<(String, f64)>,
    /// Per (method, series, horizon) DM tests vs base, over origins;
    /// indices with fewer than five origins are skipped.
    pub dm: Vec<DmRow>,
    /// Mean-rank comparison over all methods including the base, cases =
    /// (series, horizon, origin) squared errors.
    pub mcb: McbReport,
    /// Method order used in `mcb`: base first, then methods in input order.
    pub mcb_methods: Vec<String>,
}

/// Evaluates method panels against a base panel sharing its index set.
pub fn evaluate(
    base_name: &str,
    base: &ForecastPanel,
    methods: &[(String, &ForecastPanel)],
) -> Result<AccuracyReport, EvalError> {
    if base.is_empty() {
        return Err(EvalError::EmptySelection);
    }
    if methods.is_empty() {
        return Err(EvalError::TooFew {
            what: "methods",
            got: 0,
            minimum: 1,
        });
    }
    let series = base.series();
    for (name, panel) in methods {
        if panel.index_set() != base.index_set() {
            return Err(EvalError::IndexMismatch(format!(
                "method `{name}` does not cover the base index set"
            )));
        }
    }

    let mut rmse = Vec::new();
    for s in &series {
        let horizons = base.horizons(s);
        rmse.push((base_name.to_string(), s.clone(), rmse_combined(base, s, &horizons)?));
    }
    for (name, panel) in methods {
        for s in &series {
            let horizons = base.horizons(s);
            rmse.push((name.clone(), s.clone(), rmse_combined(panel, s, &horizons)?));
        }
    }

    let mut gm = Vec::new();
    for (name, panel) in methods {
        gm.push((name.clone(), gm_rmse(panel, base, &series)?));
    }

    let mut dm = Vec::new();
    for (name, panel) in methods {
        for s in &series {
            for h in base.horizons(s) {
                let ea = panel.errors(s, h);
                let eb = base.errors(s, h);
                if ea.len() < 5 {
                    continue;
                }
                let la: Vec<f64> = ea.iter().map(|e| e * e).collect();
                let lb: Vec<f64> = eb.iter().map(|e| e * e).collect();
                dm.push(DmRow {
                    method: name.clone(),
                    series: s.clone(),
                    horizon: h,
                    result: diebold_mariano(&la, &lb, h as usize)?,
                });
            }
        }
    }

    let mut mcb_methods = vec![base_name.to_string()];
    let base_sq = base.squared_errors();
    let mut tables: Vec<Vec<f64>> = vec![base_sq.values().copied().collect()];
    for (name, panel) in methods {
        mcb_methods.push(name.clone());
        tables.push(panel.squared_errors().values().copied().collect());
    }
    let mcb = mcb_nemenyi(&tables)?;

    Ok(AccuracyReport {
        rmse,
        gm_rmse: gm,
        dm,
        mcb,
        mcb_methods,
    })
}
