//! The five subcommands. Every command reads files named on the command
//! line, writes CSV or line-oriented text, and maps failures onto the exit
//! contract: 2 for input problems, 3 for numerical failures, 1 when `check`
//! finds incoherent rows.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use nalgebra::DVector;

use nlcr::constraints::Region;
use nlcr::evalstats::{evaluate, ForecastPanel};
use nlcr::guarantee::{guarantee_ball, GuaranteeError};
use nlcr::reconcile::{reconcile, reconcile_batch, WhitenedSystem};
use nlcr::simlab::{run_sim1, run_sim2, CellParams, Sim1Config, Sim2Config, SimError};
use nlcr::sqp::{SqpSettings, SqpStatus};
use nlcr::weights::{ResidualSample, WeightMatrix, WeightTag};

use crate::io::{
    fmt_num, open_output, parse_field, read_constraint_file, read_long_panel, read_matrix_csv,
    read_table_csv, CliError,
};

pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_MAX_ITERATIONS: usize = 500;

#[derive(Args, Debug)]
pub struct SolverArgs {
    /// Stationarity tolerance ε₁ (overrides NLCR_EPS1; default 1e-8).
    #[arg(long)]
    pub eps1: Option<f64>,
    /// Feasibility tolerance ε₂ (overrides NLCR_EPS2; default 1e-8).
    #[arg(long)]
    pub eps2: Option<f64>,
    /// Iteration cap for the solver.
    #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
    pub max_iterations: usize,
}

fn resolve_eps(flag: Option<f64>, var: &str) -> Result<f64, CliError> {
    let value = match flag {
        Some(v) => v,
        None => match std::env::var(var) {
            Ok(text) => text.parse().map_err(|_| {
                CliError::Input(format!("{var}: not a number: `{text}`"))
            })?,
            Err(_) => DEFAULT_EPS,
        },
    };
    if !(value > 0.0) || !value.is_finite() {
        return Err(CliError::Input(format!(
            "tolerance must be positive and finite, got {value}"
        )));
    }
    Ok(value)
}

impl SolverArgs {
    pub fn settings(&self) -> Result<SqpSettings, CliError> {
        if self.max_iterations < 1 {
            return Err(CliError::Input(
                "max-iterations must be at least 1".into(),
            ));
        }
        Ok(SqpSettings {
            eps_stationarity: resolve_eps(self.eps1, "NLCR_EPS1")?,
            eps_feasibility: resolve_eps(self.eps2, "NLCR_EPS2")?,
            max_iterations: self.max_iterations,
            ..SqpSettings::default()
        })
    }
}

fn build_weights(
    tag_text: &str,
    residuals: Option<&Path>,
    header: &[String],
) -> Result<WeightMatrix, CliError> {
    let tag = WeightTag::parse(tag_text)
        .ok_or_else(|| CliError::Input(format!("unknown weights tag `{tag_text}`")))?;
    if tag == WeightTag::Ols {
        return Ok(WeightMatrix::identity(header.len()));
    }
    let path = residuals.ok_or_else(|| {
        CliError::Input(format!(
            "--weights {} requires --residuals",
            tag.as_str()
        ))
    })?;
    let (res_header, rows) = read_matrix_csv(path)?;
    if res_header != header {
        let offender = res_header
            .iter()
            .zip(header)
            .find(|(a, b)| a != b)
            .map(|(a, _)| a.clone())
            .unwrap_or_else(|| "column count".to_string());
        return Err(CliError::Input(format!(
            "{}: residual header does not match the forecast header (first mismatch: `{offender}`)",
            path.display()
        )));
    }
    let sample = ResidualSample::new(res_header, rows)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    WeightMatrix::from_residuals(&sample, tag)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn status_str(status: &SqpStatus) -> String {
    match status {
        SqpStatus::Converged => "converged".into(),
        SqpStatus::MaxIterations => "max-iterations".into(),
        SqpStatus::QpFailure { constraint } => format!("qp-failure-constraint-{}", constraint + 1),
        SqpStatus::LineSearchFailure => "line-search-failure".into(),
    }
}

#[derive(Args, Debug)]
pub struct ReconcileArgs {
    /// Wide CSV of base forecasts: header = series names, one row per
    /// forecast vector.
    #[arg(long)]
    pub forecasts: PathBuf,
    /// Constraint file: one `lhs = rhs` equation per line.
    #[arg(long)]
    pub constraints: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Wide CSV of in-sample residuals (required for wls/shr).
    #[arg(long)]
    pub residuals: Option<PathBuf>,
    /// Weight matrix tag: ols, wls, or shr.
    #[arg(long, default_value = "ols")]
    pub weights: String,
    #[command(flatten)]
    pub solver: SolverArgs,
}

pub fn cmd_reconcile(a: &ReconcileArgs) -> Result<(), CliError> {
    let (header, rows) = read_matrix_csv(&a.forecasts)?;
    let sys = read_constraint_file(&a.constraints, header.clone())?;
    let w = build_weights(&a.weights, a.residuals.as_deref(), &header)?;
    let settings = a.solver.settings()?;
    let batch: Vec<DVector<f64>> = rows
        .iter()
        .map(|r| DVector::from_vec(r.clone()))
        .collect();
    let results = reconcile_batch(&batch, &sys, &w, &settings);

    let mut writer = csv::Writer::from_path(&a.out)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    let mut out_header = header.clone();
    out_header.extend(["status", "iterations", "max_abs_g"].map(String::from));
    for c in 0..sys.count() {
        out_header.push(format!("lambda_{}", c + 1));
    }
    writer
        .write_record(&out_header)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;

    let mut first_failure: Option<String> = None;
    for (row, result) in rows.iter().zip(&results) {
        let mut record: Vec<String> = Vec::with_capacity(out_header.len());
        match result {
            Ok(r) => {
                record.extend(r.y_tilde.iter().map(|&v| fmt_num(v)));
                record.push(status_str(&r.solver.status));
                record.push(r.solver.iterations.to_string());
                record.push(fmt_num(r.coherence.max_abs_residual));
                record.extend(r.lambda.iter().map(|&v| fmt_num(v)));
                if !r.converged() && first_failure.is_none() {
                    first_failure = Some(format!(
                        "solver did not converge: {}",
                        status_str(&r.solver.status)
                    ));
                }
            }
            Err(e) => {
                record.extend(row.iter().map(|&v| fmt_num(v)));
                record.push("error".into());
                record.push("0".into());
                record.push("nan".into());
                record.extend(std::iter::repeat("nan".into()).take(sys.count()));
                if first_failure.is_none() {
                    first_failure = Some(e.to_string());
                }
            }
        }
        writer
            .write_record(&record)
            .map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    }
    writer
        .flush()
        .map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;

    match first_failure {
        Some(msg) => Err(CliError::Numerical(msg)),
        None => Ok(()),
    }
}

#[derive(Args, Debug)]
pub struct BallArgs {
    /// Wide CSV with exactly one base-forecast row.
    #[arg(long)]
    pub forecasts: PathBuf,
    #[arg(long)]
    pub constraints: PathBuf,
    /// Change to whitened coordinates (W^{-1/2}) before the ball
    /// construction; requires --residuals unless --weights ols.
    #[arg(long)]
    pub whiten: bool,
    #[arg(long)]
    pub residuals: Option<PathBuf>,
    #[arg(long, default_value = "ols")]
    pub weights: String,
    /// Output path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

pub fn cmd_ball(a: &BallArgs) -> Result<(), CliError> {
    let (header, rows) = read_matrix_csv(&a.forecasts)?;
    if rows.len() != 1 {
        return Err(CliError::Input(format!(
            "ball needs exactly one forecast row, got {}",
            rows.len()
        )));
    }
    let sys = read_constraint_file(&a.constraints, header.clone())?;
    let settings = a.solver.settings()?;
    let y_hat = DVector::from_vec(rows[0].clone());

    let regions = sys
        .classify_region(rows[0].as_slice(), settings.eps_feasibility)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let texts: Vec<String> = (0..sys.count()).map(|c| sys.text(c).to_string()).collect();

    // All ball geometry runs in an identity metric; --whiten moves to the
    // coordinates where the chosen W is the identity.
    let white = if a.whiten {
        let w = build_weights(&a.weights, a.residuals.as_deref(), &header)?;
        Some(WhitenedSystem::new(sys, &w))
    } else {
        None
    };

    let mut out = open_output(a.out.as_deref())?;
    let emit = |out: &mut Box<dyn Write>, line: &str| -> Result<(), CliError> {
        writeln!(out, "{line}").map_err(|e| CliError::Input(e.to_string()))
    };

    for (c, (region, text)) in regions.iter().zip(&texts).enumerate() {
        let tag = match region {
            Region::Hypograph => "hypograph",
            Region::Epigraph => "epigraph",
            Region::OnManifold => "on-manifold",
        };
        emit(&mut out, &format!("region: constraint {} ({text}): {tag}", c + 1))?;
    }

    let join = |v: &DVector<f64>| {
        v.iter()
            .map(|&x| fmt_num(x))
            .collect::<Vec<_>>()
            .join(",")
    };

    macro_rules! finish_ball {
        ($work_hat:expr, $oracle:expr, $unwhiten:expr) => {{
            let identity = WeightMatrix::identity(header.len());
            let r = reconcile(&$work_hat, $oracle, &identity, &settings)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            if !r.converged() {
                return Err(CliError::Numerical(format!(
                    "projection did not converge: {}",
                    status_str(&r.solver.status)
                )));
            }
            emit(&mut out, &format!("y_tilde: {}", join(&$unwhiten(&r.y_tilde))))?;
            match guarantee_ball(&$work_hat, &r.y_tilde, $oracle, &settings) {
                Ok(ball) => {
                    if ball.radius.is_finite() {
                        emit(&mut out, &format!("radius: {}", fmt_num(ball.radius)))?;
                        let y_breve = ball.y_breve.as_ref().expect("finite ball has y_breve");
                        emit(&mut out, &format!("y_breve: {}", join(&$unwhiten(y_breve))))?;
                        emit(
                            &mut out,
                            &format!("kappa: {}", join(ball.kappa.as_ref().expect("kappa"))),
                        )?;
                        emit(&mut out, &format!("mu: {}", fmt_num(ball.mu.expect("mu"))))?;
                    } else {
                        emit(&mut out, "radius: infinite")?;
                    }
                    emit(
                        &mut out,
                        &format!("hyperplane_offset: {}", fmt_num(ball.hyperplane.offset)),
                    )?;
                    Ok(())
                }
                Err(GuaranteeError::DegenerateHyperplane) => Err(CliError::Input(
                    "degenerate hyperplane: the forecast is already coherent".into(),
                )),
                Err(e) => Err(CliError::Numerical(e.to_string())),
            }
        }};
    }

    match &white {
        Some(white) => {
            let u_hat = white.whiten_point(&y_hat);
            finish_ball!(u_hat, white, |v: &DVector<f64>| white.unwhiten_point(v))
        }
        None => {
            // Identity metric: report coordinates as-is. The single-row
            // shape is preserved for the whitened branch above.
            let sys = read_constraint_file(&a.constraints, header.clone())?;
            finish_ball!(y_hat.clone(), &sys, |v: &DVector<f64>| v.clone())
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(subcommand)]
    pub study: Study,
}

#[derive(clap::Subcommand, Debug)]
pub enum Study {
    /// Quartic-manifold study: improvement proportion per grid truth.
    Sim1 {
        /// Displacement along the unit normal; negative values land below
        /// the curve.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        beta: f64,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = 100)]
        seed: u64,
        /// Noise variance on y1.
        #[arg(long, default_value_t = 0.1)]
        sigma1: f64,
        /// Noise variance on y2.
        #[arg(long, default_value_t = 0.1)]
        sigma2: f64,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ratio-manifold study over the five-parameter grid.
    Sim2 {
        /// Truths drawn per cell, one base forecast each.
        #[arg(long, default_value_t = 1000)]
        truths: usize,
        #[arg(long, default_value_t = 100)]
        seed: u64,
        /// Variance of the noise on the derived y1 base forecast.
        #[arg(long, default_value_t = 100.0)]
        noise_var: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn map_sim_error(e: SimError) -> CliError {
    match e {
        SimError::InvalidConfig(msg) => CliError::Input(msg),
        other => CliError::Numerical(other.to_string()),
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    match &a.study {
        Study::Sim1 {
            beta,
            reps,
            seed,
            sigma1,
            sigma2,
            out,
        } => {
            let cfg = Sim1Config {
                beta: *beta,
                reps: *reps,
                seed: *seed,
                sigma: (*sigma1, *sigma2),
                ..Sim1Config::default()
            };
            let cells = run_sim1(&cfg, None).map_err(map_sim_error)?;
            let mut sink = open_output(out.as_deref())?;
            writeln!(sink, "y2,beta,curvature,proportion_improved,replications")
                .map_err(|e| CliError::Input(e.to_string()))?;
            for cell in cells {
                let CellParams::Quartic { y2, beta } = cell.params else {
                    unreachable!("sim1 emits quartic cells");
                };
                writeln!(
                    sink,
                    "{},{},{},{},{}",
                    fmt_num(y2),
                    fmt_num(beta),
                    fmt_num(cell.mean_curvature.expect("sim1 reports curvature")),
                    fmt_num(cell.proportion_improved),
                    cell.replications
                )
                .map_err(|e| CliError::Input(e.to_string()))?;
            }
            sink.flush().map_err(|e| CliError::Input(e.to_string()))?;
            Ok(())
        }
        Study::Sim2 {
            truths,
            seed,
            noise_var,
            out,
        } => {
            let cfg = Sim2Config {
                truths_per_rho: *truths,
                seed: *seed,
                noise_var: *noise_var,
                ..Sim2Config::default()
            };
            let cells = run_sim2(&cfg, None).map_err(map_sim_error)?;
            let mut sink = open_output(out.as_deref())?;
            writeln!(
                sink,
                "rho,beta,gamma,m,alpha,proportion_improved,replications,redraws"
            )
            .map_err(|e| CliError::Input(e.to_string()))?;
            for cell in cells {
                let CellParams::Ratio {
                    rho,
                    beta,
                    gamma,
                    m,
                    alpha,
                } = cell.params
                else {
                    unreachable!("sim2 emits ratio cells");
                };
                writeln!(
                    sink,
                    "{},{},{},{},{},{},{},{}",
                    fmt_num(rho),
                    fmt_num(beta),
                    fmt_num(gamma),
                    fmt_num(m),
                    fmt_num(alpha),
                    fmt_num(cell.proportion_improved),
                    cell.replications,
                    cell.redraws
                )
                .map_err(|e| CliError::Input(e.to_string()))?;
            }
            sink.flush().map_err(|e| CliError::Input(e.to_string()))?;
            Ok(())
        }
    }
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Long CSV (series,horizon,origin,value) of base forecasts.
    #[arg(long)]
    pub base: PathBuf,
    /// Long CSV of a competing method's forecasts; repeat per method. The
    /// method is named after the file stem.
    #[arg(long, required = true)]
    pub method: Vec<PathBuf>,
    /// Long CSV of observed values covering every forecast index.
    #[arg(long)]
    pub actuals: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn stem(path: &Path) -> Result<String, CliError> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.to_string())
        .ok_or_else(|| CliError::Input(format!("{}: cannot derive a name", path.display())))
}

fn build_panel(
    path: &Path,
    actuals: &BTreeMap<(String, u32, u32), f64>,
) -> Result<ForecastPanel, CliError> {
    let mut panel = ForecastPanel::new();
    for (series, horizon, origin, value) in read_long_panel(path)? {
        let actual = actuals
            .get(&(series.clone(), horizon, origin))
            .ok_or_else(|| {
                CliError::Input(format!(
                    "{}: no actual for (series `{series}`, horizon {horizon}, origin {origin})",
                    path.display()
                ))
            })?;
        panel
            .insert(&series, horizon, origin, value, *actual)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    Ok(panel)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let mut actuals = BTreeMap::new();
    for (series, horizon, origin, value) in read_long_panel(&a.actuals)? {
        if actuals.insert((series.clone(), horizon, origin), value).is_some() {
            return Err(CliError::Input(format!(
                "{}: duplicate actual for (series `{series}`, horizon {horizon}, origin {origin})",
                a.actuals.display()
            )));
        }
    }

    let base_name = stem(&a.base)?;
    let base = build_panel(&a.base, &actuals)?;
    let mut methods = Vec::new();
    for path in &a.method {
        let name = stem(path)?;
        if name == base_name || methods.iter().any(|(n, _)| *n == name) {
            return Err(CliError::Input(format!(
                "duplicate method name `{name}`; rename the input files"
            )));
        }
        methods.push((name, build_panel(path, &actuals)?));
    }
    let method_refs: Vec<(String, &ForecastPanel)> =
        methods.iter().map(|(n, p)| (n.clone(), p)).collect();

    let report = evaluate(&base_name, &base, &method_refs)
        .map_err(|e| CliError::Input(e.to_string()))?;

    let mut out = open_output(a.out.as_deref())?;
    let w = &mut out;
    let io_err = |e: std::io::Error| CliError::Input(e.to_string());

    writeln!(w, "# rmse").map_err(io_err)?;
    writeln!(w, "method,series,rmse").map_err(io_err)?;
    for (method, series, value) in &report.rmse {
        writeln!(w, "{method},{series},{}", fmt_num(*value)).map_err(io_err)?;
    }

    writeln!(w, "# gmrmse").map_err(io_err)?;
    writeln!(w, "method,gmrmse").map_err(io_err)?;
    for (method, value) in &report.gm_rmse {
        writeln!(w, "{method},{}", fmt_num(*value)).map_err(io_err)?;
    }

    writeln!(w, "# dm").map_err(io_err)?;
    writeln!(w, "method,series,horizon,statistic,p_value,degenerate").map_err(io_err)?;
    for row in &report.dm {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            row.method,
            row.series,
            row.horizon,
            fmt_num(row.result.statistic),
            fmt_num(row.result.p_value),
            row.result.degenerate
        )
        .map_err(io_err)?;
    }

    writeln!(w, "# mcb").map_err(io_err)?;
    writeln!(w, "method,mean_rank,lower,upper").map_err(io_err)?;
    for (j, name) in report.mcb_methods.iter().enumerate() {
        let (lo, hi) = report.mcb.intervals[j];
        writeln!(
            w,
            "{name},{},{},{}",
            fmt_num(report.mcb.mean_ranks[j]),
            fmt_num(lo),
            fmt_num(hi)
        )
        .map_err(io_err)?;
    }

    writeln!(w, "# friedman").map_err(io_err)?;
    writeln!(w, "statistic,p_value,degenerate,critical_distance").map_err(io_err)?;
    writeln!(
        w,
        "{},{},{},{}",
        fmt_num(report.mcb.friedman_statistic),
        fmt_num(report.mcb.friedman_p),
        report.mcb.degenerate,
        fmt_num(report.mcb.critical_distance)
    )
    .map_err(io_err)?;

    out.flush().map_err(|e| CliError::Input(e.to_string()))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long)]
    pub forecasts: PathBuf,
    #[arg(long)]
    pub constraints: PathBuf,
    /// Coherence tolerance on max |g|.
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
}

pub fn cmd_check(a: &CheckArgs) -> Result<(), CliError> {
    if !(a.tolerance > 0.0) {
        return Err(CliError::Input("tolerance must be positive".into()));
    }
    // Accept `reconcile` output directly: only columns the constraints
    // reference must be numeric; diagnostic columns pass through unread.
    let (header, raw) = read_table_csv(&a.forecasts)?;
    let sys = read_constraint_file(&a.constraints, header.clone())?;
    let used = sys.variables();
    let mut rows = Vec::with_capacity(raw.len());
    for (line, record) in &raw {
        let mut row = Vec::with_capacity(header.len());
        for (name, field) in header.iter().zip(record) {
            if used.contains(name) {
                row.push(parse_field(&a.forecasts, *line, name, field)?);
            } else {
                row.push(field.parse().unwrap_or(f64::NAN));
            }
        }
        rows.push(row);
    }
    let mut incoherent = 0usize;
    for (i, row) in rows.iter().enumerate() {
        let report = sys
            .check_coherence(row, a.tolerance)
            .map_err(|e| CliError::Numerical(format!("row {}: {e}", i + 1)))?;
        let verdict = if report.coherent {
            "coherent"
        } else {
            incoherent += 1;
            "incoherent"
        };
        println!(
            "row {}: max|g| = {} {verdict}",
            i + 1,
            fmt_num(report.max_abs_residual)
        );
    }
    if incoherent > 0 {
        return Err(CliError::Incoherent(format!(
            "{incoherent} of {} rows incoherent at tolerance {}",
            rows.len(),
            a.tolerance
        )));
    }
    println!("all {} rows coherent", rows.len());
    Ok(())
}
