//! File I/O: wide forecast/residual CSVs, constraint files, long panel
//! CSVs, and the number formatting shared by every writer.

use std::fs;
use std::io::Write;
use std::path::Path;

use nlcr::constraints::ConstraintSystem;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Incoherent(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Incoherent(_) => 1,
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

/// 17 significant digits; round-trips every finite f64.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reads a wide CSV as strings: header row plus rectangular records, with
/// the line number of each record for error reporting.
pub fn read_table_csv(
    path: &Path,
) -> Result<(Vec<String>, Vec<(u64, Vec<String>)>), CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.is_empty() || header.iter().any(|h| h.is_empty()) {
        return Err(CliError::Input(format!(
            "{}: header must name every column",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(CliError::Input(format!(
                "{}: line {line}: expected {} fields, got {}",
                path.display(),
                header.len(),
                record.len()
            )));
        }
        rows.push((line, record.iter().map(|s| s.to_string()).collect()));
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok((header, rows))
}

/// Parses one CSV field as a finite number, reporting the file position on
/// failure.
pub fn parse_field(path: &Path, line: u64, name: &str, field: &str) -> Result<f64, CliError> {
    let v: f64 = field.parse().map_err(|_| {
        CliError::Input(format!(
            "{}: line {line}: column `{name}`: not a number: `{field}`",
            path.display()
        ))
    })?;
    if !v.is_finite() {
        return Err(CliError::Input(format!(
            "{}: line {line}: column `{name}`: non-finite value",
            path.display()
        )));
    }
    Ok(v)
}

/// Reads a wide CSV: header row of series names, one numeric row per
/// record.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let (header, raw) = read_table_csv(path)?;
    let mut rows = Vec::with_capacity(raw.len());
    for (line, record) in raw {
        let mut row = Vec::with_capacity(header.len());
        for (name, field) in header.iter().zip(&record) {
            row.push(parse_field(path, line, name, field)?);
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Parses a constraint file against the series vocabulary.
pub fn read_constraint_file(
    path: &Path,
    series: Vec<String>,
) -> Result<ConstraintSystem, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    ConstraintSystem::parse(series, &text)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Reads a long panel CSV with header `series,horizon,origin,value`.
pub fn read_long_panel(path: &Path) -> Result<Vec<(String, u32, u32, f64)>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header != ["series", "horizon", "origin", "value"] {
        return Err(CliError::Input(format!(
            "{}: header must be `series,horizon,origin,value`, got `{}`",
            path.display(),
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(CliError::Input(format!(
                "{}: line {line}: expected 4 fields, got {}",
                path.display(),
                record.len()
            )));
        }
        let series = record[0].to_string();
        if series.is_empty() {
            return Err(CliError::Input(format!(
                "{}: line {line}: empty series name",
                path.display()
            )));
        }
        let horizon: u32 = record[1].parse().map_err(|_| {
            CliError::Input(format!(
                "{}: line {line}: horizon must be a non-negative integer, got `{}`",
                path.display(),
                &record[1]
            ))
        })?;
        let origin: u32 = record[2].parse().map_err(|_| {
            CliError::Input(format!(
                "{}: line {line}: origin must be a non-negative integer, got `{}`",
                path.display(),
                &record[2]
            ))
        })?;
        let value: f64 = record[3].parse().map_err(|_| {
            CliError::Input(format!(
                "{}: line {line}: value is not a number: `{}`",
                path.display(),
                &record[3]
            ))
        })?;
        if !value.is_finite() {
            return Err(CliError::Input(format!(
                "{}: line {line}: non-finite value",
                path.display()
            )));
        }
        out.push((series, horizon, origin, value));
    }
    if out.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok(out)
}

/// Opens the output sink: a file when a path is given, stdout otherwise.
pub fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => {
            let f = fs::File::create(p)
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            Ok(Box::new(std::io::BufWriter::new(f)))
        }
        None => Ok(Box::new(std::io::BufWriter::new(std::io::stdout()))),
    }
}
