//! Text file formats.
//!
//! * Functional file: comma-separated, first row the grid points, then one
//!   curve per row.
//! * Tabular file: comma-separated with a header row, one subject per row
//!   in the same order as the curves.
//! * Fit file: `key,value` lines followed by a `t,b` table of the slope;
//!   numbers carry 17 significant digits so reloading is exact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dataset::Dataset;
use crate::error::{AdrfError, Result};
use crate::estimators::{AdrfFit, Method, TuningRecord};
use crate::fda::{FunctionalSample, Grid};
use crate::fsw::RhoFamily;
use crate::scalar::Real;

/// Locations and column mapping of a dataset on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub functional: PathBuf,
    pub tabular: PathBuf,
    pub outcome: String,
    /// `None` uses every tabular column other than the outcome.
    pub covariates: Option<Vec<String>>,
}

/// Formats a number with 17 significant digits.
pub fn fmt_num<T: Real>(v: T) -> String {
    format!("{:.16e}", v.to_f64_lossy())
}

fn parse_error(path: &Path, line: usize, column: usize, message: impl Into<String>) -> AdrfError {
    AdrfError::Parse {
        path: path.display().to_string(),
        line,
        column,
        message: message.into(),
    }
}

fn parse_field<T: Real>(path: &Path, line: usize, column: usize, field: &str) -> Result<T> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_error(path, line, column, format!("`{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, column, format!("non-finite value `{field}`")));
    }
    Ok(T::lit(v))
}

fn csv_records(path: &Path, headers: bool) -> Result<(Option<Vec<String>>, Vec<(usize, Vec<String>)>)> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(headers)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let header = if headers {
        Some(
            reader
                .headers()
                .map_err(|e| parse_error(path, 1, 1, e.to_string()))?
                .iter()
                .map(str::to_string)
                .collect(),
        )
    } else {
        None
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line, 1, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

/// Reads a functional file: grid row then one curve per row.
pub fn read_curves<T: Real>(path: &Path) -> Result<Vec<FunctionalSample<T>>> {
    let (_, rows) = csv_records(path, false)?;
    let mut rows = rows.into_iter();
    let (grid_line, grid_row) = rows
        .next()
        .ok_or(AdrfError::EmptyInput("functional file has no grid row"))?;
    let points = grid_row
        .iter()
        .enumerate()
        .map(|(c, f)| parse_field(path, grid_line, c + 1, f))
        .collect::<Result<Vec<T>>>()?;
    let grid = Arc::new(Grid::new(points)?);
    let m = grid.len();
    rows.map(|(line, row)| {
        if row.len() != m {
            return Err(parse_error(
                path,
                line,
                row.len().min(m) + 1,
                format!("expected {m} values, found {}", row.len()),
            ));
        }
        let values = row
            .iter()
            .enumerate()
            .map(|(c, f)| parse_field(path, line, c + 1, f))
            .collect::<Result<Vec<T>>>()?;
        FunctionalSample::new(Arc::clone(&grid), values)
    })
    .collect()
}

pub fn write_curves<T: Real>(path: &Path, curves: &[FunctionalSample<T>]) -> Result<()> {
    let first = curves.first().ok_or(AdrfError::EmptyInput("no curves to write"))?;
    let mut w = BufWriter::new(File::create(path)?);
    write_row(&mut w, first.grid().points())?;
    for c in curves {
        c.check_grid(first)?;
        write_row(&mut w, c.values())?;
    }
    w.flush()?;
    Ok(())
}

fn write_row<T: Real>(w: &mut impl Write, values: &[T]) -> Result<()> {
    let line: Vec<String> = values.iter().map(|&v| fmt_num(v)).collect();
    writeln!(w, "{}", line.join(","))?;
    Ok(())
}

/// A header plus numeric rows.
pub struct Table<T> {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<T>>,
}

pub fn read_table<T: Real>(path: &Path) -> Result<Table<T>> {
    let (header, rows) = csv_records(path, true)?;
    let columns = header.unwrap_or_default();
    if columns.is_empty() {
        return Err(AdrfError::EmptyInput("tabular file has no header"));
    }
    let rows = rows
        .into_iter()
        .map(|(line, row)| {
            if row.len() != columns.len() {
                return Err(parse_error(
                    path,
                    line,
                    row.len().min(columns.len()) + 1,
                    format!("expected {} fields, found {}", columns.len(), row.len()),
                ));
            }
            row.iter()
                .enumerate()
                .map(|(c, f)| parse_field(path, line, c + 1, f))
                .collect()
        })
        .collect::<Result<Vec<Vec<T>>>>()?;
    Ok(Table { columns, rows })
}

fn column_index(columns: &[String], name: &str) -> Result<usize> {
    columns
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| AdrfError::MissingColumn(name.to_string()))
}

pub fn load_dataset<T: Real>(files: &DatasetFiles) -> Result<Dataset<T>> {
    let curves = read_curves::<T>(&files.functional)?;
    let table = read_table::<T>(&files.tabular)?;
    if curves.len() != table.rows.len() {
        return Err(AdrfError::RowMismatch {
            curves: curves.len(),
            rows: table.rows.len(),
        });
    }
    let y_col = column_index(&table.columns, &files.outcome)?;
    let names: Vec<String> = match &files.covariates {
        Some(names) => names.clone(),
        None => table.columns.iter().filter(|c| **c != files.outcome).cloned().collect(),
    };
    let x_cols = names
        .iter()
        .map(|n| column_index(&table.columns, n))
        .collect::<Result<Vec<_>>>()?;
    let n = curves.len();
    let x = DMatrix::from_fn(n, x_cols.len(), |i, j| table.rows[i][x_cols[j]]);
    let y = table.rows.iter().map(|r| r[y_col]).collect();
    Dataset::with_names(curves, x, y, names, files.outcome.clone())
}

/// Writes the curves and the covariate/outcome table of a dataset.
pub fn write_dataset<T: Real>(dataset: &Dataset<T>, functional: &Path, tabular: &Path) -> Result<()> {
    write_curves(functional, dataset.curves())?;
    let mut w = BufWriter::new(File::create(tabular)?);
    let mut header: Vec<&str> = dataset.covariate_names().iter().map(String::as_str).collect();
    header.push(dataset.outcome_name());
    writeln!(w, "{}", header.join(","))?;
    for i in 0..dataset.n() {
        let mut row = dataset.covariate_row(i);
        row.push(dataset.outcome()[i]);
        write_row(&mut w, &row)?;
    }
    w.flush()?;
    Ok(())
}

const FIT_MAGIC: &str = "# adrf fit v1";

fn opt_num<T: Real>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_num)
}

/// Serializes a fit as plain text.
pub fn write_fit_to<T: Real>(fit: &AdrfFit<T>, w: &mut impl Write) -> Result<()> {
    writeln!(w, "{FIT_MAGIC}")?;
    writeln!(w, "method,{}", fit.method)?;
    writeln!(w, "intercept,{}", fmt_num(fit.intercept))?;
    writeln!(w, "covariate_offset,{}", fmt_num(fit.covariate_offset))?;
    writeln!(w, "q,{}", fit.tuning.q)?;
    writeln!(w, "h,{}", opt_num(fit.tuning.h))?;
    writeln!(w, "k,{}", fit.tuning.k.map_or_else(|| "NA".to_string(), |k| k.to_string()))?;
    writeln!(w, "rho,{}", fit.tuning.rho.map_or_else(|| "NA".to_string(), |r| r.tag().to_string()))?;
    match &fit.theta {
        Some(theta) => {
            let v: Vec<String> = theta.iter().map(|&t| fmt_num(t)).collect();
            writeln!(w, "theta,{}", v.join(","))?;
        }
        None => writeln!(w, "theta,NA")?,
    }
    let c: Vec<String> = fit.coefficients.iter().map(|&v| fmt_num(v)).collect();
    writeln!(w, "coefficients,{}", c.join(","))?;
    writeln!(w, "t,b")?;
    for (&t, &b) in fit.slope.grid().points().iter().zip(fit.slope.values()) {
        writeln!(w, "{},{}", fmt_num(t), fmt_num(b))?;
    }
    Ok(())
}

pub fn write_fit<T: Real>(fit: &AdrfFit<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fit_to(fit, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a fit written by [`write_fit`]. The FPCA is not stored, so the
/// reloaded fit has `fpca = None`; evaluation only needs the slope.
pub fn read_fit<T: Real>(path: &Path) -> Result<AdrfFit<T>> {
    let text = std::fs::read_to_string(path)?;
    parse_fit(path, &text)
}

pub fn parse_fit<T: Real>(path: &Path, text: &str) -> Result<AdrfFit<T>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, l)) if l == FIT_MAGIC => {}
        _ => return Err(parse_error(path, 1, 1, "not an adrf fit file")),
    }
    let mut method = None;
    let mut intercept = None;
    let mut offset = T::zero();
    let mut q = None;
    let mut h = None;
    let mut k = None;
    let mut rho = None;
    let mut theta = None;
    let mut coefficients = Vec::new();
    let mut points = Vec::new();
    let mut values = Vec::new();
    let mut in_curve = false;
    for (line, l) in lines {
        if l.is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.split(',').map(str::trim).collect();
        if in_curve {
            if fields.len() != 2 {
                return Err(parse_error(path, line, 1, "expected `t,b`"));
            }
            points.push(parse_field::<T>(path, line, 1, fields[0])?);
            values.push(parse_field::<T>(path, line, 2, fields[1])?);
            continue;
        }
        let value = |i: usize| parse_field::<T>(path, line, i + 1, fields[i]);
        let rest_is_na = fields.len() == 2 && fields[1] == "NA";
        match fields[0] {
            "method" => {
                method = Some(
                    fields
                        .get(1)
                        .ok_or_else(|| parse_error(path, line, 2, "missing method"))?
                        .parse::<Method>()
                        .map_err(|e| parse_error(path, line, 2, e.to_string()))?,
                )
            }
            "intercept" => intercept = Some(value(1)?),
            "covariate_offset" => offset = value(1)?,
            "q" => {
                q = Some(
                    fields[1]
                        .parse::<usize>()
                        .map_err(|_| parse_error(path, line, 2, "q must be an integer"))?,
                )
            }
            "h" => h = if rest_is_na { None } else { Some(value(1)?) },
            "k" => {
                k = if rest_is_na {
                    None
                } else {
                    Some(
                        fields[1]
                            .parse::<usize>()
                            .map_err(|_| parse_error(path, line, 2, "k must be an integer"))?,
                    )
                }
            }
            "rho" => {
                rho = if rest_is_na {
                    None
                } else {
                    Some(
                        fields[1]
                            .parse::<RhoFamily>()
                            .map_err(|e| parse_error(path, line, 2, e.to_string()))?,
                    )
                }
            }
            "theta" => {
                theta = if rest_is_na {
                    None
                } else {
                    Some((1..fields.len()).map(value).collect::<Result<Vec<T>>>()?)
                }
            }
            "coefficients" => coefficients = (1..fields.len()).map(value).collect::<Result<Vec<T>>>()?,
            "t" => in_curve = true,
            other => return Err(parse_error(path, line, 1, format!("unknown key `{other}`"))),
        }
    }
    let missing = |what: &str| parse_error(path, 0, 0, format!("missing `{what}`"));
    let method = method.ok_or_else(|| missing("method"))?;
    let intercept = intercept.ok_or_else(|| missing("intercept"))?;
    let q = q.ok_or_else(|| missing("q"))?;
    let grid = Arc::new(Grid::new(points)?);
    let slope = FunctionalSample::new(grid, values)?;
    Ok(AdrfFit {
        method,
        intercept,
        covariate_offset: offset,
        coefficients,
        slope,
        theta,
        tuning: TuningRecord { q, h, k, rho },
        fpca: None,
    })
}
