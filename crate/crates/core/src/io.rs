//! Field CSV files, the JSON report and PGM renders.
//!
//! A field file starts with `nx,ny,x0,y0,x1,y1` followed by `ny` rows of `nx`
//! values, row-major with y increasing. Values are written in the shortest
//! form that parses back to the same `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffeo::{pullback_density, DiffeoError, Diffeomorphism};
use crate::field::{FieldError, ScalarField};
use crate::grid::{Grid, GridError};
use crate::report::SolveReport;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}:{line}:{column}: density must be positive, found {value}")]
    NonPositive { path: PathBuf, line: usize, column: usize, value: f64 },
    #[error("{path}: {message}")]
    Shape { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Diffeo(#[from] DiffeoError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

pub fn parse_field_csv(text: &str, path: &Path) -> Result<ScalarField, IoError> {
    let parse_err = |line: usize, column: usize, message: String| IoError::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, 1, "empty file".into()))?;
    let cells: Vec<&str> = header.split(',').map(str::trim).collect();
    if cells.len() != 6 {
        return Err(parse_err(hline, 1, format!("header needs nx,ny,x0,y0,x1,y1, found {} entries", cells.len())));
    }
    let count =
        |c: usize| cells[c].parse::<usize>().map_err(|e| parse_err(hline, c + 1, format!("`{}`: {e}", cells[c])));
    let (nx, ny) = (count(0)?, count(1)?);
    let mut bounds = [0.0; 4];
    for (j, b) in bounds.iter_mut().enumerate() {
        *b = cells[j + 2].parse::<f64>().map_err(|e| parse_err(hline, j + 3, format!("`{}`: {e}", cells[j + 2])))?;
    }
    let grid = Grid::new(&[nx, ny], &[bounds[0], bounds[1]], &[bounds[2] - bounds[0], bounds[3] - bounds[1]])?;
    let mut values = Vec::with_capacity(nx * ny);
    let mut rows = 0;
    for (line, text) in lines {
        rows += 1;
        if rows > ny {
            return Err(IoError::Shape {
                path: path.to_path_buf(),
                message: format!("line {line}: more than {ny} rows"),
            });
        }
        let before = values.len();
        for (c, cell) in text.split(',').enumerate() {
            let cell = cell.trim();
            let v = cell.parse::<f64>().map_err(|e| parse_err(line, c + 1, format!("`{cell}`: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, c + 1, format!("`{cell}` is not finite")));
            }
            values.push(v);
        }
        if values.len() - before != nx {
            return Err(IoError::Shape {
                path: path.to_path_buf(),
                message: format!("line {line}: expected {nx} values, found {}", values.len() - before),
            });
        }
    }
    if rows != ny {
        return Err(IoError::Shape { path: path.to_path_buf(), message: format!("expected {ny} rows, found {rows}") });
    }
    Ok(ScalarField::new(grid, values)?)
}

pub fn load_field_csv(path: &Path) -> Result<ScalarField, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_field_csv(&text, path)
}

/// Like [`load_field_csv`], rejecting entries that are not strictly positive.
pub fn load_density_csv(path: &Path) -> Result<ScalarField, IoError> {
    let field = load_field_csv(path)?;
    if let Some(i) = field.values().iter().position(|&v| v <= 0.0) {
        let nx = field.grid().shape()[0];
        return Err(IoError::NonPositive {
            path: path.to_path_buf(),
            line: i / nx + 2,
            column: i % nx + 1,
            value: field.values()[i],
        });
    }
    Ok(field)
}

pub fn format_field_csv(field: &ScalarField) -> Result<String, IoError> {
    let grid = *field.grid();
    if grid.n_dim() != 2 {
        return Err(GridError::Dimension(grid.n_dim()).into());
    }
    let b = grid.bounds();
    let (nx, ny) = (grid.shape()[0], grid.shape()[1]);
    let mut out = format!("{nx},{ny},{},{},{},{}\n", b.lower()[0], b.lower()[1], b.upper()[0], b.upper()[1]);
    for row in field.values().chunks(nx) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_field_csv(path: &Path, field: &ScalarField) -> Result<(), IoError> {
    fs::write(path, format_field_csv(field)?).map_err(io_err(path))
}

/// Linear map from field values to gray levels 0..=255.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgmScaling {
    pub min: f64,
    pub max: f64,
}

/// Binary 8-bit PGM with the top image row at the largest y.
pub fn encode_pgm(field: &ScalarField) -> (Vec<u8>, PgmScaling) {
    let grid = field.grid();
    let (nx, ny) = (grid.shape()[0], grid.shape()[1]);
    let scaling = PgmScaling { min: field.min(), max: field.max() };
    let span = scaling.max - scaling.min;
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for row in field.values().chunks(nx).rev() {
        out.extend(row.iter().map(|&v| if span > 0.0 { ((v - scaling.min) / span * 255.0).round() as u8 } else { 0 }));
    }
    (out, scaling)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Render {
    pub file: String,
    pub scaling: PgmScaling,
}

/// The JSON document written next to the fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: SolveReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub renders: Vec<Render>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text =
        serde_json::to_string_pretty(value).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<ReportFile, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

/// Writes `displacement_x.csv`, `displacement_y.csv`, `jacobian.csv`,
/// `report.json` and, with `render`, `jacobian.pgm` and `residual.pgm` into
/// `dir`. Returns the written paths.
pub fn write_outputs(
    dir: &Path,
    report: &SolveReport,
    phi: &Diffeomorphism,
    f: &ScalarField,
    g: &ScalarField,
    render: bool,
) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let grid = *phi.grid();
    let mut written = Vec::new();
    for (axis, name) in ["displacement_x.csv", "displacement_y.csv"].into_iter().enumerate() {
        let comp = ScalarField::new(grid, phi.displacement().component(axis).to_vec())?;
        let path = dir.join(name);
        write_field_csv(&path, &comp)?;
        written.push(path);
    }
    let jacobian = phi.jacobian_determinant()?;
    let path = dir.join("jacobian.csv");
    write_field_csv(&path, &jacobian)?;
    written.push(path);

    let mut renders = Vec::new();
    if render {
        let residual = pullback_density(g, phi)?.zip_with(f, |a, b| a - b)?;
        for (name, field) in [("jacobian.pgm", &jacobian), ("residual.pgm", &residual)] {
            let (bytes, scaling) = encode_pgm(field);
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io_err(&path))?;
            written.push(path);
            renders.push(Render { file: name.to_string(), scaling });
        }
    }
    let path = dir.join("report.json");
    write_json(&path, &ReportFile { report: report.clone(), renders })?;
    written.push(path);
    Ok(written)
}
