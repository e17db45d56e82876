//! Schema-tagged CSV files and tidy output of values laid out on an
//! environment's discretization grid.
//!
//! Every CSV starts with a `#schema=<name>/<version>` line; readers reject a
//! file whose tag differs from the one they understand.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::crl::ConstraintSignal;
use crate::env::{Env, EnvKind};
use crate::error::{Error, Result};
use crate::metrics::AccrualHistogram;

pub const GRID_SCHEMA: &str = "icl-grid/1";

/// Create (or truncate) `path` and write its schema line.
pub fn create_csv(path: &Path, schema: &str) -> Result<csv::Writer<File>> {
    let mut file = File::create(path)?;
    writeln!(file, "#schema={schema}")?;
    Ok(csv::Writer::from_writer(file))
}

/// Open a CSV written by [`create_csv`], checking its schema line.
pub fn open_csv(path: &Path, schema: &str) -> Result<csv::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let found = first.trim_end();
    if found.strip_prefix("#schema=") != Some(schema) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected schema line #schema={schema}, found {found:?}"),
        });
    }
    Ok(csv::Reader::from_reader(reader))
}

/// Coordinate column names of the environment's grid points.
pub fn grid_columns(env: &Env) -> [&'static str; 2] {
    match env.kind() {
        EnvKind::Gridworld(_) => ["x", "y"],
        EnvKind::CartPole(_) => ["x", "action"],
    }
}

/// Evaluate a constraint on every grid point, in grid order.
pub fn constraint_grid(env: &Env, c: &dyn ConstraintSignal) -> Result<Vec<f64>> {
    env.discretization_grid().points.iter().map(|p| c.value(p)).collect()
}

/// One row per grid point: coordinates, then `value_name`.
pub fn write_grid_values(path: &Path, env: &Env, values: &[f64], value_name: &str) -> Result<()> {
    let grid = env.discretization_grid();
    if values.len() != grid.len() {
        return Err(Error::dim("grid values", grid.len(), values.len()));
    }
    let [cx, cy] = grid_columns(env);
    let mut w = create_csv(path, GRID_SCHEMA)?;
    w.write_record([cx, cy, value_name])?;
    for (p, v) in grid.points.iter().zip(values) {
        w.write_record([p[0].to_string(), p[1].to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_constraint_grid(path: &Path, env: &Env, c: &dyn ConstraintSignal) -> Result<()> {
    write_grid_values(path, env, &constraint_grid(env, c)?, "value")
}

pub fn write_accrual(path: &Path, env: &Env, h: &AccrualHistogram) -> Result<()> {
    write_grid_values(path, env, &h.mass, "mass")
}

/// Read a file written by [`write_grid_values`]: `(coordinates, value)` rows.
pub fn read_grid_values(path: &Path) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut r = open_csv(path, GRID_SCHEMA)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let nums: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 3,
                    message: format!("{f:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if nums.len() != 3 {
            return Err(Error::Parse {
                line: i + 3,
                message: format!("expected 3 fields, got {}", nums.len()),
            });
        }
        out.push((nums[..2].to_vec(), nums[2]));
    }
    Ok(out)
}
