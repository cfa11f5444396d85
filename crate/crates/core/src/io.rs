//! Plain-text exports: space-time fields, solution slices and sample dumps.
//!
//! Fields are written as CSV with a coordinate header row
//! (`t,<x_0>,<x_1>,...`) and one row per time level, every number in `{:.16e}`
//! so that reading a file back reproduces the values exactly.

use std::fmt::Write as _;

use crate::error::{Result, StefanError};
use crate::eval::EvalGrid;
use crate::fd::FdSolution;
use crate::scalar::Real;

/// A field on a tensor lattice, `values[i * xs.len() + j]` at `(ts[i], xs[j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTable {
    pub ts: Vec<f64>,
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
}

impl FieldTable {
    pub fn from_lattice<T: Real>(grid: &EvalGrid<T>, values: &[T]) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(StefanError::Shape(format!("{} values for a {}x{} lattice", values.len(), grid.nt, grid.nx)));
        }
        Ok(Self {
            ts: (0..grid.nt).map(|i| grid.t(i).as_f64()).collect(),
            xs: (0..grid.nx).map(|j| grid.x(j).as_f64()).collect(),
            values: values.iter().map(|v| v.as_f64()).collect(),
        })
    }

    /// All stored time levels of a finite-difference solution.
    pub fn from_fd<T: Real>(sol: &FdSolution<T>) -> Self {
        let g = &sol.grid;
        Self {
            ts: sol.snapshots.iter().map(|f| f.time.as_f64()).collect(),
            xs: (0..g.nx).map(|i| g.x(i).as_f64()).collect(),
            values: sol.snapshots.iter().flat_map(|f| f.values.iter().map(|v| v.as_f64())).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(24 * (self.values.len() + self.ts.len() + self.xs.len()));
        s.push('t');
        for x in &self.xs {
            let _ = write!(s, ",{x:.16e}");
        }
        s.push('\n');
        for (i, t) in self.ts.iter().enumerate() {
            let _ = write!(s, "{t:.16e}");
            for v in &self.values[i * self.xs.len()..(i + 1) * self.xs.len()] {
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| StefanError::Parse("empty field file".into()))?;
        let mut cells = header.split(',');
        if cells.next().map(str::trim) != Some("t") {
            return Err(StefanError::Parse("field header must start with `t`".into()));
        }
        let xs = cells.map(parse_f64).collect::<Result<Vec<_>>>()?;
        let mut ts = Vec::new();
        let mut values = Vec::new();
        for (row, line) in lines.enumerate() {
            let mut cells = line.split(',');
            ts.push(parse_f64(cells.next().unwrap_or_default())?);
            let before = values.len();
            for c in cells {
                values.push(parse_f64(c)?);
            }
            if values.len() - before != xs.len() {
                return Err(StefanError::Parse(format!(
                    "row {} has {} values, expected {}",
                    row + 1,
                    values.len() - before,
                    xs.len()
                )));
            }
        }
        Ok(Self { ts, xs, values })
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| StefanError::Parse(format!("not a number: {s:?}")))
}

/// Times of the solution-slice figure.
pub const SLICE_TIMES: [f64; 3] = [0.05, 0.53, 1.0];

/// Tidy slice data `t,x,reference,prediction,abs_error` at the lattice rows
/// closest to each requested time.
pub fn slices_csv<T: Real>(grid: &EvalGrid<T>, reference: &[T], prediction: &[T], times: &[f64]) -> Result<String> {
    if reference.len() != grid.len() || prediction.len() != grid.len() {
        return Err(StefanError::Shape("slice export needs full lattice fields".into()));
    }
    let mut s = String::from("t,x,reference,prediction,abs_error\n");
    for &t in times {
        let i = (0..grid.nt)
            .min_by(|&a, &b| (grid.t(a).as_f64() - t).abs().total_cmp(&(grid.t(b).as_f64() - t).abs()))
            .expect("non-empty lattice");
        for j in 0..grid.nx {
            let k = i * grid.nx + j;
            let (r, p) = (reference[k].as_f64(), prediction[k].as_f64());
            let _ =
                writeln!(s, "{:.16e},{:.16e},{r:.16e},{p:.16e},{:.16e}", grid.t(i).as_f64(), grid.x(j).as_f64(), (p - r).abs());
        }
    }
    Ok(s)
}

/// `key = value` lines.
pub fn key_values(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
