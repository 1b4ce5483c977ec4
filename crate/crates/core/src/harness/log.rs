use std::fmt::Write as _;
use std::path::Path;

use crate::dynamics::{ControlInput, RobotState};
use crate::error::{FtcError, Result};
use crate::estimators::STATE_DIM;

use super::config::ScenarioConfig;

const FIXED_COLUMNS: [&str; 21] = [
    "t", "x", "y", "psi", "rR_true", "rL_true", "wR_cmd", "wL_cmd", "z", "xhat", "yhat", "psihat", "rRhat", "rLhat",
    "P11", "P22", "P33", "P44", "P55", "nu", "S",
];

/// Solver status of ticks where the controller did not run.
pub const HOLD_STATUS: &str = "hold";
/// Suffix appended to the status when the filter diverged on that tick.
pub const DIVERGED_SUFFIX: &str = ";filter_diverged";

/// One filter tick.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub truth: RobotState,
    /// True (right, left) radii.
    pub r_true: (f64, f64),
    /// Wheel-rate command in effect from `t` on.
    pub u: ControlInput,
    /// Speed measurement; NaN on the initial row.
    pub z: f64,
    pub mean: [f64; STATE_DIM],
    pub cov_diag: [f64; STATE_DIM],
    pub nu: f64,
    pub s: f64,
    /// Mode probabilities; empty for single filters.
    pub mu: Vec<f64>,
    pub status: String,
}

impl LogRow {
    pub fn r_hat(&self) -> (f64, f64) {
        (self.mean[3], self.mean[4])
    }

    pub fn filter_diverged(&self) -> bool {
        self.status.ends_with(DIVERGED_SUFFIX)
    }

    pub fn controller_ran(&self) -> bool {
        !self.status.starts_with(HOLD_STATUS)
    }

    pub fn within_two_sigma(&self) -> Option<bool> {
        (self.nu.is_finite() && self.s.is_finite() && self.s > 0.0).then(|| self.nu.abs() <= 2.0 * self.s.sqrt())
    }
}

/// Time-indexed record of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct SimLog {
    pub config: ScenarioConfig,
    pub mode_labels: Vec<String>,
    pub rows: Vec<LogRow>,
}

impl SimLog {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.t)
    }

    /// Distance from the truth position to the reference at each row.
    pub fn tracking_errors(&self) -> Result<Vec<f64>> {
        let reference = self.config.path.reference()?;
        Ok(self
            .rows
            .iter()
            .map(|r| {
                let p = reference.sample(r.t);
                (r.truth.x - p.x).hypot(r.truth.y - p.y)
            })
            .collect())
    }

    pub fn header(&self) -> Vec<String> {
        header(self.mode_labels.len())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for row in &self.rows {
            let mut fields: Vec<f64> = vec![
                row.t,
                row.truth.x,
                row.truth.y,
                row.truth.psi,
                row.r_true.0,
                row.r_true.1,
                row.u.omega_right,
                row.u.omega_left,
                row.z,
            ];
            fields.extend_from_slice(&row.mean);
            fields.extend_from_slice(&row.cov_diag);
            fields.push(row.nu);
            fields.push(row.s);
            fields.extend_from_slice(&row.mu);
            for f in fields {
                out.push_str(&format_sig(f));
                out.push(',');
            }
            out.push_str(&row.status);
            out.push('\n');
        }
        out
    }
}

pub fn header(modes: usize) -> Vec<String> {
    let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.extend((1..=modes).map(|k| format!("mu{k}")));
    cols.push("solver_status".into());
    cols
}

/// Write the log as CSV with 9 significant digits per float.
pub fn export_csv(log: &SimLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, log.to_csv_string()).map_err(|e| FtcError::io(path, e))
}

/// Read a CSV written by [`export_csv`].
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| FtcError::io(path, e))?;
    parse_csv(&text)
}

/// Parse log rows, checking the header against the column schema.
pub fn parse_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    let head: Vec<&str> = lines
        .next()
        .ok_or_else(|| FtcError::Parse("empty CSV".into()))?
        .split(',')
        .collect();
    let modes = head.len().checked_sub(FIXED_COLUMNS.len() + 1).ok_or_else(|| {
        FtcError::Parse(format!("header has {} columns, expected at least {}", head.len(), FIXED_COLUMNS.len() + 1))
    })?;
    let expected = header(modes);
    if let Some((got, want)) = head.iter().zip(&expected).find(|(g, w)| **g != w.as_str()) {
        return Err(FtcError::Parse(format!("unexpected column '{got}', expected '{want}'")));
    }

    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != expected.len() {
            return Err(FtcError::Parse(format!(
                "row {} has {} fields, expected {}",
                i + 1,
                cells.len(),
                expected.len()
            )));
        }
        let num = |c: usize| -> Result<f64> {
            cells[c]
                .parse()
                .map_err(|_| FtcError::Parse(format!("row {}: bad number '{}' in column {}", i + 1, cells[c], expected[c])))
        };
        let mut mean = [0.0; STATE_DIM];
        let mut cov_diag = [0.0; STATE_DIM];
        for k in 0..STATE_DIM {
            mean[k] = num(9 + k)?;
            cov_diag[k] = num(14 + k)?;
        }
        rows.push(LogRow {
            t: num(0)?,
            truth: RobotState::new(num(1)?, num(2)?, num(3)?),
            r_true: (num(4)?, num(5)?),
            u: ControlInput::new(num(6)?, num(7)?),
            z: num(8)?,
            mean,
            cov_diag,
            nu: num(19)?,
            s: num(20)?,
            mu: (0..modes).map(|k| num(21 + k)).collect::<Result<_>>()?,
            status: cells[cells.len() - 1].to_string(),
        });
    }
    Ok(rows)
}

/// Shortest `%.9g`-style rendering: 9 significant digits, trailing zeros dropped.
pub fn format_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let mut s = String::new();
        write!(s, "{v:.decimals$}").expect("write to string");
        trim_zeros(&s)
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}
