use crate::dynamics::Wheel;
use crate::error::{FtcError, Result};

use super::log::{LogRow, SimLog};

/// Relative radius error counted as settled.
pub const SETTLE_FRACTION: f64 = 0.05;
/// How long the estimate must stay inside the settle band (s).
pub const SETTLE_HOLD: f64 = 1.0;

/// Closed time interval `[start, end]` of a log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    /// The whole log.
    pub fn all(log: &SimLog) -> Self {
        Self::new(
            log.rows.first().map_or(0.0, |r| r.t),
            log.rows.last().map_or(0.0, |r| r.t),
        )
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start - 1e-9 && t <= self.end + 1e-9
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyStats {
    /// Fraction of innovations with `|nu| <= 2 sqrt(S)`.
    pub fraction_within_2sigma: f64,
    /// Radius RMSE over both wheels from the settle time on (the whole window if never settled).
    pub radius_rmse_post_convergence: f64,
    /// First time from which both radii stay within 5% of truth for at least 1 s.
    pub settle_time: Option<f64>,
    /// Innovations counted in the coverage fraction.
    pub samples: usize,
}

fn rows_in(log: &SimLog, window: Window) -> Result<Vec<&LogRow>> {
    if !(window.end >= window.start) {
        return Err(FtcError::InvalidArgument(format!(
            "window [{}, {}] is empty",
            window.start, window.end
        )));
    }
    let rows: Vec<&LogRow> = log.rows.iter().filter(|r| window.contains(r.t)).collect();
    if rows.is_empty() {
        return Err(FtcError::InvalidArgument(format!(
            "window [{}, {}] holds no log rows",
            window.start, window.end
        )));
    }
    Ok(rows)
}

/// Innovation coverage, settle time and post-convergence radius RMSE over `window`.
pub fn consistency_stats(log: &SimLog, window: Window) -> Result<ConsistencyStats> {
    let rows = rows_in(log, window)?;
    let checks: Vec<bool> = rows.iter().filter_map(|r| r.within_two_sigma()).collect();
    let inside = checks.iter().filter(|&&b| b).count();
    let fraction = if checks.is_empty() {
        f64::NAN
    } else {
        inside as f64 / checks.len() as f64
    };

    let both_settled = |r: &LogRow| radius_settled(r, Wheel::Left) && radius_settled(r, Wheel::Right);
    let settle = settle_time_by(&rows, both_settled);
    let from = settle.unwrap_or(window.start);
    let post: Vec<f64> = rows
        .iter()
        .filter(|r| r.t >= from - 1e-9)
        .flat_map(|r| {
            let (rr, rl) = r.r_hat();
            [rr - r.r_true.0, rl - r.r_true.1]
        })
        .collect();
    let rmse = (post.iter().map(|e| e * e).sum::<f64>() / post.len() as f64).sqrt();

    Ok(ConsistencyStats {
        fraction_within_2sigma: fraction,
        radius_rmse_post_convergence: rmse,
        settle_time: settle,
        samples: checks.len(),
    })
}

fn radius_settled(r: &LogRow, wheel: Wheel) -> bool {
    let (est, truth) = match wheel {
        Wheel::Right => (r.mean[3], r.r_true.0),
        Wheel::Left => (r.mean[4], r.r_true.1),
    };
    (est - truth).abs() <= SETTLE_FRACTION * truth.abs()
}

/// First time the predicate holds continuously for [`SETTLE_HOLD`] seconds.
fn settle_time_by(rows: &[&LogRow], ok: impl Fn(&LogRow) -> bool) -> Option<f64> {
    let mut start: Option<f64> = None;
    for r in rows {
        if ok(r) {
            let s = *start.get_or_insert(r.t);
            if r.t - s >= SETTLE_HOLD - 1e-9 {
                return Some(s);
            }
        } else {
            start = None;
        }
    }
    None
}

/// Settle time of one wheel's radius estimate within `window`.
pub fn wheel_settle_time(log: &SimLog, wheel: Wheel, window: Window) -> Result<Option<f64>> {
    let rows = rows_in(log, window)?;
    Ok(settle_time_by(&rows, |r| radius_settled(r, wheel)))
}

/// Root mean square of the distance to the reference over `window`.
pub fn tracking_rms(log: &SimLog, window: Window) -> Result<f64> {
    rows_in(log, window)?;
    let errs = log.tracking_errors()?;
    let sel: Vec<f64> = log
        .rows
        .iter()
        .zip(&errs)
        .filter(|(r, _)| window.contains(r.t))
        .map(|(_, e)| *e)
        .collect();
    Ok((sel.iter().map(|e| e * e).sum::<f64>() / sel.len() as f64).sqrt())
}

/// Fraction of controller ticks where a wheel command sits at the rate bound.
pub fn saturation_duty(log: &SimLog, window: Window, bound: f64) -> Result<f64> {
    let rows = rows_in(log, window)?;
    let ticks: Vec<&&LogRow> = rows.iter().filter(|r| r.controller_ran()).collect();
    if ticks.is_empty() {
        return Ok(0.0);
    }
    let tol = 1e-6 * bound;
    let hits = ticks
        .iter()
        .filter(|r| r.u.omega_right.abs() >= bound - tol || r.u.omega_left.abs() >= bound - tol)
        .count();
    Ok(hits as f64 / ticks.len() as f64)
}

/// Per-row `(right, left)` radius estimate errors.
pub fn radius_error_series(log: &SimLog) -> Vec<(f64, f64, f64)> {
    log.rows
        .iter()
        .map(|r| {
            let (rr, rl) = r.r_hat();
            (r.t, rr - r.r_true.0, rl - r.r_true.1)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub settle_time: Option<f64>,
    pub radius_rmse: f64,
    pub coverage: f64,
    pub tracking_rms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub scenario: u8,
    pub seed: u64,
    /// Statistics window: from the first fault onset (or the start) to the end.
    pub window: Window,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("label,settle_time,radius_rmse,coverage,tracking_rms\n");
        for r in &self.rows {
            let settle = r.settle_time.map_or("nan".to_string(), super::log::format_sig);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.label,
                settle,
                super::log::format_sig(r.radius_rmse),
                super::log::format_sig(r.coverage),
                super::log::format_sig(r.tracking_rms)
            ));
        }
        out
    }
}

/// A short label for a run, such as `imm-ukf/5` or `ekf`.
pub fn run_label(log: &SimLog) -> String {
    let c = &log.config;
    let mut label = c.filter.token().to_string();
    if c.filter.is_imm() {
        label.push_str(&format!("/{}", c.imm_modes));
    }
    if !c.feedback {
        label.push_str("/open");
    }
    if c.controller != super::config::ControllerKind::Nmpc {
        label.push_str(&format!("/{}", c.controller));
    }
    label
}

/// Per-run settle time, radius RMSE, innovation coverage and tracking error.
pub fn compare_runs(logs: &[SimLog]) -> Result<ComparisonTable> {
    let first = logs
        .first()
        .ok_or_else(|| FtcError::InvalidArgument("no logs to compare".into()))?;
    let (scenario, seed) = (first.config.scenario, first.config.seed);
    if let Some(odd) = logs.iter().find(|l| l.config.scenario != scenario || l.config.seed != seed) {
        return Err(FtcError::InvalidArgument(format!(
            "mismatched runs: scenario {} seed {} vs scenario {} seed {}",
            scenario, seed, odd.config.scenario, odd.config.seed
        )));
    }
    let end = logs
        .iter()
        .map(|l| Window::all(l).end)
        .fold(f64::INFINITY, f64::min);
    let window = Window::new(first.config.first_onset().unwrap_or(0.0), end);
    let rows = logs
        .iter()
        .map(|log| {
            let stats = consistency_stats(log, window)?;
            Ok(ComparisonRow {
                label: run_label(log),
                settle_time: stats.settle_time,
                radius_rmse: stats.radius_rmse_post_convergence,
                coverage: stats.fraction_within_2sigma,
                tracking_rms: tracking_rms(log, window)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ComparisonTable {
        scenario,
        seed,
        window,
        rows,
    })
}
