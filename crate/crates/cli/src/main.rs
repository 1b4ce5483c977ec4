use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ftc_core::harness::{
    compare_runs, consistency_stats, export_csv, parse_key_values, run_label, run_many, run_scenario, tracking_rms,
    ControllerKind, FilterChoice, ScenarioConfig, SimLog, Window,
};
use ftc_core::FtcError;

#[derive(Parser, Debug)]
#[command(name = "ftc-sim", version, about = "Closed-loop wheel-fault scenarios for a differential-drive robot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its log as CSV.
    Run {
        #[command(flatten)]
        opts: RunOpts,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every filter on one scenario and write the logs plus a comparison table.
    Compare {
        #[command(flatten)]
        opts: RunOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full scenario grid.
    Sweep {
        #[command(flatten)]
        opts: RunOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
struct RunOpts {
    /// Flat key=value file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<u8>,
    #[arg(long)]
    filter: Option<FilterChoice>,
    #[arg(long)]
    modes: Option<usize>,
    /// on or off
    #[arg(long)]
    feedback: Option<String>,
    #[arg(long)]
    controller: Option<ControllerKind>,
    /// Collocation polynomial degree.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Ramp time origin: onset or absolute.
    #[arg(long)]
    ramp_clock: Option<String>,
}

enum Failure {
    Usage(String),
    Io(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

impl From<FtcError> for Failure {
    fn from(e: FtcError) -> Self {
        match e {
            FtcError::Io { .. } => Failure::Io(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("I/O error on {}: {e}", path.display()))
}

/// Settings loaded from the config file and flags, plus the output path.
struct Resolved {
    cfg: ScenarioConfig,
    /// Keys given explicitly; grid runs keep these fixed.
    explicit: Vec<&'static str>,
    out: Option<PathBuf>,
}

fn resolve(opts: &RunOpts, out: Option<PathBuf>) -> Result<Resolved, Failure> {
    let mut cfg = ScenarioConfig::default();
    let mut explicit = Vec::new();
    let mut file_out = None;
    if let Some(path) = &opts.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        for (key, value) in parse_key_values(&text)? {
            if key == "out" {
                file_out = Some(PathBuf::from(value));
                continue;
            }
            cfg.set(&key, &value)?;
            if let Some(k) = GRID_KEYS.iter().find(|k| **k == key) {
                explicit.push(*k);
            }
        }
    }
    let flags: [(&'static str, Option<String>); 10] = [
        ("scenario", opts.scenario.map(|v| v.to_string())),
        ("filter", opts.filter.map(|v| v.to_string())),
        ("modes", opts.modes.map(|v| v.to_string())),
        ("feedback", opts.feedback.clone()),
        ("controller", opts.controller.map(|v| v.to_string())),
        ("nodes", opts.nodes.map(|v| v.to_string())),
        ("seed", opts.seed.map(|v| v.to_string())),
        ("duration", opts.duration.map(|v| v.to_string())),
        ("horizon", opts.horizon.map(|v| v.to_string())),
        ("ramp_clock", opts.ramp_clock.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
            if GRID_KEYS.contains(&key) {
                explicit.push(key);
            }
        }
    }
    cfg.validate()?;
    Ok(Resolved {
        cfg,
        explicit,
        out: out.or(file_out),
    })
}

/// Keys that `compare` and `sweep` vary; setting one pins it.
const GRID_KEYS: [&str; 5] = ["scenario", "filter", "modes", "feedback", "controller"];

fn summary(log: &SimLog) -> Result<String, Failure> {
    let window = Window::all(log);
    let stats = consistency_stats(log, window)?;
    let rms = tracking_rms(log, window)?;
    let last = log.rows.last().map(|r| r.r_hat()).unwrap_or((f64::NAN, f64::NAN));
    let failures = log.rows.iter().filter(|r| r.status.starts_with("controller_failure")).count();
    let diverged = log.rows.iter().filter(|r| r.filter_diverged()).count();
    Ok(format!(
        "scenario {} {}: tracking RMS {:.3} m, 2-sigma coverage {:.3}, final radii ({:.3}, {:.3}), controller failures {}, filter resets {}",
        log.config.scenario,
        run_label(log),
        rms,
        stats.fraction_within_2sigma,
        last.0,
        last.1,
        failures,
        diverged
    ))
}

fn file_name(log: &SimLog) -> String {
    format!("s{}_{}.csv", log.config.scenario, run_label(log).replace('/', "-"))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn run(opts: &RunOpts, out: Option<PathBuf>) -> Result<(), Failure> {
    let r = resolve(opts, out)?;
    let log = run_scenario(&r.cfg)?;
    match &r.out {
        Some(path) => export_csv(&log, path)?,
        None => std::io::stdout()
            .write_all(log.to_csv_string().as_bytes())
            .map_err(|e| Failure::Io(format!("I/O error on stdout: {e}")))?,
    }
    eprintln!("{}", summary(&log)?);
    Ok(())
}

/// Filter variants compared on one scenario; the ramp scenario adds the 5-mode banks.
fn filter_variants(base: &ScenarioConfig, explicit: &[&str]) -> Vec<ScenarioConfig> {
    let mut out = Vec::new();
    for filter in FilterChoice::ALL {
        if explicit.contains(&"filter") && filter != base.filter {
            continue;
        }
        let cfg = base.clone().with_filter(filter);
        if filter.is_imm() && !explicit.contains(&"modes") {
            out.push(cfg.clone().with_modes(4));
            if base.scenario == 4 {
                out.push(cfg.with_modes(5));
            }
        } else {
            out.push(cfg);
        }
    }
    out
}

fn write_group(dir: &Path, logs: &[SimLog]) -> Result<(), Failure> {
    for log in logs {
        let path = dir.join(file_name(log));
        export_csv(log, &path)?;
        eprintln!("{}", summary(log)?);
    }
    let table = compare_runs(logs)?;
    let path = dir.join(format!("s{}_compare.csv", table.scenario));
    write_text(&path, &table.to_csv_string())?;
    println!("{}", path.display());
    print!("{}", table.to_csv_string());
    Ok(())
}

fn collect(configs: &[ScenarioConfig]) -> Result<Vec<SimLog>, Failure> {
    run_many(configs)
        .into_iter()
        .map(|r| r.map_err(Failure::from))
        .collect()
}

fn output_dir(out: Option<PathBuf>) -> Result<PathBuf, Failure> {
    let dir = out.ok_or_else(|| Failure::Usage("--out DIR is required".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    Ok(dir)
}

fn compare(opts: &RunOpts, out: Option<PathBuf>) -> Result<(), Failure> {
    let r = resolve(opts, out)?;
    let dir = output_dir(r.out)?;
    let logs = collect(&filter_variants(&r.cfg, &r.explicit))?;
    write_group(&dir, &logs)
}

/// Every scenario with every filter, feedback on and off, plus the linear MPC
/// runs on the step and ramp faults.
fn sweep_grid(base: &ScenarioConfig, explicit: &[&str]) -> Vec<Vec<ScenarioConfig>> {
    let scenarios: Vec<u8> = if explicit.contains(&"scenario") { vec![base.scenario] } else { vec![1, 2, 3, 4] };
    let mut groups = Vec::new();
    for id in scenarios {
        let mut s = base.clone();
        s.set("scenario", &id.to_string()).expect("scenario id in range");
        let mut group = Vec::new();
        for feedback in [true, false] {
            if explicit.contains(&"feedback") && feedback != base.feedback {
                continue;
            }
            let cfg = s.clone().with_feedback(feedback);
            let mut variants = filter_variants(&cfg, explicit);
            if !feedback {
                variants.retain(|c| c.imm_modes == 4 || !c.filter.is_imm());
            }
            group.extend(variants);
        }
        if !explicit.contains(&"controller") && (id == 2 || id == 4) {
            group.push(s.clone().with_filter(FilterChoice::Ukf).with_controller(ControllerKind::Lmpc));
        }
        groups.push(group);
    }
    groups
}

fn sweep(opts: &RunOpts, out: Option<PathBuf>) -> Result<(), Failure> {
    let r = resolve(opts, out)?;
    let dir = output_dir(r.out)?;
    for group in sweep_grid(&r.cfg, &r.explicit) {
        let logs = collect(&group)?;
        write_group(&dir, &logs)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run { opts, out } => run(&opts, out),
        Command::Compare { opts, out } => compare(&opts, out),
        Command::Sweep { opts, out } => sweep(&opts, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ftc-sim: {f}");
            ExitCode::from(match f {
                Failure::Usage(_) => 1,
                Failure::Io(_) => 2,
            })
        }
    }
}
