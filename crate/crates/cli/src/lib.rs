//! Experiment runner for the private bilevel solvers: reads a JSON config,
//! builds the problem, runs one experiment kind and writes its artifacts.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod verify;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{DiagnosticsConfig, ExperimentConfig, ExperimentKind, ProblemRef, PropositionConfig, ScalingSweep};
pub use error::{exit, CliError, ErrorReport, Result};
pub use output::{write_atomic, write_json, OutputDir};
pub use verify::{verify_suite, Fault, VerifyOptions, VerifyReport, VerifyRow};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DPBILEVEL_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub kind: ExperimentKind,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

/// Command-line adjustments applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.run.seed = s;
            cfg.tuning.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = Some(d.clone());
        }
    }
}

/// Output directory: the config's, else the environment's, else `./out`.
pub fn resolve_out_dir(cfg: &ExperimentConfig, base: &Path) -> PathBuf {
    match &cfg.out_dir {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => base.join(p),
        None => std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")),
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Runs an already-parsed config. `base` resolves relative paths.
pub fn run_config(cfg: &ExperimentConfig, base: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out_dir = resolve_out_dir(cfg, base);
    let built = if cfg.kind.needs_problem() { Some(experiments::build_problem(cfg, base)?) } else { None };
    let mut out = OutputDir::new(&out_dir);
    let seed = cfg.run.seed;
    let summary = match cfg.kind {
        ExperimentKind::BilevelFull | ExperimentKind::BilevelMinibatch => {
            let minibatch = cfg.kind == ExperimentKind::BilevelMinibatch;
            let o = experiments::run_bilevel(built.as_ref().expect("problem"), cfg, minibatch)?;
            out.json("run_report.json", &o.report)?;
            out.bytes("trajectory.csv", &csv_bytes(|b| Ok(o.report.write_trajectory_csv(b)?))?)?;
            out.json("ledger.json", &o.report.ledger)?;
            out.json("evaluation.json", &o.evaluation)?;
            serde_json::json!({
                "x_out": o.report.x_out,
                "t_out": o.report.t_out,
                "ledger_total": o.report.ledger.total()?,
                "evaluation": o.evaluation,
            })
        }
        ExperimentKind::RegTuning => {
            let o = experiments::run_tuning(built.as_ref().expect("problem"), cfg)?;
            out.json("run_report.json", &o.report)?;
            let traj = csv_bytes(|b| {
                let mut w = csv::Writer::from_writer(b);
                w.write_record(["t", "omega", "displacement"]).map_err(|e| CliError::Core(e.into()))?;
                for (t, om) in o.report.omegas.iter().enumerate() {
                    let d = o.report.displacements.get(t).map_or(String::new(), |d| d.to_string());
                    w.write_record([t.to_string(), om.to_string(), d]).map_err(|e| CliError::Core(e.into()))?;
                }
                w.flush().map_err(|e| CliError::Write { path: "trajectory.csv".into(), source: e })?;
                Ok(())
            })?;
            out.bytes("trajectory.csv", &traj)?;
            out.json("ledger.json", &o.report.ledger)?;
            if let Some(r) = &o.reference {
                out.json("reference.json", r)?;
            }
            serde_json::json!({
                "omega_out": o.report.omega_out,
                "t_out": o.report.t_out,
                "omega_star": o.reference.as_ref().map(|r| r.best),
                "ledger_total": o.report.ledger.total()?,
            })
        }
        ExperimentKind::LeakDemo => {
            let o = experiments::run_leak_demo(built.as_ref().expect("problem"))?;
            out.json("leak.json", &o)?;
            serde_json::to_value(&o)?
        }
        ExperimentKind::ScalingSweep => {
            let o = experiments::run_scaling_sweep(&cfg.sweep, seed)?;
            out.bytes("scaling.csv", &csv_bytes(|b| o.write_csv(b))?)?;
            out.json("scaling.json", &o)?;
            serde_json::json!({
                "slope": o.slope,
                "medians": o.rows.iter().map(|r| (r.n, r.median_error)).collect::<Vec<_>>(),
                "respects_balls": o.rows.iter().all(|r| r.respects_balls),
            })
        }
        ExperimentKind::PropositionCheck => {
            let o = experiments::run_proposition_check(&cfg.proposition, seed)?;
            out.bytes("proposition.csv", &csv_bytes(|b| o.write_csv(b))?)?;
            out.json("proposition.json", &o)?;
            serde_json::json!({ "passes": o.passes, "runs": o.runs })
        }
        ExperimentKind::DiagnosticsSweep => {
            let o = experiments::run_diagnostics(built.as_ref().expect("problem"), cfg)?;
            out.bytes("diagnostics.csv", &csv_bytes(|b| Ok(dpbilevel_oracles::write_diagnostics_csv(b, &o.rows)?))?)?;
            out.json("diagnostics.json", &o)?;
            serde_json::json!({
                "gradient_gap_slope": o.gradient_gap_slope,
                "distance_slope": o.distance_slope,
                "within_bound": o.within_bound,
            })
        }
    };
    out.json("config.resolved.json", cfg)?;
    Ok(ExperimentOutcome { kind: cfg.kind, out_dir, files: out.into_files(), summary })
}

/// Loads a config file and runs it. Relative paths inside the file resolve
/// against its directory.
pub fn run_experiment(path: &Path, overrides: &RunOverrides) -> Result<ExperimentOutcome> {
    let mut cfg = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg);
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    run_config(&cfg, base)
}

/// Where the error JSON goes for a failed run, if anywhere can be determined.
pub fn error_dir(path: &Path, overrides: &RunOverrides) -> Option<PathBuf> {
    if let Some(d) = &overrides.out_dir {
        return Some(d.clone());
    }
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    match ExperimentConfig::load(path) {
        Ok(cfg) => Some(resolve_out_dir(&cfg, base)),
        Err(_) => std::env::var_os(OUT_DIR_ENV).map(PathBuf::from),
    }
}

/// Runs `path`, writing `error.json` on failure. Returns the exit code and
/// either the outcome or the error report.
pub fn run_experiment_with_status(path: &Path, overrides: &RunOverrides) -> (i32, std::result::Result<ExperimentOutcome, ErrorReport>) {
    match run_experiment(path, overrides) {
        Ok(o) => (exit::OK, Ok(o)),
        Err(e) => {
            let report = e.report();
            if let Some(dir) = error_dir(path, overrides) {
                let _ = write_json(&dir.join("error.json"), &report);
            }
            (e.exit_code(), Err(report))
        }
    }
}

/// Default config for `kind`, as printed by `--print-defaults`.
pub fn default_config(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig { kind, ..ExperimentConfig::default() }
}
