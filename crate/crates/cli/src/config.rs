//! Experiment configuration files.

use std::path::{Path, PathBuf};

use dpbilevel::inner::InnerOverrides;
use dpbilevel::problems::{ProblemManifest, TuningConfig};
use dpbilevel::{ConvexSet, RunConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    BilevelFull,
    BilevelMinibatch,
    RegTuning,
    LeakDemo,
    ScalingSweep,
    PropositionCheck,
    DiagnosticsSweep,
}

impl ExperimentKind {
    pub fn needs_problem(self) -> bool {
        !matches!(self, ExperimentKind::ScalingSweep | ExperimentKind::PropositionCheck)
    }
}

/// A manifest given inline or as a path relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemRef {
    Path(PathBuf),
    Inline(ProblemManifest),
}

/// Inner-solver scaling study on `h_i(y) = (μ/2)‖y − z_i‖²` with
/// `z_i = z₀ + spread · u_i`, `u_i` uniform in the unit ball and `‖z₀‖ = center_norm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingSweep {
    pub ns: Vec<usize>,
    pub seeds: usize,
    pub dim: usize,
    pub mu: f64,
    pub center_norm: f64,
    pub spread: f64,
    /// Declared Lipschitz constant; gradients are clipped to it.
    pub lipschitz: f64,
    /// Initial radius; defaults to `center_norm + spread`.
    pub r0: Option<f64>,
    pub eps_prime: f64,
    pub delta_prime: f64,
    pub batch: usize,
    pub inner: InnerOverrides,
}

impl Default for ScalingSweep {
    fn default() -> Self {
        ScalingSweep {
            ns: vec![1 << 10, 1 << 11, 1 << 12, 1 << 13, 1 << 14],
            seeds: 20,
            dim: 10,
            mu: 1.0,
            center_norm: 5.0,
            spread: 1.0,
            lipschitz: 2.0,
            r0: None,
            eps_prime: 1.0,
            delta_prime: 1e-6,
            batch: 64,
            inner: InnerOverrides { t_cap: 10_000, ..InnerOverrides::default() },
        }
    }
}

/// Robustness of the outer loop on
/// `h(x) = Σ_j (a/2)(x_j − c_j)² − b cos(k(x_j − c_j))` with a biased, noisy
/// gradient oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropositionConfig {
    pub dim: usize,
    pub seeds: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub quadratic: f64,
    pub ripple: f64,
    pub frequency: f64,
    /// Bias norm as a fraction of `α`; the bias opposes the true gradient.
    pub bias_fraction: f64,
    /// `σ √(d ln(T/γ))` as a fraction of `α`.
    pub noise_fraction: f64,
    pub set: ConvexSet<f64>,
    /// Norm of the random starting point.
    pub start_norm: f64,
}

impl Default for PropositionConfig {
    fn default() -> Self {
        PropositionConfig {
            dim: 20,
            seeds: 20,
            alpha: 0.1,
            gamma: 0.05,
            quadratic: 0.5,
            ripple: 0.25,
            frequency: 2.0,
            bias_fraction: 0.125,
            noise_fraction: 0.125,
            set: ConvexSet::Ball { center: vec![0.0; 20], radius: 3.0 },
            start_norm: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub lambdas: Vec<f64>,
    /// Evaluation point; the origin when absent.
    pub x: Option<Vec<f64>>,
    pub tol: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig { lambdas: (0..=12).map(|k| 10f64.powf(1.0 + k as f64 / 4.0)).collect(), x: None, tol: 1e-11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub problem: Option<ProblemRef>,
    pub run: RunConfig,
    /// Outer starting point; the projection of the origin onto `X` when absent.
    pub x0: Option<Vec<f64>>,
    /// Inner starting point; the centre of `Y` when absent.
    pub y0: Option<Vec<f64>>,
    pub out_dir: Option<PathBuf>,
    pub tuning: TuningConfig,
    /// Grid for the reference optimum of a tuning run.
    pub reference_grid: Option<Vec<f64>>,
    pub sweep: ScalingSweep,
    pub proposition: PropositionConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::default(),
            problem: None,
            run: RunConfig::default(),
            x0: None,
            y0: None,
            out_dir: None,
            tuning: TuningConfig::default(),
            reference_grid: None,
            sweep: ScalingSweep::default(),
            proposition: PropositionConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Type-level checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.kind.needs_problem() && self.problem.is_none() {
            return bad(format!("experiment kind {:?} needs a `problem`", self.kind));
        }
        if !(self.run.gamma > 0.0 && self.run.gamma < 1.0) {
            return bad("run.gamma must lie in (0, 1)".into());
        }
        if !(self.run.alpha > 0.0) {
            return bad("run.alpha must be positive".into());
        }
        self.run.outer.validate()?;
        self.run.inner.validate()?;
        if self.kind == ExperimentKind::BilevelMinibatch && (self.run.b_in.is_none() || self.run.b_out.is_none()) {
            return bad("bilevel_minibatch needs run.b_in and run.b_out".into());
        }
        if self.kind == ExperimentKind::ScalingSweep {
            let s = &self.sweep;
            if s.ns.is_empty() || s.seeds == 0 || s.dim == 0 || s.batch == 0 {
                return bad("sweep needs non-empty ns, positive seeds, dim and batch".into());
            }
            s.inner.validate()?;
        }
        if self.kind == ExperimentKind::PropositionCheck {
            let p = &self.proposition;
            if p.set.dim() != p.dim {
                return bad(format!("proposition.set has dimension {} but dim = {}", p.set.dim(), p.dim));
            }
            p.set.validate()?;
        }
        if self.kind == ExperimentKind::DiagnosticsSweep && self.diagnostics.lambdas.iter().any(|&l| !(l > 0.0)) {
            return bad("diagnostics.lambdas must be positive".into());
        }
        Ok(())
    }

    /// Loads the manifest, resolving a path against `base`.
    pub fn manifest(&self, base: &Path) -> Result<(ProblemManifest, PathBuf)> {
        match &self.problem {
            None => Err(CliError::Config("no problem given".into())),
            Some(ProblemRef::Inline(m)) => Ok((m.clone(), base.to_path_buf())),
            Some(ProblemRef::Path(p)) => {
                let full = if p.is_absolute() { p.clone() } else { base.join(p) };
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", full.display())))?;
                let m = ProblemManifest::from_json(&text)?;
                let dir = full.parent().map(Path::to_path_buf).unwrap_or_else(|| base.to_path_buf());
                Ok((m, dir))
            }
        }
    }
}
