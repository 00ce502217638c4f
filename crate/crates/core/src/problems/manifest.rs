//! JSON description of a problem instance and its data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MeanLeak, QuadraticBilevel, QuadraticGenerator, RegTuning, RegTuningSpec, RidgeGenerator, WithConstants};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::problem::{BilevelProblem, ProblemConstants};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Inline {
        records: Vec<Vec<f64>>,
    },
    /// Relative paths resolve against the manifest's directory.
    Csv {
        path: PathBuf,
    },
    Ridge {
        #[serde(default)]
        generator: RidgeGenerator,
        #[serde(default)]
        seed: u64,
    },
}

impl DataSource {
    pub fn load(&self, base: &Path) -> Result<Dataset<f64>> {
        match self {
            DataSource::Inline { records } => Dataset::from_records(records),
            DataSource::Csv { path } => {
                let p = if path.is_absolute() { path.clone() } else { base.join(path) };
                if !p.exists() {
                    return Err(Error::Dataset(format!("data file not found: {}", p.display())));
                }
                Dataset::from_csv_path(&p)
            }
            DataSource::Ridge { generator, seed } => generator.generate(*seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ProblemFamily {
    MeanLeak {
        data: DataSource,
        /// Weight `s` of each `g_i`; defaults to `n` (the sum form).
        #[serde(default)]
        scale: Option<f64>,
        #[serde(default)]
        data_radius: Option<f64>,
        #[serde(default)]
        x_radius: Option<f64>,
    },
    Quadratic {
        #[serde(default)]
        generator: QuadraticGenerator,
        #[serde(default)]
        seed: u64,
    },
    RegTuning {
        data: DataSource,
        #[serde(default)]
        spec: RegTuningSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemManifest {
    #[serde(flatten)]
    pub family: ProblemFamily,
    /// Replaces the family's declared constants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ProblemConstants<f64>>,
}

pub enum BuiltFamily {
    MeanLeak(MeanLeak<f64>),
    Quadratic(QuadraticBilevel<f64>),
    RegTuning(RegTuning<f64>),
}

pub struct BuiltProblem {
    pub family: BuiltFamily,
    pub data: Dataset<f64>,
    pub constants_override: Option<ProblemConstants<f64>>,
}

impl BuiltProblem {
    fn base(&self) -> &dyn BilevelProblem<f64> {
        match &self.family {
            BuiltFamily::MeanLeak(p) => p,
            BuiltFamily::Quadratic(p) => p,
            BuiltFamily::RegTuning(p) => p,
        }
    }

    /// The problem with any constants override applied.
    pub fn problem(&self) -> WithConstants<'_, f64> {
        let inner = self.base();
        WithConstants::new(inner, self.constants_override.unwrap_or(*inner.constants()))
    }
}

impl ProblemManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn build(&self, base: &Path) -> Result<BuiltProblem> {
        if let Some(c) = &self.constants {
            c.validate()?;
        }
        let (family, data) = match &self.family {
            ProblemFamily::MeanLeak { data, scale, data_radius, x_radius } => {
                let d = data.load(base)?;
                let s = scale.unwrap_or(d.len() as f64);
                let p = match (data_radius, x_radius) {
                    (None, None) => MeanLeak::new(&d, s)?,
                    _ => {
                        let base = MeanLeak::new(&d, s)?;
                        let r = data_radius.unwrap_or(base.inner_domain().radius);
                        MeanLeak::with_bounds(d.record_len(), s, r, x_radius.unwrap_or(2.0 * r))?
                    }
                };
                (BuiltFamily::MeanLeak(p), d)
            }
            ProblemFamily::Quadratic { generator, seed } => {
                let (p, d) = QuadraticBilevel::generate(generator, *seed)?;
                (BuiltFamily::Quadratic(p), d)
            }
            ProblemFamily::RegTuning { data, spec } => {
                let d = data.load(base)?;
                (BuiltFamily::RegTuning(RegTuning::new(&d, *spec)?), d)
            }
        };
        Ok(BuiltProblem { family, data, constants_override: self.constants })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_leak_manifest_round_trip() {
        let text = r#"{"family": "mean_leak", "data": {"source": "inline", "records": [[1, 0], [3, 0]]}}"#;
        let m = ProblemManifest::from_json(text).unwrap();
        let back: ProblemManifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(m, back);
        let built = m.build(Path::new(".")).unwrap();
        assert_eq!(built.data.len(), 2);
        assert_eq!(built.problem().name(), "mean_leak");
    }

    #[test]
    fn missing_csv_names_path() {
        let m = ProblemManifest {
            family: ProblemFamily::RegTuning { data: DataSource::Csv { path: "nope.csv".into() }, spec: RegTuningSpec::default() },
            constants: None,
        };
        let err = m.build(Path::new("/tmp")).err().unwrap();
        assert!(err.to_string().contains("/tmp/nope.csv"), "{err}");
    }
}
