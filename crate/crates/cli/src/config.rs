//! Run configuration: one TOML file with a section per pipeline step.

use std::path::Path;

use cryoflex::eval::{AtomRef, AtomSet};
use cryoflex::model::ModelConfig;
use cryoflex::simulate::SimulationConfig;
use cryoflex::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::commands::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub simulation: SimulationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples drawn from each ensemble for EMD-RMSD.
    pub emd_samples: usize,
    pub atoms: AtomSet,
    /// Prior samples used for marginals and mode proportions.
    pub prior_samples: usize,
    /// First distance pair, `"residue:atom"`.
    pub pair_a: [String; 2],
    /// Optional second pair for two-dimensional mode proportions.
    pub pair_b: Option<[String; 2]>,
    /// Cutoffs; derived from the dataset's hinge modes when absent and a
    /// dataset is given, otherwise 6.5 and 37 Å.
    pub x_cut: Option<f64>,
    pub y_cut: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            emd_samples: 256,
            atoms: AtomSet::Ca,
            prior_samples: 2048,
            pair_a: ["0:CA".into(), "31:CA".into()],
            pair_b: None,
            x_cut: None,
            y_cut: None,
        }
    }
}

impl EvalConfig {
    pub fn pair(p: &[String; 2]) -> Result<(AtomRef, AtomRef), CliError> {
        let parse = |s: &str| AtomRef::parse(s).ok_or_else(|| CliError::usage(format!("bad atom selector {s:?}, expected residue:atom")));
        Ok((parse(&p[0])?, parse(&p[1])?))
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }
}
