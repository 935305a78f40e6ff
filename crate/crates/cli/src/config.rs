//! The run config file: one optional table per pipeline stage.
//!
//! Precedence is command-line flag, then config file, then built-in default.

use std::fs;
use std::path::Path;

use facedyn_core::encoders::EncoderConfig;
use facedyn_core::evalkit::{DEFAULT_BOOTSTRAP_ITERS, DNR_EPSILON};
use facedyn_core::synthgen::SynthConfig;
use facedyn_core::trainer::TrainConfig;
use facedyn_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Crop/pad length used by `eval` and the enrollment and DNR analyses.
    pub max_length: usize,
    pub lengths: Vec<usize>,
    pub dnr_bins: usize,
    pub bootstrap_iters: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            max_length: 300,
            lengths: vec![75, 150, 300, 480, 600, 900],
            dnr_bins: 4,
            bootstrap_iters: DEFAULT_BOOTSTRAP_ITERS,
            epsilon: DNR_EPSILON,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    /// `--seed` feeds every random stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }
}
