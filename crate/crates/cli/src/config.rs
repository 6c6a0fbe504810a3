//! Run configuration: one TOML document, every table optional. Command-line
//! flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowtts::model::ModelConfig;
use flowtts::sampler::Solver;
use flowtts::training::corpus::CorpusSpec;
use flowtts::training::TrainingConfig;
use flowtts::verify::e2e::EvalConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub nfe: usize,
    pub sway: f64,
    pub solver: Solver,
    pub cfg: f64,
    pub t_prime: f64,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            nfe: 32,
            sway: -1.0,
            solver: Solver::Euler,
            cfg: 2.0,
            t_prime: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for model initialization.
    pub model_seed: u64,
    /// Updates per loss-log line.
    pub log_every: u64,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub sampler: SamplerSettings,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_seed: 1,
            log_every: 100,
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            sampler: SamplerSettings::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Resolves a path from a flag or the config file, failing with `what` when
/// neither is set.
pub fn require(flag: &Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| CliError::Usage(format!("missing {what}: pass the flag or set paths.{what} in the config")))
}

pub fn existing(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// The parent directory of an output file must already exist.
pub fn writable_target(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(CliError::Usage(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.sampler.solver = Solver::Heun3;
        c.paths.corpus = Some("data/corpus".into());
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_tables_keep_defaults() {
        let c = RunConfig::parse("log_every = 5\n[training]\npeak_lr = 0.002\n[sampler]\nsolver = \"midpoint\"\n").unwrap();
        assert_eq!(c.log_every, 5);
        assert_eq!(c.training.peak_lr, 0.002);
        assert_eq!(c.training.batch_size, TrainingConfig::default().batch_size);
        assert_eq!(c.sampler.solver, Solver::Midpoint);
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in ["bogus = 1", "[model]\ndepth = 3", "[sampler]\nnfe = 8\nsteps = 2"] {
            let err = RunConfig::parse(bad).unwrap_err();
            assert!(matches!(err, CliError::Usage(_)), "{bad}");
        }
    }
}
