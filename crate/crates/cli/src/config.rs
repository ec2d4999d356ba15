//! The run configuration file.
//!
//! Every field is optional; omitted fields take the built-in defaults.
//! Command-line flags override values read from the file.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//! nets = ["MLP-16x4", "GRU-8x3"]
//!
//! [game]
//! kind = "univariate"
//! cost = 3.3
//!
//! [hyper]
//! train_episodes = 1000
//! batch_size = 64
//!
//! [data]
//! base_seed = 1000
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use qlab_core::dqn::Hyperparams;
use qlab_core::evalkit::{standard_datasets, Dataset};
use qlab_core::{GameConfig, NetSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// First episode seed. Training episodes use consecutive seeds from
    /// here, out-of-sample episodes follow them.
    pub base_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { base_seed: 1_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds network initialization, exploration and minibatch sampling.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub nets: Vec<String>,
    pub game: GameConfig,
    pub hyper: Hyperparams,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("qlab-out"),
            nets: vec!["MLP-16x4".to_string()],
            game: GameConfig::default(),
            hyper: Hyperparams::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks every field and parses every network name.
    pub fn validate(&self) -> Result<Vec<NetSpec>, CliError> {
        self.game.validate()?;
        self.hyper.validate()?;
        if self.nets.is_empty() {
            return Err(CliError::Config(
                "nets: at least one network is required".into(),
            ));
        }
        let specs = self
            .nets
            .iter()
            .map(|n| {
                let mut spec = NetSpec::parse(n, self.game.channels())?;
                spec.window = self.game.window;
                qlab_core::qnets::count_params(&spec)?;
                Ok(spec)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(specs)
    }

    /// Train, in-sample and out-of-sample seed lists.
    pub fn datasets(&self) -> [Dataset; 3] {
        standard_datasets(
            self.game.kind,
            self.data.base_seed,
            self.hyper.train_episodes,
            self.hyper.in_sample_episodes,
            self.hyper.test_episodes,
        )
    }

    pub fn dir(&self, sub: &str) -> PathBuf {
        self.output_dir.join(sub)
    }
}

/// File stem shared by a network's weights, log and report.
pub fn artifact_stem(config: &RunConfig, spec: &NetSpec) -> String {
    format!("{}-{}", config.game.kind, spec)
}
