use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stegsplat::densify::DensifyConfig;
use stegsplat::io::GeometryAuditConfig;
use stegsplat::losses::LossWeights;
use stegsplat::stego::{BitMessage, LearningRates, TrainConfig};
use stegsplat::synthetic::SyntheticSpec;

use crate::Failure;

/// Everything a run needs, read from a TOML file. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: Option<usize>,
    /// Neural Gaussians per anchor.
    pub k: Option<usize>,
    pub min_contribution: Option<f64>,
    pub task: TaskConfig,
    pub loss: LossWeights,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub synthetic: SyntheticSpec,
    pub audit: GeometryAuditConfig,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// The object alone over the background.
    #[default]
    Object,
    /// The object placed inside the original scene.
    Scene,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Object {
        #[serde(default)]
        level: Level,
    },
    Image {
        view: usize,
    },
    /// Either an explicit `message` or `random` bits drawn from the run seed.
    Bits {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<BitMessage>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        random: Option<usize>,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Object { level: Level::Object }
    }
}

pub const DEFAULT_K: usize = 10;

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or(DEFAULT_K)
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig::default();
        TrainConfig {
            iterations: self.iterations.unwrap_or(base.iterations),
            seed: self.seed,
            lr: self.lr.clone(),
            loss: self.loss.clone(),
            densify: self.densify.clone(),
            min_contribution: self.min_contribution.unwrap_or(base.min_contribution),
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let invalid = |m: String| Err(Failure::Validation(m));
        if self.k() == 0 {
            return invalid("k must be positive".into());
        }
        self.train_config().validate().map_err(|e| Failure::Validation(e.to_string()))?;
        self.synthetic.validate().map_err(|e| Failure::Validation(e.to_string()))?;
        if let TaskConfig::Bits { message, random } = &self.task {
            match (message, random) {
                (Some(_), None) | (None, Some(1..)) => {}
                _ => return invalid("bits task needs exactly one of `message` or a positive `random`".into()),
            }
        }
        let a = &self.audit;
        if !(a.suspicion_factor > 0.0 && a.shell > 0.0) || a.knn == 0 || a.min_pts == 0 || a.histogram_bins == 0 {
            return invalid("audit settings must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
