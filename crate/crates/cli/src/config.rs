use std::fs;
use std::path::Path;

use llatte_core::backbone::BackboneConfig;
use llatte_core::events::GeneratorConfig;
use llatte_core::model::{ModelConfig, Transfer};
use llatte_core::multistage::PipelineConfig;
use llatte_core::rng::substream_seed;
use llatte_core::scaling::ExperimentSpec;
use llatte_core::sequence::SeqConfig;
use llatte_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Everything a command needs, loaded from one JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub seq: SeqConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub experiment: ExperimentSpec,
}

/// Section seeds that are derived from the top-level seed.
const DERIVED_SEEDS: [(&str, &str); 2] = [("generator", "generator"), ("train", "train")];

impl RunConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::reading(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Parse { message, .. } => CliError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let parse_err = |message: String| CliError::Parse {
            path: "<config>".into(),
            message,
        };
        let raw: Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let de = raw.clone();
        let mut cfg: RunConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            parse_err(format!("at `{path}`: {}", e.inner()))
        })?;
        for (section, stream) in DERIVED_SEEDS {
            let derived = substream_seed(cfg.seed, stream);
            if let Some(given) = raw.get(section).and_then(|s| s.get("seed")) {
                if given.as_u64() != Some(derived) {
                    return Err(CliError::Invariant(format!(
                        "{section}.seed is derived from the top-level seed; expected {derived} or omit it"
                    )));
                }
            }
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the seed derivation; idempotent.
    fn resolve(&mut self) {
        self.generator.seed = substream_seed(self.seed, "generator");
        self.train.seed = substream_seed(self.seed, "train");
    }

    pub fn validate(&self) -> CliResult<()> {
        self.generator.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        self.pipeline.validate()?;
        self.experiment.validate()?;
        self.model().seq.validate()?;
        Ok(())
    }

    /// The ranker described by the `seq`, `backbone` and `experiment.policy` sections.
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            seq: self.seq.clone(),
            backbone: self.backbone.clone(),
            policy: self.experiment.policy.clone(),
            transfer: Transfer::None,
        }
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
