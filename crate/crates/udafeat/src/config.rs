//! Experiment configuration: one JSON document covering scene, appearance
//! shift, network, training and output location.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use udafeat_core::synth::{DomainShift, SceneSpec};
use udafeat_core::{LossWeights, SegNetConfig, TrainConfig};

use crate::error::{io_err, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub source: usize,
    pub target: usize,
    pub val: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            source: 500,
            target: 500,
            val: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Root seed; overrides the seeds of the sections below.
    pub seed: u64,
    pub scene: SceneSpec,
    pub shift: DomainShift,
    pub counts: SplitCounts,
    pub model: SegNetConfig,
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            scene: SceneSpec::default(),
            shift: DomainShift::default(),
            counts: SplitCounts::default(),
            model: SegNetConfig::default(),
            train: TrainConfig::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_json(&fs::read_to_string(p).map_err(io_err(p))?),
        }
    }

    /// Copy with the root seed pushed into every section, validated.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.scene.seed = cfg.seed;
        cfg.model.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        if (cfg.scene.height, cfg.scene.width) != (cfg.model.input_height, cfg.model.input_width) {
            return Err(Error::Config("scene and model image sizes differ".into()));
        }
        cfg.scene.validate()?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Parses an ablation mask: a comma set from {cl, or, sp, em}, or `none`.
/// Listed modules keep their configured weight; the others are zeroed.
pub fn apply_ablation(weights: &LossWeights, mask: &str) -> Result<(LossWeights, bool)> {
    let mut out = LossWeights::ZERO;
    let mut em = false;
    let mask = mask.trim();
    if mask == "none" {
        return Ok((out, false));
    }
    for part in mask.split(',').map(str::trim) {
        match part {
            "cl" => out.lambda_cl = weights.lambda_cl,
            "or" => out.lambda_or = weights.lambda_or,
            "sp" => out.lambda_sp = weights.lambda_sp,
            "em" => {
                out.lambda_em = weights.lambda_em;
                em = true;
            }
            other => return Err(Error::Config(format!("unknown ablation module {other:?}"))),
        }
    }
    Ok((out, em))
}
