use std::path::{Path, PathBuf};

use mvanon_core::io::read_json;
use mvanon_core::metrics::EvalConfig;
use mvanon_core::mva::AssocConfig;
use mvanon_core::pipeline::{PipelineConfig, RoundConfig};
use mvanon_core::tracker::TrackerConfig;
use mvanon_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub detections: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// The single JSON document configuring a run. Relative paths resolve
/// against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub tracker: TrackerConfig,
    pub assoc: AssocConfig,
    pub round: RoundConfig,
    pub eval: EvalConfig,
    /// Overrides `assoc.seed` when present.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        require_file(path)?;
        let mut cfg: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.detections,
            &mut cfg.paths.cameras,
            &mut cfg.paths.gt,
            &mut cfg.paths.output,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for p in [&cfg.paths.detections, &cfg.paths.cameras, &cfg.paths.gt]
            .into_iter()
            .flatten()
        {
            require_file(p)?;
        }
        cfg.pipeline().validate()?;
        Ok(cfg)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let mut assoc = self.assoc.clone();
        if let Some(seed) = self.seed {
            assoc.seed = seed;
        }
        PipelineConfig {
            tracker: self.tracker.clone(),
            assoc,
            round: self.round.clone(),
            eval: self.eval.clone(),
        }
    }
}

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::input(format!("{}: no such file", path.display())))
    }
}
