use std::path::Path;

use epimatch::evaluation::EvalConfig;
use epimatch::experiments::BenchmarkConfig;
use epimatch::matching::MatchConfig;
use epimatch::synthesis::{PhotometricConfig, PoseSamplerConfig};
use epimatch::training::TrainConfig;
use epimatch::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult, Common};

/// Per-run inputs shared by all commands.
pub struct Context {
    pub common: Common,
    /// Resolved configuration replayed from a manifest; takes precedence over `--config`.
    pub config_override: Option<serde_json::Value>,
}

/// A configuration document with a seed and its own validation.
pub trait CommandConfig: Serialize + DeserializeOwned + Default {
    fn seed(&self) -> u64;
    fn set_seed(&mut self, seed: u64);
    fn validate(&self) -> epimatch::Result<()>;
}

impl Context {
    /// Defaults, overridden by the config document, then by `--seed`.
    pub fn load<T: CommandConfig>(&self) -> CliResult<T> {
        let mut cfg: T = match (&self.config_override, &self.common.config) {
            (Some(v), _) => serde_json::from_value(v.clone())
                .map_err(|e| CliError::Usage(format!("manifest config: {e}")))?,
            (None, Some(path)) => read_json(path)?,
            (None, None) => T::default(),
        };
        if let Some(seed) = self.common.seed {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON serialization.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("configs serialize").as_bytes())
}

/// View synthesis: procedural scenes unless an input directory is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub patch_size: usize,
    /// Procedural scenes generated when no `--input` is given.
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub views_per_scene: usize,
    pub pose_sampler: PoseSamplerConfig,
    pub photometric: PhotometricConfig,
    pub depth_scale_range: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            patch_size: 14,
            scenes: 2,
            height: 168,
            width: 210,
            views_per_scene: 4,
            pose_sampler: PoseSamplerConfig::default(),
            photometric: PhotometricConfig::default(),
            depth_scale_range: [0.5, 2.0],
        }
    }
}

impl CommandConfig for SynthConfig {
    fn seed(&self) -> u64 {
        self.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    fn validate(&self) -> epimatch::Result<()> {
        if self.patch_size == 0 || self.views_per_scene == 0 {
            return Err(Error::InvalidArgument("patch_size and views_per_scene must be positive".into()));
        }
        if self.height % self.patch_size != 0 || self.width % self.patch_size != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "scene size {}x{} must be a positive multiple of patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        let [lo, hi] = self.depth_scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument("depth scale range must satisfy 0 < lo <= hi".into()));
        }
        self.pose_sampler.validate()?;
        self.photometric.validate()
    }
}

/// Pseudo-backbone, matcher and evaluation settings of `match`, `eval` and `robustness`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub patch_size: usize,
    /// Descriptor size when no checkpoint fixes it.
    pub embed_dim: usize,
    /// Projection seed of the pseudo-backbone; must equal the one used in training.
    pub backbone_seed: u64,
    pub matching: MatchConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_size: 14,
            embed_dim: 768,
            backbone_seed: 0,
            matching: MatchConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl CommandConfig for PipelineConfig {
    fn seed(&self) -> u64 {
        self.eval.ransac.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.eval.ransac.seed = seed;
    }

    fn validate(&self) -> epimatch::Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidArgument("patch_size and embed_dim must be positive".into()));
        }
        if !(self.eval.tp_threshold > 0.0) {
            return Err(Error::InvalidArgument("tp_threshold must be positive".into()));
        }
        self.matching.validate()?;
        self.eval.ransac.validate()
    }
}

impl CommandConfig for TrainConfig {
    fn seed(&self) -> u64 {
        self.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    fn validate(&self) -> epimatch::Result<()> {
        TrainConfig::validate(self)
    }
}

impl CommandConfig for BenchmarkConfig {
    fn seed(&self) -> u64 {
        self.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    fn validate(&self) -> epimatch::Result<()> {
        BenchmarkConfig::validate(self)
    }
}
