pub mod ablate;
pub mod eval;
pub mod matching;
pub mod robustness;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use clap::Args;
use epimatch::embedding::{upsample_features, AdaptationParams, FeatureMap, PseudoBackbone};
use epimatch::io::{read_checkpoint, read_features, read_png};
use epimatch::matching::{match_pair, CorrespondenceSet};
use epimatch::Image;

use crate::config::PipelineConfig;
use crate::manifest::RunManifest;
use crate::{CliError, CliResult};

/// Matcher selection shared by `match`, `eval --sequence` and `robustness`.
#[derive(Debug, Clone, Args)]
pub struct MatcherArgs {
    /// EPIW checkpoint of the adaptation block.
    #[arg(long, conflicts_with = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// Match raw backbone features without the adaptation block.
    #[arg(long)]
    pub baseline: bool,
    /// Bilinear feature upsampling factor; matching then uses patch size P / factor.
    #[arg(long, default_value_t = 1)]
    pub upsample: usize,
    /// Keep patch centers instead of refining with phase correlation.
    #[arg(long)]
    pub no_refine: bool,
}

/// Features, adaptation parameters and matcher settings resolved from the flags.
pub struct Matcher {
    pub cfg: PipelineConfig,
    pub params: Option<AdaptationParams>,
    backbone: PseudoBackbone,
    upsample: usize,
}

impl Matcher {
    pub fn new(args: &MatcherArgs, mut cfg: PipelineConfig, manifest: &mut RunManifest) -> CliResult<Self> {
        let params = match (&args.checkpoint, args.baseline) {
            (Some(path), _) => {
                manifest.add_input(path);
                Some(read_checkpoint(path)?)
            }
            (None, true) => None,
            (None, false) => {
                return Err(CliError::Usage("adapted matching needs --checkpoint (or pass --baseline)".into()));
            }
        };
        if args.upsample == 0 {
            return Err(CliError::Usage("--upsample must be positive".into()));
        }
        let embed_dim = params.as_ref().map_or(cfg.embed_dim, |p| p.config().embed_dim);
        cfg.matching.refine &= !args.no_refine;
        Ok(Self {
            backbone: PseudoBackbone::new(cfg.patch_size, embed_dim, cfg.backbone_seed)?,
            cfg,
            params,
            upsample: args.upsample,
        })
    }

    pub fn extract(&self, img: &Image) -> CliResult<FeatureMap> {
        Ok(self.backbone.extract(img)?)
    }

    /// Upsamples when requested and matches.
    pub fn match_features(&self, fs: &FeatureMap, ft: &FeatureMap, img_s: &Image, img_t: &Image) -> CliResult<CorrespondenceSet> {
        let (fs, ft) = if self.upsample > 1 {
            (upsample_features(fs, self.upsample)?, upsample_features(ft, self.upsample)?)
        } else {
            (fs.clone(), ft.clone())
        };
        Ok(match_pair(&fs, &ft, self.params.as_ref(), img_s, img_t, &self.cfg.matching)?)
    }

    pub fn match_images(&self, img_s: &Image, img_t: &Image) -> CliResult<CorrespondenceSet> {
        self.match_features(&self.extract(img_s)?, &self.extract(img_t)?, img_s, img_t)
    }
}

/// An image given directly as PNG, or as a `.feat` file with its PNG alongside.
pub struct ViewInput {
    pub image: Image,
    pub features: Option<FeatureMap>,
}

pub fn load_view(path: &Path, image: Option<&Path>, manifest: &mut RunManifest) -> CliResult<ViewInput> {
    manifest.add_input(path);
    if path.extension().is_some_and(|e| e == "feat") {
        let features = read_features(path)?;
        let image_path = image.ok_or_else(|| {
            CliError::Usage(format!("{}: feature input needs the matching image (--source-image/--target-image)", path.display()))
        })?;
        manifest.add_input(image_path);
        Ok(ViewInput {
            image: read_png(image_path)?,
            features: Some(features),
        })
    } else {
        Ok(ViewInput {
            image: read_png(path)?,
            features: None,
        })
    }
}
