use std::path::PathBuf;

use clap::Args;
use epimatch::embedding::FeatureMap;
use epimatch::evaluation::{robustness_protocol, ScenePair};
use epimatch::experiments::{robustness_csv, RobustnessComparison};
use epimatch::io::read_png;
use epimatch::Image;

use super::{Matcher, MatcherArgs};
use crate::config::{Context, PipelineConfig};
use crate::manifest::{OutDir, RunManifest};
use crate::scenes;
use crate::{CliError, CliResult, Common};

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub common: Common,
    /// Synthesized scene directories, or one directory holding at least two.
    #[arg(long, required = true, num_args = 1..)]
    pub scenes: Vec<PathBuf>,
    #[command(flatten)]
    pub matcher: MatcherArgs,
}

pub const ROBUSTNESS: &str = "robustness.csv";
pub const REPORT: &str = "report.json";

struct LoadedScene {
    image: Image,
    features: FeatureMap,
    views: Vec<(Image, FeatureMap)>,
}

/// Every view against its own scene image (overlapping) and against the image
/// of the next scene (cross-scene, content-disjoint).
pub fn run(args: &RobustnessArgs, ctx: &Context, out: &mut OutDir, manifest: &mut RunManifest) -> CliResult<()> {
    let cfg: PipelineConfig = ctx.load()?;
    manifest.record_config(&cfg);
    let matcher = Matcher::new(&args.matcher, cfg, manifest)?;
    let mut dirs = Vec::new();
    for root in &args.scenes {
        manifest.add_input(root);
        dirs.extend(scenes::scene_dirs(root)?);
    }
    if dirs.len() < 2 {
        return Err(CliError::Usage("robustness needs at least two disjoint scenes".into()));
    }
    let loaded = dirs
        .iter()
        .map(|dir| {
            let image = scenes::load_image(dir)?;
            let views = scenes::views(dir)?
                .into_iter()
                .map(|(_, path)| {
                    let img = read_png(&path)?;
                    let f = matcher.extract(&img)?;
                    Ok((img, f))
                })
                .collect::<CliResult<Vec<_>>>()?;
            if views.is_empty() {
                return Err(CliError::Usage(format!("{}: scene has no view_*.png", dir.display())));
            }
            Ok(LoadedScene {
                features: matcher.extract(&image)?,
                image,
                views,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let n = loaded.len();
    let mut overlapping = Vec::new();
    let mut cross = Vec::new();
    for (s, scene) in loaded.iter().enumerate() {
        let other = &loaded[(s + 1) % n];
        for (img_t, feat_t) in &scene.views {
            overlapping.push(ScenePair {
                feat_s: &scene.features,
                feat_t,
                img_s: &scene.image,
                img_t,
            });
            cross.push(ScenePair {
                feat_s: &other.features,
                feat_t,
                img_s: &other.image,
                img_t,
            });
        }
    }
    let params = matcher.params.as_ref();
    let ransac = &matcher.cfg.eval.ransac;
    let cmp = RobustnessComparison {
        overlapping: robustness_protocol(&overlapping, params, &matcher.cfg.matching, ransac)?,
        cross_scene: robustness_protocol(&cross, params, &matcher.cfg.matching, ransac)?,
    };
    out.write(ROBUSTNESS, robustness_csv(&cmp).as_bytes())?;
    out.write_json(REPORT, &cmp)?;
    Ok(())
}
