use std::path::PathBuf;

use clap::Args;
use epimatch::io::{correspondences_csv, encode_depth, encode_png};
use epimatch::seed::{self, Stream};
use epimatch::synthesis::{make_synthetic_scene, make_training_pair, PoseChoice, Scene, SceneSpec};

use crate::config::{Context, SynthConfig};
use crate::manifest::{OutDir, RunManifest};
use crate::scenes::{self, pose_file, view_name};
use crate::{CliError, CliResult, Common};

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scene directory (or directory of scene directories) with image, depth and
    /// intrinsics; procedural scenes are generated when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

pub fn run(args: &SynthArgs, ctx: &Context, out: &mut OutDir, manifest: &mut RunManifest) -> CliResult<()> {
    let cfg: SynthConfig = ctx.load()?;
    manifest.record_config(&cfg);
    let scenes: Vec<(String, Scene)> = match &args.input {
        Some(root) => {
            manifest.add_input(root);
            scenes::scene_dirs(root)?
                .into_iter()
                .map(|dir| {
                    let scene = Scene {
                        image: scenes::load_image(&dir)?,
                        depth: scenes::load_depth(&dir)?,
                        intrinsics: scenes::load_intrinsics(&dir)?,
                    };
                    Ok((scenes::dir_name(&dir), scene))
                })
                .collect::<CliResult<_>>()?
        }
        None => (0..cfg.scenes)
            .map(|i| {
                let spec = SceneSpec {
                    seed: seed::derive(cfg.seed, Stream::Scene, i as u64),
                    height: cfg.height,
                    width: cfg.width,
                    patch_size: cfg.patch_size,
                };
                Ok((format!("scene_{i:03}"), make_synthetic_scene(&spec)?))
            })
            .collect::<CliResult<_>>()?,
    };
    for (si, (name, scene)) in scenes.iter().enumerate() {
        let (h, w) = (scene.image.height(), scene.image.width());
        if h % cfg.patch_size != 0 || w % cfg.patch_size != 0 {
            return Err(CliError::Usage(format!(
                "scene {name}: image {h}x{w} is not divisible by patch size {}",
                cfg.patch_size
            )));
        }
        out.write(&format!("{name}/{}", scenes::IMAGE), &encode_png(&scene.image)?)?;
        out.write(&format!("{name}/{}", scenes::DEPTH), &encode_depth(&scene.depth)?)?;
        out.write_json(&format!("{name}/{}", scenes::INTRINSICS), &scene.intrinsics)?;
        for k in 0..cfg.views_per_scene {
            let index = (si * cfg.views_per_scene + k) as u64;
            let pair = make_training_pair(
                &scene.image,
                &scene.depth,
                &scene.intrinsics,
                PoseChoice::Sample(&cfg.pose_sampler),
                &cfg.photometric,
                cfg.depth_scale_range,
                seed::derive(cfg.seed, Stream::Pair, index),
            )?;
            let view = view_name(k);
            out.write(&format!("{name}/{view}.png"), &encode_png(&pair.warped)?)?;
            out.write(&format!("{name}/{view}.dpt"), &encode_depth(&pair.depth)?)?;
            out.write(
                &format!("{name}/{view}_gt.csv"),
                correspondences_csv(&pair.warp.correspondences()).as_bytes(),
            )?;
            out.write_json(&format!("{name}/{}", pose_file(&view)), &pair.pose)?;
        }
    }
    Ok(())
}
