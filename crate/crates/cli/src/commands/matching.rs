use std::path::PathBuf;

use clap::Args;
use epimatch::io::read_png;
use epimatch::matching::CorrespondenceSet;

use super::{load_view, Matcher, MatcherArgs};
use crate::config::{Context, PipelineConfig};
use crate::manifest::{OutDir, RunManifest};
use crate::scenes;
use crate::{CliError, CliResult, Common};

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub matcher: MatcherArgs,
    /// Source PNG or `.feat`.
    #[arg(long, requires = "target", conflicts_with = "scenes")]
    pub source: Option<PathBuf>,
    /// Target PNG or `.feat`.
    #[arg(long, requires = "source")]
    pub target: Option<PathBuf>,
    /// Image of a `.feat` source, used for refinement.
    #[arg(long)]
    pub source_image: Option<PathBuf>,
    /// Image of a `.feat` target, used for refinement.
    #[arg(long)]
    pub target_image: Option<PathBuf>,
    /// Synthesized scenes: matches every view against its scene image.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Also write the JSON variant with patch indices and timing.
    #[arg(long)]
    pub json: bool,
}

pub fn run(args: &MatchArgs, ctx: &Context, out: &mut OutDir, manifest: &mut RunManifest) -> CliResult<()> {
    let cfg: PipelineConfig = ctx.load()?;
    manifest.record_config(&cfg);
    let matcher = Matcher::new(&args.matcher, cfg, manifest)?;
    let emit = |out: &mut OutDir, stem: &str, set: &CorrespondenceSet| -> CliResult<()> {
        out.write(&format!("{stem}.csv"), set.to_csv().as_bytes())?;
        if args.json {
            out.write(&format!("{stem}.json"), set.to_json()?.as_bytes())?;
        }
        Ok(())
    };
    match (&args.source, &args.target, &args.scenes) {
        (Some(s), Some(t), None) => {
            let vs = load_view(s, args.source_image.as_deref(), manifest)?;
            let vt = load_view(t, args.target_image.as_deref(), manifest)?;
            let fs = match vs.features {
                Some(f) => f,
                None => matcher.extract(&vs.image)?,
            };
            let ft = match vt.features {
                Some(f) => f,
                None => matcher.extract(&vt.image)?,
            };
            let set = matcher.match_features(&fs, &ft, &vs.image, &vt.image)?;
            emit(out, "matches", &set)
        }
        (None, None, Some(root)) => {
            manifest.add_input(root);
            for dir in scenes::scene_dirs(root)? {
                let name = scenes::dir_name(&dir);
                let img_s = scenes::load_image(&dir)?;
                let fs = matcher.extract(&img_s)?;
                for (view, path) in scenes::views(&dir)? {
                    let img_t = read_png(&path)?;
                    let set = matcher.match_features(&fs, &matcher.extract(&img_t)?, &img_s, &img_t)?;
                    emit(out, &format!("{name}/{view}"), &set)?;
                }
            }
            Ok(())
        }
        _ => Err(CliError::Usage("give either --source and --target, or --scenes".into())),
    }
}
