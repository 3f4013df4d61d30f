use std::path::PathBuf;

use clap::Args;
use epimatch::io::encode_checkpoint;
use epimatch::training::{loss_log_csv, train_with, TrainConfig, TrainSample};

use crate::config::Context;
use crate::manifest::{OutDir, RunManifest};
use crate::scenes;
use crate::{CliError, CliResult, Common};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scene directory or directory of scene directories. An `image.feat`
    /// next to a scene image replaces its pseudo-backbone source features.
    #[arg(long)]
    pub data: PathBuf,
}

pub const CHECKPOINT: &str = "checkpoint.epiw";
pub const LOSS_LOG: &str = "loss.csv";

pub fn run(args: &TrainArgs, ctx: &Context, out: &mut OutDir, manifest: &mut RunManifest) -> CliResult<()> {
    let cfg: TrainConfig = ctx.load()?;
    manifest.record_config(&cfg);
    manifest.add_input(&args.data);
    let dataset = scenes::scene_dirs(&args.data)?
        .into_iter()
        .map(|dir| {
            let features = scenes::load_features(&dir)?;
            if let Some(f) = &features {
                if f.embed_dim() != cfg.embed_dim || f.patch_size() != cfg.patch_size {
                    return Err(CliError::Usage(format!(
                        "{}: features have E={} P={}, config expects E={} P={}",
                        dir.join(scenes::FEATURES).display(),
                        f.embed_dim(),
                        f.patch_size(),
                        cfg.embed_dim,
                        cfg.patch_size
                    )));
                }
            }
            Ok(TrainSample {
                image: scenes::load_image(&dir)?,
                depth: scenes::load_depth(&dir)?,
                intrinsics: scenes::load_intrinsics(&dir)?,
                features,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let state = train_with(&dataset, &cfg, |e| {
        eprintln!(
            "epoch {:>3}  lr {:.1e}  loss {:.6}  triplets {}",
            e.epoch, e.lr, e.mean_loss, e.n_triplets
        );
    })?;
    out.write(CHECKPOINT, &encode_checkpoint(&state.params)?)?;
    out.write(LOSS_LOG, loss_log_csv(&state.history).as_bytes())?;
    Ok(())
}
