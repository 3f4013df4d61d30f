use clap::Args;
use epimatch::experiments::{ablation_csv, run_ablation, Benchmark, BenchmarkConfig};
use epimatch::io::encode_checkpoint;
use epimatch::training::loss_log_csv;

use crate::config::Context;
use crate::manifest::{OutDir, RunManifest};
use crate::{CliResult, Common};

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
}

pub const ABLATION: &str = "ablation.csv";

/// Trains the random- and fixed-pose models on the procedural benchmark and
/// writes the comparison table with both checkpoints and loss logs.
pub fn run(_args: &AblateArgs, ctx: &Context, out: &mut OutDir, manifest: &mut RunManifest) -> CliResult<()> {
    let cfg: BenchmarkConfig = ctx.load()?;
    manifest.record_config(&cfg);
    let bench = Benchmark::build(&cfg)?;
    let report = run_ablation(&bench)?;
    out.write(ABLATION, ablation_csv(&report.rows).as_bytes())?;
    for (name, model) in [("random_poses", &report.random_model), ("fixed_poses", &report.fixed_model)] {
        out.write(&format!("{name}.epiw"), &encode_checkpoint(&model.params)?)?;
        out.write(&format!("{name}_loss.csv"), loss_log_csv(&model.history).as_bytes())?;
    }
    Ok(())
}
