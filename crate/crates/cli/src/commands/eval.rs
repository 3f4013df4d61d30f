use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use epimatch::evaluation::{aggregate, aggregate_csv, evaluate_pair, MetricsReport, MetricSummary};
use epimatch::io::{read_match_csv, read_png};
use epimatch::{Intrinsics, Pixel, Pose};
use serde::Serialize;

use super::{Matcher, MatcherArgs};
use crate::config::{read_json, Context, PipelineConfig};
use crate::manifest::{OutDir, RunManifest};
use crate::scenes::{self, require};
use crate::{CliError, CliResult, Common};

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Match CSV, or a directory searched recursively for match CSVs.
    #[arg(long, conflicts_with = "sequence")]
    pub matches: Option<PathBuf>,
    /// Ground-truth pose of a single match CSV.
    #[arg(long, requires = "intrinsics")]
    pub pose: Option<PathBuf>,
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    /// Ground truth for a match directory: `<rel>_pose.json` per `<rel>.csv`
    /// and `intrinsics.json` in the same or the top directory.
    #[arg(long, conflicts_with = "pose")]
    pub gt: Option<PathBuf>,
    /// Frame sequence: `*.png` frames with `<frame>_pose.json` world-to-camera
    /// poses and one `intrinsics.json`; frames are matched in-run.
    #[arg(long)]
    pub sequence: Option<PathBuf>,
    /// Temporal distance between paired sequence frames.
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    /// Record matching wall-clock time in the sequence report.
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub matcher: MatcherArgs,
}

pub const REPORT: &str = "report.json";
pub const AGGREGATE: &str = "aggregate.csv";

#[derive(Debug, Serialize)]
struct PairReport {
    id: String,
    source: PathBuf,
    target: PathBuf,
    report: MetricsReport,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    config_sha256: &'a str,
    seed: u64,
    pairs: Vec<PairReport>,
    aggregate: BTreeMap<&'static str, Option<MetricSummary>>,
}

/// One pair to evaluate: where its correspondences come from and its ground truth.
struct Job {
    id: String,
    source: PathBuf,
    target: PathBuf,
    pose: Pose,
    intrinsics: Intrinsics,
}

fn csv_files(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| epimatch::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            csv_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Ground truth of `<rel>.csv` below `gt`; a `_gt` suffix is ignored, so
/// ground-truth dumps evaluate against their own pose.
fn gt_for(rel: &Path, gt: &Path) -> CliResult<(Pose, Intrinsics)> {
    let stem = rel.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let view = stem.strip_suffix("_gt").unwrap_or(stem);
    let parent = gt.join(rel.parent().unwrap_or(Path::new("")));
    let pose = scenes::load_pose(&parent.join(scenes::pose_file(view)))?;
    let local = parent.join(scenes::INTRINSICS);
    let k_path = if local.is_file() { local } else { gt.join(scenes::INTRINSICS) };
    Ok((pose, read_json(&require(k_path)?)?))
}

fn csv_jobs(args: &EvalArgs, manifest: &mut RunManifest) -> CliResult<Vec<Job>> {
    let matches = args.matches.as_ref().expect("checked by caller");
    manifest.add_input(matches);
    if matches.is_file() {
        let (Some(pose), Some(k)) = (&args.pose, &args.intrinsics) else {
            return Err(CliError::Usage("a single match file needs --pose and --intrinsics".into()));
        };
        manifest.add_input(pose);
        manifest.add_input(k);
        let id = matches.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![Job {
            id,
            source: matches.clone(),
            target: matches.clone(),
            pose: scenes::load_pose(pose)?,
            intrinsics: read_json(&require(k.clone())?)?,
        }]);
    }
    let gt = args
        .gt
        .as_ref()
        .ok_or_else(|| CliError::Usage("a match directory needs --gt".into()))?;
    manifest.add_input(gt);
    let mut files = Vec::new();
    csv_files(matches, &mut files)?;
    files
        .into_iter()
        .map(|path| {
            let rel = path.strip_prefix(matches).expect("found below the root").to_path_buf();
            let (pose, intrinsics) = gt_for(&rel, gt)?;
            let id = rel.with_extension("").to_string_lossy().replace('\\', "/");
            Ok(Job {
                id,
                source: path.clone(),
                target: path,
                pose,
                intrinsics,
            })
        })
        .collect()
}

/// Frames `k` and `k + stride` of a sorted sequence with their relative pose.
fn sequence_jobs(dir: &Path, stride: usize) -> CliResult<Vec<Job>> {
    if stride == 0 {
        return Err(CliError::Usage("--stride must be positive".into()));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| epimatch::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut frames: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    frames.sort();
    let intrinsics: Intrinsics = read_json(&require(dir.join(scenes::INTRINSICS))?)?;
    let pose_of = |p: &Path| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        scenes::load_pose(&dir.join(scenes::pose_file(stem)))
    };
    let mut jobs = Vec::new();
    for (i, j) in stride_pairs(frames.len(), stride) {
        let (a, b) = (&frames[i], &frames[j]);
        let relative = pose_of(a)?.inverse().then(&pose_of(b)?);
        let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        jobs.push(Job {
            id: format!("{}-{}", stem(a), stem(b)),
            source: a.clone(),
            target: b.clone(),
            pose: relative,
            intrinsics,
        });
    }
    Ok(jobs)
}

/// Pairs frame `k` with frame `k + stride` of `n` frames.
pub fn stride_pairs(n: usize, stride: usize) -> Vec<(usize, usize)> {
    (0..n.saturating_sub(stride)).map(|k| (k, k + stride)).collect()
}

pub fn run(args: &EvalArgs, ctx: &Context, out: &mut OutDir, manifest: &mut RunManifest) -> CliResult<()> {
    let cfg: PipelineConfig = ctx.load()?;
    manifest.record_config(&cfg);
    let mut pairs = Vec::new();
    match (&args.matches, &args.sequence) {
        (Some(_), None) => {
            for job in csv_jobs(args, manifest)? {
                let corr: Vec<(Pixel, Pixel)> = read_match_csv(&job.source)?.iter().map(|m| (m.p_s, m.p_t)).collect();
                let report = evaluate_pair(&corr, &job.intrinsics, &job.pose, 0.0, &cfg.eval)?;
                pairs.push(PairReport {
                    id: job.id,
                    source: job.source,
                    target: job.target,
                    report,
                });
            }
        }
        (None, Some(dir)) => {
            manifest.add_input(dir);
            let matcher = Matcher::new(&args.matcher, cfg.clone(), manifest)?;
            for job in sequence_jobs(dir, args.stride)? {
                let img_s = read_png(&job.source)?;
                let img_t = read_png(&job.target)?;
                let set = matcher.match_images(&img_s, &img_t)?;
                let elapsed = if args.timing { set.elapsed_ms } else { 0.0 };
                let report = evaluate_pair(&set.pixel_pairs(), &job.intrinsics, &job.pose, elapsed, &cfg.eval)?;
                pairs.push(PairReport {
                    id: job.id,
                    source: job.source,
                    target: job.target,
                    report,
                });
            }
        }
        _ => return Err(CliError::Usage("give --matches or --sequence".into())),
    }
    if pairs.is_empty() {
        return Err(CliError::Usage("no valid pairs to evaluate".into()));
    }
    let reports: Vec<MetricsReport> = pairs.iter().map(|p| p.report.clone()).collect();
    out.write(AGGREGATE, aggregate_csv(&reports).as_bytes())?;
    out.write_json(
        REPORT,
        &Report {
            config_sha256: &manifest.config_sha256,
            seed: manifest.seed,
            aggregate: aggregate(&reports),
            pairs,
        },
    )?;
    Ok(())
}
