//! On-disk scene layout shared by `synth`, `train`, `match`, `eval` and `robustness`.
//!
//! A scene directory holds `image.png`, `depth.dpt` and `intrinsics.json`,
//! optionally `image.feat` with exported source features, and any number of
//! synthesized views `view_NNN.png` with `view_NNN.dpt`, `view_NNN_gt.csv`
//! and `view_NNN_pose.json`.

use std::path::{Path, PathBuf};

use epimatch::io::{read_depth, read_features, read_png};
use epimatch::{DepthMap, Intrinsics, Image, Pose};

use crate::config::read_json;
use crate::{CliError, CliResult};

pub const IMAGE: &str = "image.png";
pub const DEPTH: &str = "depth.dpt";
pub const INTRINSICS: &str = "intrinsics.json";
pub const FEATURES: &str = "image.feat";

pub fn view_name(k: usize) -> String {
    format!("view_{k:03}")
}

pub fn pose_file(view: &str) -> String {
    format!("{view}_pose.json")
}

/// The scene directories below `root`: `root` itself if it holds an image,
/// else its subdirectories that do, sorted by name.
pub fn scene_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    if root.join(IMAGE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root).map_err(|e| epimatch::Error::Io {
        path: root.to_path_buf(),
        source: e,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(IMAGE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no scene found (expected {IMAGE} here or in subdirectories)",
            root.display()
        )));
    }
    Ok(dirs)
}

pub fn dir_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
}

pub fn require(path: PathBuf) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("{}: file not found", path.display())))
    }
}

pub fn load_image(dir: &Path) -> CliResult<Image> {
    Ok(read_png(&require(dir.join(IMAGE))?)?)
}

pub fn load_depth(dir: &Path) -> CliResult<DepthMap> {
    Ok(read_depth(&require(dir.join(DEPTH))?)?)
}

pub fn load_intrinsics(dir: &Path) -> CliResult<Intrinsics> {
    read_json(&require(dir.join(INTRINSICS))?)
}

pub fn load_pose(path: &Path) -> CliResult<Pose> {
    read_json(&require(path.to_path_buf())?)
}

pub fn load_features(dir: &Path) -> CliResult<Option<epimatch::embedding::FeatureMap>> {
    let path = dir.join(FEATURES);
    if path.is_file() {
        Ok(Some(read_features(&path)?))
    } else {
        Ok(None)
    }
}

/// `(view name, image path)` of every synthesized view, sorted by name.
pub fn views(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| epimatch::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?.to_string();
            let is_view = stem.starts_with("view_") && p.extension().is_some_and(|x| x == "png");
            is_view.then_some((stem, p))
        })
        .collect();
    out.sort();
    Ok(out)
}
