//! Python bindings: geometry helpers, image matching, pair evaluation and the CLI.

use std::path::PathBuf;

use epimatch_core::embedding::PseudoBackbone;
use epimatch_core::evaluation::{evaluate_pair, EvalConfig};
use epimatch_core::geometry::{fundamental_from_pose, symmetric_epipolar_distance};
use epimatch_core::io::{read_checkpoint, read_png};
use epimatch_core::matching::{match_pair, phase_correlation as correlate, MatchConfig};
use epimatch_core::{FundamentalMatrix, Intrinsics, Pixel, Pose};
use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

type Mat3 = [[f64; 3]; 3];

fn py_err(e: epimatch_core::Error) -> PyErr {
    match e {
        epimatch_core::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r][c])
}

fn rows(m: &Matrix3<f64>) -> Mat3 {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

fn intrinsics(k: (f64, f64, f64, f64)) -> PyResult<Intrinsics> {
    Intrinsics::new(k.0, k.1, k.2, k.3).map_err(py_err)
}

fn pose(rotation: &Mat3, translation: [f64; 3]) -> PyResult<Pose> {
    Pose::new(matrix(rotation), Vector3::from(translation)).map_err(py_err)
}

/// `K^-T [t]x R K^-1` for intrinsics `(fx, fy, cx, cy)` and the pose
/// `X_t = R X_s + t`, as row-major nested lists.
#[pyfunction]
fn fundamental(k: (f64, f64, f64, f64), rotation: Mat3, translation: [f64; 3]) -> PyResult<Mat3> {
    let f = fundamental_from_pose(&intrinsics(k)?, &pose(&rotation, translation)?).map_err(py_err)?;
    Ok(rows(f.matrix()))
}

/// Sum of the point-to-epipolar-line distances in both images.
#[pyfunction]
fn symmetric_distance(f: Mat3, p_s: (f64, f64), p_t: (f64, f64)) -> PyResult<f64> {
    let f = FundamentalMatrix::new(matrix(&f)).map_err(py_err)?;
    symmetric_epipolar_distance(&f, Pixel::new(p_s.0, p_s.1), Pixel::new(p_t.0, p_t.1)).map_err(py_err)
}

/// Integer shift `(du, dv)` with `patch_t(x) ~ patch_s(x + d)` for row-major square patches.
#[pyfunction]
fn phase_correlation(patch_s: Vec<f64>, patch_t: Vec<f64>, size: usize) -> PyResult<(i64, i64)> {
    let s = correlate(&patch_s, &patch_t, size).map_err(py_err)?;
    Ok((s.du, s.dv))
}

/// Matches two PNG images with pseudo-backbone features. Without a
/// checkpoint the raw features are matched. Returns `(us, vs, ut, vt, score)` rows.
#[pyfunction]
#[pyo3(signature = (source, target, checkpoint=None, embed_dim=768, patch_size=14, backbone_seed=0, refine=true))]
fn match_images(
    py: Python<'_>,
    source: PathBuf,
    target: PathBuf,
    checkpoint: Option<PathBuf>,
    embed_dim: usize,
    patch_size: usize,
    backbone_seed: u64,
    refine: bool,
) -> PyResult<Vec<(f64, f64, f64, f64, f64)>> {
    py.allow_threads(|| {
        let params = checkpoint.as_deref().map(read_checkpoint).transpose()?;
        let dim = params.as_ref().map_or(embed_dim, |p| p.config().embed_dim);
        let backbone = PseudoBackbone::new(patch_size, dim, backbone_seed)?;
        let (img_s, img_t) = (read_png(&source)?, read_png(&target)?);
        let cfg = MatchConfig {
            refine,
            ..MatchConfig::default()
        };
        let set = match_pair(&backbone.extract(&img_s)?, &backbone.extract(&img_t)?, params.as_ref(), &img_s, &img_t, &cfg)?;
        Ok(set.matches.iter().map(|m| (m.p_s.u, m.p_s.v, m.p_t.u, m.p_t.v, m.score)).collect())
    })
    .map_err(py_err)
}

/// Epipolar metrics of `(us, vs, ut, vt)` correspondences against a known
/// relative pose, returned as the JSON report text.
#[pyfunction]
fn evaluate(matches: Vec<(f64, f64, f64, f64)>, k: (f64, f64, f64, f64), rotation: Mat3, translation: [f64; 3]) -> PyResult<String> {
    let pairs: Vec<(Pixel, Pixel)> = matches
        .iter()
        .map(|&(us, vs, ut, vt)| (Pixel::new(us, vs), Pixel::new(ut, vt)))
        .collect();
    let report = evaluate_pair(&pairs, &intrinsics(k)?, &pose(&rotation, translation)?, 0.0, &EvalConfig::default()).map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs the command-line tool with `argv` (without the program name) and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, argv: Vec<String>) -> i32 {
    let args = std::iter::once("epimatch".to_string()).chain(argv);
    py.allow_threads(|| epimatch_cli::run(args))
}

#[pymodule]
fn epimatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fundamental, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_distance, m)?)?;
    m.add_function(wrap_pyfunction!(phase_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(match_images, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
