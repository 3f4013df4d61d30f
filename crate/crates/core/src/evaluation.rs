//! Epipolar metrics, RANSAC fundamental-matrix estimation and the
//! cross-scene robustness protocol.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::embedding::{AdaptationParams, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{
    fundamental_from_pose, symmetric_epipolar_distance, target_epipolar_distance, FundamentalMatrix, Intrinsics,
    Pixel, Pose,
};
use crate::matching::{match_pair, MatchConfig};
use crate::raster::Image;
use crate::seed;

/// Minimal sample size of the linear solver.
pub const MIN_CORRESPONDENCES: usize = 8;

/// Distance used for the true-positive test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Sum of the target-side and source-side point-to-line distances.
    #[default]
    Symmetric,
    /// Target-side point-to-line distance only.
    TargetOnly,
}

impl DistanceMode {
    pub fn distance(self, f: &FundamentalMatrix, p_s: Pixel, p_t: Pixel) -> Result<f64> {
        match self {
            DistanceMode::Symmetric => symmetric_epipolar_distance(f, p_s, p_t),
            DistanceMode::TargetOnly => target_epipolar_distance(f, p_s, p_t),
        }
    }
}

/// Per-pair distances with degenerate lines removed, and how many were removed.
fn distances(pairs: &[(Pixel, Pixel)], f: &FundamentalMatrix, mode: DistanceMode) -> Result<(Vec<f64>, usize)> {
    let mut out = Vec::with_capacity(pairs.len());
    let mut degenerate = 0;
    for &(p_s, p_t) in pairs {
        match mode.distance(f, p_s, p_t) {
            Ok(d) => out.push(d),
            Err(Error::DegenerateLine) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, degenerate))
}

/// Mean symmetric epipolar distance in pixels.
pub fn epipolar_error(pairs: &[(Pixel, Pixel)], f_gt: &FundamentalMatrix) -> Result<f64> {
    let (d, _) = distances(pairs, f_gt, DistanceMode::Symmetric)?;
    if d.is_empty() {
        return Err(Error::UndefinedMetric("epipolar error of an empty correspondence set"));
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Percentage of pairs whose epipolar distance is below `threshold` pixels.
pub fn precision(pairs: &[(Pixel, Pixel)], f_gt: &FundamentalMatrix, threshold: f64, mode: DistanceMode) -> Result<f64> {
    let (d, _) = distances(pairs, f_gt, mode)?;
    if d.is_empty() {
        return Err(Error::UndefinedMetric("precision of an empty correspondence set"));
    }
    let tp = d.iter().filter(|&&x| x < threshold).count();
    Ok(100.0 * tp as f64 / d.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    /// Inlier threshold on the symmetric epipolar distance, pixels.
    pub threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            confidence: 0.999,
            max_iterations: 10_000,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::invalid("RANSAC threshold must be positive"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::invalid("RANSAC confidence must be in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("RANSAC needs at least one iteration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub fundamental: FundamentalMatrix,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Similarity taking points to zero centroid and mean distance sqrt(2).
fn normalizing_transform(points: &[Pixel]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let cu = points.iter().map(|p| p.u).sum::<f64>() / n;
    let cv = points.iter().map(|p| p.v).sum::<f64>() / n;
    let mean = points.iter().map(|p| (p.u - cu).hypot(p.v - cv)).sum::<f64>() / n;
    if !(mean > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Some(Matrix3::new(s, 0.0, -s * cu, 0.0, s, -s * cv, 0.0, 0.0, 1.0))
}

/// Normalized eight-point estimate with rank-2 enforcement from at least 8 pairs.
pub fn eight_point(pairs: &[(Pixel, Pixel)]) -> Result<FundamentalMatrix> {
    if pairs.len() < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientData {
            needed: MIN_CORRESPONDENCES,
            got: pairs.len(),
        });
    }
    let degenerate = || Error::EstimationFailed("degenerate point configuration".into());
    let src: Vec<Pixel> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Pixel> = pairs.iter().map(|p| p.1).collect();
    let ts = normalizing_transform(&src).ok_or_else(degenerate)?;
    let tt = normalizing_transform(&dst).ok_or_else(degenerate)?;
    let rows = pairs.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (r, (p_s, p_t)) in pairs.iter().enumerate() {
        let s = ts * p_s.homogeneous();
        let t = tt * p_t.homogeneous();
        let row = [
            t.x * s.x,
            t.x * s.y,
            t.x,
            t.y * s.x,
            t.y * s.y,
            t.y,
            s.x,
            s.y,
            1.0,
        ];
        for (c, v) in row.into_iter().enumerate() {
            a[(r, c)] = v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(degenerate)?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bk, bv), (k, &v)| if v < bv { (k, v) } else { (bk, bv) });
    let f = v_t.row(k);
    let f_hat = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let svd = f_hat.svd(true, true);
    let (u, v_t) = (svd.u.ok_or_else(degenerate)?, svd.v_t.ok_or_else(degenerate)?);
    let mut sv = svd.singular_values;
    let smallest = sv.imin();
    sv[smallest] = 0.0;
    let f_rank2 = u * Matrix3::from_diagonal(&sv) * v_t;
    let f = tt.transpose() * f_rank2 * ts;
    if !f.iter().all(|v| v.is_finite()) || f.norm() == 0.0 {
        return Err(degenerate());
    }
    FundamentalMatrix::new(f / f.norm())
}

fn consensus(pairs: &[(Pixel, Pixel)], f: &FundamentalMatrix, threshold: f64) -> Vec<bool> {
    pairs
        .iter()
        .map(|&(p_s, p_t)| symmetric_epipolar_distance(f, p_s, p_t).is_ok_and(|d| d < threshold))
        .collect()
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Iterations needed to draw one all-inlier minimal sample with `confidence`.
fn required_iterations(inlier_ratio: f64, confidence: f64) -> f64 {
    let p_good = inlier_ratio.powi(MIN_CORRESPONDENCES as i32);
    if p_good >= 1.0 {
        return 1.0;
    }
    if p_good <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / (1.0 - p_good).ln()).ceil()
}

/// Hypothesize-and-verify with minimal 8-point samples. The best consensus is
/// re-fitted on its inliers and the refit kept when it does not lose inliers.
pub fn estimate_fundamental_ransac(pairs: &[(Pixel, Pixel)], cfg: &RansacConfig) -> Result<RansacResult> {
    cfg.validate()?;
    if pairs.len() < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientData {
            needed: MIN_CORRESPONDENCES,
            got: pairs.len(),
        });
    }
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::Stream::Ransac, 0));
    let mut best: Option<(FundamentalMatrix, Vec<bool>, usize)> = None;
    let mut needed = cfg.max_iterations as f64;
    let mut iterations = 0;
    let mut sample = Vec::with_capacity(MIN_CORRESPONDENCES);
    while iterations < cfg.max_iterations && (iterations as f64) < needed {
        iterations += 1;
        sample.clear();
        sample.extend(
            rand::seq::index::sample(&mut rng, pairs.len(), MIN_CORRESPONDENCES)
                .into_iter()
                .map(|i| pairs[i]),
        );
        let Ok(f) = eight_point(&sample) else { continue };
        let mask = consensus(pairs, &f, cfg.threshold);
        let n = count(&mask);
        if best.as_ref().is_none_or(|b| n > b.2) {
            needed = required_iterations(n as f64 / pairs.len() as f64, cfg.confidence);
            best = Some((f, mask, n));
        }
    }
    let (mut f, mut mask, mut n) = best.ok_or_else(|| Error::EstimationFailed("every minimal sample was degenerate".into()))?;
    for _ in 0..10 {
        if n < MIN_CORRESPONDENCES {
            break;
        }
        let inliers: Vec<(Pixel, Pixel)> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
        let Ok(refit) = eight_point(&inliers) else { break };
        let refit_mask = consensus(pairs, &refit, cfg.threshold);
        let refit_n = count(&refit_mask);
        if refit_n < n || refit_mask == mask {
            if refit_n >= n {
                f = refit;
            }
            break;
        }
        f = refit;
        mask = refit_mask;
        n = refit_n;
    }
    Ok(RansacResult {
        fundamental: f,
        inliers: mask,
        iterations,
    })
}

/// `||F - G||_F` after scaling both to unit Frobenius norm and aligning signs.
pub fn fundamental_error(f_est: &FundamentalMatrix, f_gt: &FundamentalMatrix) -> Result<f64> {
    let a = f_est.matrix();
    let b = f_gt.matrix();
    let (na, nb) = (a.norm(), b.norm());
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::invalid("fundamental matrix with zero norm"));
    }
    let a = a / na;
    let mut b = b / nb;
    if a.dot(&b) < 0.0 {
        b = -b;
    }
    Ok((a - b).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InlierStats {
    pub percent: f64,
    pub n_inliers: usize,
    pub n_matches: usize,
}

/// `100 * M_RANSAC / M_all` from a RANSAC run on the correspondences.
pub fn inlier_percentage(pairs: &[(Pixel, Pixel)], cfg: &RansacConfig) -> Result<(InlierStats, RansacResult)> {
    let r = estimate_fundamental_ransac(pairs, cfg)?;
    let n_inliers = r.inlier_count();
    Ok((
        InlierStats {
            percent: 100.0 * n_inliers as f64 / pairs.len() as f64,
            n_inliers,
            n_matches: pairs.len(),
        },
        r,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ransac: RansacConfig,
    /// True-positive threshold for precision, pixels.
    pub tp_threshold: f64,
    pub distance: DistanceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            tp_threshold: 1.0,
            distance: DistanceMode::Symmetric,
        }
    }
}

/// All metrics of one image pair. Metrics that could not be computed are
/// `None` and carry a reason in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epipolar_error: Option<f64>,
    pub precision: Option<f64>,
    pub fundamental_error: Option<f64>,
    pub inlier_percentage: Option<f64>,
    pub n_matches: usize,
    pub n_ransac_inliers: Option<usize>,
    pub elapsed_ms: f64,
    pub degenerate_lines: usize,
    pub undefined: BTreeMap<String, String>,
}

/// Computes every metric of a pair against the ground truth `(K, T_gt)`.
pub fn evaluate_pair(
    pairs: &[(Pixel, Pixel)],
    k: &Intrinsics,
    pose_gt: &Pose,
    elapsed_ms: f64,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.ransac.validate()?;
    let f_gt = fundamental_from_pose(k, pose_gt)?;
    let mut undefined = BTreeMap::new();
    let mut keep = |name: &str, r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            undefined.insert(name.to_string(), e.to_string());
            None
        }
    };
    let (_, degenerate_lines) = distances(pairs, &f_gt, DistanceMode::Symmetric)?;
    let epipolar = keep("epipolar_error", epipolar_error(pairs, &f_gt));
    let prec = keep("precision", precision(pairs, &f_gt, cfg.tp_threshold, cfg.distance));
    let ransac = inlier_percentage(pairs, &cfg.ransac);
    let (inlier_pct, n_inliers, f_err) = match ransac {
        Ok((stats, r)) => (
            Some(stats.percent),
            Some(stats.n_inliers),
            keep("fundamental_error", fundamental_error(&r.fundamental, &f_gt)),
        ),
        Err(e) => {
            let msg = e.to_string();
            undefined.insert("inlier_percentage".into(), msg.clone());
            undefined.insert("fundamental_error".into(), msg);
            (None, None, None)
        }
    };
    Ok(MetricsReport {
        epipolar_error: epipolar,
        precision: prec,
        fundamental_error: f_err,
        inlier_percentage: inlier_pct,
        n_matches: pairs.len(),
        n_ransac_inliers: n_inliers,
        elapsed_ms,
        degenerate_lines,
        undefined,
    })
}

/// Mean and sample standard deviation of one metric over the pairs where it is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MetricSummary { mean, std, n })
}

/// Names and extractors of the aggregated columns, in output order.
pub const AGGREGATE_METRICS: [&str; 7] = [
    "epipolar_error",
    "precision",
    "fundamental_error",
    "inlier_percentage",
    "n_matches",
    "n_ransac_inliers",
    "elapsed_ms",
];

fn metric_value(r: &MetricsReport, name: &str) -> Option<f64> {
    match name {
        "epipolar_error" => r.epipolar_error,
        "precision" => r.precision,
        "fundamental_error" => r.fundamental_error,
        "inlier_percentage" => r.inlier_percentage,
        "n_matches" => Some(r.n_matches as f64),
        "n_ransac_inliers" => r.n_ransac_inliers.map(|v| v as f64),
        "elapsed_ms" => Some(r.elapsed_ms),
        _ => None,
    }
}

pub fn aggregate(reports: &[MetricsReport]) -> BTreeMap<&'static str, Option<MetricSummary>> {
    AGGREGATE_METRICS
        .iter()
        .map(|&name| {
            let v: Vec<f64> = reports.iter().filter_map(|r| metric_value(r, name)).collect();
            (name, summarize(&v))
        })
        .collect()
}

/// `metric,mean,std,n` rows; undefined metrics have empty mean and std.
pub fn aggregate_csv(reports: &[MetricsReport]) -> String {
    let agg = aggregate(reports);
    let mut s = String::from("metric,mean,std,n\n");
    for name in AGGREGATE_METRICS {
        match agg[name] {
            Some(m) => s.push_str(&format!("{name},{:.6},{:.6},{}\n", m.mean, m.std, m.n)),
            None => s.push_str(&format!("{name},,,0\n")),
        }
    }
    s
}

/// Inputs of one cross-scene pair.
#[derive(Debug, Clone, Copy)]
pub struct ScenePair<'a> {
    pub feat_s: &'a FeatureMap,
    pub feat_t: &'a FeatureMap,
    pub img_s: &'a Image,
    pub img_t: &'a Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCount {
    pub n_matches: usize,
    pub n_inliers: usize,
    /// Too few matches, or RANSAC failed: inliers reported as 0.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub n_matches: usize,
    pub n_inliers: usize,
    pub pairs: Vec<PairCount>,
}

/// Matches every pair and counts retained matches and RANSAC inliers. On
/// content-disjoint pairs every match and inlier is spurious.
pub fn robustness_protocol(
    pairs: &[ScenePair<'_>],
    params: Option<&AdaptationParams>,
    match_cfg: &MatchConfig,
    ransac_cfg: &RansacConfig,
) -> Result<RobustnessReport> {
    let mut counts = Vec::with_capacity(pairs.len());
    for p in pairs {
        let set = match_pair(p.feat_s, p.feat_t, params, p.img_s, p.img_t, match_cfg)?;
        let n_matches = set.len();
        let count = if n_matches < MIN_CORRESPONDENCES {
            PairCount {
                n_matches,
                n_inliers: 0,
                flagged: true,
            }
        } else {
            match estimate_fundamental_ransac(&set.pixel_pairs(), ransac_cfg) {
                Ok(r) => PairCount {
                    n_matches,
                    n_inliers: r.inlier_count(),
                    flagged: false,
                },
                Err(Error::EstimationFailed(_)) => PairCount {
                    n_matches,
                    n_inliers: 0,
                    flagged: true,
                },
                Err(e) => return Err(e),
            }
        };
        counts.push(count);
    }
    Ok(RobustnessReport {
        n_matches: counts.iter().map(|c| c.n_matches).sum(),
        n_inliers: counts.iter().map(|c| c.n_inliers).sum(),
        pairs: counts,
    })
}

/// Exact correspondences seen by two cameras `(K, identity)` and `(K, pose)`
/// for random points in front of both, with depths in `depth_range`.
pub fn synthetic_correspondences(
    k: &Intrinsics,
    pose: &Pose,
    width: f64,
    height: f64,
    depth_range: [f64; 2],
    n: usize,
    sample_seed: u64,
) -> Vec<(Pixel, Pixel)> {
    use rand::Rng;
    let mut rng = seed::rng(sample_seed);
    let mut out = Vec::with_capacity(n);
    let mut guard = 0;
    while out.len() < n && guard < 1000 * n.max(1) {
        guard += 1;
        let p = Pixel::new(rng.random_range(0.0..width), rng.random_range(0.0..height));
        let d = rng.random_range(depth_range[0]..depth_range[1]);
        let Ok(x) = crate::geometry::backproject(p, d, k) else { continue };
        let y = pose.apply(&x);
        let Ok(q) = crate::geometry::project(&y, k) else { continue };
        if q.u >= 0.0 && q.u < width && q.v >= 0.0 && q.v < height {
            out.push((p, q));
        }
    }
    out
}

/// Ground-truth fundamental matrix rebuilt from a 3x3 array, for callers that
/// already hold `F` rather than `(K, T)`.
pub fn fundamental_from_rows(rows: [[f64; 3]; 3]) -> Result<FundamentalMatrix> {
    FundamentalMatrix::new(Matrix3::from_fn(|r, c| rows[r][c]))
}

/// Algebraic residual `p_t^T F p_s` with `F` scaled to unit Frobenius norm.
pub fn algebraic_residual(f: &FundamentalMatrix, p_s: Pixel, p_t: Pixel) -> f64 {
    let m = f.matrix() / f.matrix().norm();
    let r: Vector3<f64> = m * p_s.homogeneous();
    p_t.homogeneous().dot(&r)
}
