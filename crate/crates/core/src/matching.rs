//! Correspondence extraction: cosine similarity, mutual nearest neighbours
//! with a threshold, and phase-correlation refinement.

use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::embedding::{adaptation_forward, AdaptationParams, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::Pixel;
use crate::raster::Image;

/// Entry used for rows or columns whose descriptor has zero norm.
pub const ZERO_NORM_SENTINEL: f64 = -2.0;

/// Dense `N_s x N_t` cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    /// Wraps precomputed similarities. Entries must be finite and either in
    /// `[-1 - 1e-6, 1 + 1e-6]` or equal to the sentinel.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values
            .iter()
            .find(|&&v| !(v.is_finite() && (v.abs() <= 1.0 + 1e-6 || v == ZERO_NORM_SENTINEL)))
        {
            return Err(Error::invalid(format!("similarity {v} out of range")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn transpose(&self) -> Self {
        Self {
            values: self.values.t().to_owned(),
        }
    }
}

fn unit_rows(m: &FeatureMap) -> (Array2<f64>, Vec<bool>) {
    let mut t = m.to_tokens();
    let mut valid = Vec::with_capacity(t.nrows());
    for mut row in t.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
            valid.push(true);
        } else {
            valid.push(false);
        }
    }
    (t, valid)
}

/// `S_ij = cos(M_s[i], M_t[j])`.
pub fn similarity_matrix(m_s: &FeatureMap, m_t: &FeatureMap) -> Result<SimilarityMatrix> {
    if m_s.embed_dim() != m_t.embed_dim() {
        return Err(Error::invalid(format!(
            "descriptor dimensions differ: {} vs {}",
            m_s.embed_dim(),
            m_t.embed_dim()
        )));
    }
    let (a, va) = unit_rows(m_s);
    let (b, vb) = unit_rows(m_t);
    let mut values = a.dot(&b.t());
    for ((i, j), v) in values.indexed_iter_mut() {
        if !va[i] || !vb[j] {
            *v = ZERO_NORM_SENTINEL;
        }
    }
    Ok(SimilarityMatrix { values })
}

/// Tie-breaking rule for argmax operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
}

/// Which endpoint the phase-correlation displacement is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineTarget {
    /// `p_s <- p_s + delta` as published.
    #[default]
    Source,
    /// Not the published rule: `p_t <- p_t - delta`, leaving `p_s` at the patch center.
    Target,
}

/// Taper applied to image patches before correlation during refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Raw patches.
    None,
    /// Mean removal followed by a separable periodic Hann window.
    #[default]
    Hann,
}

impl Window {
    fn apply(self, patch: &mut [f64], size: usize) {
        if self == Window::None {
            return;
        }
        let mean = patch.iter().sum::<f64>() / patch.len() as f64;
        let w: Vec<f64> = (0..size)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / size as f64).cos())
            .collect();
        for (k, v) in patch.iter_mut().enumerate() {
            *v = (*v - mean) * w[k % size] * w[k / size];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub threshold: f64,
    pub refine: bool,
    pub subpixel: bool,
    pub tie_break: TieBreak,
    pub refine_target: RefineTarget,
    pub window: Window,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            refine: true,
            subpixel: false,
            tie_break: TieBreak::LowestIndex,
            refine_target: RefineTarget::Source,
            window: Window::Hann,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > -1.0 && self.threshold <= 1.0) {
            return Err(Error::invalid(format!("threshold {} outside (-1, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// A retained pair of patch indices and their similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Pairs that are each other's best match with similarity above the threshold.
pub fn mutual_nn_matches(s: &SimilarityMatrix, cfg: &MatchConfig) -> Vec<PatchMatch> {
    let v = &s.values;
    let col_best: Vec<Option<usize>> = v.columns().into_iter().map(|c| argmax(c.iter().copied())).collect();
    v.rows()
        .into_iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let j = argmax(row.iter().copied())?;
            let score = row[j];
            (col_best[j] == Some(i) && score > cfg.threshold).then_some(PatchMatch { i, j, score })
        })
        .collect()
}

/// Result of correlating two patches: `patch_t(x) ~ patch_s(x + (du, dv))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseShift {
    pub du: i64,
    pub dv: i64,
    pub peak: f64,
    /// Parabola-refined displacement around the integer peak.
    pub subpixel: (f64, f64),
}

/// Reusable FFT plans for one patch size.
pub struct PhaseCorrelator {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PhaseCorrelator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PhaseCorrelator").field("size", &self.size).finish()
    }
}

impl PhaseCorrelator {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn fft2(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let n = self.size;
        for row in data.chunks_exact_mut(n) {
            fft.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = data[r * n + c];
            }
            fft.process(&mut col);
            for r in 0..n {
                data[r * n + c] = col[r];
            }
        }
    }

    /// Integer argmax of the inverse FFT of the normalized cross-power
    /// spectrum, with displacements wrapped into `(-P/2, P/2]`.
    pub fn correlate(&self, patch_s: &[f64], patch_t: &[f64]) -> Result<PhaseShift> {
        let n = self.size;
        if patch_s.len() != n * n || patch_t.len() != n * n {
            return Err(Error::invalid(format!("patches must hold {} values", n * n)));
        }
        for p in [patch_s, patch_t] {
            let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            if !(hi - lo > 1e-12) {
                return Err(Error::DegeneratePatch("constant patch has no phase information"));
            }
        }
        let to_complex = |p: &[f64]| p.iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>();
        let mut fs = to_complex(patch_s);
        let mut ft = to_complex(patch_t);
        self.fft2(&mut fs, &self.forward);
        self.fft2(&mut ft, &self.forward);
        let mut cross: Vec<Complex64> = fs.iter().zip(&ft).map(|(a, b)| a * b.conj()).collect();
        let max_mag = cross.iter().map(|c| c.norm()).fold(0.0, f64::max);
        for c in cross.iter_mut() {
            let m = c.norm();
            *c = if m > f64::EPSILON * max_mag && m > 0.0 {
                *c / m
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        self.fft2(&mut cross, &self.inverse);
        let scale = 1.0 / (n * n) as f64;
        let corr: Vec<f64> = cross.iter().map(|c| c.re * scale).collect();
        let k = argmax(corr.iter().copied()).expect("non-empty patch");
        let (row, col) = (k / n, k % n);
        let wrap = |i: usize| if i > n / 2 { i as i64 - n as i64 } else { i as i64 };
        let at = |r: usize, c: usize| corr[(r % n) * n + (c % n)];
        let parabola = |m: f64, c: f64, p: f64| {
            let denom = m - 2.0 * c + p;
            if denom < 0.0 {
                (0.5 * (m - p) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        };
        let peak = corr[k];
        let du = wrap(col);
        let dv = wrap(row);
        let sub_u = parabola(at(row, col + n - 1), peak, at(row, col + 1));
        let sub_v = parabola(at(row + n - 1, col), peak, at(row + 1, col));
        Ok(PhaseShift {
            du,
            dv,
            peak,
            subpixel: (du as f64 + sub_u, dv as f64 + sub_v),
        })
    }
}

/// One-shot [`PhaseCorrelator::correlate`] on square `size x size` patches.
pub fn phase_correlation(patch_s: &[f64], patch_t: &[f64], size: usize) -> Result<PhaseShift> {
    PhaseCorrelator::new(size)?.correlate(patch_s, patch_t)
}

/// A pixel correspondence produced by the matcher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub p_s: Pixel,
    pub p_t: Pixel,
    pub score: f64,
    pub i: usize,
    pub j: usize,
    /// Applied phase-correlation displacement; zero when unrefined.
    pub displacement: (f64, f64),
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub matches: Vec<Correspondence>,
    pub elapsed_ms: f64,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pixel_pairs(&self) -> Vec<(Pixel, Pixel)> {
        self.matches.iter().map(|m| (m.p_s, m.p_t)).collect()
    }

    /// `us,vs,ut,vt,score` rows with six decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("us,vs,ut,vt,score\n");
        for m in &self.matches {
            s.push_str(&format!(
                "{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                m.p_s.u, m.p_s.v, m.p_t.u, m.p_t.v, m.score
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn patch_luma(img: &Image, grid: &FeatureMap, index: usize, window: Window) -> Option<Vec<f64>> {
    let (r, c) = grid.cell(index);
    let p = grid.patch_size();
    let mut patch = img.luma_patch(c * p, r * p, p)?;
    let (lo, hi) = patch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi - lo > 1e-12) {
        return None;
    }
    window.apply(&mut patch, p);
    Some(patch)
}

/// Converts patch matches to pixel correspondences, refining each with phase
/// correlation of the luma patches when enabled. Unrefinable matches keep
/// their patch centers.
pub fn refine_matches(
    matches: &[PatchMatch],
    grid_s: &FeatureMap,
    grid_t: &FeatureMap,
    img_s: &Image,
    img_t: &Image,
    cfg: &MatchConfig,
) -> Result<CorrespondenceSet> {
    if grid_s.patch_size() != grid_t.patch_size() {
        return Err(Error::invalid("source and target patch sizes differ"));
    }
    let correlator = PhaseCorrelator::new(grid_s.patch_size())?;
    let out = matches
        .iter()
        .map(|m| {
            let c_s = grid_s.patch_center(m.i);
            let c_t = grid_t.patch_center(m.j);
            let shift = cfg
                .refine
                .then(|| {
                    Some((
                        patch_luma(img_s, grid_s, m.i, cfg.window)?,
                        patch_luma(img_t, grid_t, m.j, cfg.window)?,
                    ))
                })
                .flatten()
                .and_then(|(ps, pt)| correlator.correlate(&ps, &pt).ok());
            let (displacement, refined) = match shift {
                Some(s) if cfg.subpixel => (s.subpixel, true),
                Some(s) => ((s.du as f64, s.dv as f64), true),
                None => ((0.0, 0.0), false),
            };
            let (du, dv) = displacement;
            let (p_s, p_t) = match cfg.refine_target {
                RefineTarget::Source => (Pixel::new(c_s.u + du, c_s.v + dv), c_t),
                RefineTarget::Target => (c_s, Pixel::new(c_t.u - du, c_t.v - dv)),
            };
            Correspondence {
                p_s,
                p_t,
                score: m.score,
                i: m.i,
                j: m.j,
                displacement,
                refined,
            }
        })
        .collect();
    Ok(CorrespondenceSet {
        matches: out,
        elapsed_ms: 0.0,
    })
}

/// Adaptation (skipped without `params`), similarity, mutual-NN retention and
/// refinement. `elapsed_ms` covers the whole call.
pub fn match_pair(
    feat_s: &FeatureMap,
    feat_t: &FeatureMap,
    params: Option<&AdaptationParams>,
    img_s: &Image,
    img_t: &Image,
    cfg: &MatchConfig,
) -> Result<CorrespondenceSet> {
    let start = Instant::now();
    cfg.validate()?;
    if feat_s.embed_dim() != feat_t.embed_dim() || feat_s.patch_size() != feat_t.patch_size() {
        return Err(Error::invalid("feature maps differ in descriptor size or patch size"));
    }
    for (f, img, side) in [(feat_s, img_s, "source"), (feat_t, img_t, "target")] {
        let p = f.patch_size();
        if f.grid_h() * p > img.height() || f.grid_w() * p > img.width() {
            return Err(Error::invalid(format!(
                "{side} grid {}x{} with P={p} exceeds the {}x{} image",
                f.grid_h(),
                f.grid_w(),
                img.height(),
                img.width()
            )));
        }
    }
    let (m_s, m_t) = match params {
        Some(p) => (adaptation_forward(feat_s, p)?, adaptation_forward(feat_t, p)?),
        None => (feat_s.clone(), feat_t.clone()),
    };
    let s = similarity_matrix(&m_s, &m_t)?;
    let retained = mutual_nn_matches(&s, cfg);
    let mut set = refine_matches(&retained, &m_s, &m_t, img_s, img_t, cfg)?;
    set.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{pseudo_backbone, BlockConfig};
    use crate::seed;
    use crate::synthesis::{make_synthetic_scene, SceneSpec};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(threshold: f64) -> MatchConfig {
        MatchConfig {
            threshold,
            ..Default::default()
        }
    }

    fn sim(v: Array2<f64>) -> SimilarityMatrix {
        SimilarityMatrix::from_values(v).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let basis = FeatureMap::new(1, 2, 2, 14, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = similarity_matrix(&basis, &basis).unwrap();
        assert_eq!(s.values(), &array![[1.0, 0.0], [0.0, 1.0]]);
        let mut rng = seed::rng(1);
        let data: Vec<f32> = (0..6 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = FeatureMap::new(2, 3, 8, 14, data).unwrap();
        let s = similarity_matrix(&f, &f).unwrap();
        let s3 = similarity_matrix(&f.scaled(3.0), &f).unwrap();
        for i in 0..6 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-6);
            for j in 0..6 {
                assert!((s.get(i, j) - s3.get(i, j)).abs() < 1e-6);
            }
        }
        let other = FeatureMap::new(1, 1, 4, 14, vec![1.0; 4]).unwrap();
        assert!(similarity_matrix(&basis, &other).is_err());
    }

    #[test]
    fn zero_norm_descriptors_use_sentinel() {
        let a = FeatureMap::new(1, 2, 2, 14, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let s = similarity_matrix(&a, &a).unwrap();
        assert_eq!(s.get(0, 0), ZERO_NORM_SENTINEL);
        assert_eq!(s.get(0, 1), ZERO_NORM_SENTINEL);
        assert_eq!(s.get(1, 1), 1.0);
        let m = mutual_nn_matches(&s, &cfg(0.95));
        assert_eq!(m, vec![PatchMatch { i: 1, j: 1, score: 1.0 }]);
    }

    #[test]
    fn mutual_nn_examples() {
        let m = mutual_nn_matches(&sim(array![[0.99, 0.1], [0.2, 0.97]]), &cfg(0.95));
        assert_eq!(
            m,
            vec![PatchMatch { i: 0, j: 0, score: 0.99 }, PatchMatch { i: 1, j: 1, score: 0.97 }]
        );
        let m = mutual_nn_matches(&sim(array![[0.99, 0.98], [0.97, 0.20]]), &cfg(0.95));
        assert_eq!(m, vec![PatchMatch { i: 0, j: 0, score: 0.99 }]);
        assert!(mutual_nn_matches(&sim(Array2::from_elem((3, 3), 0.5)), &cfg(0.95)).is_empty());
    }

    /// Mutual nearest neighbours checked pair by pair over the whole matrix.
    fn brute_force_mnn(s: &SimilarityMatrix, threshold: f64) -> Vec<PatchMatch> {
        let mut out = Vec::new();
        for i in 0..s.rows() {
            for j in 0..s.cols() {
                let v = s.get(i, j);
                let row_best = (0..s.cols()).all(|k| s.get(i, k) < v || (s.get(i, k) == v && k >= j));
                let col_best = (0..s.rows()).all(|l| s.get(l, j) < v || (s.get(l, j) == v && l >= i));
                if row_best && col_best && v > threshold {
                    out.push(PatchMatch { i, j, score: v });
                }
            }
        }
        out
    }

    fn random_sim(rng: &mut impl Rng, r: usize, c: usize, levels: u32) -> SimilarityMatrix {
        sim(Array2::from_shape_fn((r, c), |_| {
            let k = rng.random_range(0..=levels);
            -1.0 + 2.0 * k as f64 / levels as f64
        }))
    }

    #[test]
    fn mnn_agrees_with_brute_force_and_is_symmetric_and_bijective() {
        let mut rng = seed::rng(7);
        for _ in 0..100 {
            let (r, c) = (rng.random_range(1..8), rng.random_range(1..8));
            let s = random_sim(&mut rng, r, c, 8);
            let t = rng.random_range(-0.9..0.9);
            let m = mutual_nn_matches(&s, &cfg(t));
            assert_eq!(m, brute_force_mnn(&s, t));
            let mut swapped: Vec<PatchMatch> = mutual_nn_matches(&s.transpose(), &cfg(t))
                .into_iter()
                .map(|p| PatchMatch { i: p.j, j: p.i, score: p.score })
                .collect();
            swapped.sort_by_key(|p| p.i);
            assert_eq!(swapped, m);
            let mut js: Vec<usize> = m.iter().map(|p| p.j).collect();
            js.sort();
            js.dedup();
            assert_eq!(js.len(), m.len());
        }
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_matches(seed_v in 0u64..1000, t1 in -0.9f64..0.99, dt in 0.0f64..0.5) {
            let mut rng = seed::rng(seed_v);
            let s = random_sim(&mut rng, 6, 5, 20);
            let low = mutual_nn_matches(&s, &cfg(t1));
            let high = mutual_nn_matches(&s, &cfg((t1 + dt).min(1.0)));
            prop_assert!(high.iter().all(|m| low.contains(m)));
        }

        #[test]
        fn descriptor_scaling_keeps_matches(seed_v in 0u64..1000, factor in 0.01f32..100.0) {
            let mut rng = seed::rng(seed_v);
            let gen = |rng: &mut rand_chacha::ChaCha8Rng| -> FeatureMap {
                FeatureMap::new(3, 3, 6, 14, (0..54).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
            };
            let a = gen(&mut rng);
            let b = gen(&mut rng);
            let c = cfg(0.0);
            let m1 = mutual_nn_matches(&similarity_matrix(&a, &b).unwrap(), &c);
            let m2 = mutual_nn_matches(&similarity_matrix(&a.scaled(factor), &b.scaled(factor)).unwrap(), &c);
            let ij = |m: &[PatchMatch]| m.iter().map(|p| (p.i, p.j)).collect::<Vec<_>>();
            prop_assert_eq!(ij(&m1), ij(&m2));
        }
    }

    fn noise_patch(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n * n).map(|_| rng.random::<f64>()).collect()
    }

    /// `out(x) = p(x + d)` cyclically.
    fn cyclic_shift(p: &[f64], n: usize, du: i64, dv: i64) -> Vec<f64> {
        let m = n as i64;
        (0..n * n)
            .map(|k| {
                let (y, x) = ((k / n) as i64, (k % n) as i64);
                p[((y + dv).rem_euclid(m) * m + (x + du).rem_euclid(m)) as usize]
            })
            .collect()
    }

    /// Shift maximizing the spatial cyclic cross-correlation
    /// `sum_x p_s(x + d) p_t(x)`, lowest raster index on ties.
    fn spatial_oracle(ps: &[f64], pt: &[f64], n: usize) -> (i64, i64) {
        let half = (n / 2) as i64;
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for dv in (half + 1 - n as i64)..=half {
            for du in (half + 1 - n as i64)..=half {
                let shifted = cyclic_shift(ps, n, du, dv);
                let c: f64 = shifted.iter().zip(pt).map(|(a, b)| a * b).sum();
                if c > best.0 {
                    best = (c, du, dv);
                }
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn phase_correlation_examples() {
        let mut rng = seed::rng(3);
        let p = noise_patch(&mut rng, 14);
        let s = phase_correlation(&p, &p, 14).unwrap();
        assert_eq!((s.du, s.dv), (0, 0));
        let t = cyclic_shift(&p, 14, 3, 2);
        let s = phase_correlation(&p, &t, 14).unwrap();
        assert_eq!((s.du, s.dv), (3, 2));
        assert_eq!(spatial_oracle(&p, &t, 14), (3, 2));
        assert!((s.peak - 1.0).abs() < 1e-9);
        assert!(matches!(
            phase_correlation(&vec![0.5; 196], &p, 14),
            Err(Error::DegeneratePatch(_))
        ));
    }

    #[test]
    fn phase_correlation_recovers_random_shifts() {
        let mut rng = seed::rng(11);
        let n = 14;
        let lim = (n / 2 - 1) as i64;
        let corr = PhaseCorrelator::new(n).unwrap();
        let mut hits = 0;
        for _ in 0..1000 {
            let p = noise_patch(&mut rng, n);
            let (du, dv) = (rng.random_range(-lim..=lim), rng.random_range(-lim..=lim));
            let t = cyclic_shift(&p, n, du, dv);
            let s = corr.correlate(&p, &t).unwrap();
            if (s.du, s.dv) == (du, dv) && spatial_oracle(&p, &t, n) == (du, dv) {
                hits += 1;
            }
        }
        assert!(hits >= 990, "{hits}");
    }

    #[test]
    fn phase_correlation_shift_equivariance() {
        let mut rng = seed::rng(12);
        let n = 14;
        for _ in 0..50 {
            let p = noise_patch(&mut rng, n);
            let du = rng.random_range(-5..5);
            let a = phase_correlation(&p, &cyclic_shift(&p, n, du, 1), n).unwrap();
            let b = phase_correlation(&p, &cyclic_shift(&p, n, du + 1, 1), n).unwrap();
            let wrap = |d: i64| {
                let m = (d - 1).rem_euclid(n as i64) + 1;
                if m > (n / 2) as i64 { m - n as i64 } else { m }
            };
            assert_eq!(b.du, wrap(a.du + 1));
            assert_eq!(b.dv, a.dv);
        }
    }

    #[test]
    fn subpixel_is_exact_on_integer_shift() {
        let mut rng = seed::rng(13);
        let p = noise_patch(&mut rng, 14);
        let s = phase_correlation(&p, &cyclic_shift(&p, 14, -4, 5), 14).unwrap();
        assert_eq!((s.du, s.dv), (-4, 5));
        assert!((s.subpixel.0 + 4.0).abs() < 1e-6 && (s.subpixel.1 - 5.0).abs() < 1e-6);
    }

    fn scene(h: usize, w: usize, s: u64) -> Image {
        make_synthetic_scene(&SceneSpec {
            seed: s,
            height: h,
            width: w,
            patch_size: 14,
        })
        .unwrap()
        .image
    }

    #[test]
    fn identical_images_self_match_at_patch_centers() {
        let img = scene(42, 56, 1);
        let f = pseudo_backbone(&img, 14, 32, 0).unwrap();
        let params = AdaptationParams::init(BlockConfig::new(32, 4), 0).unwrap();
        let adapted = match_pair(&f, &f, Some(&params), &img, &img, &MatchConfig::default()).unwrap();
        let baseline = match_pair(&f, &f, None, &img, &img, &MatchConfig::default()).unwrap();
        assert_eq!(adapted.matches, baseline.matches);
        assert_eq!(adapted.len(), f.len());
        for m in &adapted.matches {
            assert_eq!(m.i, m.j);
            assert!((m.score - 1.0).abs() < 1e-6);
            assert_eq!(m.displacement, (0.0, 0.0));
            assert_eq!(m.p_s, f.patch_center(m.i));
            assert_eq!(m.p_t, f.patch_center(m.j));
        }
        assert!(adapted.elapsed_ms > 0.0);
    }

    #[test]
    fn refinement_recovers_three_pixel_translation() {
        let big = scene(56, 84, 2);
        let crop = |x0: usize| {
            let mut data = Vec::with_capacity(56 * 70 * 3);
            for y in 0..56 {
                for x in 0..70 {
                    data.extend_from_slice(&big.pixel(x + x0, y));
                }
            }
            Image::new(56, 70, data).unwrap()
        };
        let i_s = crop(3);
        let i_t = crop(0);
        let grid = FeatureMap::new(4, 5, 1, 14, vec![1.0; 20]).unwrap();
        let matches: Vec<PatchMatch> = (0..20).map(|i| PatchMatch { i, j: i, score: 1.0 }).collect();
        let set = refine_matches(&matches, &grid, &grid, &i_s, &i_t, &MatchConfig::default()).unwrap();
        for m in &set.matches {
            assert!(m.refined);
            assert_eq!(m.displacement, (-3.0, 0.0));
            let c = grid.patch_center(m.i);
            assert_eq!(m.p_s, Pixel::new(c.u - 3.0, c.v));
            assert_eq!(m.p_t, c);
        }
        let no_refine = MatchConfig {
            refine: false,
            ..Default::default()
        };
        let set = refine_matches(&matches, &grid, &grid, &i_s, &i_t, &no_refine).unwrap();
        assert!(set.matches.iter().all(|m| m.p_s == grid.patch_center(m.i) && !m.refined));
        let target_mode = MatchConfig {
            refine_target: RefineTarget::Target,
            ..Default::default()
        };
        let set = refine_matches(&matches, &grid, &grid, &i_s, &i_t, &target_mode).unwrap();
        for m in &set.matches {
            let c = grid.patch_center(m.i);
            assert_eq!(m.p_s, c);
            assert_eq!(m.p_t, Pixel::new(c.u + 3.0, c.v));
        }
    }

    #[test]
    fn constant_patches_pass_through_unrefined() {
        let img = Image::constant(14, 14, [0.3; 3]);
        let grid = FeatureMap::new(1, 1, 1, 14, vec![1.0]).unwrap();
        let set = refine_matches(&[PatchMatch { i: 0, j: 0, score: 1.0 }], &grid, &grid, &img, &img, &MatchConfig::default())
            .unwrap();
        assert!(!set.matches[0].refined);
        assert_eq!(set.matches[0].p_s, Pixel::new(7.0, 7.0));
    }

    #[test]
    fn csv_and_json_output() {
        let set = CorrespondenceSet {
            matches: vec![Correspondence {
                p_s: Pixel::new(7.0, 7.0),
                p_t: Pixel::new(21.5, 7.0),
                score: 0.987654321,
                i: 0,
                j: 1,
                displacement: (0.0, 0.0),
                refined: false,
            }],
            elapsed_ms: 1.5,
        };
        assert_eq!(set.to_csv(), "us,vs,ut,vt,score\n7.000000,7.000000,21.500000,7.000000,0.987654\n");
        let back: CorrespondenceSet = serde_json::from_str(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
    }
}
