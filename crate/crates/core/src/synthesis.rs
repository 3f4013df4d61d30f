//! Novel-view synthesis by depth-based forward warping, random pose and
//! photometric sampling, and procedural test scenes.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject, project, Intrinsics, Pixel, Pose, DEFAULT_Z_MIN};
use crate::raster::{DepthMap, Image, LUMA};
use crate::seed::{self, Stream};

/// Nearest target pixel for a continuous coordinate, if inside the image.
pub fn rasterize(p: Pixel, height: usize, width: usize) -> Option<(usize, usize)> {
    let x = (p.u + 0.5).floor();
    let y = (p.v + 0.5).floor();
    if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
        Some((x as usize, y as usize))
    } else {
        None
    }
}

/// Output of [`warp_image`]. All grids are row-major `height x width`.
#[derive(Debug, Clone)]
pub struct WarpResult {
    pub warped: Image,
    /// Continuous target coordinate of each source pixel, `None` if the pixel
    /// has no depth, lands behind the camera or outside the target image.
    pub gt_flow: Vec<Option<Pixel>>,
    /// Target pixels that received a color.
    pub filled: Vec<bool>,
    /// Target-frame depth of the winning candidate, `+inf` where unfilled.
    pub zbuf: Vec<f64>,
    /// Source pixel index that won each target pixel.
    pub source_of: Vec<Option<usize>>,
    height: usize,
    width: usize,
}

impl WarpResult {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn flow_at(&self, x: usize, y: usize) -> Option<Pixel> {
        self.gt_flow[y * self.width + x]
    }

    /// True if source pixel `(x, y)` survived the z-buffer.
    pub fn is_visible(&self, x: usize, y: usize) -> bool {
        let idx = y * self.width + x;
        let Some(p) = self.gt_flow[idx] else {
            return false;
        };
        rasterize(p, self.height, self.width)
            .map(|(tx, ty)| self.source_of[ty * self.width + tx] == Some(idx))
            .unwrap_or(false)
    }

    /// Valid `(p_s, p_gt)` correspondences in source raster order.
    pub fn correspondences(&self) -> Vec<(Pixel, Pixel)> {
        self.gt_flow
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                p.map(|p| {
                    (
                        Pixel::new((i % self.width) as f64, (i / self.width) as f64),
                        p,
                    )
                })
            })
            .collect()
    }

    pub fn filled_fraction(&self) -> f64 {
        self.filled.iter().filter(|&&f| f).count() as f64 / self.filled.len() as f64
    }
}

/// Forward-warps `src` into the view `pose` using nearest-pixel splatting and
/// a z-buffer. Ties in target depth keep the first source pixel in raster order.
pub fn warp_image(src: &Image, depth: &DepthMap, k: &Intrinsics, pose: &Pose) -> Result<WarpResult> {
    let (h, w) = (src.height(), src.width());
    if depth.height() != h || depth.width() != w {
        return Err(Error::invalid(format!(
            "image is {h}x{w} but depth is {}x{}",
            depth.height(),
            depth.width()
        )));
    }
    let mut warped = Image::black(h, w);
    let mut gt_flow = vec![None; h * w];
    let mut filled = vec![false; h * w];
    let mut zbuf = vec![f64::INFINITY; h * w];
    let mut source_of = vec![None; h * w];

    for y in 0..h {
        for x in 0..w {
            let Some(d) = depth.get(x, y) else { continue };
            let p_s = backproject(Pixel::new(x as f64, y as f64), d, k)?;
            let p_t = pose.apply(&p_s);
            if !(p_t.z > DEFAULT_Z_MIN) {
                continue;
            }
            let p_gt = project(&p_t, k)?;
            let Some((tx, ty)) = rasterize(p_gt, h, w) else {
                continue;
            };
            let idx = y * w + x;
            gt_flow[idx] = Some(p_gt);
            let t = ty * w + tx;
            if p_t.z < zbuf[t] {
                zbuf[t] = p_t.z;
                source_of[t] = Some(idx);
                filled[t] = true;
                warped.set_pixel(tx, ty, src.pixel(x, y));
            }
        }
    }
    Ok(WarpResult {
        warped,
        gt_flow,
        filled,
        zbuf,
        source_of,
        height: h,
        width: w,
    })
}

/// Maps a target pixel back into the source view using the z-buffer depth
/// stored at its rounded location.
pub fn inverse_warp_point(warp: &WarpResult, k: &Intrinsics, pose: &Pose, p_t: Pixel) -> Option<Pixel> {
    let (tx, ty) = rasterize(p_t, warp.height, warp.width)?;
    let z = warp.zbuf[ty * warp.width + tx];
    if !z.is_finite() {
        return None;
    }
    let p = backproject(p_t, z, k).ok()?;
    project(&pose.inverse().apply(&p), k).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSamplerConfig {
    /// Upper bound of the rotation angle, radians.
    pub max_rotation: f64,
    pub min_translation: f64,
    pub max_translation: f64,
    pub seed: u64,
}

impl Default for PoseSamplerConfig {
    fn default() -> Self {
        Self {
            max_rotation: 5f64.to_radians(),
            min_translation: 0.01,
            max_translation: 0.1,
            seed: 0,
        }
    }
}

impl PoseSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation >= 0.0 && self.max_rotation < std::f64::consts::PI) {
            return Err(Error::invalid(format!(
                "max rotation must be in [0, pi), got {}",
                self.max_rotation
            )));
        }
        if !(self.min_translation >= 0.0 && self.min_translation <= self.max_translation)
            || !self.max_translation.is_finite()
        {
            return Err(Error::invalid(format!(
                "translation range [{}, {}] is invalid",
                self.min_translation, self.max_translation
            )));
        }
        Ok(())
    }
}

/// Random rigid motions: axis and translation direction uniform on the
/// sphere, angle and translation magnitude uniform in their ranges.
#[derive(Debug, Clone)]
pub struct PoseSampler {
    config: PoseSamplerConfig,
    rng: rand_chacha::ChaCha8Rng,
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

impl PoseSampler {
    pub fn new(config: PoseSamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            rng: seed::rng(config.seed),
            config,
        })
    }

    pub fn config(&self) -> &PoseSamplerConfig {
        &self.config
    }

    pub fn sample(&mut self) -> Pose {
        sample_pose_with(&self.config, &mut self.rng)
    }
}

fn sample_pose_with(cfg: &PoseSamplerConfig, rng: &mut impl Rng) -> Pose {
    let axis = unit_vector(rng);
    let angle = rng.random::<f64>() * cfg.max_rotation;
    let dir = unit_vector(rng);
    let mag = cfg.min_translation + rng.random::<f64>() * (cfg.max_translation - cfg.min_translation);
    Pose::from_axis_angle(axis, angle, dir * mag).expect("axis is a unit vector")
}

/// Draws one pose from a fresh stream seeded by `cfg.seed`.
pub fn sample_pose(cfg: &PoseSamplerConfig) -> Result<Pose> {
    Ok(PoseSampler::new(*cfg)?.sample())
}

/// Multiplies every valid depth by one factor drawn uniformly from `[lo, hi]`.
pub fn scale_depth(depth: &DepthMap, range: [f64; 2], seed: u64) -> Result<DepthMap> {
    let [lo, hi] = range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::invalid(format!("depth scale range [{lo}, {hi}] is invalid")));
    }
    let factor = if lo == hi {
        lo
    } else {
        seed::rng(seed).random_range(lo..=hi)
    };
    Ok(depth.map_valid(|d| d * factor))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotometricConfig {
    /// Additive brightness shift drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Saturation factor drawn from `[1 - saturation, 1 + saturation]`.
    pub saturation: f64,
    pub seed: u64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            saturation: 0.3,
            seed: 0,
        }
    }
}

impl PhotometricConfig {
    pub fn disabled() -> Self {
        Self {
            brightness: 0.0,
            saturation: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.brightness) {
            return Err(Error::invalid(format!(
                "brightness range must be in [0, 0.5], got {}",
                self.brightness
            )));
        }
        if !(0.0..1.0).contains(&self.saturation) {
            return Err(Error::invalid(format!(
                "saturation range must be in [0, 1), got {}",
                self.saturation
            )));
        }
        Ok(())
    }
}

/// Blends each pixel with its luma by `saturation` (0 = grayscale,
/// 1 = unchanged), adds `brightness` and clamps to `[0, 1]`.
pub fn apply_photometric(img: &Image, brightness: f64, saturation: f64) -> Image {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let l = LUMA[0] * px[0] as f64 + LUMA[1] * px[1] as f64 + LUMA[2] * px[2] as f64;
        for c in px.iter_mut() {
            let v = *c as f64 * saturation + l * (1.0 - saturation) + brightness;
            *c = v.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

pub fn augment_photometric(img: &Image, cfg: &PhotometricConfig) -> Result<Image> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed);
    let b = cfg.brightness * (2.0 * rng.random::<f64>() - 1.0);
    let s = 1.0 + cfg.saturation * (2.0 * rng.random::<f64>() - 1.0);
    Ok(apply_photometric(img, b, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
}

/// Smooth lattice noise in `[0, 1]` with cell size `period` pixels.
struct ValueNoise {
    cols: usize,
    lattice: Vec<f64>,
    period: f64,
}

impl ValueNoise {
    fn new(rng: &mut impl Rng, height: usize, width: usize, period: f64) -> Self {
        let cols = (width as f64 / period).ceil() as usize + 2;
        let rows = (height as f64 / period).ceil() as usize + 2;
        let lattice = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
        Self {
            cols,
            lattice,
            period,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let gx = x / self.period;
        let gy = y / self.period;
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
        let v = |cx: usize, cy: usize| self.lattice[cy * self.cols + cx];
        let top = v(ix, iy) * (1.0 - fx) + v(ix + 1, iy) * fx;
        let bottom = v(ix, iy + 1) * (1.0 - fx) + v(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn octave_field(rng: &mut impl Rng, h: usize, w: usize, periods: &[f64]) -> Vec<f64> {
    let layers: Vec<ValueNoise> = periods.iter().map(|&p| ValueNoise::new(rng, h, w, p)).collect();
    let mut field = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            let mut amp = 1.0;
            for layer in &layers {
                v += amp * layer.at(x as f64, y as f64);
                amp *= 0.6;
            }
            field.push(v);
        }
    }
    field
}

fn normalize_into(field: &mut [f64], lo: f64, hi: f64) {
    let (min, max) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (max - min).max(1e-12);
    for v in field.iter_mut() {
        *v = lo + (hi - lo) * (*v - min) / span;
    }
}

/// Independent multi-octave texture per color channel over a smooth depth
/// surface, with intrinsics `f = width` and the principal point at the image center.
pub fn make_synthetic_scene(spec: &SceneSpec) -> Result<Scene> {
    let SceneSpec {
        seed: scene_seed,
        height: h,
        width: w,
        patch_size: p,
    } = *spec;
    if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!(
            "scene size {h}x{w} must be a positive multiple of patch size {p}"
        )));
    }
    let mut rng = seed::rng(seed::derive(scene_seed, Stream::Scene, 0));
    let mut data = vec![0f32; h * w * 3];
    for c in 0..3 {
        let mut channel = octave_field(&mut rng, h, w, &[32.0, 16.0, 8.0, 4.0, 2.0]);
        normalize_into(&mut channel, 0.04, 0.96);
        for (i, v) in channel.iter().enumerate() {
            data[i * 3 + c] = *v as f32;
        }
    }
    let image = Image::new(h, w, data)?;

    let mut height_field = octave_field(&mut rng, h, w, &[w.max(h) as f64 / 1.5, w.max(h) as f64 / 3.5]);
    normalize_into(&mut height_field, 1.5, 3.5);
    let depth = DepthMap::new(h, w, height_field)?;

    let f = w as f64;
    let intrinsics = Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)?;
    Ok(Scene {
        image,
        depth,
        intrinsics,
    })
}

/// How the relative motion of a training pair is chosen.
#[derive(Debug, Clone, Copy)]
pub enum PoseChoice<'a> {
    Sample(&'a PoseSamplerConfig),
    Fixed(&'a Pose),
}

/// A source image, its synthesized novel view and the supervision linking them.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub source: Image,
    pub warped: Image,
    pub pose: Pose,
    pub depth: DepthMap,
    pub warp: WarpResult,
}

/// `scale_depth -> sample_pose -> warp_image -> augment_photometric(I_w)`.
/// `seed` selects the pair; each stage draws from its own derived stream.
pub fn make_training_pair(
    src: &Image,
    depth: &DepthMap,
    k: &Intrinsics,
    pose: PoseChoice<'_>,
    photometric: &PhotometricConfig,
    scale_range: [f64; 2],
    seed: u64,
) -> Result<TrainingPair> {
    let depth = scale_depth(depth, scale_range, seed::derive(seed, Stream::DepthScale, 0))?;
    let pose = match pose {
        PoseChoice::Sample(cfg) => {
            let cfg = PoseSamplerConfig {
                seed: seed::derive(cfg.seed ^ seed, Stream::Pose, 0),
                ..*cfg
            };
            sample_pose(&cfg)?
        }
        PoseChoice::Fixed(p) => *p,
    };
    let warp = warp_image(src, &depth, k, &pose)?;
    let photo = PhotometricConfig {
        seed: seed::derive(photometric.seed ^ seed, Stream::Photometric, 0),
        ..*photometric
    };
    let mut warped = augment_photometric(&warp.warped, &photo)?;
    for (i, &f) in warp.filled.iter().enumerate() {
        if !f {
            warped.set_pixel(i % src.width(), i / src.width(), [0.0; 3]);
        }
    }
    Ok(TrainingPair {
        source: src.clone(),
        warped,
        pose,
        depth,
        warp,
    })
}
