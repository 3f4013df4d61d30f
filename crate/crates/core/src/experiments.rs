//! Synthetic benchmark with held-out scenes, the component ablation, the
//! pose-strategy ablation and the cross-scene robustness comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{upsample_features, AdaptationParams, FeatureMap, PseudoBackbone};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_pair, robustness_protocol, summarize, EvalConfig, MetricSummary, MetricsReport, RobustnessReport,
    ScenePair,
};
use crate::geometry::{Intrinsics, Pose};
use crate::matching::{match_pair, CorrespondenceSet, MatchConfig};
use crate::raster::Image;
use crate::seed::{self, Stream};
use crate::synthesis::{
    make_synthetic_scene, make_training_pair, PhotometricConfig, PoseChoice, PoseSampler, PoseSamplerConfig, Scene,
    SceneSpec,
};
use crate::training::{train, PoseStrategy, TrainConfig, TrainSample, TrainState};

/// Relative motions of the benchmark: flows of a few pixels on the
/// default scene size, so positives overlap their anchors substantially.
pub const BENCHMARK_POSES: PoseSamplerConfig = PoseSamplerConfig {
    max_rotation: std::f64::consts::PI / 180.0,
    min_translation: 0.01,
    max_translation: 0.015,
    seed: 0,
};

/// Strong appearance change between the two views of every pair.
pub const BENCHMARK_PHOTOMETRIC: PhotometricConfig = PhotometricConfig {
    brightness: 0.4,
    saturation: 0.6,
    seed: 0,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Warped evaluation views generated from each test scene.
    pub test_pairs_per_scene: usize,
    pub test_pose_sampler: PoseSamplerConfig,
    pub test_photometric: PhotometricConfig,
    pub test_depth_scale_range: [f64; 2],
    /// Size of the pose list used by the fixed-pose training strategy.
    pub fixed_pose_count: usize,
    pub upsample_factor: usize,
    pub train: TrainConfig,
    pub matching: MatchConfig,
    pub eval: EvalConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 168,
            width: 210,
            train_scenes: 6,
            test_scenes: 2,
            test_pairs_per_scene: 8,
            test_pose_sampler: BENCHMARK_POSES,
            test_photometric: BENCHMARK_PHOTOMETRIC,
            test_depth_scale_range: [1.0, 1.0],
            fixed_pose_count: 4,
            upsample_factor: 2,
            train: TrainConfig {
                epochs: 30,
                pairs_per_scene: 4,
                embed_dim: 64,
                heads: 4,
                pose_sampler: BENCHMARK_POSES,
                photometric: BENCHMARK_PHOTOMETRIC,
                ..TrainConfig::default()
            },
            matching: MatchConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.test_scenes == 0 || self.test_pairs_per_scene == 0 {
            return Err(Error::invalid("benchmark needs at least one train scene, test scene and test pair"));
        }
        if self.fixed_pose_count == 0 {
            return Err(Error::invalid("fixed pose list must not be empty"));
        }
        self.test_pose_sampler.validate()?;
        self.test_photometric.validate()?;
        self.train.validate()?;
        self.matching.validate()?;
        self.eval.ransac.validate()
    }

    fn scene_spec(&self, index: usize) -> SceneSpec {
        SceneSpec {
            seed: seed::derive(self.seed, Stream::Scene, index as u64),
            height: self.height,
            width: self.width,
            patch_size: self.train.patch_size,
        }
    }
}

/// A held-out evaluation pair: a test scene and one of its warped views.
#[derive(Debug, Clone)]
pub struct TestPair {
    pub scene: usize,
    pub source: Image,
    pub target: Image,
    pub features_s: FeatureMap,
    pub features_t: FeatureMap,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub train: Vec<TrainSample>,
    pub test_scenes: Vec<Scene>,
    pub test: Vec<TestPair>,
}

impl Benchmark {
    /// Generates the train scenes, the disjoint test scenes and their evaluation views.
    pub fn build(config: &BenchmarkConfig) -> Result<Self> {
        config.validate()?;
        let backbone = PseudoBackbone::new(config.train.patch_size, config.train.embed_dim, config.train.backbone_seed)?;
        let train = (0..config.train_scenes)
            .map(|i| {
                let s = make_synthetic_scene(&config.scene_spec(i))?;
                Ok(TrainSample {
                    image: s.image,
                    depth: s.depth,
                    intrinsics: s.intrinsics,
                    features: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let test_scenes = (0..config.test_scenes)
            .map(|i| make_synthetic_scene(&config.scene_spec(config.train_scenes + i)))
            .collect::<Result<Vec<_>>>()?;
        let mut test = Vec::new();
        for (si, scene) in test_scenes.iter().enumerate() {
            let features_s = backbone.extract(&scene.image)?;
            for j in 0..config.test_pairs_per_scene {
                let index = (si * config.test_pairs_per_scene + j) as u64;
                let pair = make_training_pair(
                    &scene.image,
                    &scene.depth,
                    &scene.intrinsics,
                    PoseChoice::Sample(&config.test_pose_sampler),
                    &config.test_photometric,
                    config.test_depth_scale_range,
                    seed::derive(config.seed, Stream::Benchmark, index),
                )?;
                test.push(TestPair {
                    scene: si,
                    features_t: backbone.extract(&pair.warped)?,
                    features_s: features_s.clone(),
                    source: pair.source,
                    target: pair.warped,
                    pose: pair.pose,
                    intrinsics: scene.intrinsics,
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            train,
            test_scenes,
            test,
        })
    }

    /// Pose list of the fixed-pose strategy, drawn once from the training sampler.
    pub fn fixed_poses(&self) -> Result<Vec<Pose>> {
        let mut sampler = PoseSampler::new(PoseSamplerConfig {
            seed: seed::derive(self.config.seed, Stream::Pose, u64::MAX),
            ..self.config.train.pose_sampler
        })?;
        Ok((0..self.config.fixed_pose_count).map(|_| sampler.sample()).collect())
    }

    pub fn train_with_strategy(&self, strategy: PoseStrategy) -> Result<TrainState> {
        let cfg = TrainConfig {
            pose_strategy: strategy,
            ..self.config.train.clone()
        };
        train(&self.train, &cfg)
    }

    /// Matches every test pair under `variant` and evaluates it against the true pose.
    pub fn evaluate(&self, params: Option<&AdaptationParams>, variant: &Variant) -> Result<VariantResult> {
        let params = if variant.adapted {
            Some(params.ok_or_else(|| Error::invalid(format!("variant {} needs trained parameters", variant.name)))?)
        } else {
            None
        };
        let match_cfg = MatchConfig {
            refine: variant.refine,
            ..self.config.matching
        };
        let factor = if variant.upsample { self.config.upsample_factor } else { 1 };
        let per_pair = self
            .test
            .par_iter()
            .map(|t| {
                let set = match_test_pair(t, params, &match_cfg, factor)?;
                let report = evaluate_pair(&set.pixel_pairs(), &t.intrinsics, &t.pose, set.elapsed_ms, &self.config.eval)?;
                Ok((set, report))
            })
            .collect::<Result<Vec<(CorrespondenceSet, MetricsReport)>>>()?;
        let reports: Vec<MetricsReport> = per_pair.into_iter().map(|(_, r)| r).collect();
        Ok(VariantResult::new(variant.name, reports))
    }

    /// Same-scene warped pairs and cross-scene pairs with the same targets.
    pub fn robustness(&self, params: Option<&AdaptationParams>) -> Result<RobustnessComparison> {
        if self.test_scenes.len() < 2 {
            return Err(Error::invalid("robustness needs at least two disjoint test scenes"));
        }
        let n_scenes = self.test_scenes.len();
        let first_of_scene: Vec<&TestPair> =
            (0..n_scenes).map(|s| self.test.iter().find(|t| t.scene == s).expect("every scene has pairs")).collect();
        let overlapping: Vec<ScenePair<'_>> = self
            .test
            .iter()
            .map(|t| ScenePair {
                feat_s: &t.features_s,
                feat_t: &t.features_t,
                img_s: &t.source,
                img_t: &t.target,
            })
            .collect();
        let cross: Vec<ScenePair<'_>> = self
            .test
            .iter()
            .map(|t| {
                let other = first_of_scene[(t.scene + 1) % n_scenes];
                ScenePair {
                    feat_s: &other.features_s,
                    feat_t: &t.features_t,
                    img_s: &other.source,
                    img_t: &t.target,
                }
            })
            .collect();
        let ransac = &self.config.eval.ransac;
        Ok(RobustnessComparison {
            overlapping: robustness_protocol(&overlapping, params, &self.config.matching, ransac)?,
            cross_scene: robustness_protocol(&cross, params, &self.config.matching, ransac)?,
        })
    }
}

/// Matches one test pair, upsampling both feature maps first when `factor > 1`.
pub fn match_test_pair(
    t: &TestPair,
    params: Option<&AdaptationParams>,
    cfg: &MatchConfig,
    factor: usize,
) -> Result<CorrespondenceSet> {
    if factor > 1 {
        let fs = upsample_features(&t.features_s, factor)?;
        let ft = upsample_features(&t.features_t, factor)?;
        match_pair(&fs, &ft, params, &t.source, &t.target, cfg)
    } else {
        match_pair(&t.features_s, &t.features_t, params, &t.source, &t.target, cfg)
    }
}

/// One matcher configuration of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub name: &'static str,
    pub adapted: bool,
    pub refine: bool,
    pub upsample: bool,
}

pub const BASELINE: Variant = Variant {
    name: "baseline",
    adapted: false,
    refine: false,
    upsample: false,
};
pub const ADAPTATION: Variant = Variant {
    name: "+adaptation",
    adapted: true,
    refine: false,
    upsample: false,
};
pub const REFINEMENT: Variant = Variant {
    name: "+refinement",
    adapted: true,
    refine: true,
    upsample: false,
};
pub const UPSAMPLING: Variant = Variant {
    name: "+upsampling",
    adapted: true,
    refine: true,
    upsample: true,
};

/// Rows of the component ablation, in table order.
pub const COMPONENT_VARIANTS: [Variant; 4] = [BASELINE, ADAPTATION, REFINEMENT, UPSAMPLING];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub epipolar_error: Option<MetricSummary>,
    pub precision: Option<MetricSummary>,
    pub n_matches: usize,
    pub reports: Vec<MetricsReport>,
}

impl VariantResult {
    pub fn new(name: &str, reports: Vec<MetricsReport>) -> Self {
        let e: Vec<f64> = reports.iter().filter_map(|r| r.epipolar_error).collect();
        let p: Vec<f64> = reports.iter().filter_map(|r| r.precision).collect();
        Self {
            name: name.to_string(),
            epipolar_error: summarize(&e),
            precision: summarize(&p),
            n_matches: reports.iter().map(|r| r.n_matches).sum(),
            reports,
        }
    }

    pub fn mean_epipolar_error(&self) -> f64 {
        self.epipolar_error.map_or(f64::NAN, |m| m.mean)
    }

    pub fn mean_precision(&self) -> f64 {
        self.precision.map_or(f64::NAN, |m| m.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `components` or `pose_strategy`.
    pub study: String,
    pub result: VariantResult,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Model trained with random poses; used by every adapted component row.
    pub random_model: TrainState,
    pub fixed_model: TrainState,
}

/// Trains with random and with fixed poses, then evaluates the four component
/// variants with the random-pose model and the full matcher with both models.
pub fn run_ablation(bench: &Benchmark) -> Result<AblationReport> {
    let random_model = bench.train_with_strategy(PoseStrategy::Random)?;
    let fixed_model = bench.train_with_strategy(PoseStrategy::Fixed {
        poses: bench.fixed_poses()?,
    })?;
    let mut rows = Vec::with_capacity(6);
    for v in &COMPONENT_VARIANTS {
        rows.push(AblationRow {
            study: "components".into(),
            result: bench.evaluate(Some(&random_model.params), v)?,
        });
    }
    for (name, model) in [("random_poses", &random_model), ("fixed_poses", &fixed_model)] {
        let mut result = bench.evaluate(Some(&model.params), &REFINEMENT)?;
        result.name = name.into();
        rows.push(AblationRow {
            study: "pose_strategy".into(),
            result,
        });
    }
    Ok(AblationReport {
        rows,
        random_model,
        fixed_model,
    })
}

/// `study,config,epipolar_error_mean,epipolar_error_std,precision_mean,precision_std,n_matches`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("study,config,epipolar_error_mean,epipolar_error_std,precision_mean,precision_std,n_matches\n");
    let cell = |m: Option<MetricSummary>| match m {
        Some(m) => (format!("{:.6}", m.mean), format!("{:.6}", m.std)),
        None => (String::new(), String::new()),
    };
    for row in rows {
        let (em, es) = cell(row.result.epipolar_error);
        let (pm, ps) = cell(row.result.precision);
        s.push_str(&format!(
            "{},{},{em},{es},{pm},{ps},{}\n",
            row.study, row.result.name, row.result.n_matches
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessComparison {
    pub overlapping: RobustnessReport,
    pub cross_scene: RobustnessReport,
}

/// `setting,n_pairs,n_matches,n_inliers`.
pub fn robustness_csv(cmp: &RobustnessComparison) -> String {
    let mut s = String::from("setting,n_pairs,n_matches,n_inliers\n");
    for (name, r) in [("cross_scene", &cmp.cross_scene), ("overlapping", &cmp.overlapping)] {
        s.push_str(&format!("{name},{},{},{}\n", r.pairs.len(), r.n_matches, r.n_inliers));
    }
    s
}
