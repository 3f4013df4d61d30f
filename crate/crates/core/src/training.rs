//! Contrastive optimization of the adaptation block: triplet mining from
//! synthesized pairs, triplet loss on cosine distance, analytic gradients
//! and Adam.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::embedding::{AdaptationParams, BlockConfig, FeatureMap, ForwardCache, ParamGrads, PseudoBackbone};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::raster::{DepthMap, Image};
use crate::seed::{self, Stream};
use crate::synthesis::{
    inverse_warp_point, make_training_pair, PhotometricConfig, PoseChoice, PoseSamplerConfig, WarpResult,
};

/// Patch indices of one training triplet. The anchor indexes the source grid,
/// positive and negative index the warped grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// `sqrt(max(0, 2 - 2 cos(u, v)))`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!("vector lengths differ: {} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if !(nu > 0.0) || !(nv > 0.0) {
        return Err(Error::invalid("cosine distance of a zero-norm vector"));
    }
    Ok(distance_from_cos(dot(u, v) / (nu * nv)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn distance_from_cos(c: f64) -> f64 {
    (2.0 - 2.0 * c).max(0.0).sqrt()
}

/// Distance and its gradients with respect to `u` and `v`.
/// The gradient is zero where the clamped radicand vanishes.
fn cosine_distance_with_grad(u: ArrayView1<f64>, v: ArrayView1<f64>) -> (f64, Vec<f64>, Vec<f64>) {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    let c = u.dot(&v) / (nu * nv);
    let r = 2.0 - 2.0 * c;
    if !(r > 0.0) {
        return (0.0, vec![0.0; u.len()], vec![0.0; v.len()]);
    }
    let d = r.sqrt();
    let dd_dc = -1.0 / d;
    let du = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| dd_dc * (b / (nu * nv) - c * a / (nu * nu)))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| dd_dc * (a / (nu * nv) - c * b / (nv * nv)))
        .collect();
    (d, du, dv)
}

/// `max(0, d_ap - d_an + margin)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// How relative poses of training pairs are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoseStrategy {
    /// Fresh draw from the pose sampler for every pair.
    Random,
    /// Uniform choice from a fixed list.
    Fixed { poses: Vec<Pose> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub triplets_per_pair: usize,
    /// Image pairs per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub bootstrap_epochs: usize,
    pub bootstrap_lr: f64,
    pub main_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Chebyshev radius, in patches, around the positive excluded from negatives.
    pub exclusion_radius: usize,
    /// Training pairs synthesized from each scene per epoch.
    pub pairs_per_scene: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Projection seed of the pseudo-backbone.
    pub backbone_seed: u64,
    pub pose_sampler: PoseSamplerConfig,
    pub pose_strategy: PoseStrategy,
    pub photometric: PhotometricConfig,
    pub depth_scale_range: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            triplets_per_pair: 128,
            batch_size: 1,
            epochs: 100,
            bootstrap_epochs: 3,
            bootstrap_lr: 1e-4,
            main_lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            exclusion_radius: 1,
            pairs_per_scene: 1,
            patch_size: 14,
            embed_dim: 768,
            heads: 12,
            backbone_seed: 0,
            pose_sampler: PoseSamplerConfig::default(),
            pose_strategy: PoseStrategy::Random,
            photometric: PhotometricConfig::default(),
            depth_scale_range: [0.5, 2.0],
        }
    }
}

pub const MAX_EPOCHS: usize = 100;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::invalid("margin must be positive"));
        }
        if !(self.bootstrap_lr > 0.0) || !(self.main_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(Error::invalid(format!("epochs must be in 1..={MAX_EPOCHS}")));
        }
        if self.epochs < self.bootstrap_epochs {
            return Err(Error::invalid("epochs must be at least bootstrap_epochs"));
        }
        if self.triplets_per_pair == 0 || self.batch_size == 0 || self.pairs_per_scene == 0 {
            return Err(Error::invalid("triplets_per_pair, batch_size and pairs_per_scene must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam betas must be in [0, 1) and eps positive"));
        }
        if let PoseStrategy::Fixed { poses } = &self.pose_strategy {
            if poses.is_empty() {
                return Err(Error::invalid("fixed pose strategy needs at least one pose"));
            }
        }
        let [lo, hi] = self.depth_scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("depth scale range must satisfy 0 < lo <= hi"));
        }
        self.block_config().validate()?;
        self.pose_sampler.validate()?;
        self.photometric.validate()
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig::new(self.embed_dim, self.heads)
    }

    /// Learning rate of 1-based `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch <= self.bootstrap_epochs {
            self.bootstrap_lr
        } else {
            self.main_lr
        }
    }
}

/// Positive target patch of every source patch of a `grid_h x grid_w` grid,
/// or `None` if the patch is unusable as an anchor.
///
/// A patch is admitted when its center pixel survives the z-buffer, its
/// flow lands on a patch of the target grid, and mapping that target point
/// back with the inverse warp returns within half a patch of the center.
pub fn anchor_positives(
    warp: &WarpResult,
    k: &Intrinsics,
    pose: &Pose,
    grid: &FeatureMap,
) -> Vec<Option<usize>> {
    let half_patch = 0.5 * grid.patch_size() as f64;
    (0..grid.len())
        .map(|i| {
            let c = grid.patch_center(i);
            let (x, y) = (c.u as usize, c.v as usize);
            if x >= warp.width() || y >= warp.height() || !warp.is_visible(x, y) {
                return None;
            }
            let p_gt = warp.flow_at(x, y)?;
            let positive = grid.patch_of(p_gt)?;
            let back = inverse_warp_point(warp, k, pose, p_gt)?;
            ((back.u - c.u).hypot(back.v - c.v) <= half_patch).then_some(positive)
        })
        .collect()
}

/// Mines up to `count` triplets. Anchors are drawn uniformly without
/// replacement from source patches with a positive; each negative is the
/// target patch minimizing `min(d(A, N), d(P, N))` outside the exclusion
/// window of the positive, lowest index on ties.
pub fn mine_triplets(
    m_s: &FeatureMap,
    m_w: &FeatureMap,
    positives: &[Option<usize>],
    exclusion_radius: usize,
    count: usize,
    mining_seed: u64,
) -> Result<Vec<Triplet>> {
    if m_s.embed_dim() != m_w.embed_dim() || m_s.grid_h() != m_w.grid_h() || m_s.grid_w() != m_w.grid_w() {
        return Err(Error::invalid("source and warped feature maps differ in shape"));
    }
    if positives.len() != m_s.len() {
        return Err(Error::invalid(format!(
            "{} positives given for {} source patches",
            positives.len(),
            m_s.len()
        )));
    }
    if positives.iter().flatten().any(|&p| p >= m_w.len()) {
        return Err(Error::invalid("positive index out of range"));
    }
    Ok(mine_from_tokens(
        &m_s.to_tokens(),
        &m_w.to_tokens(),
        m_w.grid_w(),
        positives,
        exclusion_radius,
        count,
        mining_seed,
    ))
}

fn mine_from_tokens(
    m_s: &Array2<f64>,
    m_w: &Array2<f64>,
    grid_w: usize,
    positives: &[Option<usize>],
    exclusion_radius: usize,
    count: usize,
    mining_seed: u64,
) -> Vec<Triplet> {
    let row = |m: &Array2<f64>, i: usize| m.row(i).to_vec();
    let target: Vec<Vec<f64>> = (0..m_w.nrows()).map(|j| row(m_w, j)).collect();
    let candidates: Vec<(usize, usize)> = positives
        .iter()
        .enumerate()
        .filter_map(|(a, p)| p.map(|p| (a, p)))
        .collect();
    let mut rng = seed::rng(mining_seed);
    let picked = rand::seq::index::sample(&mut rng, candidates.len(), count.min(candidates.len()));

    let cell = |j: usize| (j / grid_w, j % grid_w);
    let mut out = Vec::with_capacity(picked.len());
    for idx in picked {
        let (anchor, positive) = candidates[idx];
        let a = row(m_s, anchor);
        let p = &target[positive];
        let (pr, pc) = cell(positive);
        let mut best: Option<(usize, f64)> = None;
        for (j, n) in target.iter().enumerate() {
            let (r, c) = cell(j);
            if r.abs_diff(pr) <= exclusion_radius && c.abs_diff(pc) <= exclusion_radius {
                continue;
            }
            let (Ok(da), Ok(dp)) = (cosine_distance(&a, n), cosine_distance(p, n)) else {
                continue;
            };
            let score = da.min(dp);
            if best.is_none_or(|(_, s)| score < s) {
                best = Some((j, score));
            }
        }
        let usable = norm(&a) > 0.0 && norm(p) > 0.0;
        if let (Some((negative, _)), true) = (best, usable) {
            out.push(Triplet {
                anchor,
                positive,
                negative,
            });
        }
    }
    out
}

/// Adapted tokens of one pair with the caches needed for backpropagation.
struct PairForward {
    out_s: Array2<f64>,
    cache_s: ForwardCache,
    out_w: Array2<f64>,
    cache_w: ForwardCache,
}

impl PairForward {
    fn new(params: &AdaptationParams, f_s: &FeatureMap, f_w: &FeatureMap) -> Result<Self> {
        let (out_s, cache_s) = params.forward_train(&f_s.to_tokens())?;
        let (out_w, cache_w) = params.forward_train(&f_w.to_tokens())?;
        Ok(Self {
            out_s,
            cache_s,
            out_w,
            cache_w,
        })
    }

    /// Adds the summed triplet loss gradient to `grads` and returns the summed loss.
    fn accumulate(&self, params: &AdaptationParams, triplets: &[Triplet], margin: f64, grads: &mut ParamGrads) -> f64 {
        let mut d_s = Array2::zeros(self.out_s.raw_dim());
        let mut d_w = Array2::zeros(self.out_w.raw_dim());
        let mut total = 0.0;
        for t in triplets {
            let a = self.out_s.row(t.anchor);
            let (d_ap, ga, gp) = cosine_distance_with_grad(a, self.out_w.row(t.positive));
            let (d_an, ga2, gn) = cosine_distance_with_grad(a, self.out_w.row(t.negative));
            let loss = triplet_loss(d_ap, d_an, margin);
            total += loss;
            if loss > 0.0 {
                for e in 0..ga.len() {
                    d_s[[t.anchor, e]] += ga[e] - ga2[e];
                    d_w[[t.positive, e]] += gp[e];
                    d_w[[t.negative, e]] -= gn[e];
                }
            }
        }
        params.backward(&self.cache_s, &d_s, grads);
        params.backward(&self.cache_w, &d_w, grads);
        total
    }
}

/// Mean triplet loss of adapted descriptors and its exact gradient with
/// respect to every block tensor. The input features are not differentiated.
pub fn loss_and_gradients(
    f_s: &FeatureMap,
    f_w: &FeatureMap,
    triplets: &[Triplet],
    params: &AdaptationParams,
    margin: f64,
) -> Result<(f64, ParamGrads)> {
    if triplets.is_empty() {
        return Err(Error::invalid("no triplets"));
    }
    check_triplets(f_s, f_w, triplets)?;
    let fwd = PairForward::new(params, f_s, f_w)?;
    let mut grads = params.zeros_like();
    let total = fwd.accumulate(params, triplets, margin, &mut grads);
    let n = triplets.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

fn check_triplets(f_s: &FeatureMap, f_w: &FeatureMap, triplets: &[Triplet]) -> Result<()> {
    let bad = triplets
        .iter()
        .find(|t| t.anchor >= f_s.len() || t.positive >= f_w.len() || t.negative >= f_w.len() || t.negative == t.positive);
    match bad {
        Some(t) => Err(Error::invalid(format!("invalid triplet {t:?}"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub n_triplets: usize,
}

/// Parameters, Adam moments and training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: AdaptationParams,
    pub first_moment: AdaptationParams,
    pub second_moment: AdaptationParams,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(params: AdaptationParams) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            params,
            step: 0,
            epoch: 0,
            history: Vec::new(),
        }
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &ParamGrads, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let params = self.params.tensors_mut();
        let m = self.first_moment.tensors_mut();
        let v = self.second_moment.tensors_mut();
        for (((p, m), v), g) in params.into_iter().zip(m).zip(v).zip(grads.tensors()) {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// One training scene. `features` replaces pseudo-backbone source features
/// when given; warped views always go through the pseudo-backbone.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Image,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
    pub features: Option<FeatureMap>,
}

/// Runs all configured epochs from the identity-initialized block.
pub fn train(dataset: &[TrainSample], cfg: &TrainConfig) -> Result<TrainState> {
    train_with(dataset, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(dataset: &[TrainSample], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochStats)) -> Result<TrainState> {
    let mut trainer = Trainer::new(dataset, cfg)?;
    for _ in 0..cfg.epochs {
        let stats = trainer.run_epoch()?;
        on_epoch(&stats);
    }
    Ok(trainer.into_state())
}

/// Epoch-by-epoch driver behind [`train`].
pub struct Trainer<'a> {
    dataset: &'a [TrainSample],
    cfg: &'a TrainConfig,
    backbone: PseudoBackbone,
    source_features: Vec<FeatureMap>,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a [TrainSample], cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::invalid("training dataset is empty"));
        }
        let backbone = PseudoBackbone::new(cfg.patch_size, cfg.embed_dim, cfg.backbone_seed)?;
        let source_features = dataset
            .iter()
            .map(|s| match &s.features {
                Some(f) if f.embed_dim() != cfg.embed_dim || f.patch_size() != cfg.patch_size => {
                    Err(Error::invalid(format!(
                        "source features have E={} P={}, config expects E={} P={}",
                        f.embed_dim(),
                        f.patch_size(),
                        cfg.embed_dim,
                        cfg.patch_size
                    )))
                }
                Some(f) => Ok(f.clone()),
                None => backbone.extract(&s.image),
            })
            .collect::<Result<Vec<_>>>()?;
        let params = AdaptationParams::init(cfg.block_config(), seed::derive(cfg.seed, Stream::Init, 0))?;
        Ok(Self {
            dataset,
            cfg,
            backbone,
            source_features,
            state: TrainState::new(params),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let cfg = self.cfg;
        let epoch = self.state.epoch + 1;
        let lr = cfg.learning_rate(epoch);
        let pairs_per_epoch = self.dataset.len() * cfg.pairs_per_scene;
        let mut loss_sum = 0.0;
        let mut n_triplets = 0;

        let mut pair_ids = (0..pairs_per_epoch).peekable();
        while pair_ids.peek().is_some() {
            let mut grads = self.state.params.zeros_like();
            let mut batch_triplets = 0;
            for id in pair_ids.by_ref().take(cfg.batch_size) {
                let global = ((epoch - 1) * pairs_per_epoch + id) as u64;
                let scene = id / cfg.pairs_per_scene;
                let (loss, count) = self.process_pair(scene, global, &mut grads)?;
                loss_sum += loss;
                batch_triplets += count;
            }
            if batch_triplets > 0 {
                grads.scale(1.0 / batch_triplets as f64);
                self.state.adam_step(&grads, lr, cfg);
                n_triplets += batch_triplets;
            }
        }
        if n_triplets == 0 {
            return Err(Error::TrainingStalled { epoch });
        }
        let stats = EpochStats {
            epoch,
            lr,
            mean_loss: loss_sum / n_triplets as f64,
            n_triplets,
        };
        self.state.epoch = epoch;
        self.state.history.push(stats);
        Ok(stats)
    }

    /// Synthesizes, mines and accumulates one pair. Returns the summed loss
    /// and the number of triplets used.
    fn process_pair(&self, scene: usize, global: u64, grads: &mut ParamGrads) -> Result<(f64, usize)> {
        let cfg = self.cfg;
        let sample = &self.dataset[scene];
        let pair_seed = seed::derive(cfg.seed, Stream::Pair, global);
        let fixed;
        let choice = match &cfg.pose_strategy {
            PoseStrategy::Random => PoseChoice::Sample(&cfg.pose_sampler),
            PoseStrategy::Fixed { poses } => {
                fixed = poses[(seed::derive(pair_seed, Stream::Pose, 0) % poses.len() as u64) as usize];
                PoseChoice::Fixed(&fixed)
            }
        };
        let pair = make_training_pair(
            &sample.image,
            &sample.depth,
            &sample.intrinsics,
            choice,
            &cfg.photometric,
            cfg.depth_scale_range,
            pair_seed,
        )?;
        let f_s = &self.source_features[scene];
        let f_w = self.backbone.extract(&pair.warped)?;
        let positives = anchor_positives(&pair.warp, &sample.intrinsics, &pair.pose, f_s);
        let params = &self.state.params;
        let fwd = PairForward::new(params, f_s, &f_w)?;
        let triplets = mine_from_tokens(
            &fwd.out_s,
            &fwd.out_w,
            f_w.grid_w(),
            &positives,
            cfg.exclusion_radius,
            cfg.triplets_per_pair,
            seed::derive(cfg.seed, Stream::Mining, global),
        );
        if triplets.is_empty() {
            return Ok((0.0, 0));
        }
        let loss = fwd.accumulate(params, &triplets, cfg.margin, grads);
        Ok((loss, triplets.len()))
    }
}

/// Per-epoch log as `epoch,lr,mean_loss,n_triplets` CSV text.
pub fn loss_log_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,lr,mean_loss,n_triplets\n");
    for h in history {
        s.push_str(&format!("{},{:e},{:.9},{}\n", h.epoch, h.lr, h.mean_loss, h.n_triplets));
    }
    s
}
