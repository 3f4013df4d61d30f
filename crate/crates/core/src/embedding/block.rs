//! The trainable adaptation layer: one pre-norm transformer block
//! `x + MHSA(LN(x))`, then `+ MLP(LN(.))`, with no positional terms.
//!
//! Forward and backward passes are written out by hand over `ndarray`
//! matrices in f64. Tokens are rows.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::seed;

const INIT_STD: f64 = 0.02;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl BlockConfig {
    pub fn new(embed_dim: usize, heads: usize) -> Self {
        Self {
            embed_dim,
            heads,
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("block dimensions must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "{} heads do not divide embedding dimension {}",
                self.heads, self.embed_dim
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::invalid("layer-norm epsilon must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

impl Default for BlockConfig {
    /// Matches the ViT-B block shape: 768 dims, 12 heads, MLP ratio 4.
    fn default() -> Self {
        Self::new(768, 12)
    }
}

/// Tensor names in checkpoint order.
pub const PARAM_NAMES: [&str; 16] = [
    "ln1.gain",
    "ln1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

/// All weights of the block. Weight matrices act on row vectors: `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationParams {
    config: BlockConfig,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub q_weight: Array2<f64>,
    pub q_bias: Array1<f64>,
    pub k_weight: Array2<f64>,
    pub k_bias: Array1<f64>,
    pub v_weight: Array2<f64>,
    pub v_bias: Array1<f64>,
    pub out_weight: Array2<f64>,
    pub out_bias: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub fc1_weight: Array2<f64>,
    pub fc1_bias: Array1<f64>,
    pub fc2_weight: Array2<f64>,
    pub fc2_bias: Array1<f64>,
}

/// Gradients share the parameter layout.
pub type ParamGrads = AdaptationParams;

fn truncated_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            break v;
        }
    })
}

impl AdaptationParams {
    /// All-zero tensors (gains included). Used as a gradient accumulator.
    pub fn zeros(config: BlockConfig) -> Self {
        let e = config.embed_dim;
        let hd = config.hidden_dim();
        Self {
            config,
            ln1_gain: Array1::zeros(e),
            ln1_bias: Array1::zeros(e),
            q_weight: Array2::zeros((e, e)),
            q_bias: Array1::zeros(e),
            k_weight: Array2::zeros((e, e)),
            k_bias: Array1::zeros(e),
            v_weight: Array2::zeros((e, e)),
            v_bias: Array1::zeros(e),
            out_weight: Array2::zeros((e, e)),
            out_bias: Array1::zeros(e),
            ln2_gain: Array1::zeros(e),
            ln2_bias: Array1::zeros(e),
            fc1_weight: Array2::zeros((e, hd)),
            fc1_bias: Array1::zeros(hd),
            fc2_weight: Array2::zeros((hd, e)),
            fc2_bias: Array1::zeros(e),
        }
    }

    /// Truncated-normal Q/K/V and first MLP layer, zero output projections and
    /// unit layer-norm gains. The block starts as the identity map.
    pub fn init(config: BlockConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(init_seed, seed::Stream::Init, 0));
        let e = config.embed_dim;
        let mut p = Self::zeros(config);
        p.ln1_gain.fill(1.0);
        p.ln2_gain.fill(1.0);
        p.q_weight = truncated_normal(&mut rng, e, e);
        p.k_weight = truncated_normal(&mut rng, e, e);
        p.v_weight = truncated_normal(&mut rng, e, e);
        p.fc1_weight = truncated_normal(&mut rng, e, config.hidden_dim());
        Ok(p)
    }

    pub fn config(&self) -> &BlockConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Expected shape of each named tensor.
    pub fn shapes(config: &BlockConfig) -> [Vec<usize>; 16] {
        let e = config.embed_dim;
        let hd = config.hidden_dim();
        [
            vec![e],
            vec![e],
            vec![e, e],
            vec![e],
            vec![e, e],
            vec![e],
            vec![e, e],
            vec![e],
            vec![e, e],
            vec![e],
            vec![e],
            vec![e],
            vec![e, hd],
            vec![hd],
            vec![hd, e],
            vec![e],
        ]
    }

    /// Flat, row-major views of every tensor in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&[f64]; 16] {
        fn f<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        [
            f(&self.ln1_gain),
            f(&self.ln1_bias),
            f(&self.q_weight),
            f(&self.q_bias),
            f(&self.k_weight),
            f(&self.k_bias),
            f(&self.v_weight),
            f(&self.v_bias),
            f(&self.out_weight),
            f(&self.out_bias),
            f(&self.ln2_gain),
            f(&self.ln2_bias),
            f(&self.fc1_weight),
            f(&self.fc1_bias),
            f(&self.fc2_weight),
            f(&self.fc2_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 16] {
        fn f<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        [
            f(&mut self.ln1_gain),
            f(&mut self.ln1_bias),
            f(&mut self.q_weight),
            f(&mut self.q_bias),
            f(&mut self.k_weight),
            f(&mut self.k_bias),
            f(&mut self.v_weight),
            f(&mut self.v_bias),
            f(&mut self.out_weight),
            f(&mut self.out_bias),
            f(&mut self.ln2_gain),
            f(&mut self.ln2_bias),
            f(&mut self.fc1_weight),
            f(&mut self.fc1_bias),
            f(&mut self.fc2_weight),
            f(&mut self.fc2_bias),
        ]
    }

    /// Rebuilds parameters from flat tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(config: BlockConfig, tensors: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        let mut p = Self::zeros(config);
        for ((dst, src), name) in p.tensors_mut().into_iter().zip(&tensors).zip(PARAM_NAMES) {
            if dst.len() != src.len() {
                return Err(Error::invalid(format!(
                    "tensor {name} has {} values, expected {}",
                    src.len(),
                    dst.len()
                )));
            }
            if src.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("tensor {name} has non-finite values")));
            }
            dst.copy_from_slice(src);
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += other * factor`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * factor;
            }
        }
    }

    /// Multiplies every tensor by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>, eps: f64) -> (Array2<f64>, LnCache) {
    let e = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / e;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / e;
    let rstd = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = centered * &rstd.view().insert_axis(Axis(1));
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

/// Returns `dx`, accumulating `dgain` and `dbias`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let e = dy.ncols() as f64;
    let mean_d = dxhat.sum_axis(Axis(1)) / e;
    let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / e;
    let mut dx = dxhat;
    Zip::from(dx.rows_mut())
        .and(cache.xhat.rows())
        .and(&mean_d)
        .and(&mean_dx)
        .and(&cache.rstd)
        .for_each(|mut row, xh, &md, &mdx, &r| {
            Zip::from(&mut row).and(&xh).for_each(|d, &x| {
                *d = r * (*d - md - x * mdx);
            });
        });
    dx
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ln1: LnCache,
    y1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    y2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

impl AdaptationParams {
    fn check_tokens(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.config.embed_dim {
            return Err(Error::invalid(format!(
                "features have {} dims but the block expects {}",
                x.ncols(),
                self.config.embed_dim
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Array2<f64>, keep: bool) -> (Array2<f64>, Option<ForwardCache>) {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let (y1, ln1) = layer_norm(x, &self.ln1_gain, &self.ln1_bias, cfg.ln_eps);
        let q = affine(y1.view(), &self.q_weight, &self.q_bias);
        let k = affine(y1.view(), &self.k_weight, &self.k_bias);
        let v = affine(y1.view(), &self.v_weight, &self.v_bias);

        let mut o = Array2::zeros(x.raw_dim());
        let mut attn = Vec::with_capacity(if keep { cfg.heads } else { 0 });
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut a);
            o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            if keep {
                attn.push(a);
            }
        }
        let x2 = x + &affine(o.view(), &self.out_weight, &self.out_bias);

        let (y2, ln2) = layer_norm(&x2, &self.ln2_gain, &self.ln2_bias, cfg.ln_eps);
        let pre_act = affine(y2.view(), &self.fc1_weight, &self.fc1_bias);
        let act = pre_act.mapv(gelu);
        let out = &x2 + &affine(act.view(), &self.fc2_weight, &self.fc2_bias);

        let cache = keep.then(|| ForwardCache {
            ln1,
            y1,
            q,
            k,
            v,
            attn,
            o,
            ln2,
            y2,
            pre_act,
            act,
        });
        (out, cache)
    }

    /// Applies the block to `N x E` tokens.
    pub fn forward_tokens(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_tokens(x)?;
        Ok(self.run(x, false).0)
    }

    /// Forward pass retaining activations for [`AdaptationParams::backward`].
    pub fn forward_train(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_tokens(x)?;
        let (out, cache) = self.run(x, true);
        Ok((out, cache.expect("cache requested")))
    }

    /// Accumulates into `grads` the parameter gradient for upstream gradient
    /// `d_out` on the block output. Input tokens receive no gradient.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>, grads: &mut ParamGrads) {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // MLP branch.
        grads.fc2_weight += &cache.act.t().dot(d_out);
        grads.fc2_bias += &d_out.sum_axis(Axis(0));
        let d_act = d_out.dot(&self.fc2_weight.t());
        let mut d_pre = d_act;
        Zip::from(&mut d_pre)
            .and(&cache.pre_act)
            .for_each(|d, &h| *d *= gelu_grad(h));
        grads.fc1_weight += &cache.y2.t().dot(&d_pre);
        grads.fc1_bias += &d_pre.sum_axis(Axis(0));
        let d_y2 = d_pre.dot(&self.fc1_weight.t());
        let d_x2 = d_out
            + &layer_norm_backward(
                &d_y2,
                &cache.ln2,
                &self.ln2_gain,
                &mut grads.ln2_gain,
                &mut grads.ln2_bias,
            );

        // Attention branch.
        grads.out_weight += &cache.o.t().dot(&d_x2);
        grads.out_bias += &d_x2.sum_axis(Axis(0));
        let d_o = d_x2.dot(&self.out_weight.t());
        let mut d_q = Array2::zeros(cache.q.raw_dim());
        let mut d_k = Array2::zeros(cache.k.raw_dim());
        let mut d_v = Array2::zeros(cache.v.raw_dim());
        for (h, a) in cache.attn.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_oh = d_o.slice(cols);
            d_v.slice_mut(cols).assign(&a.t().dot(&d_oh));
            let d_a = d_oh.dot(&cache.v.slice(cols).t());
            let row_dot = (&d_a * a).sum_axis(Axis(1));
            let d_s = (d_a - &row_dot.insert_axis(Axis(1))) * a * scale;
            d_q.slice_mut(cols).assign(&d_s.dot(&cache.k.slice(cols)));
            d_k.slice_mut(cols).assign(&d_s.t().dot(&cache.q.slice(cols)));
        }
        grads.q_weight += &cache.y1.t().dot(&d_q);
        grads.q_bias += &d_q.sum_axis(Axis(0));
        grads.k_weight += &cache.y1.t().dot(&d_k);
        grads.k_bias += &d_k.sum_axis(Axis(0));
        grads.v_weight += &cache.y1.t().dot(&d_v);
        grads.v_bias += &d_v.sum_axis(Axis(0));
        let d_y1 = d_q.dot(&self.q_weight.t()) + d_k.dot(&self.k_weight.t()) + d_v.dot(&self.v_weight.t());
        let _ = layer_norm_backward(
            &d_y1,
            &cache.ln1,
            &self.ln1_gain,
            &mut grads.ln1_gain,
            &mut grads.ln1_bias,
        );
    }
}

/// `M = Psi(F)`: same grid, same dimension.
pub fn adaptation_forward(features: &FeatureMap, params: &AdaptationParams) -> Result<FeatureMap> {
    if features.embed_dim() != params.config().embed_dim {
        return Err(Error::invalid(format!(
            "features have {} dims but the block expects {}",
            features.embed_dim(),
            params.config().embed_dim
        )));
    }
    let out = params.forward_tokens(&features.to_tokens())?;
    features.with_tokens(&out)
}
