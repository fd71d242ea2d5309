//! MimirNet-S: a small convolutional backbone with a mean head and a
//! log-variance head per target.
//!
//! Each block is a 3×3 convolution (stride 1, zero padding 1), bias, ReLU
//! and optional 2×2 average pooling. Global average pooling feeds one dense
//! layer with `2·T` outputs: the first `T` are the means `μ̂`, the last `T`
//! the log-variances `ŝ` (so `σ̂² = exp ŝ`).
//!
//! Samples are processed independently and per-sample parameter gradients
//! are combined by pairwise summation, so a sample's outputs never depend on
//! its batch neighbours.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{MimirError, Result};
use crate::linalg::Real;

/// Smallest accepted input height and width.
pub const MIN_INPUT: usize = 8;

/// Default `(channels, height, width)` of the network input. Tiles keep
/// their 3:2 aspect for the default 64×64×32 phantom grid.
pub const DEFAULT_INPUT: (usize, usize, usize) = (2, 24, 16);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub blocks: Vec<ConvBlock>,
    pub n_targets: usize,
    pub init_seed: u64,
}

/// Shapes of one convolution block as seen by the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub pool: bool,
}

impl BlockShape {
    fn out_hw(&self) -> (usize, usize) {
        if self.pool {
            (self.height / 2, self.width / 2)
        } else {
            (self.height, self.width)
        }
    }
}

impl NetworkConfig {
    pub fn default_blocks() -> Vec<ConvBlock> {
        vec![
            ConvBlock { out_channels: 16, pool: true },
            ConvBlock { out_channels: 32, pool: true },
            ConvBlock { out_channels: 64, pool: false },
        ]
    }

    /// The reference backbone for `(channels, height, width)` inputs.
    pub fn mimirnet_s(input: (usize, usize, usize), n_targets: usize, init_seed: u64) -> Self {
        NetworkConfig {
            input_channels: input.0,
            input_height: input.1,
            input_width: input.2,
            blocks: Self::default_blocks(),
            n_targets,
            init_seed,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }

    pub fn n_outputs(&self) -> usize {
        2 * self.n_targets
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(self.input_channels, |b| b.out_channels)
    }

    pub fn block_shapes(&self) -> Vec<BlockShape> {
        let (mut c, mut h, mut w) = (self.input_channels, self.input_height, self.input_width);
        self.blocks
            .iter()
            .map(|b| {
                let shape = BlockShape {
                    in_channels: c,
                    out_channels: b.out_channels,
                    height: h,
                    width: w,
                    pool: b.pool,
                };
                (h, w) = shape.out_hw();
                c = b.out_channels;
                shape
            })
            .collect()
    }

    /// Parameter tensor shapes in storage order: per block the kernel
    /// `[out, in, 3, 3]` and bias `[out]`, then the dense weight
    /// `[2T, features]` and bias `[2T]`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for b in self.block_shapes() {
            shapes.push(vec![b.out_channels, b.in_channels, 3, 3]);
            shapes.push(vec![b.out_channels]);
        }
        shapes.push(vec![self.n_outputs(), self.feature_dim()]);
        shapes.push(vec![self.n_outputs()]);
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(MimirError::validation("input_channels", "must be >= 1"));
        }
        if self.input_height < MIN_INPUT || self.input_width < MIN_INPUT {
            return Err(MimirError::validation(
                "input dims",
                format!(
                    "{}x{} is below the {MIN_INPUT}x{MIN_INPUT} minimum",
                    self.input_height, self.input_width
                ),
            ));
        }
        if self.blocks.is_empty() {
            return Err(MimirError::validation("blocks", "at least one conv block is required"));
        }
        if self.n_targets == 0 {
            return Err(MimirError::validation("n_targets", "must be >= 1"));
        }
        for (i, b) in self.block_shapes().iter().enumerate() {
            if b.out_channels == 0 {
                return Err(MimirError::validation(
                    "blocks",
                    format!("block {i} has zero output channels"),
                ));
            }
            let (h, w) = b.out_hw();
            if h == 0 || w == 0 {
                return Err(MimirError::validation(
                    "blocks",
                    format!("block {i} pools a {}x{} map to nothing", b.height, b.width),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Network parameters (or gradients of the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<F> {
    pub tensors: Vec<Tensor<F>>,
}

pub type ParameterGradients<F> = ParameterSet<F>;

impl<F: Real> ParameterSet<F> {
    pub fn zeros(config: &NetworkConfig) -> Self {
        ParameterSet {
            tensors: config
                .param_shapes()
                .into_iter()
                .map(|shape| Tensor {
                    data: vec![F::zero(); shape.iter().product()],
                    shape,
                })
                .collect(),
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn matches(&self, config: &NetworkConfig) -> bool {
        let shapes = config.param_shapes();
        shapes.len() == self.tensors.len()
            && shapes
                .iter()
                .zip(&self.tensors)
                .all(|(s, t)| *s == t.shape && t.data.len() == s.iter().product::<usize>())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Hash over shapes and exact values; detects caches from other parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in &self.tensors {
            t.shape.hash(&mut h);
            for v in &t.data {
                v.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn cast<G: Real>(&self) -> ParameterSet<G> {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    shape: t.shape.clone(),
                    data: t
                        .data
                        .iter()
                        .map(|v| G::from_f64_lossy(v.to_f64().unwrap()))
                        .collect(),
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + *y;
            }
        }
    }

    fn kernel(&self, block: usize) -> &[F] {
        &self.tensors[2 * block].data
    }

    fn bias(&self, block: usize) -> &[F] {
        &self.tensors[2 * block + 1].data
    }

    fn dense(&self) -> (&[F], &[F]) {
        let n = self.tensors.len();
        (&self.tensors[n - 2].data, &self.tensors[n - 1].data)
    }
}

/// He-scaled normal weights (`std = √(2 / fan_in)`), zero biases, and a
/// zero log-variance head, so every initial `σ̂²` is exactly 1.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ParameterSet<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::<f32>::zeros(config);
    let n = params.tensors.len();
    let t = config.n_targets;
    for (i, tensor) in params.tensors.iter_mut().enumerate() {
        if tensor.shape.len() == 1 {
            continue;
        }
        let fan_in: usize = tensor.shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let rows = if i == n - 2 { t } else { tensor.shape[0] };
        for v in tensor.data[..rows * fan_in].iter_mut() {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    Ok(params)
}

struct LayerCache<F> {
    cols: Vec<F>,
    activations: Vec<F>,
}

struct SampleCache<F> {
    layers: Vec<LayerCache<F>>,
    features: Vec<F>,
}

/// Activations retained by [`forward`] for [`backward`].
pub struct ForwardCache<F> {
    samples: Vec<SampleCache<F>>,
    fingerprint: u64,
}

impl<F> ForwardCache<F> {
    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }
}

pub struct ForwardOutput<F> {
    /// `N × T`.
    pub mu: Vec<F>,
    /// `N × T` log-variances.
    pub log_var: Vec<F>,
    pub cache: ForwardCache<F>,
}

fn im2col<F: Real>(x: &[F], c: usize, h: usize, w: usize, cols: &mut [F]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize {
                            F::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(cols: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let hw = h * w;
    let mut x = vec![F::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            let dst = &mut plane[sy as usize * w + sx as usize];
                            *dst = *dst + row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

fn avg_pool<F: Real>(a: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (ph, pw) = (h / 2, w / 2);
    let quarter = F::from_f64_lossy(0.25);
    let mut out = Vec::with_capacity(c * ph * pw);
    for ci in 0..c {
        let plane = &a[ci * h * w..(ci + 1) * h * w];
        for i in 0..ph {
            for j in 0..pw {
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                out.push((plane[r0] + plane[r0 + 1] + plane[r1] + plane[r1 + 1]) * quarter);
            }
        }
    }
    out
}

fn avg_unpool<F: Real>(d: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (ph, pw) = (h / 2, w / 2);
    let quarter = F::from_f64_lossy(0.25);
    let mut out = vec![F::zero(); c * h * w];
    for ci in 0..c {
        for i in 0..ph {
            for j in 0..pw {
                let g = d[(ci * ph + i) * pw + j] * quarter;
                let r0 = ci * h * w + 2 * i * w + 2 * j;
                out[r0] = g;
                out[r0 + 1] = g;
                out[r0 + w] = g;
                out[r0 + w + 1] = g;
            }
        }
    }
    out
}

fn forward_sample<F: Real>(
    params: &ParameterSet<F>,
    shapes: &[BlockShape],
    input: &[F],
    keep: bool,
) -> (Vec<F>, Option<SampleCache<F>>) {
    let mut x = input.to_vec();
    let mut layers = Vec::with_capacity(if keep { shapes.len() } else { 0 });
    for (l, s) in shapes.iter().enumerate() {
        let hw = s.height * s.width;
        let k = s.in_channels * 9;
        let mut cols = vec![F::zero(); k * hw];
        im2col(&x, s.in_channels, s.height, s.width, &mut cols);
        let mut z = vec![F::zero(); s.out_channels * hw];
        F::matmul(s.out_channels, k, hw, params.kernel(l), false, &cols, false, &mut z, false);
        for (row, &b) in z.chunks_exact_mut(hw).zip(params.bias(l)) {
            for v in row.iter_mut() {
                let pre = *v + b;
                *v = if pre > F::zero() { pre } else { F::zero() };
            }
        }
        x = if s.pool {
            avg_pool(&z, s.out_channels, s.height, s.width)
        } else if keep {
            z.clone()
        } else {
            std::mem::take(&mut z)
        };
        if keep {
            layers.push(LayerCache { cols, activations: z });
        }
    }
    let last = shapes.last().expect("validated config has blocks");
    let (oh, ow) = last.out_hw();
    let area = F::from_usize(oh * ow).unwrap();
    let features: Vec<F> = x
        .chunks_exact(oh * ow)
        .map(|plane| plane.iter().copied().sum::<F>() / area)
        .collect();
    let (weight, bias) = params.dense();
    let mut out = bias.to_vec();
    F::matmul(bias.len(), features.len(), 1, weight, false, &features, false, &mut out, true);
    let cache = keep.then_some(SampleCache { layers, features });
    (out, cache)
}

fn check_inputs<F: Real>(
    params: &ParameterSet<F>,
    config: &NetworkConfig,
    inputs: &[F],
    n: usize,
) -> Result<()> {
    config.validate()?;
    if !params.matches(config) {
        return Err(MimirError::shape(
            format!("parameters for {:?}", config.param_shapes()),
            "mismatched parameter tensors",
        ));
    }
    if inputs.len() != n * config.input_len() {
        return Err(MimirError::shape(
            format!(
                "{n}x{}x{}x{} inputs",
                config.input_channels, config.input_height, config.input_width
            ),
            format!("{} values", inputs.len()),
        ));
    }
    Ok(())
}

fn split_outputs<F: Real>(outs: &[Vec<F>], t: usize) -> (Vec<F>, Vec<F>) {
    let mut mu = Vec::with_capacity(outs.len() * t);
    let mut log_var = Vec::with_capacity(outs.len() * t);
    for o in outs {
        mu.extend_from_slice(&o[..t]);
        log_var.extend_from_slice(&o[t..]);
    }
    (mu, log_var)
}

/// Forward pass over `n` samples stored `n × C × H × W`, keeping the cache.
pub fn forward<F: Real>(
    params: &ParameterSet<F>,
    config: &NetworkConfig,
    inputs: &[F],
    n: usize,
) -> Result<ForwardOutput<F>> {
    check_inputs(params, config, inputs, n)?;
    let shapes = config.block_shapes();
    let len = config.input_len();
    let results: Vec<(Vec<F>, Option<SampleCache<F>>)> = (0..n)
        .into_par_iter()
        .map(|i| forward_sample(params, &shapes, &inputs[i * len..(i + 1) * len], true))
        .collect();
    let outs: Vec<Vec<F>> = results.iter().map(|(o, _)| o.clone()).collect();
    let (mu, log_var) = split_outputs(&outs, config.n_targets);
    let samples = results.into_iter().map(|(_, c)| c.expect("kept")).collect();
    Ok(ForwardOutput {
        mu,
        log_var,
        cache: ForwardCache {
            samples,
            fingerprint: params.fingerprint(),
        },
    })
}

/// Forward pass without retaining activations; returns `(μ̂, ŝ)`.
pub fn predict<F: Real>(
    params: &ParameterSet<F>,
    config: &NetworkConfig,
    inputs: &[F],
    n: usize,
) -> Result<(Vec<F>, Vec<F>)> {
    check_inputs(params, config, inputs, n)?;
    let shapes = config.block_shapes();
    let len = config.input_len();
    let outs: Vec<Vec<F>> = (0..n)
        .into_par_iter()
        .map(|i| forward_sample(params, &shapes, &inputs[i * len..(i + 1) * len], false).0)
        .collect();
    Ok(split_outputs(&outs, config.n_targets))
}

fn backward_sample<F: Real>(
    params: &ParameterSet<F>,
    config: &NetworkConfig,
    shapes: &[BlockShape],
    cache: &SampleCache<F>,
    d_out: &[F],
) -> ParameterSet<F> {
    let mut grads = ParameterSet::zeros(config);
    let n_tensors = grads.tensors.len();
    let feat = &cache.features;
    let (weight, _) = params.dense();
    let outputs = d_out.len();
    let fdim = feat.len();
    F::matmul(outputs, 1, fdim, d_out, false, feat, false, &mut grads.tensors[n_tensors - 2].data, false);
    grads.tensors[n_tensors - 1].data.copy_from_slice(d_out);
    let mut d_feat = vec![F::zero(); fdim];
    F::matmul(fdim, outputs, 1, weight, true, d_out, false, &mut d_feat, false);

    let last = shapes.last().expect("validated config has blocks");
    let (oh, ow) = last.out_hw();
    let area = F::from_usize(oh * ow).unwrap();
    let mut d_x: Vec<F> = d_feat
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / area, oh * ow))
        .collect();

    for (l, s) in shapes.iter().enumerate().rev() {
        let hw = s.height * s.width;
        let k = s.in_channels * 9;
        let layer = &cache.layers[l];
        let mut d_z = if s.pool {
            avg_unpool(&d_x, s.out_channels, s.height, s.width)
        } else {
            d_x
        };
        for (g, &a) in d_z.iter_mut().zip(&layer.activations) {
            if a <= F::zero() {
                *g = F::zero();
            }
        }
        F::matmul(s.out_channels, hw, k, &d_z, false, &layer.cols, true, &mut grads.tensors[2 * l].data, false);
        for (gb, row) in grads.tensors[2 * l + 1].data.iter_mut().zip(d_z.chunks_exact(hw)) {
            *gb = row.iter().copied().sum();
        }
        if l == 0 {
            break;
        }
        let mut d_cols = vec![F::zero(); k * hw];
        F::matmul(k, s.out_channels, hw, params.kernel(l), true, &d_z, false, &mut d_cols, false);
        d_x = col2im(&d_cols, s.in_channels, s.height, s.width);
    }
    grads
}

fn pairwise_sum<F: Real>(mut parts: Vec<ParameterSet<F>>) -> Option<ParameterSet<F>> {
    fn go<F: Real>(parts: &mut [Option<ParameterSet<F>>]) -> ParameterSet<F> {
        if parts.len() == 1 {
            return parts[0].take().expect("each part consumed once");
        }
        let mid = parts.len() / 2;
        let (left, right) = parts.split_at_mut(mid);
        let mut acc = go(left);
        acc.add_assign(&go(right));
        acc
    }
    if parts.is_empty() {
        return None;
    }
    let mut slots: Vec<Option<ParameterSet<F>>> = parts.drain(..).map(Some).collect();
    Some(go(&mut slots))
}

/// Parameter gradients of `Σ_i (grad_mu_i·μ̂_i + grad_s_i·ŝ_i)` for the batch
/// that produced `cache`.
pub fn backward<F: Real>(
    params: &ParameterSet<F>,
    config: &NetworkConfig,
    cache: &ForwardCache<F>,
    grad_mu: &[F],
    grad_s: &[F],
) -> Result<ParameterGradients<F>> {
    let n = cache.samples.len();
    let t = config.n_targets;
    if cache.fingerprint != params.fingerprint() {
        return Err(MimirError::StaleCache);
    }
    if grad_mu.len() != n * t || grad_s.len() != n * t {
        return Err(MimirError::shape(
            format!("{n}x{t} upstream gradients"),
            format!("{} / {}", grad_mu.len(), grad_s.len()),
        ));
    }
    if !params.matches(config) {
        return Err(MimirError::StaleCache);
    }
    let shapes = config.block_shapes();
    // A sample with all-zero upstream gradient contributes exactly zero;
    // leaving it out keeps the reduction tree independent of masked rows.
    let active: Vec<usize> = (0..n)
        .filter(|&i| {
            let row = i * t..(i + 1) * t;
            grad_mu[row.clone()].iter().chain(&grad_s[row]).any(|g| *g != F::zero())
        })
        .collect();
    let per_sample: Vec<ParameterSet<F>> = active
        .into_par_iter()
        .map(|i| {
            let mut d_out = Vec::with_capacity(2 * t);
            d_out.extend_from_slice(&grad_mu[i * t..(i + 1) * t]);
            d_out.extend_from_slice(&grad_s[i * t..(i + 1) * t]);
            backward_sample(params, config, &shapes, &cache.samples[i], &d_out)
        })
        .collect();
    Ok(pairwise_sum(per_sample).unwrap_or_else(|| ParameterSet::zeros(config)))
}
