//! Small convolutional encoder with a GAP-then-linear head.
//!
//! Architecture: a stack of blocks (3x3 conv, instance norm, ReLU, 2x2
//! average pool), global average pooling into the embedding, and a linear
//! classifier. The GAP-then-linear shape is what makes classifier-weighted
//! class activation maps well defined.
//!
//! Forward and backward passes are written by hand; convolutions go through
//! im2col + matrix multiply. Everything is f64 so gradients can be checked
//! against central finite differences tightly.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{HliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub in_channels: usize,
    /// Output channels per block; the last entry is the embedding dimension.
    pub block_channels: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_h: 64,
            input_w: 32,
            in_channels: 3,
            block_channels: vec![8, 16, 32, 64],
            num_classes: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() {
            return Err(HliError::InvalidArgument("no conv blocks".into()));
        }
        let div = 1usize << self.block_channels.len();
        if self.input_h % div != 0 || self.input_w % div != 0 {
            return Err(HliError::InvalidArgument(format!(
                "input {}x{} not divisible by total downsample factor {}",
                self.input_h, self.input_w, div
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        *self.block_channels.last().unwrap()
    }

    /// Spatial downsampling factor from image to final feature map.
    pub fn stride(&self) -> usize {
        1 << self.block_channels.len()
    }

    pub fn feat_h(&self) -> usize {
        self.input_h >> self.block_channels.len()
    }

    pub fn feat_w(&self) -> usize {
        self.input_w >> self.block_channels.len()
    }
}

/// Flat ordered collection of named parameter tensors.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<ArrayD<f64>>,
}

impl ModelParams {
    /// He-initialized parameters; the classifier starts at small variance.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors: Vec<ArrayD<f64>> = Vec::new();
        let mut c_in = config.in_channels;
        for (b, &c_out) in config.block_channels.iter().enumerate() {
            let fan_in = (c_in * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let w = Array4::from_shape_fn((c_out, c_in, 3, 3), |_| gauss(&mut rng) * std);
            names.push(format!("block{b}.conv.w"));
            tensors.push(w.into_dyn());
            names.push(format!("block{b}.conv.b"));
            tensors.push(Array1::<f64>::zeros(c_out).into_dyn());
            names.push(format!("block{b}.norm.gamma"));
            tensors.push(Array1::<f64>::ones(c_out).into_dyn());
            names.push(format!("block{b}.norm.beta"));
            tensors.push(Array1::<f64>::zeros(c_out).into_dyn());
            c_in = c_out;
        }
        let d = config.embed_dim();
        let head_w = Array2::from_shape_fn((config.num_classes, d), |_| gauss(&mut rng) * 0.01);
        names.push("head.w".into());
        tensors.push(head_w.into_dyn());
        names.push("head.b".into());
        tensors.push(Array1::<f64>::zeros(config.num_classes).into_dyn());
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[ArrayD<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &mut self.tensors[i]
    }

    /// Replace the classifier head with a fresh small-variance head of
    /// `num_classes` outputs. Embedding parameters are untouched.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.embed_dim();
        self.config.num_classes = num_classes;
        *self.get_mut("head.w") =
            Array2::from_shape_fn((num_classes, d), |_| gauss(&mut rng) * 0.01).into_dyn();
        *self.get_mut("head.b") = Array1::<f64>::zeros(num_classes).into_dyn();
    }

    pub fn zeros_like(&self) -> Vec<ArrayD<f64>> {
        self.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect()
    }

    pub fn same_schema(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// N×C_f×H_f×W_f final conv feature map.
    pub spatial_map: Array4<f64>,
    /// N×D pooled embedding: the spatial average of `spatial_map`.
    pub embedding: Array2<f64>,
    /// N×num_classes.
    pub logits: Array2<f64>,
}

struct BlockTrace {
    input: Array4<f64>,
    xhat: Array4<f64>,
    inv_std: Array2<f64>,
    relu_out: Array4<f64>,
}

/// Cached intermediates for the backward pass.
pub struct ForwardTrace {
    blocks: Vec<BlockTrace>,
    embedding: Array2<f64>,
}

const NORM_EPS: f64 = 1e-5;

pub fn forward(params: &ModelParams, images: &Array4<f64>) -> Result<(FeatureBundle, ForwardTrace)> {
    let cfg = &params.config;
    let (n, c, h, w) = images.dim();
    if c != cfg.in_channels || h != cfg.input_h || w != cfg.input_w {
        return Err(HliError::ShapeMismatch(format!(
            "input {n}x{c}x{h}x{w}, model expects {}x{}x{}",
            cfg.in_channels, cfg.input_h, cfg.input_w
        )));
    }
    let mut x = images.clone();
    let mut blocks = Vec::with_capacity(cfg.block_channels.len());
    for b in 0..cfg.block_channels.len() {
        let wt = params
            .get(&format!("block{b}.conv.w"))
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let bias = params
            .get(&format!("block{b}.conv.b"))
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let gamma = params
            .get(&format!("block{b}.norm.gamma"))
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        let beta = params
            .get(&format!("block{b}.norm.beta"))
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();

        let conv = conv3x3(&x, &wt, &bias);
        let (xhat, inv_std) = instance_norm_stats(&conv);
        let (nn, cc, hh, ww) = xhat.dim();
        let mut y = xhat.clone();
        for ni in 0..nn {
            for ci in 0..cc {
                let g = gamma[ci];
                let be = beta[ci];
                y.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| (g * v + be).max(0.0));
            }
        }
        let pooled = avg_pool2(&y);
        blocks.push(BlockTrace {
            input: x,
            xhat,
            inv_std,
            relu_out: y,
        });
        let _ = (nn, hh, ww);
        x = pooled;
    }
    let spatial_map = x;
    let (nb, d, fh, fw) = spatial_map.dim();
    let mut embedding = Array2::<f64>::zeros((nb, d));
    let area = (fh * fw) as f64;
    for ni in 0..nb {
        for ci in 0..d {
            embedding[[ni, ci]] =
                spatial_map.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum() / area;
        }
    }
    let head_w = params
        .get("head.w")
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let head_b = params
        .get("head.b")
        .view()
        .into_dimensionality::<Ix1>()
        .unwrap()
        .to_owned();
    let logits = embedding.dot(&head_w.t()) + &head_b;
    Ok((
        FeatureBundle {
            spatial_map,
            embedding: embedding.clone(),
            logits,
        },
        ForwardTrace { blocks, embedding },
    ))
}

/// Backpropagate `d_embedding` and `d_logits` through the network.
/// Returns gradients aligned with the parameter order of `params`.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_embedding: &Array2<f64>,
    d_logits: &Array2<f64>,
) -> Vec<ArrayD<f64>> {
    let cfg = &params.config;
    let mut grads = params.zeros_like();
    let name_index = |name: &str| params.names.iter().position(|n| n == name).unwrap();

    let head_w = params
        .get("head.w")
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    // Head gradients.
    let d_head_w = d_logits.t().dot(&trace.embedding);
    let d_head_b = d_logits.sum_axis(Axis(0));
    grads[name_index("head.w")] = d_head_w.into_dyn();
    grads[name_index("head.b")] = d_head_b.into_dyn();

    let d_emb_total = d_embedding + &d_logits.dot(&head_w);

    // Spread embedding gradient uniformly over the final feature map.
    let nblocks = cfg.block_channels.len();
    let (fh, fw) = (cfg.feat_h(), cfg.feat_w());
    let n = d_emb_total.dim().0;
    let d = cfg.embed_dim();
    let area = (fh * fw) as f64;
    let mut d_x = Array4::<f64>::zeros((n, d, fh, fw));
    for ni in 0..n {
        for ci in 0..d {
            let g = d_emb_total[[ni, ci]] / area;
            d_x.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }

    for b in (0..nblocks).rev() {
        let bt = &trace.blocks[b];
        let gamma = params
            .get(&format!("block{b}.norm.gamma"))
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();
        // Unpool.
        let mut d_y = avg_pool2_backward(&d_x);
        // ReLU.
        ndarray::Zip::from(&mut d_y).and(&bt.relu_out).for_each(|g, &y| {
            if y <= 0.0 {
                *g = 0.0;
            }
        });
        // Instance norm backward.
        let (nn, cc, hh, ww) = bt.xhat.dim();
        let m = (hh * ww) as f64;
        let mut d_gamma = Array1::<f64>::zeros(cc);
        let mut d_beta = Array1::<f64>::zeros(cc);
        let mut d_conv = Array4::<f64>::zeros((nn, cc, hh, ww));
        for ni in 0..nn {
            for ci in 0..cc {
                let dy = d_y.index_axis(Axis(0), ni);
                let dy = dy.index_axis(Axis(0), ci);
                let xh = bt.xhat.index_axis(Axis(0), ni);
                let xh = xh.index_axis(Axis(0), ci);
                let sum_dy: f64 = dy.sum();
                let sum_dyxh: f64 = dy.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                d_beta[ci] += sum_dy;
                d_gamma[ci] += sum_dyxh;
                let coeff = gamma[ci] * bt.inv_std[[ni, ci]];
                let mean_dy = sum_dy / m;
                let mean_dyxh = sum_dyxh / m;
                let mut out = d_conv.index_axis_mut(Axis(0), ni);
                let mut out = out.index_axis_mut(Axis(0), ci);
                ndarray::Zip::from(&mut out).and(&dy).and(&xh).for_each(|o, &g, &x| {
                    *o = coeff * (g - mean_dy - x * mean_dyxh);
                });
            }
        }
        grads[name_index(&format!("block{b}.norm.gamma"))] = d_gamma.into_dyn();
        grads[name_index(&format!("block{b}.norm.beta"))] = d_beta.into_dyn();

        // Conv backward.
        let wt = params
            .get(&format!("block{b}.conv.w"))
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let (d_w, d_b, d_in) = conv3x3_backward(&bt.input, &wt, &d_conv);
        grads[name_index(&format!("block{b}.conv.w"))] = d_w.into_dyn();
        grads[name_index(&format!("block{b}.conv.b"))] = d_b.into_dyn();
        d_x = d_in;
    }
    grads
}

/// im2col for a 3x3 same-padding convolution.
/// Output shape (Cin*9, N*H*W); columns ordered (n, y, x) row-major.
fn im2col(input: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = input.dim();
    let mut cols = Array2::<f64>::zeros((c * 9, n * h * w));
    let input = input.as_standard_layout();
    let src = input.as_slice().unwrap();
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ci * 9 + ky * 3 + kx;
                let mut out_row = cols.index_axis_mut(Axis(0), row);
                let dst = out_row.as_slice_mut().unwrap();
                // Valid destination x range given sx = x + kx - 1 in [0, w).
                let x0 = if kx == 0 { 1 } else { 0 };
                let x1 = if kx == 2 { w - 1 } else { w };
                for ni in 0..n {
                    let plane = (ni * c + ci) * h * w;
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let sy = sy - 1;
                        let d0 = ni * h * w + y * w;
                        let s0 = plane + sy * w + x0 + kx - 1;
                        dst[d0 + x0..d0 + x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(d_cols: &Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    let dst = out.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ci * 9 + ky * 3 + kx;
                let src_row = d_cols.index_axis(Axis(0), row);
                let src = src_row.as_slice().unwrap();
                let x0 = if kx == 0 { 1 } else { 0 };
                let x1 = if kx == 2 { w - 1 } else { w };
                for ni in 0..n {
                    let plane = (ni * c + ci) * h * w;
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let sy = sy - 1;
                        let s0 = ni * h * w + y * w;
                        let d0 = plane + sy * w + x0 + kx - 1;
                        for i in 0..(x1 - x0) {
                            dst[d0 + i] += src[s0 + x0 + i];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3(input: &Array4<f64>, weight: &Array4<f64>, bias: &Array1<f64>) -> Array4<f64> {
    let (n, _c, h, w) = input.dim();
    let c_out = weight.dim().0;
    let cols = im2col(input);
    let w_mat = weight
        .view()
        .into_shape_with_order((c_out, weight.len() / c_out))
        .unwrap()
        .to_owned();
    let out_mat = w_mat.dot(&cols);
    // (Cout, N*H*W) -> (N, Cout, H, W), adding bias on the way.
    let area = h * w;
    let mut out = Array4::<f64>::zeros((n, c_out, h, w));
    {
        let src = out_mat.as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        for co in 0..c_out {
            let b = bias[co];
            for ni in 0..n {
                let s0 = (co * n + ni) * area;
                let d0 = (ni * c_out + co) * area;
                for i in 0..area {
                    dst[d0 + i] = src[s0 + i] + b;
                }
            }
        }
    }
    out
}

fn conv3x3_backward(
    input: &Array4<f64>,
    weight: &Array4<f64>,
    d_out: &Array4<f64>,
) -> (Array4<f64>, Array1<f64>, Array4<f64>) {
    let (n, c_in, h, w) = input.dim();
    let c_out = weight.dim().0;
    let cols = im2col(input);
    // (N, Cout, H, W) -> (Cout, N*H*W)
    let area = h * w;
    let mut d_out_mat = Array2::<f64>::zeros((c_out, n * area));
    {
        let src = d_out.as_slice().unwrap();
        let dst = d_out_mat.as_slice_mut().unwrap();
        for co in 0..c_out {
            for ni in 0..n {
                let s0 = (ni * c_out + co) * area;
                let d0 = (co * n + ni) * area;
                dst[d0..d0 + area].copy_from_slice(&src[s0..s0 + area]);
            }
        }
    }
    let d_w_mat = d_out_mat.dot(&cols.t());
    let d_w = d_w_mat
        .into_shape_with_order((c_out, c_in, 3, 3))
        .unwrap();
    let d_b = d_out_mat.sum_axis(Axis(1));
    let w_mat = weight
        .view()
        .into_shape_with_order((c_out, c_in * 9))
        .unwrap()
        .to_owned();
    let d_cols = w_mat.t().dot(&d_out_mat);
    let d_in = col2im(&d_cols, n, c_in, h, w);
    (d_w, d_b, d_in)
}

fn instance_norm_stats(x: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
    let (n, c, h, w) = x.dim();
    let area = h * w;
    let m = area as f64;
    let mut xhat = Array4::<f64>::zeros((n, c, h, w));
    let mut inv_std = Array2::<f64>::zeros((n, c));
    let src = x.as_slice().unwrap();
    let dst = xhat.as_slice_mut().unwrap();
    for p in 0..n * c {
        let plane = &src[p * area..(p + 1) * area];
        let mean = plane.iter().sum::<f64>() / m;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[[p / c, p % c]] = istd;
        let out = &mut dst[p * area..(p + 1) * area];
        for (o, &v) in out.iter_mut().zip(plane) {
            *o = (v - mean) * istd;
        }
    }
    (xhat, inv_std)
}

fn avg_pool2(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    let src = x.as_slice().unwrap();
    let dst = out.as_slice_mut().unwrap();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dplane = &mut dst[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let r0 = &plane[2 * y * w..2 * y * w + w];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 1) * w + w];
            let d = &mut dplane[y * ow..(y + 1) * ow];
            for xx in 0..ow {
                d[xx] = 0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
            }
        }
    }
    out
}

fn avg_pool2_backward(d_out: &Array4<f64>) -> Array4<f64> {
    let (n, c, oh, ow) = d_out.dim();
    let (h, w) = (oh * 2, ow * 2);
    let mut d_in = Array4::<f64>::zeros((n, c, h, w));
    let src = d_out.as_slice().unwrap();
    let dst = d_in.as_slice_mut().unwrap();
    for p in 0..n * c {
        let splane = &src[p * oh * ow..(p + 1) * oh * ow];
        let dplane = &mut dst[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let s = &splane[y * ow..(y + 1) * ow];
            let (d0, d1) = dplane[2 * y * w..(2 * y + 2) * w].split_at_mut(w);
            for xx in 0..ow {
                let g = s[xx] * 0.25;
                d0[2 * xx] = g;
                d0[2 * xx + 1] = g;
                d1[2 * xx] = g;
                d1[2 * xx + 1] = g;
            }
        }
    }
    d_in
}

/// Class activation map: classifier-weighted sum of the final feature maps.
/// No normalization is applied; the argmax is scale-invariant.
pub fn compute_cam(
    bundle: &FeatureBundle,
    params: &ModelParams,
    class_index: &[usize],
) -> Result<Array3<f64>> {
    let (n, c, fh, fw) = bundle.spatial_map.dim();
    if class_index.len() != n {
        return Err(HliError::ShapeMismatch(format!(
            "{} class indices for batch of {n}",
            class_index.len()
        )));
    }
    let head_w = params
        .get("head.w")
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap();
    for &k in class_index {
        if k >= head_w.dim().0 {
            return Err(HliError::InvalidArgument(format!(
                "class index {k} out of range for {} classes",
                head_w.dim().0
            )));
        }
    }
    let mut heat = Array3::<f64>::zeros((n, fh, fw));
    for ni in 0..n {
        let k = class_index[ni];
        for ci in 0..c {
            let wkc = head_w[[k, ci]];
            let plane = bundle.spatial_map.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            let mut out = heat.index_axis_mut(Axis(0), ni);
            ndarray::Zip::from(&mut out).and(&plane).for_each(|o, &v| {
                *o += wkc * v;
            });
        }
    }
    Ok(heat)
}

/// Argmax location of a heatmap, mapped to image coordinates.
///
/// The argmax feature cell (row r, col c), with ties broken by smallest
/// row-major index, maps coordinate-wise to the pixel center of its stride
/// cell: P_x = c*stride + stride/2, P_y = r*stride + stride/2.
pub fn most_informative_point(
    heatmap: &Array3<f64>,
    image_size: (usize, usize),
) -> Vec<(usize, usize)> {
    let (n, fh, fw) = heatmap.dim();
    let (h, w) = image_size;
    let stride_y = h / fh;
    let stride_x = w / fw;
    let mut points = Vec::with_capacity(n);
    for ni in 0..n {
        let mut best = f64::NEG_INFINITY;
        let mut best_rc = (0usize, 0usize);
        for r in 0..fh {
            for c in 0..fw {
                let v = heatmap[[ni, r, c]];
                if v > best {
                    best = v;
                    best_rc = (r, c);
                }
            }
        }
        let (r, c) = best_rc;
        points.push((c * stride_x + stride_x / 2, r * stride_y + stride_y / 2));
    }
    points
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest plus raw little-endian f64 payload.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    step: usize,
    role: String,
    config_hash: u64,
    tensors: Vec<TensorMeta>,
}

fn config_hash(cfg: &ModelConfig) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    serde_json::to_string(cfg).unwrap().hash(&mut h);
    h.finish()
}

/// Write a checkpoint: `<path>.json` manifest and `<path>.bin` payload.
pub fn save_checkpoint(params: &ModelParams, step: usize, role: &str, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let manifest = CheckpointManifest {
        config: params.config.clone(),
        step,
        role: role.to_string(),
        config_hash: config_hash(&params.config),
        tensors: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(n, t)| TensorMeta {
                name: n.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
            })
            .collect(),
    };
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    let mut payload = Vec::new();
    for t in &params.tensors {
        for &v in t.as_standard_layout().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path.with_extension("bin"), payload)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`], verifying shapes.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, usize, String)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)
            .map_err(|e| HliError::Checkpoint(format!("bad manifest: {e}")))?;
    let payload = std::fs::read(path.with_extension("bin"))?;
    let total: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if payload.len() != total * 8 {
        return Err(HliError::Checkpoint(format!(
            "payload has {} bytes, manifest implies {}",
            payload.len(),
            total * 8
        )));
    }
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut off = 0usize;
    for meta in &manifest.tensors {
        let count: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let b: [u8; 8] = payload[off + i * 8..off + i * 8 + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(b));
        }
        off += count * 8;
        names.push(meta.name.clone());
        tensors.push(
            ArrayD::from_shape_vec(meta.shape.clone(), data)
                .map_err(|e| HliError::Checkpoint(format!("bad tensor shape: {e}")))?,
        );
    }
    Ok((
        ModelParams {
            config: manifest.config,
            names,
            tensors,
        },
        manifest.step,
        manifest.role,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_h: 8,
            input_w: 8,
            in_channels: 2,
            block_channels: vec![3, 4],
            num_classes: 3,
        }
    }

    fn rand_images(cfg: &ModelConfig, n: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, cfg.in_channels, cfg.input_h, cfg.input_w), |_| rng.gen())
    }

    #[test]
    fn zero_input_zero_head_gives_zero_logits() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 0).unwrap();
        params.get_mut("head.w").fill(0.0);
        params.get_mut("head.b").fill(0.0);
        let images = Array4::<f64>::zeros((2, 2, 8, 8));
        let (bundle, _) = forward(&params, &images).unwrap();
        assert!(bundle.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_and_embedding_is_gap_of_spatial_map() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let images = rand_images(&cfg, 5, 2);
        let (bundle, _) = forward(&params, &images).unwrap();
        assert_eq!(bundle.embedding.dim(), (5, 4));
        assert_eq!(bundle.logits.dim(), (5, 3));
        let (_, _, fh, fw) = bundle.spatial_map.dim();
        let area = (fh * fw) as f64;
        for n in 0..5 {
            for c in 0..4 {
                let gap = bundle.spatial_map.index_axis(Axis(0), n).index_axis(Axis(0), c).sum()
                    / area;
                assert!((gap - bundle.embedding[[n, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let images = Array4::<f64>::zeros((2, 3, 8, 8));
        assert!(forward(&params, &images).is_err());
    }

    #[test]
    fn gradient_of_logit_sum_matches_finite_differences() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let images = rand_images(&cfg, 4, 4);
        let loss = |p: &ModelParams| {
            let (bundle, _) = forward(p, &images).unwrap();
            bundle.logits.sum()
        };
        let (bundle, trace) = forward(&params, &images).unwrap();
        let d_logits = Array2::<f64>::ones(bundle.logits.dim());
        let d_emb = Array2::<f64>::zeros(bundle.embedding.dim());
        let grads = backward(&params, &trace, &d_emb, &d_logits);
        check_gradients(&params, &grads, loss, 1e-4);
    }

    #[test]
    fn gradient_of_embedding_norm_matches_finite_differences() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let images = rand_images(&cfg, 4, 6);
        let loss = |p: &ModelParams| {
            let (bundle, _) = forward(p, &images).unwrap();
            bundle.embedding.iter().map(|v| v * v).sum::<f64>()
        };
        let (bundle, trace) = forward(&params, &images).unwrap();
        let d_emb = bundle.embedding.mapv(|v| 2.0 * v);
        let d_logits = Array2::<f64>::zeros(bundle.logits.dim());
        let grads = backward(&params, &trace, &d_emb, &d_logits);
        check_gradients(&params, &grads, loss, 1e-4);
    }

    /// Central-difference gradient check over every parameter element.
    pub(crate) fn check_gradients<F: Fn(&ModelParams) -> f64>(
        params: &ModelParams,
        grads: &[ArrayD<f64>],
        loss: F,
        rel_tol: f64,
    ) {
        let eps = 1e-5;
        let mut p = params.clone();
        for ti in 0..grads.len() {
            let len = p.tensors[ti].len();
            for ei in 0..len {
                let orig = p.tensors[ti].as_slice_mut().unwrap()[ei];
                p.tensors[ti].as_slice_mut().unwrap()[ei] = orig + eps;
                let lp = loss(&p);
                p.tensors[ti].as_slice_mut().unwrap()[ei] = orig - eps;
                let lm = loss(&p);
                p.tensors[ti].as_slice_mut().unwrap()[ei] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads[ti].as_slice().unwrap()[ei];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < rel_tol,
                    "param {} elem {}: analytic {an}, fd {fd}",
                    params.names[ti],
                    ei
                );
            }
        }
    }

    #[test]
    fn cam_matches_triple_loop_reference() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 7).unwrap();
        let images = rand_images(&cfg, 3, 8);
        let (bundle, _) = forward(&params, &images).unwrap();
        let classes = vec![0, 2, 1];
        let heat = compute_cam(&bundle, &params, &classes).unwrap();
        let head_w = params.get("head.w").view().into_dimensionality::<Ix2>().unwrap();
        let (n, c, fh, fw) = bundle.spatial_map.dim();
        for ni in 0..n {
            for r in 0..fh {
                for cc in 0..fw {
                    let mut v = 0.0;
                    for ci in 0..c {
                        v += head_w[[classes[ni], ci]] * bundle.spatial_map[[ni, ci, r, cc]];
                    }
                    assert!((v - heat[[ni, r, cc]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn cam_zero_weights_and_identity_channel() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 9).unwrap();
        let images = rand_images(&cfg, 2, 10);
        params.get_mut("head.w").fill(0.0);
        let (bundle, _) = forward(&params, &images).unwrap();
        let heat = compute_cam(&bundle, &params, &[0, 0]).unwrap();
        assert!(heat.iter().all(|&v| v == 0.0));

        // Unit weight on a single channel reproduces that channel.
        params.get_mut("head.w").fill(0.0);
        params.get_mut("head.w")[[1, 2]] = 1.0;
        let (bundle, _) = forward(&params, &images).unwrap();
        let heat = compute_cam(&bundle, &params, &[1, 1]).unwrap();
        for ni in 0..2 {
            let plane = bundle.spatial_map.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), 2);
            let hp = heat.index_axis(Axis(0), ni);
            for (a, b) in plane.iter().zip(hp.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cam_rejects_out_of_range_class() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 9).unwrap();
        let images = rand_images(&cfg, 1, 1);
        let (bundle, _) = forward(&params, &images).unwrap();
        assert!(compute_cam(&bundle, &params, &[99]).is_err());
    }

    #[test]
    fn cam_is_linear_in_weights() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 11).unwrap();
        let images = rand_images(&cfg, 2, 12);
        let (bundle, _) = forward(&params, &images).unwrap();
        let h1 = compute_cam(&bundle, &params, &[0, 1]).unwrap();
        let w = params.get("head.w").clone();
        *params.get_mut("head.w") = w.mapv(|v| 2.5 * v);
        let h2 = compute_cam(&bundle, &params, &[0, 1]).unwrap();
        for (a, b) in h1.iter().zip(h2.iter()) {
            assert!((2.5 * a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn argmax_point_single_peak_and_tiebreak() {
        // Single max at (row 2, col 3) of a 4x4 map, stride 4.
        let mut heat = Array3::<f64>::zeros((1, 4, 4));
        heat[[0, 2, 3]] = 5.0;
        let pts = most_informative_point(&heat, (16, 16));
        assert_eq!(pts[0], (3 * 4 + 2, 2 * 4 + 2));

        // Constant heatmap: row-major tie-break picks cell (0,0).
        let heat = Array3::<f64>::ones((1, 4, 4));
        let pts = most_informative_point(&heat, (16, 16));
        assert_eq!(pts[0], (2, 2));
    }

    #[test]
    fn argmax_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let heat = Array3::from_shape_fn((1, 4, 2), |_| rng.gen::<f64>());
            let pts = most_informative_point(&heat, (32, 16));
            // Exhaustive scan oracle.
            let mut best = f64::NEG_INFINITY;
            let mut brc = (0, 0);
            for r in 0..4 {
                for c in 0..2 {
                    if heat[[0, r, c]] > best {
                        best = heat[[0, r, c]];
                        brc = (r, c);
                    }
                }
            }
            assert_eq!(pts[0], (brc.1 * 8 + 4, brc.0 * 8 + 4));
        }
    }

    #[test]
    fn argmax_invariant_under_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let heat = Array3::from_shape_fn((3, 4, 4), |_| rng.gen::<f64>() - 0.5);
        let p1 = most_informative_point(&heat, (16, 16));
        let scaled = heat.mapv(|v| v * 7.25);
        let p2 = most_informative_point(&scaled, (16, 16));
        assert_eq!(p1, p2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&params, 17, "student", &path).unwrap();
        let (loaded, step, role) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 17);
        assert_eq!(role, "student");
        assert!(params.same_schema(&loaded));
        for (a, b) in params.tensors.iter().zip(loaded.tensors.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn reset_head_changes_only_the_head() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 15).unwrap();
        let conv_before = params.get("block0.conv.w").clone();
        params.reset_head(7, 1);
        assert_eq!(params.get("head.w").shape(), &[7, 4]);
        assert_eq!(params.get("head.b").shape(), &[7]);
        assert_eq!(params.get("block0.conv.w"), &conv_before);
        assert_eq!(params.config.num_classes, 7);
    }
}
