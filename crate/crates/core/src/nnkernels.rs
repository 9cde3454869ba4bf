//! Layer kernels with hand-written forward/backward passes and an Adam
//! optimizer. Used by the frame autoencoder and the MLP baseline.
//!
//! Tensors are `[batch, channel, height, width]` for image layers and
//! `[batch, features]` for dense layers. Dense layers flatten whatever they
//! receive.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, gemm};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {layer}: expected {expected}, got {got:?}")]
    ShapeMismatch {
        layer: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("cache does not belong to a {0} layer")]
    CacheMismatch(&'static str),
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.len() > 4 {
            return Err(NnError::ShapeMismatch {
                layer: "tensor",
                expected: format!("{} values", shape.iter().product::<usize>()),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Features per batch item.
    pub fn item_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3x3 { in_channels: usize, out_channels: usize },
    Dense { in_size: usize, out_size: usize },
    Relu,
    ChannelNorm { channels: usize },
    Dropout { p: f64 },
    MaxPool2x2,
    Upsample2x2,
    Sigmoid,
    /// Reinterprets each item as `[c, h, w]`; no parameters.
    Reshape { channels: usize, height: usize, width: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3x3 { .. } => "conv3x3",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::ChannelNorm { .. } => "channel_norm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Upsample2x2 => "upsample2x2",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A layer with its parameters. Conv and dense hold `[weight, bias]`,
/// channel norm holds `[scale, shift]` plus running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running: Option<RunningStats>,
}

/// Whatever a forward pass must remember for its backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    /// GEMM path keeps the unfolded input, the direct path the input itself.
    Conv { cols: Option<Vec<f64>>, input: Option<Tensor>, in_shape: Vec<usize> },
    Dense { input: Tensor },
    Relu { output: Tensor },
    ChannelNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
        shape: Vec<usize>,
        train: bool,
    },
    Dropout { scale: Option<Vec<f64>> },
    MaxPool { argmax: Vec<u32>, in_shape: Vec<usize> },
    Upsample { in_shape: Vec<usize> },
    Sigmoid { output: Tensor },
    Reshape { in_shape: Vec<usize> },
}

fn shape_err(layer: &'static str, expected: impl Into<String>, got: &[usize]) -> NnError {
    NnError::ShapeMismatch {
        layer,
        expected: expected.into(),
        got: got.to_vec(),
    }
}

/// (batch, channels, height, width) of a 4-axis tensor, or a dense tensor
/// viewed as `[b, f, 1, 1]`.
fn bchw(t: &Tensor) -> (usize, usize, usize, usize) {
    match t.shape.len() {
        4 => (t.shape[0], t.shape[1], t.shape[2], t.shape[3]),
        2 => (t.shape[0], t.shape[1], 1, 1),
        _ => (t.batch(), t.item_len(), 1, 1),
    }
}

impl Layer {
    /// Builds a layer with He-style random weights.
    pub fn init(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Result<Layer> {
        let (params, running) = match &spec {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => {
                let fan_in = (in_channels * 9) as f64;
                let w = random_tensor(&[*out_channels, *in_channels, 3, 3], (2.0 / fan_in).sqrt(), rng);
                (vec![w, Tensor::zeros(&[*out_channels])], None)
            }
            LayerSpec::Dense { in_size, out_size } => {
                let w = random_tensor(&[*out_size, *in_size], (2.0 / *in_size as f64).sqrt(), rng);
                (vec![w, Tensor::zeros(&[*out_size])], None)
            }
            LayerSpec::ChannelNorm { channels } => (
                vec![
                    Tensor::new(&[*channels], vec![1.0; *channels])?,
                    Tensor::zeros(&[*channels]),
                ],
                Some(RunningStats {
                    mean: vec![0.0; *channels],
                    var: vec![1.0; *channels],
                }),
            ),
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(NnError::InvalidSpec(format!("dropout p={p} outside [0,1)")));
                }
                (vec![], None)
            }
            _ => (vec![], None),
        };
        Ok(Layer {
            spec,
            params,
            running,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn forward(&self, input: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<(Tensor, Cache)> {
        match &self.spec {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => conv_forward(input, *in_channels, *out_channels, &self.params[0], &self.params[1]),
            LayerSpec::Dense { in_size, out_size } => {
                dense_forward(input, *in_size, *out_size, &self.params[0], &self.params[1])
            }
            LayerSpec::Relu => {
                let mut out = input.clone();
                for v in out.data.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok((out.clone(), Cache::Relu { output: out }))
            }
            LayerSpec::ChannelNorm { channels } => self.norm_forward(input, *channels, mode),
            LayerSpec::Dropout { p } => {
                if mode == Mode::Eval || *p == 0.0 {
                    return Ok((input.clone(), Cache::Dropout { scale: None }));
                }
                let keep = 1.0 / (1.0 - p);
                let scale: Vec<f64> = (0..input.len())
                    .map(|_| if rng.gen::<f64>() < *p { 0.0 } else { keep })
                    .collect();
                let mut out = input.clone();
                for (v, s) in out.data.iter_mut().zip(&scale) {
                    *v *= s;
                }
                Ok((out, Cache::Dropout { scale: Some(scale) }))
            }
            LayerSpec::MaxPool2x2 => maxpool_forward(input),
            LayerSpec::Upsample2x2 => upsample_forward(input),
            LayerSpec::Sigmoid => {
                let mut out = input.clone();
                for v in out.data.iter_mut() {
                    *v = sigmoid(*v);
                }
                Ok((out.clone(), Cache::Sigmoid { output: out }))
            }
            LayerSpec::Reshape {
                channels,
                height,
                width,
            } => {
                let item = channels * height * width;
                if input.item_len() != item {
                    return Err(shape_err("reshape", format!("{item} values per item"), &input.shape));
                }
                let out = Tensor {
                    shape: vec![input.batch(), *channels, *height, *width],
                    data: input.data.clone(),
                };
                Ok((
                    out,
                    Cache::Reshape {
                        in_shape: input.shape.clone(),
                    },
                ))
            }
        }
    }

    /// Returns the input gradient and one gradient per parameter tensor.
    pub fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let name = self.spec.name();
        match (&self.spec, cache) {
            (LayerSpec::Conv3x3 { in_channels, out_channels }, Cache::Conv { cols, input, in_shape }) => {
                match (cols, input) {
                    (Some(cols), _) => {
                        conv_backward(cols, in_shape, *in_channels, *out_channels, &self.params[0], grad_out)
                    }
                    (None, Some(input)) => {
                        conv_backward_direct(input, *in_channels, *out_channels, &self.params[0], grad_out)
                    }
                    _ => Err(NnError::CacheMismatch(name)),
                }
            }
            (LayerSpec::Dense { in_size, out_size }, Cache::Dense { input }) => {
                dense_backward(input, *in_size, *out_size, &self.params[0], grad_out)
            }
            (LayerSpec::Relu, Cache::Relu { output }) => {
                check_same(name, &output.shape, grad_out)?;
                let mut g = grad_out.clone();
                for (gv, o) in g.data.iter_mut().zip(&output.data) {
                    if *o <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok((g, vec![]))
            }
            (LayerSpec::ChannelNorm { .. }, Cache::ChannelNorm { .. }) => self.norm_backward(cache, grad_out),
            (LayerSpec::Dropout { .. }, Cache::Dropout { scale }) => {
                let mut g = grad_out.clone();
                if let Some(scale) = scale {
                    if scale.len() != g.len() {
                        return Err(shape_err(name, format!("{} values", scale.len()), &g.shape));
                    }
                    for (gv, s) in g.data.iter_mut().zip(scale) {
                        *gv *= s;
                    }
                }
                Ok((g, vec![]))
            }
            (LayerSpec::MaxPool2x2, Cache::MaxPool { argmax, in_shape }) => {
                if argmax.len() != grad_out.len() {
                    return Err(shape_err(name, format!("{} values", argmax.len()), &grad_out.shape));
                }
                let mut g = Tensor::zeros(in_shape);
                for (&idx, gv) in argmax.iter().zip(&grad_out.data) {
                    g.data[idx as usize] += gv;
                }
                Ok((g, vec![]))
            }
            (LayerSpec::Upsample2x2, Cache::Upsample { in_shape }) => upsample_backward(in_shape, grad_out),
            (LayerSpec::Sigmoid, Cache::Sigmoid { output }) => {
                check_same(name, &output.shape, grad_out)?;
                let mut g = grad_out.clone();
                for (gv, s) in g.data.iter_mut().zip(&output.data) {
                    *gv *= s * (1.0 - s);
                }
                Ok((g, vec![]))
            }
            (LayerSpec::Reshape { .. }, Cache::Reshape { in_shape }) => {
                if grad_out.len() != in_shape.iter().product::<usize>() {
                    return Err(shape_err(name, format!("{in_shape:?}"), &grad_out.shape));
                }
                Ok((
                    Tensor {
                        shape: in_shape.clone(),
                        data: grad_out.data.clone(),
                    },
                    vec![],
                ))
            }
            _ => Err(NnError::CacheMismatch(name)),
        }
    }

    /// Folds batch statistics from a train-mode forward into the running
    /// estimates used at eval time.
    pub fn update_running(&mut self, cache: &Cache) {
        if let (
            Some(running),
            Cache::ChannelNorm {
                batch_mean,
                batch_var,
                train: true,
                ..
            },
        ) = (self.running.as_mut(), cache)
        {
            for c in 0..running.mean.len() {
                running.mean[c] = (1.0 - NORM_MOMENTUM) * running.mean[c] + NORM_MOMENTUM * batch_mean[c];
                running.var[c] = (1.0 - NORM_MOMENTUM) * running.var[c] + NORM_MOMENTUM * batch_var[c];
            }
        }
    }

    fn norm_forward(&self, input: &Tensor, channels: usize, mode: Mode) -> Result<(Tensor, Cache)> {
        let (b, c, h, w) = bchw(input);
        if c != channels || !(input.shape.len() == 4 || input.shape.len() == 2) {
            return Err(shape_err("channel_norm", format!("{channels} channels"), &input.shape));
        }
        let hw = h * w;
        let count = (b * hw) as f64;
        let (scale, shift) = (&self.params[0].data, &self.params[1].data);
        let train = mode == Mode::Train;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    mean[ci] += input.data[base..base + hw].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    let m = mean[ci];
                    var[ci] += input.data[base..base + hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
        } else {
            let running = self
                .running
                .as_ref()
                .ok_or_else(|| NnError::InvalidSpec("channel_norm without running stats".into()))?;
            mean.copy_from_slice(&running.mean);
            var.copy_from_slice(&running.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; input.len()];
        let mut out = Tensor::zeros(&input.shape);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (m, is, g, sh) = (mean[ci], inv_std[ci], scale[ci], shift[ci]);
                for k in base..base + hw {
                    let xh = (input.data[k] - m) * is;
                    xhat[k] = xh;
                    out.data[k] = g * xh + sh;
                }
            }
        }
        Ok((
            out,
            Cache::ChannelNorm {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                shape: input.shape.clone(),
                train,
            },
        ))
    }

    fn norm_backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let Cache::ChannelNorm {
            xhat,
            inv_std,
            shape,
            train,
            ..
        } = cache
        else {
            return Err(NnError::CacheMismatch("channel_norm"));
        };
        check_same("channel_norm", shape, grad_out)?;
        let (b, c, h, w) = bchw(grad_out);
        let hw = h * w;
        let count = (b * hw) as f64;
        let scale = &self.params[0].data;
        let mut dscale = vec![0.0; c];
        let mut dshift = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for k in base..base + hw {
                    dscale[ci] += grad_out.data[k] * xhat[k];
                    dshift[ci] += grad_out.data[k];
                }
            }
        }
        let mut gin = Tensor::zeros(shape);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let gs = scale[ci] * inv_std[ci];
                if *train {
                    let (ms, mx) = (dshift[ci] / count, dscale[ci] / count);
                    for k in base..base + hw {
                        gin.data[k] = gs * (grad_out.data[k] - ms - xhat[k] * mx);
                    }
                } else {
                    for k in base..base + hw {
                        gin.data[k] = gs * grad_out.data[k];
                    }
                }
            }
        }
        Ok((
            gin,
            vec![Tensor::new(&[c], dscale)?, Tensor::new(&[c], dshift)?],
        ))
    }
}

fn check_same(layer: &'static str, shape: &[usize], t: &Tensor) -> Result<()> {
    if t.shape != shape {
        return Err(shape_err(layer, format!("{shape:?}"), &t.shape));
    }
    Ok(())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn random_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    // Uniform with matching variance: U(-a, a) has var a²/3.
    let a = std * 3f64.sqrt();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-a..a)).collect(),
    }
}

fn im2col(input: &Tensor) -> Vec<f64> {
    let (b, c, h, w) = bchw(input);
    let hw = h * w;
    let ncols = b * hw;
    let mut cols = vec![0.0; c * 9 * ncols];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ncols;
                for bi in 0..b {
                    let src = &input.data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let dst = &mut cols[row + bi * hw..row + (bi + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        // shift by kx-1 with zero padding at the edges
                        match kx {
                            0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                            1 => drow.copy_from_slice(srow),
                            _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], shape: &[usize]) -> Tensor {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let ncols = b * hw;
    let mut out = Tensor::zeros(shape);
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * ncols;
                for bi in 0..b {
                    let src = &cols[row + bi * hw..row + (bi + 1) * hw];
                    let dst = &mut out.data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        let srow = &src[y * w..(y + 1) * w];
                        match kx {
                            0 => drow[..w - 1].iter_mut().zip(&srow[1..]).for_each(|(d, s)| *d += s),
                            1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s),
                            _ => drow[1..].iter_mut().zip(&srow[..w - 1]).for_each(|(d, s)| *d += s),
                        }
                    }
                }
            }
        }
    }
    out
}

/// Channel products at or below this use the direct kernel; wider layers
/// go through im2col + GEMM.
const DIRECT_CONV_MAX_CHANNEL_PRODUCT: usize = 128;

fn conv_forward(
    input: &Tensor,
    in_ch: usize,
    out_ch: usize,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Cache)> {
    if input.shape.len() != 4 || input.shape[1] != in_ch || input.shape[2] < 2 || input.shape[3] < 2 {
        return Err(shape_err("conv3x3", format!("[b, {in_ch}, h>=2, w>=2]"), &input.shape));
    }
    if in_ch * out_ch <= DIRECT_CONV_MAX_CHANNEL_PRODUCT {
        return conv_forward_direct(input, in_ch, out_ch, weight, bias);
    }
    let (b, _, h, w) = bchw(input);
    let hw = h * w;
    let ncols = b * hw;
    let cols = im2col(input);
    // [out_ch, b*hw]
    let mut tmp = vec![0.0; out_ch * ncols];
    gemm(out_ch, in_ch * 9, ncols, &weight.data, false, &cols, false, &mut tmp, 0.0);
    let mut out = Tensor::zeros(&[b, out_ch, h, w]);
    for o in 0..out_ch {
        let bv = bias.data[o];
        for bi in 0..b {
            let src = &tmp[o * ncols + bi * hw..o * ncols + (bi + 1) * hw];
            let dst = &mut out.data[(bi * out_ch + o) * hw..(bi * out_ch + o + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    Ok((
        out,
        Cache::Conv {
            cols: Some(cols),
            input: None,
            in_shape: input.shape.clone(),
        },
    ))
}

fn conv_backward(
    cols: &[f64],
    in_shape: &[usize],
    in_ch: usize,
    out_ch: usize,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (b, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
    if grad_out.shape != [b, out_ch, h, w] {
        return Err(shape_err("conv3x3", format!("[{b}, {out_ch}, {h}, {w}]"), &grad_out.shape));
    }
    let hw = h * w;
    let ncols = b * hw;
    // regroup grad_out to [out_ch, b*hw]
    let mut g = vec![0.0; out_ch * ncols];
    let mut dbias = vec![0.0; out_ch];
    for o in 0..out_ch {
        for bi in 0..b {
            let src = &grad_out.data[(bi * out_ch + o) * hw..(bi * out_ch + o + 1) * hw];
            g[o * ncols + bi * hw..o * ncols + (bi + 1) * hw].copy_from_slice(src);
            dbias[o] += src.iter().sum::<f64>();
        }
    }
    let k = in_ch * 9;
    let mut dweight = vec![0.0; out_ch * k];
    gemm(out_ch, ncols, k, &g, false, cols, true, &mut dweight, 0.0);
    let mut dcols = vec![0.0; k * ncols];
    gemm(k, out_ch, ncols, &weight.data, true, &g, false, &mut dcols, 0.0);
    let gin = col2im(&dcols, in_shape);
    Ok((
        gin,
        vec![
            Tensor::new(&[out_ch, in_ch, 3, 3], dweight)?,
            Tensor::new(&[out_ch], dbias)?,
        ],
    ))
}

/// Rows of the 3×3 stencil that stay inside the image for tap `ky`.
#[inline]
fn tap_rows(ky: usize, h: usize) -> std::ops::Range<usize> {
    match ky {
        0 => 1..h,
        1 => 0..h,
        _ => 0..h - 1,
    }
}

fn conv_forward_direct(
    input: &Tensor,
    in_ch: usize,
    out_ch: usize,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Cache)> {
    let (b, _, h, w) = bchw(input);
    let hw = h * w;
    let mut out = Tensor::zeros(&[b, out_ch, h, w]);
    for bi in 0..b {
        for o in 0..out_ch {
            let plane = &mut out.data[(bi * out_ch + o) * hw..(bi * out_ch + o + 1) * hw];
            plane.iter_mut().for_each(|v| *v = bias.data[o]);
            for c in 0..in_ch {
                let inp = &input.data[(bi * in_ch + c) * hw..(bi * in_ch + c + 1) * hw];
                let wk = &weight.data[(o * in_ch + c) * 9..(o * in_ch + c + 1) * 9];
                for ky in 0..3 {
                    for y in tap_rows(ky, h) {
                        let sy = y + ky - 1;
                        let orow = &mut plane[y * w..(y + 1) * w];
                        let irow = &inp[sy * w..(sy + 1) * w];
                        let (w0, w1, w2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
                        orow[0] += w1 * irow[0] + w2 * irow[1];
                        for x in 1..w - 1 {
                            orow[x] += w0 * irow[x - 1] + w1 * irow[x] + w2 * irow[x + 1];
                        }
                        orow[w - 1] += w0 * irow[w - 2] + w1 * irow[w - 1];
                    }
                }
            }
        }
    }
    Ok((
        out,
        Cache::Conv {
            cols: None,
            input: Some(input.clone()),
            in_shape: input.shape.clone(),
        },
    ))
}

fn conv_backward_direct(
    input: &Tensor,
    in_ch: usize,
    out_ch: usize,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (b, _, h, w) = bchw(input);
    if grad_out.shape != [b, out_ch, h, w] {
        return Err(shape_err("conv3x3", format!("[{b}, {out_ch}, {h}, {w}]"), &grad_out.shape));
    }
    let hw = h * w;
    let mut gin = Tensor::zeros(&input.shape);
    let mut dweight = vec![0.0; out_ch * in_ch * 9];
    let mut dbias = vec![0.0; out_ch];
    for bi in 0..b {
        for o in 0..out_ch {
            let g = &grad_out.data[(bi * out_ch + o) * hw..(bi * out_ch + o + 1) * hw];
            dbias[o] += g.iter().sum::<f64>();
            for c in 0..in_ch {
                let inp = &input.data[(bi * in_ch + c) * hw..(bi * in_ch + c + 1) * hw];
                let gi = &mut gin.data[(bi * in_ch + c) * hw..(bi * in_ch + c + 1) * hw];
                let k0 = (o * in_ch + c) * 9;
                let wk = &weight.data[k0..k0 + 9];
                let dw = &mut dweight[k0..k0 + 9];
                for ky in 0..3 {
                    let (w0, w1, w2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
                    let (mut d0, mut d1, mut d2) = (0.0, 0.0, 0.0);
                    for y in tap_rows(ky, h) {
                        let sy = y + ky - 1;
                        let grow = &g[y * w..(y + 1) * w];
                        let irow = &inp[sy * w..(sy + 1) * w];
                        d0 += dot(&grow[1..], &irow[..w - 1]);
                        d1 += dot(grow, irow);
                        d2 += dot(&grow[..w - 1], &irow[1..]);
                        // transposed stencil: gin[sx] collects g[sx+1]·w0, g[sx]·w1, g[sx-1]·w2
                        let girow = &mut gi[sy * w..(sy + 1) * w];
                        girow[0] += w0 * grow[1] + w1 * grow[0];
                        for x in 1..w - 1 {
                            girow[x] += w0 * grow[x + 1] + w1 * grow[x] + w2 * grow[x - 1];
                        }
                        girow[w - 1] += w1 * grow[w - 1] + w2 * grow[w - 2];
                    }
                    dw[ky * 3] += d0;
                    dw[ky * 3 + 1] += d1;
                    dw[ky * 3 + 2] += d2;
                }
            }
        }
    }
    Ok((
        gin,
        vec![
            Tensor::new(&[out_ch, in_ch, 3, 3], dweight)?,
            Tensor::new(&[out_ch], dbias)?,
        ],
    ))
}

fn dense_forward(
    input: &Tensor,
    in_size: usize,
    out_size: usize,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Cache)> {
    if input.item_len() != in_size || input.shape.is_empty() {
        return Err(shape_err("dense", format!("{in_size} features"), &input.shape));
    }
    let b = input.batch();
    let mut out = Tensor::zeros(&[b, out_size]);
    for bi in 0..b {
        out.data[bi * out_size..(bi + 1) * out_size].copy_from_slice(&bias.data);
    }
    gemm(b, in_size, out_size, &input.data, false, &weight.data, true, &mut out.data, 1.0);
    let flat = Tensor {
        shape: vec![b, in_size],
        data: input.data.clone(),
    };
    let mut cache_input = flat;
    cache_input.shape = input.shape.clone();
    Ok((out, Cache::Dense { input: cache_input }))
}

fn dense_backward(
    input: &Tensor,
    in_size: usize,
    out_size: usize,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let b = input.batch();
    if grad_out.shape != [b, out_size] {
        return Err(shape_err("dense", format!("[{b}, {out_size}]"), &grad_out.shape));
    }
    let mut dweight = vec![0.0; out_size * in_size];
    gemm(out_size, b, in_size, &grad_out.data, true, &input.data, false, &mut dweight, 0.0);
    let mut dbias = vec![0.0; out_size];
    for bi in 0..b {
        for (d, g) in dbias.iter_mut().zip(&grad_out.data[bi * out_size..(bi + 1) * out_size]) {
            *d += g;
        }
    }
    let mut gin = Tensor::zeros(&input.shape);
    gemm(b, out_size, in_size, &grad_out.data, false, &weight.data, false, &mut gin.data, 0.0);
    Ok((
        gin,
        vec![
            Tensor::new(&[out_size, in_size], dweight)?,
            Tensor::new(&[out_size], dbias)?,
        ],
    ))
}

fn maxpool_forward(input: &Tensor) -> Result<(Tensor, Cache)> {
    if input.shape.len() != 4 || !input.shape[2].is_multiple_of(2) || !input.shape[3].is_multiple_of(2) {
        return Err(shape_err("maxpool2x2", "[b, c, even h, even w]", &input.shape));
    }
    let (b, c, h, w) = bchw(input);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0u32; out.len()];
    for plane in 0..b * c {
        let ibase = plane * h * w;
        let obase = plane * oh * ow;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = ibase + 2 * y * w + 2 * x;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input.data[cand] > input.data[best] {
                        best = cand;
                    }
                }
                out.data[obase + y * ow + x] = input.data[best];
                argmax[obase + y * ow + x] = best as u32;
            }
        }
    }
    Ok((
        out,
        Cache::MaxPool {
            argmax,
            in_shape: input.shape.clone(),
        },
    ))
}

fn upsample_forward(input: &Tensor) -> Result<(Tensor, Cache)> {
    if input.shape.len() != 4 {
        return Err(shape_err("upsample2x2", "[b, c, h, w]", &input.shape));
    }
    let (b, c, h, w) = bchw(input);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    for plane in 0..b * c {
        let src = &input.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    Ok((
        out,
        Cache::Upsample {
            in_shape: input.shape.clone(),
        },
    ))
}

fn upsample_backward(in_shape: &[usize], grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    if grad_out.shape != [b, c, oh, ow] {
        return Err(shape_err("upsample2x2", format!("[{b}, {c}, {oh}, {ow}]"), &grad_out.shape));
    }
    let mut gin = Tensor::zeros(in_shape);
    for plane in 0..b * c {
        let src = &grad_out.data[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gin.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    Ok((gin, vec![]))
}

/// A stack of layers applied in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn build(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| Layer::init(s.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sequential { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Eval-mode forward; never touches randomness.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        // Eval mode never draws from the rng; any seed will do.
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x, Mode::Eval, &mut rng)?.0;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, mode, rng)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Backpropagates through every layer. Parameter gradients come back in
    /// the same order as [`Sequential::params_mut`].
    pub fn backward(&self, caches: &[Cache], grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (gin, gp) = layer.backward(cache, &g)?;
            per_layer.push(gp);
            g = gin;
        }
        per_layer.reverse();
        Ok((g, per_layer.into_iter().flatten().collect()))
    }

    pub fn update_running(&mut self, caches: &[Cache]) {
        for (layer, cache) in self.layers.iter_mut().zip(caches) {
            layer.update_running(cache);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: vec![],
            second: vec![],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err("adam", format!("{} gradient tensors", params.len()), &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(shape_err("adam", format!("{:?}", p.shape), &g.shape));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(shape_err("adam", "parameters matching optimizer state", &[params.len()]));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}
