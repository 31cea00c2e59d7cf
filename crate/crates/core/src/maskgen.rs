//! Mask branch fusion, dynamic kernel layout and the dynamic mask head.
//!
//! A dynamic kernel is a flat vector holding the parameters of three 1x1
//! convolutions applied to `concat(mask_feature, relative_coords)`:
//! layer-1 weights, layer-1 biases, layer-2 weights, layer-2 biases,
//! layer-3 weights, layer-3 bias. Weights are row-major `[out x in]`.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Result};
use crate::geometry::Mask;

pub const DEFAULT_MASK_CHANNELS: usize = 8;

/// Layer shapes of the dynamic mask head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelLayout {
    pub mask_channels: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for KernelLayout {
    fn default() -> Self {
        Self::with_mask_channels(DEFAULT_MASK_CHANNELS)
    }
}

impl KernelLayout {
    pub fn with_mask_channels(mask_channels: usize) -> Self {
        Self {
            mask_channels,
            hidden1: 8,
            hidden2: 8,
        }
    }

    /// Mask feature channels plus the two relative-coordinate channels.
    pub fn in_channels(&self) -> usize {
        self.mask_channels + 2
    }

    /// `[(out, in)]` of the three layers.
    pub fn layer_shapes(&self) -> [(usize, usize); 3] {
        [
            (self.hidden1, self.in_channels()),
            (self.hidden2, self.hidden1),
            (1, self.hidden2),
        ]
    }

    pub fn param_count(&self) -> usize {
        (self.mask_channels + 2) * self.hidden1 + self.hidden1 + self.hidden1 * self.hidden2 + self.hidden2 + self.hidden2 + 1
    }
}

/// Flat parameter vector of one instance's mask head.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicKernel(pub Vec<f32>);

impl DynamicKernel {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Row-major `[out_dim x in_dim]`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn split_kernel(theta: &DynamicKernel, layout: &KernelLayout) -> Result<[DenseLayer; 3]> {
    ensure_shape!(
        theta.len() == layout.param_count(),
        "kernel has {} values, layout needs {}",
        theta.len(),
        layout.param_count()
    );
    let mut offset = 0;
    let mut take = |n: usize| {
        let s = theta.0[offset..offset + n].to_vec();
        offset += n;
        s
    };
    let layers = layout.layer_shapes().map(|(out_dim, in_dim)| DenseLayer {
        out_dim,
        in_dim,
        weight: take(out_dim * in_dim),
        bias: take(out_dim),
    });
    Ok(layers)
}

/// Row-interpolation matrix `[out x inp]` for half-pixel bilinear resampling.
fn interp_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[i * inp + i0] += 1.0 - frac;
        m[i * inp + i1] += frac;
    }
    m
}

/// Bilinear resize of the last two dimensions (half-pixel centers, edge clamp).
///
/// Expressed as two matrix products so it is differentiable.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.dims();
    ensure_shape!(dims.len() >= 2, "upsample needs at least 2 dims, got {dims:?}");
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(interp_matrix(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let awt = Tensor::from_vec(interp_matrix(out_w, w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let rows = x.broadcast_matmul(&awt)?;
    Ok(ah.broadcast_matmul(&rows)?)
}

/// Projects P3, P4, P5 to a common channel count, upsamples P4/P5 to P3's
/// resolution and sums. Projections carry no bias, so all-zero levels
/// contribute nothing.
#[derive(Debug, Clone)]
pub struct FusionBranch {
    projections: [Conv2d; 3],
    out_channels: usize,
}

impl FusionBranch {
    pub fn new(in_channels: usize, out_channels: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig::default();
        let proj = |name: &str| candle_nn::conv2d_no_bias(in_channels, out_channels, 1, cfg, vb.pp(name));
        Ok(Self {
            projections: [proj("p3")?, proj("p4")?, proj("p5")?],
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Inputs are `[B, C, H, W]`, `[B, C, H/2, W/2]`, `[B, C, H/4, W/4]`.
    pub fn forward(&self, p3: &Tensor, p4: &Tensor, p5: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = p3.dims4()?;
        ensure_shape!(
            p4.dims() == [b, c, h / 2, w / 2] && p5.dims() == [b, c, h / 4, w / 4] && h % 4 == 0 && w % 4 == 0,
            "pyramid shapes {:?} {:?} {:?} are not 1 : 1/2 : 1/4",
            p3.dims(),
            p4.dims(),
            p5.dims()
        );
        let f3 = self.projections[0].forward(p3)?;
        let f4 = upsample_bilinear(&self.projections[1].forward(p4)?, h, w)?;
        let f5 = upsample_bilinear(&self.projections[2].forward(p5)?, h, w)?;
        Ok(((f3 + f4)? + f5)?)
    }
}

/// Mask-branch fusion producing the `[B, C_mask, H/8, W/8]` mask feature.
pub fn fuse_mask_branch(branch: &FusionBranch, p3: &Tensor, p4: &Tensor, p5: &Tensor) -> Result<Tensor> {
    branch.forward(p3, p4, p5)
}

/// Applies N dynamic mask heads to one mask feature.
///
/// `feat` is `[C, H, W]`, `coords` is `[N, 2, H, W]` (each instance's own
/// relative coordinates), `thetas` is `[N, P]`. Returns logits `[N, H, W]`.
pub fn mask_head_forward_batch(feat: &Tensor, coords: &Tensor, thetas: &Tensor, layout: &KernelLayout) -> Result<Tensor> {
    let (c, h, w) = feat.dims3()?;
    let (n, p) = thetas.dims2()?;
    ensure_shape!(c == layout.mask_channels, "mask feature has {c} channels, layout expects {}", layout.mask_channels);
    ensure_shape!(p == layout.param_count(), "kernels have {p} values, layout needs {}", layout.param_count());
    ensure_shape!(coords.dims() == [n, 2, h, w], "coords {:?} vs expected [{n}, 2, {h}, {w}]", coords.dims());
    if n == 0 {
        return Ok(Tensor::zeros((0, h, w), feat.dtype(), feat.device())?);
    }
    let hw = h * w;
    let feat = feat.reshape((1, c, hw))?.broadcast_as((n, c, hw))?;
    let mut x = Tensor::cat(&[&feat, &coords.reshape((n, 2, hw))?], 1)?;
    let mut offset = 0;
    let shapes = layout.layer_shapes();
    for (i, &(out_dim, in_dim)) in shapes.iter().enumerate() {
        let weight = thetas.narrow(1, offset, out_dim * in_dim)?.reshape((n, out_dim, in_dim))?;
        offset += out_dim * in_dim;
        let bias = thetas.narrow(1, offset, out_dim)?.reshape((n, out_dim, 1))?;
        offset += out_dim;
        x = weight.matmul(&x.contiguous()?)?.broadcast_add(&bias)?;
        if i + 1 < shapes.len() {
            x = x.relu()?;
        }
    }
    Ok(x.reshape((n, h, w))?)
}

/// Single-instance form of [`mask_head_forward_batch`]: `[2, H, W]` coords,
/// returns `[H, W]` logits.
pub fn mask_head_forward(feat: &Tensor, coords: &Tensor, theta: &DynamicKernel, layout: &KernelLayout) -> Result<Tensor> {
    let thetas = Tensor::from_slice(&theta.0, (1, theta.len()), feat.device())?.to_dtype(feat.dtype())?;
    let out = mask_head_forward_batch(feat, &coords.unsqueeze(0)?, &thetas, layout)?;
    Ok(out.squeeze(0)?)
}

/// Bilinear upsample of mask logits followed by a sigmoid.
pub fn upsample_mask(logits: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let dims = logits.dims();
    ensure_shape!(
        dims.len() >= 2 && height >= dims[dims.len() - 2] && width >= dims[dims.len() - 1],
        "cannot upsample {dims:?} to {height}x{width}"
    );
    Ok(candle_nn::ops::sigmoid(&upsample_bilinear(logits, height, width)?)?)
}

/// Thresholds a `[H, W]` probability map at 0.5.
pub fn binarize(probs: &Tensor) -> Result<Mask> {
    let (h, w) = probs.dims2()?;
    let values = probs.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Mask::from_vec(h, w, values.iter().map(|&p| u8::from(p > 0.5)).collect()).expect("h*w values"))
}

/// Relative-coordinate tensor `[N, 2, H, W]` for instances at `centers`.
pub fn coords_tensor(centers: &[(f32, f32)], grid: &crate::assign::LocationGrid, normalizer: f32, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(centers.len() * 2 * grid.len());
    for &c in centers {
        data.extend(crate::assign::relative_coords(c, grid, normalizer));
    }
    Ok(Tensor::from_vec(data, (centers.len(), 2, grid.height, grid.width), device)?)
}

/// Double-precision mask head over a single pixel, with its backward pass.
/// Used for closed-form gradient checks of the consistency loss.
#[derive(Debug, Clone)]
pub struct PixelMaskHead<'a> {
    theta: &'a [f64],
    layout: KernelLayout,
}

impl<'a> PixelMaskHead<'a> {
    pub fn new(theta: &'a [f64], layout: KernelLayout) -> Result<Self> {
        ensure_shape!(theta.len() == layout.param_count(), "kernel has {} values, layout needs {}", theta.len(), layout.param_count());
        Ok(Self { theta, layout })
    }

    fn offsets(&self) -> [(usize, usize, usize, usize); 3] {
        let mut off = 0;
        self.layout.layer_shapes().map(|(o, i)| {
            let w = off;
            let b = off + o * i;
            off = b + o;
            (w, b, o, i)
        })
    }

    /// Returns the logit and the post-activation values of every layer.
    fn forward_trace(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![input.to_vec()];
        let offs = self.offsets();
        for (li, &(w, b, o, i)) in offs.iter().enumerate() {
            let x = acts.last().expect("input present");
            let mut y = vec![0.0; o];
            for (r, yr) in y.iter_mut().enumerate() {
                let mut s = self.theta[b + r];
                for (wc, xc) in self.theta[w + r * i..w + (r + 1) * i].iter().zip(x) {
                    s += wc * xc;
                }
                *yr = if li + 1 < offs.len() { s.max(0.0) } else { s };
            }
            acts.push(y);
        }
        acts
    }

    pub fn forward(&self, input: &[f64]) -> f64 {
        self.forward_trace(input).last().expect("output layer")[0]
    }

    /// Adds `upstream * d(logit)/d(theta)` into `grad`.
    pub fn backward(&self, input: &[f64], upstream: f64, grad: &mut [f64]) {
        let acts = self.forward_trace(input);
        let offs = self.offsets();
        let mut delta = vec![upstream];
        for li in (0..offs.len()).rev() {
            let (w, b, o, i) = offs[li];
            let x = &acts[li];
            let mut next = vec![0.0; i];
            for r in 0..o {
                grad[b + r] += delta[r];
                for c in 0..i {
                    grad[w + r * i + c] += delta[r] * x[c];
                    next[c] += delta[r] * self.theta[w + r * i + c];
                }
            }
            if li > 0 {
                // ReLU gate of the previous layer's output
                for (d, &a) in next.iter_mut().zip(x) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = next;
        }
    }
}
