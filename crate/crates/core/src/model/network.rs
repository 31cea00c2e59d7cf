//! Desk-scale backbone, feature pyramid and prediction heads.

use std::sync::Mutex;

use candle_core::{DType, Device, Module, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Conv2d, Conv2dConfig, Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assign::DEFAULT_STRIDES;
use crate::datagen::{Frame, NUM_CATEGORIES};
use crate::error::{ensure_shape, Error, Result};
use crate::maskgen::{FusionBranch, KernelLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub stem_channels: usize,
    pub backbone_channels: [usize; 4],
    pub fpn_channels: usize,
    pub head_channels: usize,
    pub mask_channels: usize,
    pub embed_dim: usize,
    /// Relative coordinates are divided by this many pixels; `None` uses the
    /// input image diagonal.
    pub coord_normalizer: Option<f32>,
    /// Stops tracking-loss gradients at the pyramid features so only the
    /// track head learns from them.
    pub detach_track_features: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: NUM_CATEGORIES,
            stem_channels: 16,
            backbone_channels: [16, 32, 64, 64],
            fpn_channels: 32,
            head_channels: 32,
            mask_channels: 8,
            embed_dim: 256,
            coord_normalizer: Some(32.0),
            detach_track_features: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("stem_channels", self.stem_channels),
            ("fpn_channels", self.fpn_channels),
            ("head_channels", self.head_channels),
            ("mask_channels", self.mask_channels),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.backbone_channels.contains(&0) {
            return Err(Error::Config("model.backbone_channels must be positive".into()));
        }
        if self.coord_normalizer.is_some_and(|n| !(n > 0.0 && n.is_finite())) {
            return Err(Error::Config("model.coord_normalizer must be positive".into()));
        }
        Ok(())
    }

    pub fn normalizer_for(&self, height: usize, width: usize) -> f32 {
        self.coord_normalizer.unwrap_or_else(|| crate::assign::image_diagonal(height, width))
    }

    pub fn kernel_layout(&self) -> KernelLayout {
        KernelLayout::with_mask_channels(self.mask_channels)
    }
}

/// Outputs of one pyramid level, batch-first.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub stride: u32,
    /// `[B, C, h, w]`
    pub class_logits: Tensor,
    /// `[B, 4, h, w]`, `(l, t, r, b)` in pixels, positive.
    pub box_reg: Tensor,
    /// `[B, h, w]` logits.
    pub centerness: Tensor,
}

/// Raw network outputs for a batch of frames. The fused maps share the
/// stride-8 grid.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub levels: Vec<LevelOutput>,
    /// `[B, P, H/8, W/8]`
    pub kernel_map: Tensor,
    /// `[B, D, H/8, W/8]`
    pub embedding_map: Tensor,
    /// `[B, C_mask, H/8, W/8]`
    pub mask_feature: Tensor,
    pub image_size: (usize, usize),
}

impl HeadOutputs {
    pub fn batch_size(&self) -> usize {
        self.kernel_map.dims()[0]
    }

    /// Outputs of frame `b` alone, keeping a batch dimension of one.
    pub fn select(&self, b: usize) -> Result<HeadOutputs> {
        let pick = |t: &Tensor| t.narrow(0, b, 1);
        Ok(HeadOutputs {
            levels: self
                .levels
                .iter()
                .map(|l| {
                    Ok(LevelOutput {
                        stride: l.stride,
                        class_logits: pick(&l.class_logits)?,
                        box_reg: pick(&l.box_reg)?,
                        centerness: pick(&l.centerness)?,
                    })
                })
                .collect::<Result<_>>()?,
            kernel_map: pick(&self.kernel_map)?,
            embedding_map: pick(&self.embedding_map)?,
            mask_feature: pick(&self.mask_feature)?,
            image_size: self.image_size,
        })
    }
}

fn conv3(in_c: usize, out_c: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(in_c, out_c, 3, cfg, vb)?)
}

fn conv1(in_c: usize, out_c: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(candle_nn::conv2d(in_c, out_c, 1, Conv2dConfig::default(), vb)?)
}

/// Conv layer with normal(0, std) weights and constant bias, as used for
/// prediction layers.
fn conv3_init(in_c: usize, out_c: usize, std: f64, bias: f64, vb: VarBuilder) -> Result<Conv2d> {
    let w = vb.get_with_hints((out_c, in_c, 3, 3), "weight", Init::Randn { mean: 0.0, stdev: std })?;
    let b = vb.get_with_hints(out_c, "bias", Init::Const(bias))?;
    let cfg = Conv2dConfig {
        padding: 1,
        ..Default::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

struct Stage {
    down: Conv2d,
    body: Conv2d,
}

impl Stage {
    fn new(in_c: usize, out_c: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            down: conv3(in_c, out_c, 2, vb.pp("down"))?,
            body: conv3(out_c, out_c, 1, vb.pp("body"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.down.forward(x)?.relu()?;
        Ok(self.body.forward(&x)?.relu()?)
    }
}

struct Tower(Vec<Conv2d>);

impl Tower {
    fn new(in_c: usize, out_c: usize, depth: usize, vb: VarBuilder) -> Result<Self> {
        (0..depth)
            .map(|i| conv3(if i == 0 { in_c } else { out_c }, out_c, 1, vb.pp(i.to_string())))
            .collect::<Result<_>>()
            .map(Tower)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for c in &self.0 {
            x = c.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

/// The full network. Parameters live in the `VarMap` it was built from.
pub struct Network {
    config: ModelConfig,
    stem: Conv2d,
    stages: Vec<Stage>,
    lateral: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    cls_tower: Tower,
    box_tower: Tower,
    cls_out: Conv2d,
    box_out: Conv2d,
    ctr_out: Conv2d,
    kernel_fusion: FusionBranch,
    kernel_tower: Tower,
    kernel_out: Conv2d,
    mask_fusion: FusionBranch,
    mask_tower: Tower,
    mask_out: Conv2d,
    track_fusion: FusionBranch,
    track_tower: Tower,
    track_out: Conv2d,
}

impl Network {
    pub fn new(config: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let [c2, c3, c4, c5] = config.backbone_channels;
        let f = config.fpn_channels;
        let h = config.head_channels;
        let prior = 0.01f64;
        let layout = config.kernel_layout();

        let bb = vb.pp("backbone");
        let stem = conv3(3, config.stem_channels, 2, bb.pp("stem"))?;
        let mut stages = Vec::new();
        let mut in_c = config.stem_channels;
        for (i, &c) in [c2, c3, c4, c5].iter().enumerate() {
            stages.push(Stage::new(in_c, c, bb.pp(format!("stage{}", i + 2)))?);
            in_c = c;
        }
        let fpn = vb.pp("fpn");
        let lateral = [c3, c4, c5]
            .iter()
            .enumerate()
            .map(|(i, &c)| conv1(c, f, fpn.pp(format!("lateral{}", i + 3))))
            .collect::<Result<_>>()?;
        let smooth = (3..6).map(|i| conv3(f, f, 1, fpn.pp(format!("out{i}")))).collect::<Result<_>>()?;

        let heads = vb.pp("heads");
        let kg = vb.pp("kernel_generator");
        let mb = vb.pp("mask_branch");
        let th = vb.pp("track_head");
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            lateral,
            smooth,
            cls_tower: Tower::new(f, h, 1, heads.pp("cls_tower"))?,
            box_tower: Tower::new(f, h, 1, heads.pp("box_tower"))?,
            cls_out: conv3_init(h, config.num_classes, 0.01, -((1.0 - prior) / prior).ln(), heads.pp("cls_out"))?,
            box_out: conv3_init(h, 4, 0.01, 0.0, heads.pp("box_out"))?,
            ctr_out: conv3_init(h, 1, 0.01, 0.0, heads.pp("ctr_out"))?,
            kernel_fusion: FusionBranch::new(f, h, kg.pp("fusion"))?,
            kernel_tower: Tower::new(h, h, 2, kg.pp("tower"))?,
            kernel_out: conv3_init(h, layout.param_count(), 0.001, 0.0, kg.pp("out"))?,
            mask_fusion: FusionBranch::new(f, h, mb.pp("fusion"))?,
            mask_tower: Tower::new(h, h, 1, mb.pp("tower"))?,
            mask_out: conv1(h, config.mask_channels, mb.pp("out"))?,
            track_fusion: FusionBranch::new(f, h, th.pp("fusion"))?,
            track_tower: Tower::new(h, h, 1, th.pp("tower"))?,
            track_out: conv3_init(h, config.embed_dim, 0.001, 0.0, th.pp("out"))?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `images` is `[B, 3, H, W]` with values in `[0, 1]`.
    pub fn forward(&self, images: &Tensor) -> Result<HeadOutputs> {
        let (_, c, height, width) = images.dims4()?;
        ensure_shape!(c == 3, "expected 3 input channels, got {c}");
        ensure_shape!(
            height % 32 == 0 && width % 32 == 0 && height > 0 && width > 0,
            "input {height}x{width} is not divisible by 32"
        );
        let mut x = ((images - 0.5)? * 4.0)?;
        x = self.stem.forward(&x)?.relu()?;
        let mut feats = Vec::new();
        for s in &self.stages {
            x = s.forward(&x)?;
            feats.push(x.clone());
        }
        // strides 8, 16, 32
        let c = &feats[1..];
        let l5 = self.lateral[2].forward(&c[2])?;
        let l4 = (self.lateral[1].forward(&c[1])? + upsample_nearest2(&l5)?)?;
        let l3 = (self.lateral[0].forward(&c[0])? + upsample_nearest2(&l4)?)?;
        let p = [
            self.smooth[0].forward(&l3)?,
            self.smooth[1].forward(&l4)?,
            self.smooth[2].forward(&l5)?,
        ];

        let levels = p
            .iter()
            .zip(DEFAULT_STRIDES)
            .map(|(feat, stride)| {
                let ct = self.cls_tower.forward(feat)?;
                let bt = self.box_tower.forward(feat)?;
                let raw = self.box_out.forward(&bt)?.clamp(-10.0, 10.0)?;
                Ok(LevelOutput {
                    stride,
                    class_logits: self.cls_out.forward(&ct)?,
                    box_reg: (raw.exp()? * f64::from(stride))?,
                    centerness: self.ctr_out.forward(&bt)?.squeeze(1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let kernel = self.kernel_fusion.forward(&p[0], &p[1], &p[2])?;
        let kernel_map = self.kernel_out.forward(&self.kernel_tower.forward(&kernel)?)?;
        let mask = self.mask_fusion.forward(&p[0], &p[1], &p[2])?;
        let mask_feature = self.mask_out.forward(&self.mask_tower.forward(&mask)?)?;
        let track = if self.config.detach_track_features {
            self.track_fusion.forward(&p[0].detach(), &p[1].detach(), &p[2].detach())?
        } else {
            self.track_fusion.forward(&p[0], &p[1], &p[2])?
        };
        let embedding_map = self.track_out.forward(&self.track_tower.forward(&track)?)?;
        Ok(HeadOutputs {
            levels,
            kernel_map,
            embedding_map,
            mask_feature,
            image_size: (height, width),
        })
    }
}

fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}

/// Stacks frames into a `[B, 3, H, W]` tensor.
pub fn frames_to_tensor(frames: &[&Frame], device: &Device) -> Result<Tensor> {
    ensure_shape!(!frames.is_empty(), "no frames to stack");
    let (h, w) = (frames[0].height, frames[0].width);
    ensure_shape!(
        frames.iter().all(|f| (f.height, f.width) == (h, w)),
        "frames in a batch must share one size"
    );
    let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        data.extend_from_slice(&f.data);
    }
    Ok(Tensor::from_vec(data, (frames.len(), 3, h, w), device)?)
}

/// Variable store that draws initial values from a seeded generator, so
/// model construction is reproducible on devices without a seedable RNG.
struct SeededVarMap {
    varmap: VarMap,
    rng: Mutex<ChaCha8Rng>,
}

impl SeededVarMap {
    fn sample(&self, shape: &Shape, init: Init) -> Vec<f32> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("rng lock");
        let normal = |rng: &mut ChaCha8Rng, std: f64| {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| d.sample(rng) as f32).collect()
        };
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| (0..n).map(|_| rng.random_range(lo..up) as f32).collect();
        match init {
            Init::Const(v) => vec![v as f32; n],
            Init::Randn { mean, stdev } => {
                let v: Vec<f32> = normal(&mut rng, stdev);
                v.into_iter().map(|x| x + mean as f32).collect()
            }
            Init::Uniform { lo, up } => uniform(&mut rng, lo, up),
            Init::Kaiming { dist, fan, non_linearity } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(&mut rng, std),
                    NormalOrUniform::Uniform => uniform(&mut rng, -(3f64.sqrt()) * std, 3f64.sqrt() * std),
                }
            }
        }
    }
}

impl SimpleBackend for SeededVarMap {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().expect("varmap lock");
        if let Some(v) = data.get(name) {
            if v.shape() != &s {
                candle_core::bail!("shape mismatch on {name}: {s:?} vs {:?}", v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let t = Tensor::from_vec(self.sample(&s, h), s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        candle_core::bail!("unknown variable {name}")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().expect("varmap lock").contains_key(name)
    }
}

/// A network together with the variables it owns.
pub struct Model {
    pub varmap: VarMap,
    pub network: Network,
    pub device: Device,
}

impl Model {
    /// Fresh parameters drawn from a seeded generator.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let backend = SeededVarMap {
            varmap: varmap.clone(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        };
        let vb = VarBuilder::from_backend(Box::new(backend), DType::F32, device.clone());
        let network = Network::new(config, vb)?;
        let model = Self { varmap, network, device };
        model.init_default_kernel(seed)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }

    /// Sets the kernel generator's output bias to a He-initialized mask head
    /// so every location starts from a non-degenerate dynamic kernel.
    fn init_default_kernel(&self, seed: u64) -> Result<()> {
        let layout = self.config().kernel_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_726e_656c);
        let mut theta = Vec::with_capacity(layout.param_count());
        for (out_dim, in_dim) in layout.layer_shapes() {
            let d = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).expect("finite std");
            theta.extend((0..out_dim * in_dim).map(|_| d.sample(&mut rng) as f32));
            theta.extend(std::iter::repeat_n(0f32, out_dim));
        }
        let data = self.varmap.data().lock().expect("varmap lock");
        let bias = data
            .get("kernel_generator.out.bias")
            .ok_or_else(|| Error::Config("kernel generator bias missing".into()))?;
        bias.set(&Tensor::from_vec(theta, layout.param_count(), &self.device)?)?;
        Ok(())
    }

    pub fn forward_frames(&self, frames: &[&Frame]) -> Result<HeadOutputs> {
        self.network.forward(&frames_to_tensor(frames, &self.device)?)
    }

    pub fn num_parameters(&self) -> usize {
        self.varmap.all_vars().iter().map(|v| v.elem_count()).sum()
    }
}
