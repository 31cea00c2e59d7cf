use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::VideoSample;
use crate::error::{Error, Result};
use crate::model::loss::{overall_loss, FrameTargets, LossBreakdown, LossConfig};
use crate::model::network::{Model, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_steps: Vec<usize>,
    pub lr_decay: f64,
    /// Gradient-norm cap, applied separately to the track head and to the
    /// rest of the network; 0 disables clipping.
    pub grad_clip: f64,
    /// Reference frames are drawn within this many frames of the key frame.
    pub ref_radius: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 12,
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_steps: vec![8, 11],
            lr_decay: 0.1,
            grad_clip: 10.0,
            ref_radius: 3,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0 && self.lr_decay > 0.0) {
            return Err(Error::Config("weight_decay, grad_clip must be nonnegative and lr_decay positive".into()));
        }
        if self.ref_radius == 0 {
            return Err(Error::Config("ref_radius must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

/// Hand-written first-order optimizers over a fixed, name-ordered variable list.
struct Optimizer {
    kind: OptimizerKind,
    vars: Vec<Var>,
    /// Clip group of each variable; the track head is clipped on its own.
    groups: Vec<usize>,
    state: Vec<Option<(Tensor, Tensor)>>,
    step: i32,
    momentum: f64,
    weight_decay: f64,
    grad_clip: f64,
}

impl Optimizer {
    fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let data = model.varmap.data().lock().expect("varmap lock");
        let mut named: Vec<(&String, &Var)> = data.iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        let groups = named.iter().map(|(name, _)| usize::from(name.starts_with("track_head."))).collect();
        let vars: Vec<Var> = named.into_iter().map(|(_, v)| v.clone()).collect();
        let n = vars.len();
        Self {
            kind: cfg.optimizer,
            vars,
            groups,
            state: vec![None; n],
            step: 0,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
        }
    }

    /// Applies one update and returns the global gradient norm.
    fn step(&mut self, grads: &GradStore, lr: f64) -> Result<f64> {
        let mut sq = [0f64; 2];
        let gs: Vec<Option<Tensor>> = self.vars.iter().map(|v| grads.get(v.as_tensor()).map(Tensor::detach)).collect();
        for (g, &group) in gs.iter().zip(&self.groups) {
            if let Some(g) = g {
                sq[group] += f64::from(g.sqr()?.sum_all()?.to_scalar::<f32>()?);
            }
        }
        let norm = (sq[0] + sq[1]).sqrt();
        if !norm.is_finite() {
            return Ok(norm);
        }
        let scales = sq.map(|s| {
            let n = s.sqrt();
            if self.grad_clip > 0.0 && n > self.grad_clip {
                self.grad_clip / n
            } else {
                1.0
            }
        });
        self.step += 1;
        for (((var, g), state), &group) in self.vars.iter().zip(gs).zip(self.state.iter_mut()).zip(&self.groups) {
            let Some(g) = g else { continue };
            let w = var.as_tensor();
            let mut g = (g * scales[group])?;
            if self.weight_decay > 0.0 {
                g = (g + (w * self.weight_decay)?)?;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let buf = match state.take() {
                        Some((buf, _)) => ((buf * self.momentum)? + &g)?,
                        None => g.clone(),
                    }
                    .detach();
                    var.set(&(w - (&buf * lr)?)?)?;
                    *state = Some((buf, g));
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (0.9, 0.999);
                    let (m, v) = match state.take() {
                        Some((m, v)) => (((m * b1)? + (&g * (1.0 - b1))?)?, ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?),
                        None => ((&g * (1.0 - b1))?, (g.sqr()? * (1.0 - b2))?),
                    };
                    let mh = (&m / (1.0 - b1.powi(self.step)))?;
                    let vh = (&v / (1.0 - b2.powi(self.step)))?;
                    let update = (mh / (vh.sqrt()? + 1e-8)?)?;
                    var.set(&(w - (update * lr)?)?)?;
                    *state = Some((m.detach(), v.detach()));
                }
            }
        }
        Ok(norm)
    }
}

/// One (video, key frame, reference frame) training sample.
fn schedule(videos: &[VideoSample], cfg: &TrainConfig, epoch: usize) -> Vec<(usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut keys: Vec<(usize, usize)> = videos
        .iter()
        .enumerate()
        .flat_map(|(v, video)| (0..video.len()).map(move |t| (v, t)))
        .collect();
    keys.shuffle(&mut rng);
    keys.into_iter()
        .map(|(v, t)| {
            let len = videos[v].len();
            let lo = t.saturating_sub(cfg.ref_radius);
            let hi = (t + cfg.ref_radius).min(len - 1);
            let choices: Vec<usize> = (lo..=hi).filter(|&r| r != t).collect();
            let r = choices[rng.random_range(0..choices.len())];
            (v, t, r)
        })
        .collect()
}

/// Trains `model` in place. `on_step` sees every step's losses.
pub fn train(model: &Model, videos: &[VideoSample], cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Config("training needs at least one video".into()));
    }
    if let Some(v) = videos.iter().find(|v| v.len() < 2) {
        return Err(Error::Config(format!("video {} has fewer than two frames", v.video_id)));
    }
    let targets: Vec<Vec<FrameTargets>> = videos
        .iter()
        .map(|v| (0..v.len()).map(|t| FrameTargets::new(v.height(), v.width(), &v.annotations[t])).collect())
        .collect();
    let layout = model.config().kernel_layout();
    let mut opt = Optimizer::new(model, cfg);
    let mut logs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for (v, t, r) in schedule(videos, cfg, epoch) {
            let video = &videos[v];
            let normalizer = model.config().normalizer_for(video.height(), video.width());
            let out = model.forward_frames(&[&video.frames[t], &video.frames[r]])?;
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64);
            let loss = overall_loss(&out, &targets[v][t], &targets[v][r], &cfg.loss, normalizer, &layout, seed)?;
            let losses = loss.breakdown()?;
            if !losses.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    msg: format!("non-finite loss {losses:?} on {} frames {t}/{r}", video.video_id),
                });
            }
            let grads = loss.total.backward()?;
            let norm = opt.step(&grads, lr)?;
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    msg: format!("non-finite gradient norm on {} frames {t}/{r}", video.video_id),
                });
            }
            let log = StepLog { step, epoch, lr, losses };
            on_step(&log);
            logs.push(log);
            step += 1;
        }
    }
    Ok(logs)
}

pub const CHECKPOINT_FORMAT_VERSION: &str = "1";

/// Writes parameters plus the model config to a safetensors file.
pub fn save_checkpoint(model: &Model, path: &Path, train: Option<&TrainConfig>) -> Result<()> {
    let data = model.varmap.data().lock().expect("varmap lock");
    let tensors: Vec<(String, Tensor)> = data.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    let mut meta = HashMap::new();
    meta.insert("format_version".to_string(), CHECKPOINT_FORMAT_VERSION.to_string());
    meta.insert(
        "model_config".to_string(),
        serde_json::to_string(model.config()).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?,
    );
    if let Some(t) = train {
        meta.insert(
            "train_config".to_string(),
            serde_json::to_string(t).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?,
        );
    }
    safetensors::serialize_to_file(tensors, Some(meta), path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    match meta.get("format_version").map(String::as_str) {
        Some(CHECKPOINT_FORMAT_VERSION) => {}
        Some(v) => return Err(Error::format(path.display().to_string(), format!("unsupported checkpoint version {v}"))),
        None => return Err(Error::format(path.display().to_string(), "checkpoint has no format_version")),
    }
    let config: ModelConfig = meta
        .get("model_config")
        .ok_or_else(|| Error::format(path.display().to_string(), "checkpoint has no model_config"))
        .and_then(|s| serde_json::from_str(s).map_err(|e| Error::format(path.display().to_string(), e.to_string())))?;
    let model = Model::new(&config, 0)?;
    let stored = candle_core::safetensors::load_buffer(&bytes, &model.device)?;
    let data = model.varmap.data().lock().expect("varmap lock");
    if stored.len() != data.len() {
        return Err(Error::format(path.display().to_string(), format!("checkpoint has {} tensors, model needs {}", stored.len(), data.len())));
    }
    for (name, var) in data.iter() {
        let t = stored
            .get(name)
            .ok_or_else(|| Error::format(path.display().to_string(), format!("missing tensor {name}")))?;
        if t.shape() != var.shape() {
            return Err(Error::format(path.display().to_string(), format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), var.shape())));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    drop(data);
    Ok(model)
}
