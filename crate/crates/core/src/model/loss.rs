//! Detection, mask, tracking and consistency losses for one key/reference
//! frame pair.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{assign_frame, assign_fused, make_locations, Assignment, LevelAssignment};
use crate::consistency::{consistency_loss_tensor, pair_positives, MaskRefSource};
use crate::datagen::InstanceAnn;
use crate::error::{ensure_shape, Result};
use crate::maskgen::{coords_tensor, mask_head_forward_batch, upsample_bilinear, KernelLayout};
use crate::model::network::HeadOutputs;
use crate::trackloss::{sample_pair_indices, track_loss_tensor};

/// Supervision for one frame.
#[derive(Debug, Clone)]
pub struct FrameTargets {
    pub height: usize,
    pub width: usize,
    pub assignment: Assignment,
    /// Stride-8 single-level assignment for kernels, masks and embeddings.
    pub fused: LevelAssignment,
    pub masks: BTreeMap<i64, Vec<f32>>,
}

impl FrameTargets {
    pub fn new(height: usize, width: usize, anns: &[InstanceAnn]) -> Self {
        let masks = anns
            .iter()
            .filter(|a| a.visible)
            .map(|a| (i64::from(a.instance_id), a.mask.as_slice().iter().map(|&v| f32::from(v)).collect()))
            .collect();
        Self {
            height,
            width,
            assignment: assign_frame(height, width, anns),
            fused: assign_fused(height, width, anns),
            masks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub n_neg: usize,
    /// When false only the key-to-reference direction is used.
    pub bidirectional: bool,
    pub mask_ref_source: MaskRefSource,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Cap on positive kernels used for the mask and consistency terms.
    pub max_mask_samples: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_b: 0.2,
            lambda_c: 10.0,
            n_neg: crate::trackloss::DEFAULT_NUM_NEGATIVES,
            bidirectional: true,
            mask_ref_source: MaskRefSource::KeyFrame,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            max_mask_samples: 64,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if !(self.lambda_b >= 0.0 && self.lambda_c >= 0.0) {
            return Err(Error::Config("lambda_b and lambda_c must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma.is_nan() || self.focal_gamma < 0.0 {
            return Err(Error::Config("focal_alpha must be in [0, 1] and focal_gamma nonnegative".into()));
        }
        if self.max_mask_samples == 0 {
            return Err(Error::Config("max_mask_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar values of the loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub condinst: f64,
    pub bi_track: f64,
    pub consistency: f64,
    pub total: f64,
}

/// `condinst + lambda_b * bi_track + lambda_c * consistency`.
pub fn overall_scalar(condinst: f64, bi_track: f64, consistency: f64, lambda_b: f64, lambda_c: f64) -> f64 {
    condinst + lambda_b * bi_track + lambda_c * consistency
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Elementwise binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok((softplus(logits)? - (logits * targets)?)?)
}

/// Elementwise sigmoid focal loss on logits with 0/1 targets.
pub fn sigmoid_focal_loss(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    let ce = bce_with_logits(logits, targets)?;
    let p = candle_nn::ops::sigmoid(logits)?;
    // 1 - p_t = p + y - 2 p y
    let one_minus_pt = ((&p + targets)? - (&p * targets)?.affine(2.0, 0.0)?)?;
    let modulator = if gamma == 0.0 {
        one_minus_pt.ones_like()?
    } else if gamma == 2.0 {
        one_minus_pt.sqr()?
    } else {
        one_minus_pt.clamp(1e-12, 1.0)?.powf(gamma)?
    };
    // alpha_t = alpha y + (1 - alpha)(1 - y)
    let alpha_t = targets.affine(2.0 * alpha - 1.0, 1.0 - alpha)?;
    Ok(((ce * modulator)? * alpha_t)?)
}

/// `1 - GIoU` for boxes given as `(l, t, r, b)` distances from a shared point;
/// inputs `[N, 4]`, output `[N]`.
pub fn giou_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| t.narrow(1, i, 1).and_then(|c| c.squeeze(1));
    let (pl, pt, pr, pb) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (tl, tt, tr, tb) = (col(target, 0)?, col(target, 1)?, col(target, 2)?, col(target, 3)?);
    let pred_area = ((&pl + &pr)? * (&pt + &pb)?)?;
    let target_area = ((&tl + &tr)? * (&tt + &tb)?)?;
    let w_inter = (pl.minimum(&tl)? + pr.minimum(&tr)?)?;
    let h_inter = (pt.minimum(&tt)? + pb.minimum(&tb)?)?;
    let inter = (w_inter * h_inter)?;
    let union = ((pred_area + target_area)? - &inter)?;
    let w_encl = (pl.maximum(&tl)? + pr.maximum(&tr)?)?;
    let h_encl = (pt.maximum(&tt)? + pb.maximum(&tb)?)?;
    let encl = ((w_encl * h_encl)? + 1e-7)?;
    let iou = (&inter / (&union + 1e-7)?)?;
    let giou = (iou - ((&encl - &union)? / &encl)?)?;
    Ok(giou.affine(-1.0, 1.0)?)
}

/// `1 - 2 sum(p g) / (sum(p^2) + sum(g^2))` per row of `[N, M]` inputs.
pub fn dice_loss(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let inter = (probs * targets)?.sum(D::Minus1)?;
    let denom = ((probs.sqr()?.sum(D::Minus1)? + targets.sqr()?.sum(D::Minus1)?)? + 1e-5)?;
    Ok(((inter * 2.0)? / denom)?.affine(-1.0, 1.0)?)
}

fn index_tensor(idx: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), device)?)
}

/// Columns of a `[1, C, H, W]` map at flat locations: `[N, C]`.
pub fn gather_locations(map: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (b, c, h, w) = map.dims4()?;
    ensure_shape!(b == 1, "gather expects a single frame, got batch {b}");
    ensure_shape!(indices.iter().all(|&i| i < h * w), "location index out of range");
    let flat = map.reshape((c, h * w))?;
    Ok(flat.index_select(&index_tensor(indices, map.device())?, 1)?.t()?.contiguous()?)
}

/// Deterministic subset of at most `cap` items, in ascending order.
fn subsample<T: Copy>(items: &[T], cap: usize, seed: u64) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, items.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

/// Renders mask logits `[N, h, w]` for kernels `thetas` placed at flat
/// stride-8 locations of a frame whose mask feature is `feat` (`[1, C, h, w]`).
pub fn render_at(feat: &Tensor, thetas: &Tensor, locations: &[usize], normalizer: f32, layout: &KernelLayout) -> Result<Tensor> {
    let (_, _, h, w) = feat.dims4()?;
    let grid = make_locations(h, w, 8);
    let centers: Vec<(f32, f32)> = locations.iter().map(|&p| grid.centers[p]).collect();
    let coords = coords_tensor(&centers, &grid, normalizer, feat.device())?.to_dtype(feat.dtype())?;
    mask_head_forward_batch(&feat.squeeze(0)?, &coords, thetas, layout)
}

/// Terms of the single-frame instance segmentation loss.
#[derive(Debug, Clone)]
pub struct CondInstTerms {
    pub classification: Tensor,
    pub box_regression: Tensor,
    pub centerness: Tensor,
    pub mask: Tensor,
}

impl CondInstTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok((((&self.classification + &self.box_regression)? + &self.centerness)? + &self.mask)?)
    }
}

/// Instance segmentation loss of one frame; `out` must hold a single frame.
pub fn condinst_loss(
    out: &HeadOutputs,
    targets: &FrameTargets,
    cfg: &LossConfig,
    normalizer: f32,
    layout: &KernelLayout,
    seed: u64,
) -> Result<CondInstTerms> {
    ensure_shape!(out.batch_size() == 1, "condinst_loss takes one frame");
    ensure_shape!(out.levels.len() == targets.assignment.levels.len(), "level count mismatch");
    let device = out.kernel_map.device();
    let zero = Tensor::zeros((), DType::F32, device)?;
    let num_pos = targets.assignment.num_positives();

    let mut cls_sum = zero.clone();
    let mut pos_pred = Vec::new();
    let mut pos_target = Vec::new();
    let mut pos_ctr_logit = Vec::new();
    let mut pos_ctr_target = Vec::new();
    for (lvl, tgt) in out.levels.iter().zip(&targets.assignment.levels) {
        let (_, c, h, w) = lvl.class_logits.dims4()?;
        ensure_shape!((h, w) == (tgt.height, tgt.width), "level grid {h}x{w} vs targets {}x{}", tgt.height, tgt.width);
        let mut onehot = vec![0f32; c * h * w];
        for (p, &cat) in tgt.class_target.iter().enumerate() {
            if cat > 0 {
                ensure_shape!((cat as usize) <= c, "category {cat} exceeds {c} classes");
                onehot[(cat as usize - 1) * h * w + p] = 1.0;
            }
        }
        let onehot = Tensor::from_vec(onehot, (1, c, h, w), device)?;
        let focal = sigmoid_focal_loss(&lvl.class_logits, &onehot, cfg.focal_alpha, cfg.focal_gamma)?;
        cls_sum = (cls_sum + focal.sum_all()?)?;

        let pos = tgt.positives();
        if pos.is_empty() {
            continue;
        }
        pos_pred.push(gather_locations(&lvl.box_reg, &pos)?);
        let flat: Vec<f32> = pos.iter().flat_map(|&p| tgt.box_target[p]).collect();
        pos_target.push(Tensor::from_vec(flat, (pos.len(), 4), device)?);
        pos_ctr_logit.push(gather_locations(&lvl.centerness.unsqueeze(1)?, &pos)?.squeeze(1)?);
        let ctr: Vec<f32> = pos.iter().map(|&p| tgt.centerness_target[p]).collect();
        pos_ctr_target.push(Tensor::from_vec(ctr, pos.len(), device)?);
    }
    let classification = (cls_sum / num_pos.max(1) as f64)?;

    let (box_regression, centerness) = if num_pos == 0 {
        (zero.clone(), zero.clone())
    } else {
        let pred = Tensor::cat(&pos_pred, 0)?;
        let target = Tensor::cat(&pos_target, 0)?;
        let ctr_t = Tensor::cat(&pos_ctr_target, 0)?;
        let ctr_l = Tensor::cat(&pos_ctr_logit, 0)?;
        let weight_sum = ctr_t.sum_all()?.to_scalar::<f32>()?.max(1e-6);
        let giou = (giou_loss(&pred, &target)? * &ctr_t)?.sum_all()?;
        (
            (giou / f64::from(weight_sum))?,
            bce_with_logits(&ctr_l, &ctr_t)?.mean_all()?,
        )
    };

    let positives = subsample(&targets.fused.positives(), cfg.max_mask_samples, seed);
    let mask = if positives.is_empty() {
        zero
    } else {
        let thetas = gather_locations(&out.kernel_map, &positives)?;
        let logits = render_at(&out.mask_feature, &thetas, &positives, normalizer, layout)?;
        let (hh, ww) = (targets.height, targets.width);
        let probs = candle_nn::ops::sigmoid(&upsample_bilinear(&logits, hh, ww)?)?;
        let mut gt = Vec::with_capacity(positives.len() * hh * ww);
        for &p in &positives {
            let id = targets.fused.instance_id[p];
            let m = targets.masks.get(&id).expect("positive instances have masks");
            gt.extend_from_slice(m);
        }
        let gt = Tensor::from_vec(gt, (positives.len(), hh * ww), device)?;
        dice_loss(&probs.reshape((positives.len(), hh * ww))?, &gt)?.mean_all()?
    };

    Ok(CondInstTerms {
        classification,
        box_regression,
        centerness,
        mask,
    })
}

/// Embedding map of frame `b` as `[D, H*W]`.
fn embeddings_of(out: &HeadOutputs, b: usize) -> Result<Tensor> {
    let (_, d, h, w) = out.embedding_map.dims4()?;
    Ok(out.embedding_map.narrow(0, b, 1)?.reshape((d, h * w))?)
}

/// Contrastive tracking loss between frames 0 (key) and 1 (reference) of `out`.
pub fn bi_track_loss_pair(out: &HeadOutputs, key: &FrameTargets, reference: &FrameTargets, cfg: &LossConfig, seed: u64) -> Result<Tensor> {
    let ek = embeddings_of(out, 0)?;
    let er = embeddings_of(out, 1)?;
    let forward_pairs = sample_pair_indices(&key.fused, &reference.fused, cfg.n_neg, seed)?;
    let forward = track_loss_tensor(&ek, &er, &forward_pairs)?;
    if !cfg.bidirectional {
        return Ok(forward);
    }
    let backward_pairs = sample_pair_indices(&reference.fused, &key.fused, cfg.n_neg, seed ^ 0x9e37_79b9)?;
    let backward = track_loss_tensor(&er, &ek, &backward_pairs)?;
    Ok(((forward + backward)? * 0.5)?)
}

/// Kernel and mask consistency between frames 0 (key) and 1 (reference).
pub fn consistency_pair(
    out: &HeadOutputs,
    key: &FrameTargets,
    reference: &FrameTargets,
    cfg: &LossConfig,
    normalizer: f32,
    layout: &KernelLayout,
    seed: u64,
) -> Result<Tensor> {
    let pairs = pair_positives(&key.fused, &reference.fused)?;
    let pairs = subsample(&pairs, cfg.max_mask_samples, seed);
    if pairs.is_empty() {
        return Ok(Tensor::zeros((), DType::F32, out.kernel_map.device())?);
    }
    let key_idx: Vec<usize> = pairs.iter().map(|p| p.key_index).collect();
    let ref_idx: Vec<usize> = pairs.iter().map(|p| p.ref_index).collect();
    let key_out = out.select(0)?;
    let ref_out = out.select(1)?;
    let theta_key = gather_locations(&key_out.kernel_map, &key_idx)?;
    let theta_ref = gather_locations(&ref_out.kernel_map, &ref_idx)?;
    let mask_key = render_at(&key_out.mask_feature, &theta_key, &key_idx, normalizer, layout)?;
    let mask_ref = match cfg.mask_ref_source {
        MaskRefSource::KeyFrame => render_at(&key_out.mask_feature, &theta_ref, &key_idx, normalizer, layout)?,
        MaskRefSource::RefFrame => render_at(&ref_out.mask_feature, &theta_ref, &ref_idx, normalizer, layout)?,
    };
    consistency_loss_tensor(&theta_key, &theta_ref, &mask_key, &mask_ref)
}

/// Differentiable total and the values of each term.
pub struct PairLoss {
    pub total: Tensor,
    pub condinst: Tensor,
    pub bi_track: Tensor,
    pub consistency: Tensor,
}

impl PairLoss {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let s = |t: &Tensor| -> Result<f64> { Ok(f64::from(t.to_dtype(DType::F32)?.to_scalar::<f32>()?)) };
        Ok(LossBreakdown {
            condinst: s(&self.condinst)?,
            bi_track: s(&self.bi_track)?,
            consistency: s(&self.consistency)?,
            total: s(&self.total)?,
        })
    }
}

/// Overall objective on a two-frame batch (key first). The instance
/// segmentation term is averaged over both frames.
pub fn overall_loss(
    out: &HeadOutputs,
    key: &FrameTargets,
    reference: &FrameTargets,
    cfg: &LossConfig,
    normalizer: f32,
    layout: &KernelLayout,
    seed: u64,
) -> Result<PairLoss> {
    ensure_shape!(out.batch_size() == 2, "overall_loss takes a key/reference batch of two");
    let ck = condinst_loss(&out.select(0)?, key, cfg, normalizer, layout, seed)?.total()?;
    let cr = condinst_loss(&out.select(1)?, reference, cfg, normalizer, layout, seed.wrapping_add(1))?.total()?;
    let condinst = ((ck + cr)? * 0.5)?;
    let zero = || Tensor::zeros((), DType::F32, out.kernel_map.device());
    let bi_track = if cfg.lambda_b > 0.0 {
        bi_track_loss_pair(out, key, reference, cfg, seed.wrapping_add(2))?
    } else {
        zero()?
    };
    let consistency = if cfg.lambda_c > 0.0 {
        consistency_pair(out, key, reference, cfg, normalizer, layout, seed.wrapping_add(3))?
    } else {
        zero()?
    };
    let total = ((&condinst + (&bi_track * cfg.lambda_b)?)? + (&consistency * cfg.lambda_c)?)?;
    Ok(PairLoss {
        total,
        condinst,
        bi_track,
        consistency,
    })
}
