use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::geometry::{BBox, Mask};
use crate::maskgen::{binarize, upsample_mask, DynamicKernel, KernelLayout};
use crate::model::loss::{gather_locations, render_at};
use crate::model::HeadOutputs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub top_t: usize,
    /// Candidates kept per level before NMS.
    pub pre_nms: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            score_thresh: 0.03,
            nms_thresh: 0.5,
            top_t: 10,
            pre_nms: 1000,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.score_thresh) || !open(self.nms_thresh) {
            return Err(Error::Config("score_thresh and nms_thresh must be in (0, 1)".into()));
        }
        if self.top_t == 0 || self.pre_nms == 0 {
            return Err(Error::Config("top_t and pre_nms must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
    pub category: u32,
    pub kernel: DynamicKernel,
    pub embedding: Vec<f32>,
    pub mask: Mask,
    /// Flat index on the stride-8 grid the kernel and embedding came from.
    pub location: usize,
}

pub fn box_iou(a: &BBox, b: &BBox) -> f32 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A scored, classed box awaiting suppression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    pub score: f32,
    pub category: u32,
    pub center: (f32, f32),
}

/// Per-class greedy NMS. Returns indices of survivors in descending score
/// order (ties keep input order).
pub fn nms(candidates: &[Candidate], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let c = &candidates[i];
        let suppressed = keep
            .iter()
            .any(|&k| candidates[k].category == c.category && f64::from(box_iou(&candidates[k].bbox, &c.bbox)) > iou_thresh);
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Scored candidates of every level for a single frame.
pub fn collect_candidates(out: &HeadOutputs, params: &DecodeParams) -> Result<Vec<Candidate>> {
    ensure_shape!(out.batch_size() == 1, "decode takes one frame");
    let (img_h, img_w) = out.image_size;
    let mut all = Vec::new();
    for lvl in &out.levels {
        let (_, c, h, w) = lvl.class_logits.dims4()?;
        let cls = lvl.class_logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let ctr = lvl.centerness.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let reg = lvl.box_reg.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let grid = crate::assign::make_locations(h, w, lvl.stride);
        let hw = h * w;
        let mut level = Vec::new();
        for p in 0..hw {
            let centerness = sigmoid(ctr[p]);
            let (x, y) = grid.centers[p];
            for k in 0..c {
                let prob = sigmoid(cls[k * hw + p]);
                if f64::from(prob) <= params.score_thresh {
                    continue;
                }
                let score = (prob * centerness).sqrt();
                if f64::from(score) <= params.score_thresh {
                    continue;
                }
                let [l, t, r, b] = [reg[p], reg[hw + p], reg[2 * hw + p], reg[3 * hw + p]];
                let bbox = BBox::new(
                    (x - l).max(0.0),
                    (y - t).max(0.0),
                    (x + r).min(img_w as f32),
                    (y + b).min(img_h as f32),
                );
                if !bbox.is_valid() {
                    continue;
                }
                level.push(Candidate {
                    bbox,
                    score,
                    category: k as u32 + 1,
                    center: (x, y),
                });
            }
        }
        level.sort_by(|a, b| b.score.total_cmp(&a.score));
        level.truncate(params.pre_nms);
        all.extend(level);
    }
    Ok(all)
}

/// Per-frame decoding: score, suppress, keep the best `top_t`, then gather
/// each survivor's kernel and embedding and render its mask.
pub fn decode_detections(out: &HeadOutputs, layout: &KernelLayout, normalizer: f32, params: &DecodeParams) -> Result<Vec<Detection>> {
    params.validate()?;
    let candidates = collect_candidates(out, params)?;
    let mut keep = nms(&candidates, params.nms_thresh);
    keep.truncate(params.top_t);
    if keep.is_empty() {
        return Ok(Vec::new());
    }
    let (_, _, fh, fw) = out.kernel_map.dims4()?;
    let locations: Vec<usize> = keep
        .iter()
        .map(|&i| {
            let (x, y) = candidates[i].center;
            let gx = ((x / 8.0) as usize).min(fw - 1);
            let gy = ((y / 8.0) as usize).min(fh - 1);
            gy * fw + gx
        })
        .collect();
    let thetas = gather_locations(&out.kernel_map, &locations)?;
    let embeddings = gather_locations(&out.embedding_map, &locations)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let logits = render_at(&out.mask_feature, &thetas, &locations, normalizer, layout)?;
    let (img_h, img_w) = out.image_size;
    let probs = upsample_mask(&logits, img_h, img_w)?;
    let kernels = thetas.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    keep.iter()
        .enumerate()
        .map(|(j, &i)| {
            let c = &candidates[i];
            Ok(Detection {
                bbox: c.bbox,
                score: c.score,
                category: c.category,
                kernel: DynamicKernel(kernels[j].clone()),
                embedding: embeddings[j].clone(),
                mask: binarize(&probs.get(j)?)?,
                location: locations[j],
            })
        })
        .collect()
}

/// Renders masks for arbitrary kernels at stride-8 locations; used by tests
/// that bypass the detector.
pub fn render_masks(mask_feature: &Tensor, kernels: &Tensor, locations: &[usize], normalizer: f32, layout: &KernelLayout, size: (usize, usize)) -> Result<Vec<Mask>> {
    let logits = render_at(mask_feature, kernels, locations, normalizer, layout)?;
    let probs = upsample_mask(&logits, size.0, size.1)?;
    (0..locations.len()).map(|j| binarize(&probs.get(j)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((box_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-7);
    }

    #[test]
    fn identical_boxes_collapse() {
        let c = Candidate {
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0),
            score: 0.9,
            category: 1,
            center: (2.0, 2.0),
        };
        let d = Candidate { score: 0.8, ..c };
        assert_eq!(nms(&[c, d], 0.5), vec![0]);
        let other_class = Candidate { category: 2, ..d };
        assert_eq!(nms(&[c, other_class], 0.5), vec![0, 1]);
    }

    /// Quadratic oracle: a box survives iff no higher-ranked survivor of its
    /// class overlaps it above the threshold.
    fn nms_oracle(c: &[Candidate], thr: f64) -> Vec<usize> {
        let mut rank: Vec<usize> = (0..c.len()).collect();
        rank.sort_by(|&a, &b| c[b].score.total_cmp(&c[a].score));
        let mut alive = vec![true; c.len()];
        for (ri, &i) in rank.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            for &j in &rank[ri + 1..] {
                if c[j].category == c[i].category && f64::from(box_iou(&c[i].bbox, &c[j].bbox)) > thr {
                    alive[j] = false;
                }
            }
        }
        rank.into_iter().filter(|&i| alive[i]).collect()
    }

    #[test]
    fn nms_matches_quadratic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.random_range(0..40);
            let cands: Vec<Candidate> = (0..n)
                .map(|_| {
                    let x = rng.random_range(0.0..50.0f32);
                    let y = rng.random_range(0.0..50.0f32);
                    let w = rng.random_range(2.0..20.0f32);
                    let h = rng.random_range(2.0..20.0f32);
                    Candidate {
                        bbox: BBox::new(x, y, x + w, y + h),
                        score: rng.random_range(0.0..1.0),
                        category: rng.random_range(1..3),
                        center: (x, y),
                    }
                })
                .collect();
            assert_eq!(nms(&cands, 0.5), nms_oracle(&cands, 0.5));
        }
    }
}
