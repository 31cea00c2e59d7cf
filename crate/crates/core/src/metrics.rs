//! Video-level mask IoU and track-level AP/AR.
//!
//! Evaluation follows the COCO / YouTube-VIS protocol: per category and video,
//! predictions are matched greedily in descending score order to unmatched
//! ground-truth tracks; precision is interpolated at 101 recall points and
//! averaged over the IoU thresholds 0.50:0.05:0.95 and over categories.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datagen::VideoSample;
use crate::error::{ensure_shape, Result};
use crate::geometry::Mask;
use crate::inference::TrackPrediction;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTrack {
    pub instance_id: u32,
    pub category: u32,
    pub masks: Vec<Option<Mask>>,
}

/// Ground-truth tracks of a video; invisible frames become `None`.
pub fn gt_tracks(video: &VideoSample) -> Vec<GroundTruthTrack> {
    let Some(first) = video.annotations.first() else {
        return Vec::new();
    };
    first
        .iter()
        .map(|a| GroundTruthTrack {
            instance_id: a.instance_id,
            category: a.category_id,
            masks: video
                .annotations
                .iter()
                .map(|anns| {
                    anns.iter()
                        .find(|x| x.instance_id == a.instance_id && x.visible)
                        .map(|x| x.mask.clone())
                })
                .collect(),
        })
        .filter(|t| t.masks.iter().any(Option::is_some))
        .collect()
}

/// Sum of per-frame intersections over sum of per-frame unions, with absent
/// frames padded by empty masks up to `t_len`. Zero when the union is empty.
pub fn video_iou(pred: &[Option<Mask>], gt: &[Option<Mask>], t_len: usize) -> Result<f64> {
    ensure_shape!(
        pred.len() <= t_len && gt.len() <= t_len,
        "sequences of length {} / {} exceed video length {t_len}",
        pred.len(),
        gt.len()
    );
    let (mut inter, mut union) = (0u64, 0u64);
    for t in 0..t_len {
        match (pred.get(t).and_then(Option::as_ref), gt.get(t).and_then(Option::as_ref)) {
            (Some(p), Some(g)) => {
                ensure_shape!(p.shape() == g.shape(), "frame {t}: mask shapes {:?} vs {:?}", p.shape(), g.shape());
                inter += p.intersection(g);
                union += p.union(g);
            }
            (Some(m), None) | (None, Some(m)) => union += m.area(),
            (None, None) => {}
        }
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Predictions and ground truth of one video.
#[derive(Debug, Clone, Default)]
pub struct EvalVideo {
    pub length: usize,
    pub preds: Vec<TrackPrediction>,
    pub gts: Vec<GroundTruthTrack>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    /// Prediction budgets per video and category; the last one is used for AP.
    pub max_dets: Vec<usize>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect(),
            max_dets: vec![1, 10, 100],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR1")]
    pub ar1: f64,
    #[serde(rename = "AR10")]
    pub ar10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(flatten)]
    pub overall: CategoryMetrics,
    /// Keyed by category id; categories without ground truth are omitted.
    pub per_category: BTreeMap<u32, CategoryMetrics>,
}

/// Per (threshold) results of one category, for one prediction budget.
struct Accumulated {
    /// `precision[t]` holds 101 interpolated values.
    precision: Vec<Vec<f64>>,
    recall: Vec<f64>,
}

/// Greedy matching of one video/category. Returns, per kept prediction,
/// its score and whether it is a true positive at each threshold.
fn match_video(preds: &[&TrackPrediction], gts: &[&GroundTruthTrack], length: usize, thresholds: &[f64]) -> Result<Vec<(f64, Vec<bool>)>> {
    let ious: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| video_iou(&p.masks, &g.masks, length)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut out: Vec<(f64, Vec<bool>)> = preds.iter().map(|p| (p.score, Vec::with_capacity(thresholds.len()))).collect();
    for &thr in thresholds {
        let mut gt_used = vec![false; gts.len()];
        for (d, row) in ious.iter().enumerate() {
            let mut best_iou = thr.min(1.0 - 1e-10);
            let mut best = None;
            for (g, &iou) in row.iter().enumerate() {
                if gt_used[g] || iou < best_iou {
                    continue;
                }
                best_iou = iou;
                best = Some(g);
            }
            if let Some(g) = best {
                gt_used[g] = true;
            }
            out[d].1.push(best.is_some());
        }
    }
    Ok(out)
}

fn accumulate(mut dets: Vec<(f64, Vec<bool>)>, num_gt: usize, n_thr: usize) -> Accumulated {
    // stable: equal scores keep video order, then in-video rank order
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let rec_thrs: Vec<f64> = (0..=100).map(|i| f64::from(i) / 100.0).collect();
    let mut precision = Vec::with_capacity(n_thr);
    let mut recall = Vec::with_capacity(n_thr);
    for t in 0..n_thr {
        let (mut tp, mut fp) = (0.0, 0.0);
        let mut rc = Vec::with_capacity(dets.len());
        let mut pr = Vec::with_capacity(dets.len());
        for (_, flags) in &dets {
            if flags[t] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            rc.push(tp / num_gt as f64);
            pr.push(tp / (tp + fp));
        }
        recall.push(rc.last().copied().unwrap_or(0.0));
        for i in (1..pr.len()).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        let q = rec_thrs
            .iter()
            .map(|&r| {
                let idx = rc.partition_point(|&v| v < r);
                pr.get(idx).copied().unwrap_or(0.0)
            })
            .collect();
        precision.push(q);
    }
    Accumulated { precision, recall }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn evaluate(videos: &[EvalVideo], params: &EvalParams) -> Result<Metrics> {
    let thresholds = &params.iou_thresholds;
    let t50 = thresholds.iter().position(|&t| (t - 0.5).abs() < 1e-9);
    let t75 = thresholds.iter().position(|&t| (t - 0.75).abs() < 1e-9);

    let categories: BTreeSet<u32> = videos
        .iter()
        .flat_map(|v| v.preds.iter().map(|p| p.category).chain(v.gts.iter().map(|g| g.category)))
        .collect();

    let budget_ap = params.max_dets.iter().copied().max().unwrap_or(100);
    let mut per_category = BTreeMap::new();
    for &cat in &categories {
        let num_gt: usize = videos.iter().map(|v| v.gts.iter().filter(|g| g.category == cat).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut by_budget: BTreeMap<usize, Accumulated> = BTreeMap::new();
        let mut budgets: Vec<usize> = params.max_dets.clone();
        budgets.extend([1, 10, budget_ap]);
        budgets.sort_unstable();
        budgets.dedup();
        for &budget in &budgets {
            let mut dets = Vec::new();
            for v in videos {
                let mut preds: Vec<&TrackPrediction> = v.preds.iter().filter(|p| p.category == cat).collect();
                preds.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.track_id.cmp(&b.track_id)));
                preds.truncate(budget);
                let gts: Vec<&GroundTruthTrack> = v.gts.iter().filter(|g| g.category == cat).collect();
                dets.extend(match_video(&preds, &gts, v.length, thresholds)?);
            }
            by_budget.insert(budget, accumulate(dets, num_gt, thresholds.len()));
        }
        let full = &by_budget[&budget_ap];
        let ap_at = |t: Option<usize>| t.map_or(0.0, |t| mean(full.precision[t].iter().copied()));
        per_category.insert(
            cat,
            CategoryMetrics {
                ap: mean((0..thresholds.len()).map(|t| mean(full.precision[t].iter().copied()))),
                ap50: ap_at(t50),
                ap75: ap_at(t75),
                ar1: mean(by_budget[&1].recall.iter().copied()),
                ar10: mean(by_budget[&10].recall.iter().copied()),
            },
        );
    }
    let avg = |f: fn(&CategoryMetrics) -> f64| mean(per_category.values().map(f));
    Ok(Metrics {
        overall: CategoryMetrics {
            ap: avg(|m| m.ap),
            ap50: avg(|m| m.ap50),
            ap75: avg(|m| m.ap75),
            ar1: avg(|m| m.ar1),
            ar10: avg(|m| m.ar10),
        },
        per_category,
    })
}

fn frame_iou(a: &Mask, b: &Mask) -> f64 {
    let u = a.union(b);
    if u == 0 {
        0.0
    } else {
        a.intersection(b) as f64 / u as f64
    }
}

/// Frame-to-frame association accuracy. For every ground-truth instance
/// visible in frames `t` and `t + 1` that some track covers at `t` with mask
/// IoU >= 0.5, take the highest-scoring such track; the transition is correct
/// when that track is present at `t + 1` and overlaps this instance more than
/// any other instance there.
/// Returns `(correct, transitions)`.
pub fn association_accuracy(preds: &[TrackPrediction], gts: &[GroundTruthTrack]) -> (usize, usize) {
    let mask_at = |masks: &[Option<Mask>], t: usize| masks.get(t).and_then(Option::as_ref).cloned();
    let (mut good, mut total) = (0, 0);
    for (gi, g) in gts.iter().enumerate() {
        for t in 0..g.masks.len().saturating_sub(1) {
            let (Some(now), Some(_)) = (mask_at(&g.masks, t), mask_at(&g.masks, t + 1)) else {
                continue;
            };
            let best = preds
                .iter()
                .filter_map(|p| mask_at(&p.masks, t).map(|m| (p, frame_iou(&m, &now))))
                .filter(|&(_, iou)| iou >= 0.5)
                .max_by(|a, b| {
                    a.0.score
                        .total_cmp(&b.0.score)
                        .then(a.1.total_cmp(&b.1))
                        .then(b.0.track_id.cmp(&a.0.track_id))
                });
            let Some((track, _)) = best else { continue };
            total += 1;
            let Some(next) = mask_at(&track.masks, t + 1) else { continue };
            let owner = gts
                .iter()
                .enumerate()
                .filter_map(|(k, other)| mask_at(&other.masks, t + 1).map(|m| (k, frame_iou(&next, &m))))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if owner.is_some_and(|(k, iou)| k == gi && iou > 0.0) {
                good += 1;
            }
        }
    }
    (good, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(h: usize, w: usize, x0: usize, x1: usize) -> Mask {
        Mask::from_fn(h, w, |_, x| x >= x0 && x < x1)
    }

    fn pred(track_id: u64, category: u32, score: f64, masks: Vec<Option<Mask>>) -> TrackPrediction {
        TrackPrediction { track_id, category, score, masks }
    }

    #[test]
    fn iou_basic_cases() {
        let m = block(4, 4, 0, 2);
        let seq = vec![Some(m.clone()), Some(m.clone())];
        assert_eq!(video_iou(&seq, &seq, 2).unwrap(), 1.0);
        // frame 1 identical, gt also present in frame 2 with the same area
        let pred_seq = vec![Some(m.clone()), None];
        assert_eq!(video_iou(&pred_seq, &seq, 2).unwrap(), 0.5);
        assert_eq!(video_iou(&[None], &[None], 1).unwrap(), 0.0);
        let disjoint = vec![Some(block(4, 4, 2, 4))];
        assert_eq!(video_iou(&disjoint, &seq[..1], 1).unwrap(), 0.0);
        assert!(video_iou(&[Some(Mask::zeros(3, 3))], &[Some(m)], 1).is_err());
    }

    #[test]
    fn iou_matches_pixel_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let t_len = rng.random_range(1..6);
            let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
            let gen = |rng: &mut ChaCha8Rng| -> Vec<Option<Mask>> {
                (0..rng.random_range(0..=t_len))
                    .map(|_| rng.random_bool(0.7).then(|| Mask::from_fn(h, w, |_, _| rng.random_bool(0.4))))
                    .collect()
            };
            let a = gen(&mut rng);
            let b = gen(&mut rng);
            let (mut i, mut u) = (0u64, 0u64);
            for t in 0..t_len {
                for y in 0..h {
                    for x in 0..w {
                        let pa = a.get(t).and_then(|m| m.as_ref()).is_some_and(|m| m.get(y, x));
                        let pb = b.get(t).and_then(|m| m.as_ref()).is_some_and(|m| m.get(y, x));
                        i += u64::from(pa && pb);
                        u += u64::from(pa || pb);
                    }
                }
            }
            let expected = if u == 0 { 0.0 } else { i as f64 / u as f64 };
            let got = video_iou(&a, &b, t_len).unwrap();
            assert!((got - expected).abs() < 1e-12);
            assert_eq!(got, video_iou(&b, &a, t_len).unwrap());
        }
    }

    fn gt(id: u32, category: u32, masks: Vec<Option<Mask>>) -> GroundTruthTrack {
        GroundTruthTrack { instance_id: id, category, masks }
    }

    #[test]
    fn perfect_and_empty() {
        let a = vec![Some(block(4, 4, 0, 2)), Some(block(4, 4, 1, 3))];
        let b = vec![Some(block(4, 4, 2, 4)), None];
        let v = EvalVideo {
            length: 2,
            preds: vec![pred(0, 1, 1.0, a.clone()), pred(1, 2, 1.0, b.clone())],
            gts: vec![gt(1, 1, a.clone()), gt(2, 2, b.clone())],
        };
        let m = evaluate(&[v], &EvalParams::default()).unwrap();
        assert_eq!((m.overall.ap, m.overall.ap50, m.overall.ap75), (1.0, 1.0, 1.0));
        assert_eq!((m.overall.ar1, m.overall.ar10), (1.0, 1.0));

        let empty = EvalVideo {
            length: 2,
            preds: vec![],
            gts: vec![gt(1, 1, a)],
        };
        let m = evaluate(&[empty], &EvalParams::default()).unwrap();
        assert_eq!(m.overall, CategoryMetrics { ap: 0.0, ap50: 0.0, ap75: 0.0, ar1: 0.0, ar10: 0.0 });
    }

    #[test]
    fn split_track_is_penalized() {
        let m = block(4, 4, 0, 2);
        let full: Vec<Option<Mask>> = vec![Some(m.clone()); 4];
        let first = vec![Some(m.clone()), Some(m.clone()), None, None];
        let second = vec![None, None, Some(m.clone()), Some(m)];
        assert_eq!(video_iou(&first, &full, 4).unwrap(), 0.5);
        assert_eq!(video_iou(&second, &full, 4).unwrap(), 0.5);
        let v = EvalVideo {
            length: 4,
            preds: vec![pred(0, 1, 0.9, first), pred(1, 1, 0.8, second)],
            gts: vec![gt(1, 1, full)],
        };
        let r = evaluate(&[v], &EvalParams::default()).unwrap();
        assert_eq!(r.overall.ap75, 0.0);
        assert_eq!(r.overall.ap50, 1.0);
    }

    #[test]
    fn equal_score_permutation_invariance() {
        let a = vec![Some(block(4, 4, 0, 2))];
        let b = vec![Some(block(4, 4, 0, 3))];
        let preds = vec![pred(0, 1, 0.5, a.clone()), pred(1, 1, 0.5, b.clone())];
        let mut rev = preds.clone();
        rev.reverse();
        let gts = vec![gt(1, 1, a)];
        let m1 = evaluate(&[EvalVideo { length: 1, preds, gts: gts.clone() }], &EvalParams::default()).unwrap();
        let m2 = evaluate(&[EvalVideo { length: 1, preds: rev, gts }], &EvalParams::default()).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn association_accuracy_counts_switches() {
        let m = block(4, 4, 0, 2);
        let gt_track = gt(1, 1, vec![Some(m.clone()); 4]);
        let whole = pred(0, 1, 1.0, vec![Some(m.clone()); 4]);
        assert_eq!(association_accuracy(&[whole], std::slice::from_ref(&gt_track)), (3, 3));
        let a = pred(0, 1, 1.0, vec![Some(m.clone()), Some(m.clone()), None, None]);
        let b = pred(1, 1, 1.0, vec![None, None, Some(m.clone()), Some(m.clone())]);
        assert_eq!(association_accuracy(&[a, b], std::slice::from_ref(&gt_track)), (2, 3));
        // a track that jumps to another instance is a switch
        let other = block(4, 4, 2, 4);
        let gt_other = gt(2, 1, vec![Some(other.clone()); 4]);
        let jumper = pred(0, 1, 1.0, vec![Some(m.clone()), Some(other.clone()), Some(other.clone()), Some(other)]);
        assert_eq!(association_accuracy(&[jumper], &[gt_track, gt_other]), (2, 3));
    }

    #[test]
    fn budget_one_limits_recall() {
        let a = vec![Some(block(4, 4, 0, 2))];
        let b = vec![Some(block(4, 4, 2, 4))];
        let v = EvalVideo {
            length: 1,
            preds: vec![pred(0, 1, 0.9, a.clone()), pred(1, 1, 0.8, b.clone())],
            gts: vec![gt(1, 1, a), gt(2, 1, b)],
        };
        let m = evaluate(&[v], &EvalParams::default()).unwrap();
        assert_eq!(m.overall.ar1, 0.5);
        assert_eq!(m.overall.ar10, 1.0);
    }

    proptest::proptest! {
        #[test]
        fn video_iou_is_a_symmetric_ratio(seed in 0u64..10_000, t_len in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seq = || -> Vec<Option<Mask>> {
                (0..t_len).map(|_| rng.random_bool(0.7).then(|| Mask::from_fn(3, 4, |_, _| rng.random_bool(0.5)))).collect()
            };
            let (a, b) = (seq(), seq());
            let ab = video_iou(&a, &b, t_len).unwrap();
            proptest::prop_assert_eq!(ab, video_iou(&b, &a, t_len).unwrap());
            proptest::prop_assert!((0.0..=1.0).contains(&ab));
            let self_iou = video_iou(&a, &a, t_len).unwrap();
            let any = a.iter().flatten().any(|m| !m.is_empty());
            proptest::prop_assert_eq!(self_iou, if any { 1.0 } else { 0.0 });
        }
    }
}
