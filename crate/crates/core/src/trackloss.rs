//! Cross-frame pair sampling and the multi-positive contrastive tracking loss.
//!
//! For a query embedding `q` with positives `K+` and negatives `K-` (raw dot
//! products, no temperature, no normalization):
//!
//! ```text
//! L(q) = sum_{k+} log(1 + sum_{k-} exp(q.k- - q.k+))
//!      = sum_{k+} softplus(logsumexp_{k-}(q.k-) - q.k+)
//! ```
//!
//! The second form is what every implementation here evaluates.

use candle_core::{DType, Tensor, D};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assign::LevelAssignment;
use crate::error::{ensure_shape, Result};

pub const DEFAULT_NUM_NEGATIVES: usize = 128;

/// Per-location tracking embeddings, channel-major `[D x H x W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl EmbeddingMap {
    /// From a `[D, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (dim, height, width) = t.dims3()?;
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self { dim, height, width, values })
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn vector_at(&self, p: usize) -> Vec<f64> {
        let n = self.locations();
        (0..self.dim).map(|c| f64::from(self.values[c * n + p])).collect()
    }
}

/// Location indices of one training sample; materialize with an embedding map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndices {
    pub query: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub instance_id: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub query: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub instance_id: i64,
}

/// One sample per positive key-frame location. Positives are every
/// reference-frame location of the same instance; negatives are drawn
/// uniformly without replacement from all other reference-frame locations.
pub fn sample_pair_indices(
    assign_key: &LevelAssignment,
    assign_ref: &LevelAssignment,
    n_neg: usize,
    rng_seed: u64,
) -> Result<Vec<PairIndices>> {
    ensure_shape!(
        (assign_key.height, assign_key.width) == (assign_ref.height, assign_ref.width),
        "key grid {}x{} differs from reference grid {}x{}",
        assign_key.height,
        assign_key.width,
        assign_ref.height,
        assign_ref.width
    );
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::new();
    for query in assign_key.positives() {
        let instance_id = assign_key.instance_id[query];
        let positives = assign_ref.positives_of(instance_id);
        let candidates: Vec<usize> = (0..assign_ref.len())
            .filter(|&p| assign_ref.instance_id[p] != instance_id)
            .collect();
        let amount = n_neg.min(candidates.len());
        let mut negatives: Vec<usize> = sample(&mut rng, candidates.len(), amount)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        negatives.sort_unstable();
        out.push(PairIndices {
            query,
            positives,
            negatives,
            instance_id,
        });
    }
    Ok(out)
}

pub fn sample_pairs(
    emb_key: &EmbeddingMap,
    emb_ref: &EmbeddingMap,
    assign_key: &LevelAssignment,
    assign_ref: &LevelAssignment,
    n_neg: usize,
    rng_seed: u64,
) -> Result<Vec<PairSample>> {
    ensure_shape!(
        emb_key.dim == emb_ref.dim
            && (emb_key.height, emb_key.width) == (assign_key.height, assign_key.width)
            && (emb_ref.height, emb_ref.width) == (assign_ref.height, assign_ref.width),
        "embedding maps and assignments are on different grids"
    );
    let idx = sample_pair_indices(assign_key, assign_ref, n_neg, rng_seed)?;
    Ok(idx
        .into_iter()
        .map(|p| PairSample {
            query: emb_key.vector_at(p.query),
            positives: p.positives.iter().map(|&i| emb_ref.vector_at(i)).collect(),
            negatives: p.negatives.iter().map(|&i| emb_ref.vector_at(i)).collect(),
            instance_id: p.instance_id,
        })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn check_dims(q: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>]) -> Result<()> {
    let d = q.len();
    for (name, set) in [("positive", positives), ("negative", negatives)] {
        if let Some(bad) = set.iter().find(|k| k.len() != d) {
            ensure_shape!(false, "{name} has dimension {}, query has {d}", bad.len());
        }
    }
    Ok(())
}

/// Multi-positive contrastive loss; 0 when either set is empty.
pub fn contrastive_loss(q: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>]) -> Result<f64> {
    check_dims(q, positives, negatives)?;
    if positives.is_empty() || negatives.is_empty() {
        return Ok(0.0);
    }
    let neg: Vec<f64> = negatives.iter().map(|k| dot(q, k)).collect();
    let lse = logsumexp(&neg);
    Ok(positives.iter().map(|k| softplus(lse - dot(q, k))).sum())
}

/// Single-positive InfoNCE form: `-log(e^{q.k+} / (e^{q.k+} + sum e^{q.k-}))`.
pub fn single_positive_loss(q: &[f64], positive: &[f64], negatives: &[Vec<f64>]) -> Result<f64> {
    check_dims(q, std::slice::from_ref(&positive.to_vec()), negatives)?;
    let sp = dot(q, positive);
    let mut logits = vec![sp];
    logits.extend(negatives.iter().map(|k| dot(q, k)));
    Ok(logsumexp(&logits) - sp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub query: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

/// Closed-form gradients of [`contrastive_loss`].
///
/// With `a = logsumexp(q.k-)`, `w+ = sigmoid(a - q.k+)` and `pi- = softmax(q.k-)`:
/// `dL/dk+ = -w+ q`, `dL/dk- = (sum w+) pi- q`,
/// `dL/dq = -sum w+ k+ + (sum w+) sum pi- k-`.
pub fn contrastive_grad(q: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>]) -> Result<ContrastiveGrad> {
    check_dims(q, positives, negatives)?;
    let d = q.len();
    let mut grad = ContrastiveGrad {
        query: vec![0.0; d],
        positives: vec![vec![0.0; d]; positives.len()],
        negatives: vec![vec![0.0; d]; negatives.len()],
    };
    if positives.is_empty() || negatives.is_empty() {
        return Ok(grad);
    }
    let neg: Vec<f64> = negatives.iter().map(|k| dot(q, k)).collect();
    let lse = logsumexp(&neg);
    let pi: Vec<f64> = neg.iter().map(|&s| (s - lse).exp()).collect();
    let mut w_total = 0.0;
    for (k, g) in positives.iter().zip(&mut grad.positives) {
        let w = sigmoid(lse - dot(q, k));
        w_total += w;
        for c in 0..d {
            g[c] = -w * q[c];
            grad.query[c] -= w * k[c];
        }
    }
    for ((k, g), &p) in negatives.iter().zip(&mut grad.negatives).zip(&pi) {
        for c in 0..d {
            g[c] = w_total * p * q[c];
            grad.query[c] += w_total * p * k[c];
        }
    }
    Ok(grad)
}

/// Mean per-sample loss over samples that have at least one positive.
pub fn track_loss(samples: &[PairSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n_pos = 0usize;
    for s in samples {
        if s.positives.is_empty() {
            continue;
        }
        total += contrastive_loss(&s.query, &s.positives, &s.negatives)?;
        n_pos += 1;
    }
    Ok(if n_pos == 0 { 0.0 } else { total / n_pos as f64 })
}

/// Average of the key-to-reference and reference-to-key track losses.
pub fn bi_track_loss(key_to_ref: &[PairSample], ref_to_key: &[PairSample]) -> Result<f64> {
    Ok(0.5 * (track_loss(key_to_ref)? + track_loss(ref_to_key)?))
}

/// Differentiable [`track_loss`] over `[D, HW]` embedding tensors.
pub fn track_loss_tensor(emb_key: &Tensor, emb_ref: &Tensor, pairs: &[PairIndices]) -> Result<Tensor> {
    let (d, hw) = emb_key.dims2()?;
    ensure_shape!(emb_ref.dims() == [d, hw], "embedding tensors {:?} vs {:?}", emb_key.dims(), emb_ref.dims());
    let dev = emb_key.device();
    let dtype = emb_key.dtype();
    let pairs: Vec<&PairIndices> = pairs.iter().filter(|p| !p.positives.is_empty()).collect();
    let max_neg = pairs.iter().map(|p| p.negatives.len()).max().unwrap_or(0);
    if pairs.is_empty() || max_neg == 0 {
        return Ok(Tensor::zeros((), dtype, dev)?);
    }
    let n = pairs.len();
    let max_pos = pairs.iter().map(|p| p.positives.len()).max().unwrap_or(0);

    let padded = |sel: &dyn Fn(&PairIndices) -> &Vec<usize>, width: usize| {
        let mut idx = Vec::with_capacity(n * width);
        let mut valid = Vec::with_capacity(n * width);
        for p in &pairs {
            let v = sel(p);
            for j in 0..width {
                idx.push(v.get(j).copied().unwrap_or(0) as u32);
                valid.push(if j < v.len() { 1.0f32 } else { 0.0 });
            }
        }
        (idx, valid)
    };
    let (pos_idx, pos_valid) = padded(&|p| &p.positives, max_pos);
    let (neg_idx, neg_valid) = padded(&|p| &p.negatives, max_neg);

    let key_t = emb_key.t()?.contiguous()?;
    let ref_t = emb_ref.t()?.contiguous()?;
    let q_idx: Vec<u32> = pairs.iter().map(|p| p.query as u32).collect();
    let q = key_t.index_select(&Tensor::new(q_idx.as_slice(), dev)?, 0)?.unsqueeze(1)?;

    let sims = |idx: Vec<u32>, width: usize| -> Result<Tensor> {
        let k = ref_t
            .index_select(&Tensor::from_vec(idx, n * width, dev)?, 0)?
            .reshape((n, width, d))?;
        Ok(k.broadcast_mul(&q)?.sum(D::Minus1)?)
    };
    let s_pos = sims(pos_idx, max_pos)?;
    let s_neg = sims(neg_idx, max_neg)?;

    let neg_mask = Tensor::from_vec(neg_valid, (n, max_neg), dev)?.to_dtype(dtype)?;
    // invalid slots pushed far below every real similarity
    let s_neg = (s_neg + ((neg_mask - 1.0)? * 1e9)?)?;
    let m = s_neg.max_keepdim(1)?.detach();
    let lse = (s_neg.broadcast_sub(&m)?.exp()?.sum_keepdim(1)?.log()? + m)?;
    let x = lse.broadcast_sub(&s_pos)?;
    let sp = (x.relu()? + x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?;
    let pos_mask = Tensor::from_vec(pos_valid, (n, max_pos), dev)?.to_dtype(dtype)?;
    let per_sample = (sp * pos_mask)?.sum(1)?;
    Ok((per_sample.sum_all()? / n as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::{assign_fused, LevelAssignment};
    use crate::datagen::{generate_video, GenConfig};
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect()).collect()
    }

    #[test]
    fn reference_values() {
        assert_eq!(contrastive_loss(&[1.0, 0.0], &[], &[vec![0.0, 1.0]]).unwrap(), 0.0);
        let l = contrastive_loss(&[1.0, 1.0], &[vec![0.5, 0.5]], &[vec![0.5, 0.5]]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = contrastive_loss(&[1.0, 0.0], &[vec![1.0, 0.0]], &[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        // direct evaluation: log(1 + e^(0-1) + e^(-1-1))
        let direct = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((l - direct).abs() < 1e-15);
        assert!((l - 0.407_606_0).abs() < 1e-7);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(contrastive_loss(&[1.0, 0.0], &[vec![1.0]], &[vec![0.0, 1.0]]).is_err());
        assert!(contrastive_grad(&[1.0], &[vec![1.0]], &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn empty_positives_give_zero_gradient() {
        let g = contrastive_grad(&[1.0, 2.0], &[], &[vec![0.0, 1.0]]).unwrap();
        assert!(g.query.iter().chain(g.negatives.iter().flatten()).all(|&v| v == 0.0));
    }

    #[test]
    fn positive_gradient_is_negative_multiple_of_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let q = rand_vecs(&mut rng, 1, 6, 1.0).remove(0);
            let pos = rand_vecs(&mut rng, 3, 6, 1.0);
            let neg = rand_vecs(&mut rng, 5, 6, 1.0);
            let g = contrastive_grad(&q, &pos, &neg).unwrap();
            let qq = dot(&q, &q);
            for gp in &g.positives {
                let coef = dot(gp, &q) / qq;
                assert!(coef <= 0.0);
                for c in 0..6 {
                    assert!((gp[c] - coef * q[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn track_loss_means() {
        let mk = |loss_target: f64| {
            // one positive, one negative with q.k- - q.k+ = ln(e^l - 1)
            let gap = (loss_target.exp() - 1.0).ln();
            PairSample {
                query: vec![1.0],
                positives: vec![vec![0.0]],
                negatives: vec![vec![gap]],
                instance_id: 1,
            }
        };
        let v = track_loss(&[mk(0.4), mk(0.6)]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(track_loss(&[]).unwrap(), 0.0);
        let mut empty = mk(0.4);
        empty.positives.clear();
        // empty-positive samples are left out of N_pos
        assert!((track_loss(&[mk(0.6), empty]).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn track_loss_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<PairSample> = (0..50)
            .map(|i| PairSample {
                query: rand_vecs(&mut rng, 1, 4, 1.0).remove(0),
                positives: rand_vecs(&mut rng, 1 + i % 3, 4, 1.0),
                negatives: rand_vecs(&mut rng, 2 + i % 5, 4, 1.0),
                instance_id: 0,
            })
            .collect();
        let mut sum = 0.0;
        for s in &samples {
            for kp in &s.positives {
                let mut inner = 1.0;
                for kn in &s.negatives {
                    inner += (dot(&s.query, kn) - dot(&s.query, kp)).exp();
                }
                sum += inner.ln();
            }
        }
        let got = track_loss(&samples).unwrap();
        assert!((got - sum / 50.0).abs() < 1e-12);
        let c = bi_track_loss(&samples, &samples).unwrap();
        assert!((c - got).abs() < 1e-15);
    }

    #[test]
    fn bi_loss_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha8Rng| -> Vec<PairSample> {
            (0..7)
                .map(|_| PairSample {
                    query: rand_vecs(rng, 1, 5, 2.0).remove(0),
                    positives: rand_vecs(rng, 2, 5, 2.0),
                    negatives: rand_vecs(rng, 9, 5, 2.0),
                    instance_id: 0,
                })
                .collect()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        assert_eq!(bi_track_loss(&a, &b).unwrap(), bi_track_loss(&b, &a).unwrap());
    }

    #[test]
    fn stable_at_large_similarities() {
        let q = vec![1.0, 0.0];
        let l = contrastive_loss(&q, &[vec![-1e3, 0.0]], &[vec![1e3, 0.0]]).unwrap();
        assert!(l.is_finite() && (l - 2e3).abs() < 1e-9);
        let l = contrastive_loss(&q, &[vec![1e3, 0.0]], &[vec![-1e3, 0.0]]).unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }

    fn scene_assignments(seed: u64) -> (LevelAssignment, LevelAssignment) {
        let cfg = GenConfig {
            num_instances: 4,
            enter_exit_prob: 0.4,
            ..GenConfig::default()
        };
        let v = generate_video(&cfg, seed).unwrap();
        (assign_fused(64, 64, &v.visible(0)), assign_fused(64, 64, &v.visible(5)))
    }

    #[test]
    fn sampling_hygiene() {
        for seed in 0..100 {
            let (k, r) = scene_assignments(seed);
            for p in sample_pair_indices(&k, &r, 20, seed).unwrap() {
                assert_eq!(k.instance_id[p.query], p.instance_id);
                assert!(p.negatives.iter().all(|&n| r.instance_id[n] != p.instance_id));
                assert_eq!(p.positives, r.positives_of(p.instance_id));
                let mut dedup = p.negatives.clone();
                dedup.dedup();
                assert_eq!(dedup.len(), p.negatives.len());
            }
        }
    }

    #[test]
    fn sampling_edge_cases() {
        let (k, _) = scene_assignments(1);
        let empty_ref = assign_fused(64, 64, &[]);
        let pairs = sample_pair_indices(&k, &empty_ref, 0, 0).unwrap();
        assert_eq!(pairs.len(), k.positives().len());
        assert!(pairs.iter().all(|p| p.positives.is_empty() && p.negatives.is_empty()));
        // more negatives requested than available: take all of them
        let pairs = sample_pair_indices(&k, &empty_ref, 1000, 0).unwrap();
        assert!(pairs.iter().all(|p| p.negatives.len() == 64));
    }

    #[test]
    fn tensor_loss_matches_scalar_loss() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..10 {
            let (k, r) = scene_assignments(seed);
            let d = 6;
            let key: Vec<f64> = (0..d * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rf: Vec<f64> = (0..d * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let idx = sample_pair_indices(&k, &r, 16, seed).unwrap();
            let to_map = |v: &Vec<f64>| EmbeddingMap {
                dim: d,
                height: 8,
                width: 8,
                values: v.iter().map(|&x| x as f32).collect(),
            };
            let samples = sample_pairs(&to_map(&key), &to_map(&rf), &k, &r, 16, seed).unwrap();
            // round through f32 so both sides see identical inputs
            let kt = Tensor::from_vec(key.iter().map(|&x| f64::from(x as f32)).collect::<Vec<_>>(), (d, 64), &dev).unwrap();
            let rt = Tensor::from_vec(rf.iter().map(|&x| f64::from(x as f32)).collect::<Vec<_>>(), (d, 64), &dev).unwrap();
            let t = track_loss_tensor(&kt, &rt, &idx).unwrap().to_scalar::<f64>().unwrap();
            let s = track_loss(&samples).unwrap();
            assert!((t - s).abs() < 1e-10, "{t} vs {s}");
        }
    }

    proptest! {
        #[test]
        fn nonnegative_and_monotone(seed in 0u64..10_000, np in 1usize..5, nn in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_vecs(&mut rng, 1, 4, 2.0).remove(0);
            let pos = rand_vecs(&mut rng, np, 4, 2.0);
            let neg = rand_vecs(&mut rng, nn, 4, 2.0);
            let base = contrastive_loss(&q, &pos, &neg).unwrap();
            prop_assert!(base > 0.0);

            let mut more = neg.clone();
            more.extend(rand_vecs(&mut rng, 1, 4, 2.0));
            prop_assert!(contrastive_loss(&q, &pos, &more).unwrap() >= base);

            // move k+ along q: q.k+ grows by 0.5 |q|^2
            let mut closer = pos.clone();
            for c in 0..4 { closer[0][c] += 0.5 * q[c]; }
            prop_assert!(contrastive_loss(&q, &closer, &neg).unwrap() < base);
        }
    }
}
