//! Temporal consistency between the dynamic kernels (and the masks they
//! render) of one instance in two frames.
//!
//! By default the reference kernel is rendered on the key frame's mask
//! feature, so both masks describe the same frame.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::assign::LevelAssignment;
use crate::error::{ensure_shape, Result};
use crate::maskgen::{KernelLayout, PixelMaskHead};

/// Which frame's mask feature the reference kernel is rendered on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRefSource {
    #[default]
    KeyFrame,
    RefFrame,
}

/// A key-frame location matched to a reference-frame location of the same instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositivePair {
    pub key_index: usize,
    pub ref_index: usize,
    pub instance_id: i64,
}

/// Pairs every positive key location with the reference location of the same
/// instance that has the highest centerness target (lowest index on ties).
pub fn pair_positives(assign_key: &LevelAssignment, assign_ref: &LevelAssignment) -> Result<Vec<PositivePair>> {
    ensure_shape!(
        (assign_key.height, assign_key.width) == (assign_ref.height, assign_ref.width),
        "consistency pairs need matching grids"
    );
    let mut out = Vec::new();
    for key_index in assign_key.positives() {
        let instance_id = assign_key.instance_id[key_index];
        let mut best: Option<usize> = None;
        for r in assign_ref.positives_of(instance_id) {
            if best.is_none_or(|b| assign_ref.centerness_target[r] > assign_ref.centerness_target[b]) {
                best = Some(r);
            }
        }
        if let Some(ref_index) = best {
            out.push(PositivePair {
                key_index,
                ref_index,
                instance_id,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyPair {
    pub theta_key: Vec<f64>,
    pub theta_ref: Vec<f64>,
    /// Mask logits of the key kernel.
    pub mask_key: Vec<f64>,
    /// Mask logits of the reference kernel on the same feature.
    pub mask_ref_on_key: Vec<f64>,
    pub instance_id: i64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over pairs of `|theta_key - theta_ref|^2 + |mask_key - mask_ref|^2`.
pub fn consistency_loss(pairs: &[ConsistencyPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        ensure_shape!(p.theta_key.len() == p.theta_ref.len(), "pair {i}: kernel lengths differ");
        ensure_shape!(p.mask_key.len() == p.mask_ref_on_key.len(), "pair {i}: mask sizes differ");
        total += sq_dist(&p.theta_key, &p.theta_ref) + sq_dist(&p.mask_key, &p.mask_ref_on_key);
    }
    Ok(total / pairs.len() as f64)
}

/// Renders logits for every pixel input (each `layout.in_channels()` long).
pub fn render_logits(theta: &[f64], inputs: &[Vec<f64>], layout: KernelLayout) -> Result<Vec<f64>> {
    let head = PixelMaskHead::new(theta, layout)?;
    Ok(inputs.iter().map(|x| head.forward(x)).collect())
}

/// Builds the pair whose masks are both rendered on `inputs`.
pub fn make_pair(theta_key: &[f64], theta_ref: &[f64], inputs: &[Vec<f64>], layout: KernelLayout, instance_id: i64) -> Result<ConsistencyPair> {
    Ok(ConsistencyPair {
        theta_key: theta_key.to_vec(),
        theta_ref: theta_ref.to_vec(),
        mask_key: render_logits(theta_key, inputs, layout)?,
        mask_ref_on_key: render_logits(theta_ref, inputs, layout)?,
        instance_id,
    })
}

/// Closed-form gradients of one pair's loss w.r.t. both kernels, including
/// the chain through the rendered masks.
pub fn pair_grad(theta_key: &[f64], theta_ref: &[f64], inputs: &[Vec<f64>], layout: KernelLayout) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_shape!(theta_key.len() == theta_ref.len(), "kernel lengths differ");
    let hk = PixelMaskHead::new(theta_key, layout)?;
    let hr = PixelMaskHead::new(theta_ref, layout)?;
    let mut gk: Vec<f64> = theta_key.iter().zip(theta_ref).map(|(a, b)| 2.0 * (a - b)).collect();
    let mut gr: Vec<f64> = gk.iter().map(|g| -g).collect();
    for x in inputs {
        let diff = hk.forward(x) - hr.forward(x);
        hk.backward(x, 2.0 * diff, &mut gk);
        hr.backward(x, -2.0 * diff, &mut gr);
    }
    Ok((gk, gr))
}

/// Differentiable loss: kernels `[N, P]`, masks `[N, H, W]`.
pub fn consistency_loss_tensor(theta_key: &Tensor, theta_ref: &Tensor, mask_key: &Tensor, mask_ref: &Tensor) -> Result<Tensor> {
    let (n, _) = theta_key.dims2()?;
    ensure_shape!(theta_key.dims() == theta_ref.dims(), "kernel shapes differ");
    ensure_shape!(mask_key.dims() == mask_ref.dims(), "mask shapes differ");
    if n == 0 {
        return Ok(Tensor::zeros((), theta_key.dtype(), theta_key.device())?);
    }
    let dk = (theta_key - theta_ref)?.sqr()?.sum_all()?;
    let dm = (mask_key - mask_ref)?.sqr()?.sum_all()?;
    Ok(((dk + dm)? / n as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::assign_fused;
    use crate::datagen::{generate_video, GenConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn random_theta(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..169).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn identical_kernels_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let theta = random_theta(&mut rng);
        let inputs = random_inputs(&mut rng, 16);
        let p = make_pair(&theta, &theta, &inputs, KernelLayout::default(), 1).unwrap();
        assert_eq!(consistency_loss(&[p]).unwrap(), 0.0);
        assert_eq!(consistency_loss(&[]).unwrap(), 0.0);
    }

    #[test]
    fn unit_kernel_difference() {
        let p = ConsistencyPair {
            theta_key: vec![0.0; 169],
            theta_ref: {
                let mut t = vec![0.0; 169];
                t[17] = 1.0;
                t
            },
            mask_key: vec![0.3; 9],
            mask_ref_on_key: vec![0.3; 9],
            instance_id: 1,
        };
        assert_eq!(consistency_loss(&[p]).unwrap(), 1.0);
    }

    #[test]
    fn matches_scalar_loop_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = KernelLayout::default();
        let pairs: Vec<ConsistencyPair> = (0..5)
            .map(|i| {
                let inputs = random_inputs(&mut rng, 12);
                make_pair(&random_theta(&mut rng), &random_theta(&mut rng), &inputs, layout, i).unwrap()
            })
            .collect();
        let mut total = 0.0;
        for p in &pairs {
            for j in 0..169 {
                let d = p.theta_key[j] - p.theta_ref[j];
                total += d * d;
            }
            for j in 0..12 {
                let d = p.mask_key[j] - p.mask_ref_on_key[j];
                total += d * d;
            }
        }
        let got = consistency_loss(&pairs).unwrap();
        assert!((got - total / 5.0).abs() < 1e-12);

        let swapped: Vec<ConsistencyPair> = pairs
            .iter()
            .map(|p| ConsistencyPair {
                theta_key: p.theta_ref.clone(),
                theta_ref: p.theta_key.clone(),
                mask_key: p.mask_ref_on_key.clone(),
                mask_ref_on_key: p.mask_key.clone(),
                instance_id: p.instance_id,
            })
            .collect();
        assert_eq!(consistency_loss(&swapped).unwrap(), got);
        assert!(consistency_loss(&pairs[..1]).unwrap() > 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let p = ConsistencyPair {
            theta_key: vec![0.0; 169],
            theta_ref: vec![0.0; 168],
            mask_key: vec![],
            mask_ref_on_key: vec![],
            instance_id: 0,
        };
        assert!(consistency_loss(&[p]).is_err());
    }

    #[test]
    fn pairs_carry_same_instance() {
        let cfg = GenConfig {
            num_instances: 4,
            enter_exit_prob: 0.4,
            ..GenConfig::default()
        };
        for seed in 0..50 {
            let v = generate_video(&cfg, seed).unwrap();
            let k = assign_fused(64, 64, &v.visible(0));
            let r = assign_fused(64, 64, &v.visible(4));
            let pairs = pair_positives(&k, &r).unwrap();
            for p in &pairs {
                assert_eq!(k.instance_id[p.key_index], p.instance_id);
                assert_eq!(r.instance_id[p.ref_index], p.instance_id);
                let best = r
                    .positives_of(p.instance_id)
                    .into_iter()
                    .map(|i| r.centerness_target[i])
                    .fold(f32::MIN, f32::max);
                assert_eq!(r.centerness_target[p.ref_index], best);
            }
            let expected: usize = k
                .positives()
                .iter()
                .filter(|&&i| !r.positives_of(k.instance_id[i]).is_empty())
                .count();
            assert_eq!(pairs.len(), expected);
        }
    }

    #[test]
    fn instance_missing_in_reference() {
        let cfg = GenConfig { num_instances: 1, ..GenConfig::default() };
        let v = generate_video(&cfg, 2).unwrap();
        let k = assign_fused(64, 64, &v.visible(0));
        let r = assign_fused(64, 64, &[]);
        assert!(pair_positives(&k, &r).unwrap().is_empty());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layout = KernelLayout::default();
        for _ in 0..10 {
            let inputs = random_inputs(&mut rng, 6);
            let tk = random_theta(&mut rng);
            let tr = random_theta(&mut rng);
            let (gk, gr) = pair_grad(&tk, &tr, &inputs, layout).unwrap();
            let loss = |a: &[f64], b: &[f64]| consistency_loss(&[make_pair(a, b, &inputs, layout, 0).unwrap()]).unwrap();
            let h = 1e-6;
            for j in (0..169).step_by(7) {
                let mut plus = tk.clone();
                let mut minus = tk.clone();
                plus[j] += h;
                minus[j] -= h;
                let fd = (loss(&plus, &tr) - loss(&minus, &tr)) / (2.0 * h);
                assert!((fd - gk[j]).abs() <= 1e-5 * fd.abs().max(1e-3), "key {j}: {fd} vs {}", gk[j]);
                let mut plus = tr.clone();
                let mut minus = tr.clone();
                plus[j] += h;
                minus[j] -= h;
                let fd = (loss(&tk, &plus) - loss(&tk, &minus)) / (2.0 * h);
                assert!((fd - gr[j]).abs() <= 1e-5 * fd.abs().max(1e-3), "ref {j}: {fd} vs {}", gr[j]);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn loss_is_symmetric_and_zero_only_on_equal_kernels(seed in 0u64..10_000, n_pix in 1usize..12) {
            let layout = KernelLayout::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let inputs: Vec<Vec<f64>> = (0..n_pix).map(|_| vec(layout.in_channels())).collect();
            let (a, b) = (vec(layout.param_count()), vec(layout.param_count()));
            let ab = consistency_loss(&[make_pair(&a, &b, &inputs, layout, 0).unwrap()]).unwrap();
            let ba = consistency_loss(&[make_pair(&b, &a, &inputs, layout, 0).unwrap()]).unwrap();
            proptest::prop_assert_eq!(ab, ba);
            proptest::prop_assert!(ab > 0.0);
            proptest::prop_assert_eq!(consistency_loss(&[make_pair(&a, &a, &inputs, layout, 0).unwrap()]).unwrap(), 0.0);
        }
    }
}
