use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use stc_vis::datagen::{generate_dataset, Frame, GenConfig, VideoSample};
use stc_vis::model::loss::{condinst_loss, dice_loss};
use stc_vis::model::{load_checkpoint, overall_loss, save_checkpoint, train, FrameTargets, LossConfig, Model, ModelConfig, TrainConfig};
use stc_vis::Error;

fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        ..Default::default()
    }
}

fn videos(n: usize) -> Vec<VideoSample> {
    generate_dataset(&GenConfig::default(), 3, n).unwrap()
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn snapshot(model: &Model) -> BTreeMap<String, Vec<f32>> {
    let data = model.varmap.data().lock().unwrap();
    data.iter().map(|(k, v)| (k.clone(), flat(v.as_tensor()))).collect()
}

#[test]
fn same_seed_same_parameters() {
    let a = Model::new(&small_config(), 5).unwrap();
    let b = Model::new(&small_config(), 5).unwrap();
    let c = Model::new(&small_config(), 6).unwrap();
    assert_eq!(snapshot(&a), snapshot(&b));
    assert_ne!(snapshot(&a), snapshot(&c));
}

#[test]
fn output_shapes() {
    let model = Model::new(&small_config(), 0).unwrap();
    let v = &videos(1)[0];
    let out = model.forward_frames(&[&v.frames[0], &v.frames[1]]).unwrap();
    let strides: Vec<u32> = out.levels.iter().map(|l| l.stride).collect();
    assert_eq!(strides, vec![8, 16, 32]);
    for l in &out.levels {
        let s = l.stride as usize;
        assert_eq!(l.class_logits.dims(), &[2, 3, 64 / s, 64 / s]);
        assert_eq!(l.box_reg.dims(), &[2, 4, 64 / s, 64 / s]);
        assert_eq!(l.centerness.dims(), &[2, 64 / s, 64 / s]);
    }
    assert_eq!(out.kernel_map.dims(), &[2, 169, 8, 8]);
    assert_eq!(out.mask_feature.dims(), &[2, 8, 8, 8]);
    assert_eq!(out.embedding_map.dims(), &[2, 16, 8, 8]);
    assert!(flat(&out.levels[0].box_reg).iter().all(|&x| x > 0.0));
}

#[test]
fn input_must_be_divisible_by_32() {
    let model = Model::new(&small_config(), 0).unwrap();
    let frame = Frame {
        height: 48,
        width: 64,
        data: vec![0.5; 3 * 48 * 64],
    };
    assert!(matches!(model.forward_frames(&[&frame]), Err(Error::Shape(_))));
}

#[test]
fn frame_without_instances_only_has_classification_loss() {
    let model = Model::new(&small_config(), 0).unwrap();
    let v = &videos(1)[0];
    let out = model.forward_frames(&[&v.frames[0]]).unwrap();
    let cfg = model.config();
    let targets = FrameTargets::new(64, 64, &[]);
    let terms = condinst_loss(&out, &targets, &LossConfig::default(), cfg.normalizer_for(64, 64), &cfg.kernel_layout(), 0).unwrap();
    let s = |t: &Tensor| t.to_scalar::<f32>().unwrap();
    assert!(s(&terms.classification) > 0.0);
    assert_eq!(s(&terms.box_regression), 0.0);
    assert_eq!(s(&terms.centerness), 0.0);
    assert_eq!(s(&terms.mask), 0.0);
}

#[test]
fn dice_of_perfect_prediction_is_small() {
    let dev = candle_core::Device::Cpu;
    let target: Vec<f32> = (0..2 * 64).map(|i| f32::from(u8::from(i % 3 == 0))).collect();
    let t = Tensor::from_vec(target.clone(), (2, 64), &dev).unwrap();
    let near: Vec<f32> = target.iter().map(|&x| if x > 0.5 { 0.999 } else { 0.001 }).collect();
    let p = Tensor::from_vec(near, (2, 64), &dev).unwrap();
    let d = flat(&dice_loss(&p, &t).unwrap());
    assert!(d.iter().all(|&x| (0.0..=0.01).contains(&x)), "{d:?}");
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let model = Model::new(&small_config(), 2).unwrap();
    let before = snapshot(&model);
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let logs = train(&model, &videos(2), &cfg, |_| {}).unwrap();
    assert!(logs.is_empty());
    assert_eq!(before, snapshot(&model));
}

#[test]
fn training_rejects_bad_inputs() {
    let model = Model::new(&small_config(), 2).unwrap();
    let cfg = TrainConfig::default();
    assert!(matches!(train(&model, &[], &cfg, |_| {}), Err(Error::Config(_))));
    let mut short = videos(1);
    short[0].frames.truncate(1);
    short[0].annotations.truncate(1);
    assert!(matches!(train(&model, &short, &cfg, |_| {}), Err(Error::Config(_))));
}

#[test]
fn loss_decreases_and_is_reproducible() {
    let data = videos(2);
    let cfg = TrainConfig {
        epochs: 4,
        lr_steps: vec![],
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let model = Model::new(&small_config(), 9).unwrap();
        train(&model, &data, &cfg, |_| {}).unwrap()
    };
    let a = run();
    assert_eq!(a.len(), 4 * 16);
    let mean = |s: &[stc_vis::model::StepLog]| s.iter().map(|l| l.losses.condinst).sum::<f64>() / s.len() as f64;
    let early = mean(&a[..10]);
    let late = mean(&a[a.len() - 10..]);
    assert!(late < early, "condinst {early} -> {late}");
    let b = run();
    assert_eq!(a.last().unwrap().losses.total, b.last().unwrap().losses.total);
}

#[test]
fn track_head_receives_gradient_only_from_tracking_term() {
    let model = Model::new(&small_config(), 4).unwrap();
    let v = &videos(1)[0];
    let key = FrameTargets::new(64, 64, &v.annotations[0]);
    let reference = FrameTargets::new(64, 64, &v.annotations[2]);
    let cfg = model.config();
    let weight = {
        let data = model.varmap.data().lock().unwrap();
        data.get("track_head.out.weight").unwrap().as_tensor().clone()
    };
    let grad_norm = |lambda_b: f64| {
        let out = model.forward_frames(&[&v.frames[0], &v.frames[2]]).unwrap();
        let lc = LossConfig {
            lambda_b,
            ..Default::default()
        };
        let loss = overall_loss(&out, &key, &reference, &lc, cfg.normalizer_for(64, 64), &cfg.kernel_layout(), 1).unwrap();
        let grads = loss.total.backward().unwrap();
        grads.get(&weight).map_or(0.0, |g| g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap())
    };
    assert!(grad_norm(0.2) > 0.0);
    assert_eq!(grad_norm(0.0), 0.0);
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    let model = Model::new(&small_config(), 8).unwrap();
    save_checkpoint(&model, &path, Some(&TrainConfig::default())).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(snapshot(&loaded), snapshot(&model));
    let v = &videos(1)[0];
    let a = model.forward_frames(&[&v.frames[0]]).unwrap();
    let b = loaded.forward_frames(&[&v.frames[0]]).unwrap();
    assert_eq!(flat(&a.kernel_map), flat(&b.kernel_map));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.safetensors");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}
