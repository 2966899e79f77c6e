use proptest::prelude::*;

use super::*;
use crate::data::synth::{synth_generate, SyntheticGenConfig};
use crate::data::RgbImage;
use crate::model::{build_model, ArchConfig, VariantFlags};

fn loss_of(p: f64, fg: bool, focal: FocalLossParams) -> f64 {
    let mut t = Tape::<f64>::new();
    let pv = t.constant(vec![1, 1, 1, 1], vec![p]).unwrap();
    let m = BinaryMask::from_fn(1, 1, |_, _| fg);
    let l = focal_loss(&mut t, pv, &[&m], &focal).unwrap();
    t.value(l)[0]
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let f = FocalLossParams::default();
    assert_eq!(loss_of(1.0 - 1e-7, true, f), loss_of(1.0, true, f));
    assert!(loss_of(1.0, true, f) < 1e-12);
    assert!(loss_of(0.0, false, f) < 1e-12);
}

#[test]
fn gamma_zero_unweighted_is_cross_entropy() {
    let probs = [0.1, 0.35, 0.5, 0.8, 0.97, 0.6];
    let fg = [true, false, true, false, true, true];
    let mut t = Tape::<f64>::new();
    let pv = t.constant(vec![1, 1, 2, 3], probs.to_vec()).unwrap();
    let m = BinaryMask::new(2, 3, fg.to_vec()).unwrap();
    let focal = FocalLossParams { alpha: None, gamma: 0.0 };
    let l = focal_loss(&mut t, pv, &[&m], &focal).unwrap();
    let bce: f64 = probs
        .iter()
        .zip(fg)
        .map(|(&p, f)| if f { -p.ln() } else { -(1.0 - p).ln() })
        .sum::<f64>()
        / 6.0;
    assert!((t.value(l)[0] - bce).abs() < 1e-12);
}

#[test]
fn single_pixel_reference_value() {
    let l = loss_of(0.5, true, FocalLossParams::default());
    assert!((l - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
    assert!((l - 0.043322).abs() < 1e-6);
}

#[test]
fn shape_mismatch_and_bad_params() {
    let mut t = Tape::<f64>::new();
    let pv = t.constant(vec![1, 1, 2, 2], vec![0.5; 4]).unwrap();
    let m = BinaryMask::empty(2, 3);
    assert!(matches!(
        focal_loss(&mut t, pv, &[&m], &FocalLossParams::default()),
        Err(Error::ShapeMismatch { .. })
    ));
    let m = BinaryMask::empty(2, 2);
    let bad = FocalLossParams { alpha: Some(1.5), gamma: 2.0 };
    assert!(focal_loss(&mut t, pv, &[&m], &bad).is_err());
    let bad = FocalLossParams { alpha: Some(0.5), gamma: -1.0 };
    assert!(focal_loss(&mut t, pv, &[&m], &bad).is_err());
}

#[test]
fn loss_gradient_matches_differences() {
    let probs = Tensor::from_fn(vec![1, 1, 3, 3], |i| 0.05 + 0.1 * i as f64);
    let target: Vec<bool> = (0..9).map(|i| i % 2 == 0).collect();
    for focal in [
        FocalLossParams::default(),
        FocalLossParams { alpha: None, gamma: 0.0 },
        FocalLossParams { alpha: Some(0.6), gamma: 3.5 },
    ] {
        let err = focal_gradient_check(&probs, &target, &focal).unwrap();
        assert!(err < 1e-6, "{focal:?}: {err}");
    }
}

proptest! {
    #[test]
    fn focal_non_negative_and_decreasing(p in 0.001f64..0.998, dp in 0.0005f64..0.001, alpha in 0.0f64..=1.0, gamma in 0.0f64..5.0, fg: bool) {
        let f = FocalLossParams { alpha: Some(alpha), gamma };
        let pt = |p: f64| if fg { p } else { 1.0 - p };
        let (lo, hi) = if pt(p) < pt(p + dp) { (p, p + dp) } else { (p + dp, p) };
        let a = loss_of(lo, fg, f);
        let b = loss_of(hi, fg, f);
        prop_assert!(a >= 0.0 && b >= 0.0);
        let weight = if fg { alpha } else { 1.0 - alpha };
        if weight > 0.0 {
            prop_assert!(a > b, "p_t {} -> {}: {} vs {}", pt(lo), pt(hi), a, b);
        }
    }
}

fn desk_arch(factor: f64) -> ArchConfig {
    ArchConfig::desk(48, 64, 4, factor)
}

fn small_data(count: usize) -> Vec<Sample> {
    synth_generate(&SyntheticGenConfig {
        count,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = small_data(4);
    let mut model: Model<f32> = build_model(&ArchConfig::desk(48, 64, 2, 0.0625), VariantFlags::M2, 1).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        augment: AugmentConfig::none(),
        optimizer: OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let log = train(&mut model, &data, &[], &cfg, &FocalLossParams::default()).unwrap();
    let weights = |s: &crate::model::ParamStore<f32>| {
        s.iter()
            .filter(|(_, p)| p.kind == ParamKind::Weight)
            .map(|(_, p)| p.tensor.data().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(weights(&model.params), weights(&before));
    assert!(log.rows.windows(2).all(|w| w[0].loss == w[1].loss), "{log:?}");
    assert_eq!(log.rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
}

#[test]
fn same_seed_same_curve() {
    let data = small_data(6);
    let run = || {
        let mut model: Model<f32> = build_model(&ArchConfig::desk(48, 64, 2, 0.0625), VariantFlags::M4, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..Default::default()
        };
        train(&mut model, &data[..4], &data[4..], &cfg, &FocalLossParams::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.final_val_iou().is_some());
}

#[test]
fn empty_training_split_errors() {
    let mut model: Model<f32> = build_model(&ArchConfig::desk(48, 64, 2, 0.0625), VariantFlags::M1, 5).unwrap();
    let err = train(&mut model, &[], &[], &TrainConfig::default(), &FocalLossParams::default()).unwrap_err();
    assert!(matches!(err, Error::Empty(_)));
}

#[test]
fn divergence_is_reported() {
    let data = small_data(2);
    let mut model: Model<f32> = build_model(&ArchConfig::desk(48, 64, 2, 0.0625), VariantFlags::M1, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        optimizer: OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: 1e30,
            ..Default::default()
        },
        ..Default::default()
    };
    let err = train(&mut model, &data, &[], &cfg, &FocalLossParams::default()).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn single_sample_overfits() {
    let data = small_data(1);
    let mut model: Model<f32> = build_model(&desk_arch(0.0625), VariantFlags::M4, 11).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        augment: AugmentConfig::none(),
        optimizer: OptimizerConfig {
            learning_rate: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let focal = FocalLossParams::default();
    let log = train(&mut model, &data, &[], &cfg, &focal).unwrap();
    let last = log.rows.last().unwrap().loss;
    let iou = evaluate_iou(&model, &data).unwrap();
    assert!(last < 0.01, "final loss {last}");
    assert!(iou >= 0.98, "iou {iou}");
}

#[test]
fn prediction_is_batch_independent() {
    let data = small_data(3);
    let model: Model<f32> = build_model(&ArchConfig::desk(48, 64, 2, 0.0625), VariantFlags::M3, 2).unwrap();
    let imgs: Vec<&RgbImage> = data.iter().map(|s| &s.image).collect();
    let all = predict_masks(&model, &imgs).unwrap();
    let one = predict_masks(&model, &imgs[1..2]).unwrap();
    assert_eq!(all[1], one[0]);
}

#[test]
fn log_csv_has_header_and_rows() {
    let log = TrainLog {
        rows: vec![
            EpochRecord { epoch: 1, loss: 0.5, val_iou: Some(0.25) },
            EpochRecord { epoch: 2, loss: 0.25, val_iou: None },
        ],
    };
    let csv = log.to_csv();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss,val_iou");
    assert!(lines[1].starts_with("1,0.5"));
    assert!(lines[2].ends_with(','));
}


#[test]
fn recalibrated_eval_matches_training_normalisation() {
    let data = small_data(1);
    let mut model: Model<f32> = build_model(&desk_arch(0.0625), VariantFlags::M3, 4).unwrap();
    recalibrate_batch_norm(&mut model, &data, 1).unwrap();
    let batch = images_to_batch::<f32>(&[&data[0].image]).unwrap();
    let eval = model.predict(&batch, false).unwrap().probs;
    let mut tape = Tape::new();
    let b = tape.leaf(&batch);
    let out = model.forward(&mut tape, b, Mode::Train, false).unwrap();
    let worst = eval
        .data()
        .iter()
        .zip(tape.value(out.probs))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 1e-4, "{worst}");
}
