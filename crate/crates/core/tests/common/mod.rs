#![allow(dead_code)]

use turbkit::fixtures::toy_pairs;
use turbkit::metrics::psnr;
use turbkit::model::{mean_l1, ModelConfig, TurbNet};
use turbkit::train::{Sample, TrainConfig};
use turbkit::Tensor;

/// Training pairs of the toy fixture.
pub const TRAIN_SEED: u64 = 0;
/// Disjoint pairs used for held-out evaluation.
pub const HELD_OUT_SEED: u64 = 1000;
pub const TOY_PAIRS: usize = 8;
pub const TOY_SIZE: usize = 32;

/// Toy training budget: 8 pairs, batch 4, 150 epochs = 300 steps at a flat
/// learning rate (a decaying schedule overfits less within this budget).
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr_init: 1.5e-3,
        lr_min: 1.5e-3,
        epochs: 150,
        batch_size: 4,
        alpha_loss: 0.9,
        seed,
        ..TrainConfig::default()
    }
}

pub fn toy_train_set() -> Vec<Sample> {
    toy_pairs(TOY_PAIRS, TOY_SIZE, TRAIN_SEED).unwrap()
}

pub fn toy_held_out_set() -> Vec<Sample> {
    toy_pairs(TOY_PAIRS, TOY_SIZE, HELD_OUT_SEED).unwrap()
}

pub fn clean(s: &Sample) -> &Tensor<f32> {
    s.clean.as_ref().expect("labeled sample")
}

pub fn toy_model(config: &ModelConfig, seed: u64) -> TurbNet<f32> {
    TurbNet::new(config, &turbkit::Rng::new(seed)).unwrap()
}

/// Mean L1 between the restored output and the clean image.
pub fn set_l0(model: &TurbNet<f32>, data: &[Sample]) -> f64 {
    data.iter()
        .map(|s| mean_l1(&model.infer(&s.degraded).unwrap().restored, clean(s)).unwrap())
        .sum::<f64>()
        / data.len() as f64
}

pub fn mean_restored_psnr(model: &TurbNet<f32>, data: &[Sample]) -> f64 {
    data.iter()
        .map(|s| {
            let r = model.infer(&s.degraded).unwrap().restored.clamp(0.0, 1.0);
            psnr(clean(s), &r, 1.0).unwrap()
        })
        .sum::<f64>()
        / data.len() as f64
}

pub fn mean_degraded_psnr(data: &[Sample]) -> f64 {
    data.iter().map(|s| psnr(clean(s), &s.degraded, 1.0).unwrap()).sum::<f64>() / data.len() as f64
}
