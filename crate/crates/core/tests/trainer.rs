mod common;

use std::path::Path;

use candle_core::{Device, Tensor};
use uegan_core::nn::ParamStore;
use uegan_core::trainer::{checkpoint, TrainConfig, Trainer};
use uegan_core::Variant;

fn batch(seeds: std::ops::Range<u64>, gain: f32) -> Tensor {
    let imgs: Vec<Tensor> = seeds.map(|s| common::pattern_tensor(s, 32, 32, gain)).collect();
    Tensor::stack(&imgs, 0).unwrap()
}

fn config() -> TrainConfig {
    common::toy_config(Path::new("."), Path::new("."))
}

fn values(params: &ParamStore) -> Vec<(String, Vec<f32>)> {
    params
        .iter()
        .map(|(n, v)| (n.to_string(), v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut t = Trainer::new(&config(), &Device::Cpu).unwrap();
    let (g0, d0) = (values(t.generator().params()), values(t.discriminator().params()));
    for _ in 0..2 {
        let rec = t.training_step(&batch(0..2, 0.5), &batch(10..12, 1.0), 0.0).unwrap();
        assert!(rec.is_finite());
    }
    assert_eq!(values(t.generator().params()), g0);
    assert_eq!(values(t.discriminator().params()), d0);
}

#[test]
fn every_parameter_moves_within_three_steps() {
    for variant in Variant::ALL {
        let mut cfg = config();
        cfg.model.variant = variant;
        let mut t = Trainer::new(&cfg, &Device::Cpu).unwrap();
        let (g0, d0) = (values(t.generator().params()), values(t.discriminator().params()));
        for s in 0..3 {
            t.training_step(&batch(s..s + 2, 0.5), &batch(10 + s..12 + s, 1.0), 2e-4).unwrap();
        }
        for (before, after) in [(g0, values(t.generator().params())), (d0, values(t.discriminator().params()))] {
            for ((name, a), (_, b)) in before.iter().zip(&after) {
                assert_ne!(a, b, "{variant}: `{name}` never updated");
            }
        }
    }
}

#[test]
fn fidelity_only_step_lowers_fidelity_on_the_same_batch() {
    let mut cfg = config();
    cfg.loss.lambda_qua = 0.0;
    cfg.loss.lambda_idt = 0.0;
    let mut t = Trainer::new(&cfg, &Device::Cpu).unwrap();
    let (low, high) = (batch(0..2, 0.5), batch(10..12, 1.0));
    let before = t.generator_losses(&low, &high).unwrap().fidelity;
    for _ in 0..5 {
        t.g_step(&low, &high, 1e-4).unwrap();
    }
    let after = t.generator_losses(&low, &high).unwrap().fidelity;
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn same_seed_same_trajectory() {
    let run = || {
        let mut t = Trainer::new(&config(), &Device::Cpu).unwrap();
        (0..3)
            .map(|s| t.training_step(&batch(s..s + 2, 0.5), &batch(10..12, 1.0), 2e-4).unwrap().g_total)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_restores_generator_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&config(), &Device::Cpu).unwrap();
    t.training_step(&batch(0..2, 0.5), &batch(10..12, 1.0), 2e-4).unwrap();
    let path = tmp.path().join("c.safetensors");
    t.save_checkpoint(&path).unwrap();
    let g = checkpoint::load_generator(&path, &Device::Cpu).unwrap();
    let x = batch(20..21, 0.5);
    let a = t.generator().forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let b = g.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(a, b);
}

#[test]
fn restore_rejects_a_different_config() {
    let tmp = tempfile::tempdir().unwrap();
    let t = Trainer::new(&config(), &Device::Cpu).unwrap();
    let path = tmp.path().join("c.safetensors");
    t.save_checkpoint(&path).unwrap();
    let mut other = config();
    other.loss.lambda_fid = 2.0;
    let mut t2 = Trainer::new(&other, &Device::Cpu).unwrap();
    assert!(t2.restore(&path).is_err());
}
