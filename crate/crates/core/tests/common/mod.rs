//! Toy data shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use candle_core::{Device, Tensor};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uegan_core::trainer::TrainConfig;

/// Smooth colored pattern with values in [0,1]; `gain` < 1 darkens it.
pub fn pattern(seed: u64, h: usize, w: usize, gain: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f32; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.02..0.2),
                rng.random_range(0.02..0.2),
                rng.random_range(0.0..6.28),
                rng.random_range(0.2..0.5),
            ]
        })
        .collect();
    let mut out = vec![0f32; 3 * h * w];
    for c in 0..3 {
        let [fy, fx, phase, amp] = waves[c];
        for y in 0..h {
            for x in 0..w {
                let v = 0.5 + amp * (fy * y as f32 + fx * x as f32 + phase).sin();
                out[c * h * w + y * w + x] = (v * gain).clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn pattern_tensor(seed: u64, h: usize, w: usize, gain: f32) -> Tensor {
    Tensor::from_vec(pattern(seed, h, w, gain), (3, h, w), &Device::Cpu).unwrap()
}

fn to_png(data: &[f32], h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (data[c * h * w + y as usize * w + x as usize] * 255.0).round() as u8;
        Rgb([at(0), at(1), at(2)])
    })
}

/// Write `n` paired images under `<root>/raw` (dark) and `<root>/expertC` (bright).
pub fn write_corpus(root: &Path, n: usize, h: usize, w: usize) {
    for (dir, gain) in [("raw", 0.55f32), ("expertC", 1.0)] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..n {
            to_png(&pattern(i as u64, h, w, gain), h, w)
                .save(d.join(format!("img{i:03}.png")))
                .unwrap();
        }
    }
}

/// Small, fast configuration over a toy corpus.
pub fn toy_config(root: &Path, out: &Path) -> TrainConfig {
    let text = format!(
        r#"
[train]
epochs = 5
decay_start = 3
lr = 0.0002
batch_size = 2
crop = 32
seed = 7
steps_per_epoch = 2

[model]
base_channels = 4
disc_base_channels = 4

[perceptual]
random_init = true
width_divisor = 16

[data]
root = "{}"
out_dir = "{}"
long_side = 48
"#,
        root.display(),
        out.display()
    );
    TrainConfig::from_toml(&text).unwrap()
}
