//! Frozen VGG-19 feature extractor for the fidelity loss.
//!
//! Pretrained weights are read from a safetensors file using torchvision's
//! `features.<index>.{weight,bias}` naming. A seeded, He-initialized copy of the
//! same geometry (optionally narrowed by a width divisor) is available for
//! desk-scale runs and tests where the pretrained file is not at hand.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{as_batch, max_pool2x2};

pub const DEFAULT_LAYERS: [&str; 5] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"];
pub const NUM_LAYERS: usize = 5;
pub const WEIGHTS_ENV: &str = "UEGAN_VGG_WEIGHTS";

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// `(name, torchvision index, in, out, pool_before)` for VGG-19 up to conv5_1.
const VGG19: [(&str, usize, usize, usize, bool); 13] = [
    ("conv1_1", 0, 3, 64, false),
    ("conv1_2", 2, 64, 64, false),
    ("conv2_1", 5, 64, 128, true),
    ("conv2_2", 7, 128, 128, false),
    ("conv3_1", 10, 128, 256, true),
    ("conv3_2", 12, 256, 256, false),
    ("conv3_3", 14, 256, 256, false),
    ("conv3_4", 16, 256, 256, false),
    ("conv4_1", 19, 256, 512, true),
    ("conv4_2", 21, 512, 512, false),
    ("conv4_3", 23, 512, 512, false),
    ("conv4_4", 25, 512, 512, false),
    ("conv5_1", 28, 512, 512, true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightsSource {
    /// Pretrained safetensors file; `sha256` pins its content when given.
    File { path: PathBuf, sha256: Option<String> },
    /// Seeded He-normal weights; channel widths divided by `width_divisor`.
    Random { seed: u64, width_divisor: usize },
}

/// Activations at the configured layers, shallow first.
#[derive(Clone, Debug)]
pub struct PerceptualFeatures {
    pub layers: Vec<Tensor>,
}

#[derive(Clone, Debug)]
struct FrozenConv {
    weight: Tensor,
    bias: Tensor,
    pool_before: bool,
}

#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    convs: Vec<FrozenConv>,
    /// Conv index whose rectified output is tapped, one per layer.
    taps: Vec<usize>,
    mean: Tensor,
    std: Tensor,
}

fn tap_index(layer: &str) -> Result<usize> {
    let conv = layer
        .strip_prefix("relu")
        .map(|rest| format!("conv{rest}"))
        .ok_or_else(|| Error::Config(format!("unknown perceptual layer `{layer}`")))?;
    VGG19
        .iter()
        .position(|(n, ..)| *n == conv)
        .ok_or_else(|| Error::Config(format!("unknown perceptual layer `{layer}`")))
}

fn resolve_taps(layers: &[String]) -> Result<Vec<usize>> {
    if layers.len() != NUM_LAYERS {
        return Err(Error::Config(format!(
            "fidelity loss uses exactly {NUM_LAYERS} VGG layers, got {}",
            layers.len()
        )));
    }
    let taps = layers.iter().map(|l| tap_index(l)).collect::<Result<Vec<_>>>()?;
    if taps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("perceptual layers must be listed shallow to deep".into()));
    }
    Ok(taps)
}

pub fn default_layers() -> Vec<String> {
    DEFAULT_LAYERS.iter().map(|s| s.to_string()).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl PerceptualExtractor {
    pub fn new(source: &WeightsSource, layers: &[String], device: &Device) -> Result<Self> {
        let taps = resolve_taps(layers)?;
        let depth = *taps.last().unwrap() + 1;
        let convs = match source {
            WeightsSource::File { path, sha256 } => load_file(path, sha256.as_deref(), depth, device)?,
            WeightsSource::Random { seed, width_divisor } => random_convs(*seed, *width_divisor, depth, device)?,
        };
        Ok(Self {
            convs,
            taps,
            mean: Tensor::from_slice(&IMAGENET_MEAN, (1, 3, 1, 1), device)?,
            std: Tensor::from_slice(&IMAGENET_STD, (1, 3, 1, 1), device)?,
        })
    }

    /// Copy with every weight cast to `dtype` (used for f64 gradient checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let convs = self
            .convs
            .iter()
            .map(|c| {
                Ok(FrozenConv {
                    weight: c.weight.to_dtype(dtype)?,
                    bias: c.bias.to_dtype(dtype)?,
                    pool_before: c.pool_before,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            taps: self.taps.clone(),
            mean: self.mean.to_dtype(dtype)?,
            std: self.std.to_dtype(dtype)?,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.taps.len()
    }

    /// Extract features from `(C,H,W)` or `(B,C,H,W)` images in [0,1].
    pub fn extract(&self, image: &Tensor) -> Result<PerceptualFeatures> {
        let (xs, _) = as_batch(image)?;
        let mut h = xs
            .broadcast_sub(&self.mean.to_dtype(xs.dtype())?)?
            .broadcast_div(&self.std.to_dtype(xs.dtype())?)?;
        let mut layers = Vec::with_capacity(self.taps.len());
        let mut next_tap = self.taps.iter().peekable();
        for (i, conv) in self.convs.iter().enumerate() {
            if conv.pool_before {
                h = max_pool2x2(&h)?;
            }
            h = h
                .conv2d(&conv.weight, 1, 1, 1, 1)?
                .broadcast_add(&conv.bias.reshape((1, (), 1, 1))?)?
                .relu()?;
            if next_tap.next_if(|&&t| t == i).is_some() {
                layers.push(h.clone());
            }
        }
        Ok(PerceptualFeatures { layers })
    }
}

fn random_convs(seed: u64, width_divisor: usize, depth: usize, device: &Device) -> Result<Vec<FrozenConv>> {
    if width_divisor == 0 {
        return Err(Error::Config("perceptual width_divisor must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let narrow = |c: usize| if c == 3 { 3 } else { (c / width_divisor).max(1) };
    VGG19[..depth]
        .iter()
        .map(|&(_, _, cin, cout, pool_before)| {
            let (cin, cout) = (narrow(cin), narrow(cout));
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let dist = Normal::new(0.0f32, std as f32).map_err(|e| Error::Config(e.to_string()))?;
            let n = cout * cin * 9;
            let w: Vec<f32> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Ok(FrozenConv {
                weight: Tensor::from_vec(w, (cout, cin, 3, 3), device)?,
                bias: Tensor::zeros(cout, DType::F32, device)?,
                pool_before,
            })
        })
        .collect()
}

fn load_file(path: &Path, sha256: Option<&str>, depth: usize, device: &Device) -> Result<Vec<FrozenConv>> {
    if !path.exists() {
        return Err(Error::MissingWeights(path.to_path_buf()));
    }
    let sidecar = PathBuf::from(format!("{}.sha256", path.display()));
    let expected = match sha256 {
        Some(s) => Some(s.trim().to_lowercase()),
        None if sidecar.exists() => std::fs::read_to_string(&sidecar)
            .map_err(|e| Error::io(&sidecar, e))?
            .split_whitespace()
            .next()
            .map(str::to_lowercase),
        None => None,
    };
    if let Some(expected) = expected {
        let actual = sha256_file(path)?;
        if actual != expected {
            return Err(Error::Integrity(format!(
                "perceptual weights {} have sha256 {actual}, expected {expected}",
                path.display()
            )));
        }
    }
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(path, device)?;
    let fetch = |keys: [String; 2]| -> Result<Tensor> {
        keys.iter()
            .find_map(|k| tensors.get(k))
            .map(|t| t.to_dtype(DType::F32))
            .transpose()?
            .ok_or_else(|| Error::Config(format!("{} is missing tensor `{}`", path.display(), keys[0])))
    };
    VGG19[..depth]
        .iter()
        .map(|&(name, idx, cin, cout, pool_before)| {
            let weight = fetch([format!("features.{idx}.weight"), format!("{name}.weight")])?;
            let bias = fetch([format!("features.{idx}.bias"), format!("{name}.bias")])?;
            if weight.dims() != [cout, cin, 3, 3] || bias.dims() != [cout] {
                return Err(Error::Shape(format!(
                    "{name} in {} has shape {:?}, expected [{cout}, {cin}, 3, 3]",
                    path.display(),
                    weight.dims()
                )));
            }
            Ok(FrozenConv {
                weight,
                bias,
                pool_before,
            })
        })
        .collect()
}
