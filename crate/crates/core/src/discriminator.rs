//! Multi-scale patch discriminator.
//!
//! A stack of strided 4x4 convolutions; score heads tap a shallow, a middle
//! and the last block so realism is judged at several receptive-field sizes.
//! Scores are raw (no output squashing) as required by the hinge losses.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{as_batch, leaky_relu, Conv2d, ParamBuilder, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub num_blocks: usize,
    pub num_scales: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            num_blocks: 5,
            num_scales: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_blocks == 0 {
            return Err(Error::Config("discriminator widths and depth must be positive".into()));
        }
        if self.num_scales == 0 || self.num_scales > self.num_blocks {
            return Err(Error::Config(format!(
                "num_scales must be in 1..={}, got {}",
                self.num_blocks, self.num_scales
            )));
        }
        Ok(())
    }

    /// Block indices (0-based) whose outputs feed a score head, shallow first.
    pub fn tap_blocks(&self) -> Vec<usize> {
        (1..=self.num_scales)
            .map(|i| (i * self.num_blocks).div_ceil(self.num_scales) - 1)
            .collect()
    }

    /// Smallest accepted spatial size (each block halves the resolution).
    pub fn min_input_size(&self) -> usize {
        1 << self.num_blocks
    }

    fn block_channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.base_channels * 8)
    }
}

/// Score maps, one per scale, coarsest last. Each map is `(B,1,h,w)`.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutputs {
    pub scores: Vec<Tensor>,
}

impl DiscriminatorOutputs {
    /// Spatial mean of each scale's map per sample: one `(B,)` tensor per scale.
    /// This is the scalar `D(x)` consumed by the relativistic losses.
    pub fn per_sample(&self) -> Result<Vec<Tensor>> {
        if self.scores.is_empty() {
            return Err(Error::Empty("discriminator outputs"));
        }
        self.scores
            .iter()
            .map(|s| {
                let (b, _, h, w) = s.dims4()?;
                Ok(s.reshape((b, h * w))?.mean(1)?)
            })
            .collect()
    }

    /// Mean of each scale's score map, in scale order.
    pub fn mean_scores(&self) -> Result<Vec<f64>> {
        if self.scores.is_empty() {
            return Err(Error::Empty("discriminator outputs"));
        }
        self.scores
            .iter()
            .map(|s| Ok(s.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?))
            .collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            scores: self.scores.iter().map(|s| s.detach()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    blocks: Vec<Conv2d>,
    heads: Vec<(usize, Conv2d)>,
}

impl Discriminator {
    pub fn new(config: &DiscriminatorConfig, seed: u64, device: &Device) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32, device)
    }

    pub fn with_dtype(config: &DiscriminatorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(seed, dtype, device);
        let mut blocks = Vec::with_capacity(config.num_blocks);
        let mut cin = 3;
        for i in 0..config.num_blocks {
            let cout = config.block_channels(i);
            blocks.push(Conv2d::new(&mut pb, &format!("block{i}"), cin, cout, 4, 2, 1, true)?);
            cin = cout;
        }
        let heads = config
            .tap_blocks()
            .into_iter()
            .enumerate()
            .map(|(s, b)| {
                let c = config.block_channels(b);
                // the relativistic losses only see score differences, so a head bias is dead
                Ok((b, Conv2d::new(&mut pb, &format!("head{s}"), c, 1, 3, 1, 1, false)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            params: pb.finish(),
            blocks,
            heads,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Validate and score an image batch (values in [0,1]).
    pub fn discriminate(&self, image: &Tensor) -> Result<DiscriminatorOutputs> {
        let (xs, _) = as_batch(image)?;
        let (_, c, h, w) = xs.dims4()?;
        let min = self.config.min_input_size();
        if c != 3 || h < min || w < min {
            return Err(Error::Shape(format!(
                "discriminator needs 3 channels and at least {min}x{min} pixels, got {c}x{h}x{w}"
            )));
        }
        crate::generator::check_unit_range(&xs)?;
        self.forward(&xs)
    }

    pub fn forward(&self, xs: &Tensor) -> Result<DiscriminatorOutputs> {
        let mut h = xs.clone();
        let mut scores = Vec::with_capacity(self.heads.len());
        let mut heads = self.heads.iter().peekable();
        for (i, block) in self.blocks.iter().enumerate() {
            h = leaky_relu(&block.forward(&h)?)?;
            while let Some((_, head)) = heads.next_if(|(b, _)| *b == i) {
                scores.push(head.forward(&h)?);
            }
        }
        Ok(DiscriminatorOutputs { scores })
    }
}
