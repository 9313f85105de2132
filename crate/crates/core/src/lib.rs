//! Unsupervised image enhancement with a GAN: an attention U-Net generator,
//! a multi-scale discriminator trained with relativistic hinge losses,
//! perceptual fidelity and identity regularization, plus data handling,
//! training, evaluation and a CLI.

pub mod cli;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod perceptual;
pub mod trainer;

pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorOutputs};
pub use error::{Error, Result};
pub use evaluator::{evaluate, psnr, ssim, MetricsReport};
pub use generator::{Enhancer, Generator, GeneratorConfig, IdentityEnhancer, Variant};
pub use losses::{LossRecord, LossWeights};
pub use perceptual::{PerceptualExtractor, WeightsSource};
pub use trainer::{lr_at, TrainConfig, Trainer};
