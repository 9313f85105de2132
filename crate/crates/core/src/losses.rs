//! Adversarial, fidelity and identity losses.
//!
//! Discriminator scores enter as per-sample vectors; every expectation is a
//! batch mean. The relativistic hinge terms compare each sample against the
//! mean score of the opposing population.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorOutputs;
use crate::error::{Error, Result};
use crate::perceptual::{PerceptualExtractor, PerceptualFeatures};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_qua: f64,
    pub lambda_fid: f64,
    pub lambda_idt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_qua: 0.05,
            lambda_fid: 1.0,
            lambda_idt: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_qua", self.lambda_qua),
            ("lambda_fid", self.lambda_fid),
            ("lambda_idt", self.lambda_idt),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the per-layer feature distance is aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityNorm {
    /// Mean of squared feature differences.
    #[default]
    MeanSquared,
    /// Square root of the per-sample mean squared difference.
    Rms,
}

/// The three generator loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorLossParts {
    pub quality: f64,
    pub fidelity: f64,
    pub identity: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub d_loss: f64,
    pub g_qua: f64,
    pub g_fid: f64,
    pub g_idt: f64,
    pub g_total: f64,
}

impl LossRecord {
    pub fn new(d_loss: f64, parts: GeneratorLossParts, weights: &LossWeights) -> Result<Self> {
        Ok(Self {
            d_loss,
            g_qua: parts.quality,
            g_fid: parts.fidelity,
            g_idt: parts.identity,
            g_total: total_g_loss(&parts, weights)?,
        })
    }

    pub fn parts(&self) -> GeneratorLossParts {
        GeneratorLossParts {
            quality: self.g_qua,
            fidelity: self.g_fid,
            identity: self.g_idt,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.d_loss, self.g_qua, self.g_fid, self.g_idt, self.g_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted sum of the generator terms.
pub fn total_g_loss(parts: &GeneratorLossParts, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("quality", parts.quality),
        ("fidelity", parts.fidelity),
        ("identity", parts.identity),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(weights.lambda_qua * parts.quality + weights.lambda_fid * parts.fidelity + weights.lambda_idt * parts.identity)
}

fn scores_1d(t: &Tensor, what: &str) -> Result<Tensor> {
    let flat = t.flatten_all()?;
    if flat.elem_count() == 0 {
        return Err(Error::Shape(format!("{what}: empty score vector")));
    }
    Ok(flat)
}

/// `E[max(0, 1 + sign * (x - mean_other))]` for a score vector `x`.
fn hinge(x: &Tensor, mean_other: &Tensor, sign: f64) -> Result<Tensor> {
    let rel = x.broadcast_sub(mean_other)?;
    Ok(((rel * sign)? + 1.0)?.relu()?.mean_all()?)
}

/// Discriminator loss over real-low, real-high and generated score vectors.
pub fn d_loss(d_low: &Tensor, d_high: &Tensor, d_gen: &Tensor) -> Result<Tensor> {
    let (low, high, gen) = (
        scores_1d(d_low, "low")?,
        scores_1d(d_high, "high")?,
        scores_1d(d_gen, "generated")?,
    );
    let (m_low, m_high, m_gen) = (low.mean_all()?, high.mean_all()?, gen.mean_all()?);
    let l_low = hinge(&low, &m_high, 1.0)?;
    let l_high_vs_low = hinge(&high, &m_low, -1.0)?;
    let l_gen = hinge(&gen, &m_high, 1.0)?;
    let l_high_vs_gen = hinge(&high, &m_gen, -1.0)?;
    Ok((((l_low + l_high_vs_low)? + l_gen)? + l_high_vs_gen)?)
}

/// Generator quality loss: the real-high / generated roles swapped.
pub fn g_quality_loss(d_high: &Tensor, d_gen: &Tensor) -> Result<Tensor> {
    let (high, gen) = (scores_1d(d_high, "high")?, scores_1d(d_gen, "generated")?);
    let (m_high, m_gen) = (high.mean_all()?, gen.mean_all()?);
    Ok((hinge(&high, &m_gen, 1.0)? + hinge(&gen, &m_high, -1.0)?)?)
}

fn check_scales(a: &DiscriminatorOutputs, b: &DiscriminatorOutputs) -> Result<usize> {
    let n = a.scores.len();
    if n == 0 || n != b.scores.len() {
        return Err(Error::Shape(format!(
            "scale count mismatch: {} vs {}",
            n,
            b.scores.len()
        )));
    }
    Ok(n)
}

/// Per-scale discriminator losses averaged with equal weights.
pub fn multiscale_d_loss(
    low: &DiscriminatorOutputs,
    high: &DiscriminatorOutputs,
    gen: &DiscriminatorOutputs,
) -> Result<Tensor> {
    let n = check_scales(low, high)?;
    check_scales(high, gen)?;
    let (low, high, gen) = (low.per_sample()?, high.per_sample()?, gen.per_sample()?);
    let terms = (0..n)
        .map(|s| d_loss(&low[s], &high[s], &gen[s]))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n as f64)?)
}

/// Per-scale generator quality losses averaged with equal weights.
pub fn multiscale_g_quality_loss(high: &DiscriminatorOutputs, gen: &DiscriminatorOutputs) -> Result<Tensor> {
    let n = check_scales(high, gen)?;
    let (high, gen) = (high.per_sample()?, gen.per_sample()?);
    let terms = (0..n)
        .map(|s| g_quality_loss(&high[s], &gen[s]))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n as f64)?)
}

/// Sum over layers of the batch-averaged feature distance.
pub fn fidelity_from_features(a: &PerceptualFeatures, b: &PerceptualFeatures, norm: FidelityNorm) -> Result<Tensor> {
    if a.layers.len() != b.layers.len() || a.layers.is_empty() {
        return Err(Error::Shape("feature layer counts differ".into()));
    }
    let mut terms = Vec::with_capacity(a.layers.len());
    for (fa, fb) in a.layers.iter().zip(&b.layers) {
        if fa.dims() != fb.dims() {
            return Err(Error::Shape(format!(
                "feature shapes differ: {:?} vs {:?}",
                fa.dims(),
                fb.dims()
            )));
        }
        let batch = fa.dim(0)?;
        let sq = (fa - fb)?.sqr()?.reshape((batch, ()))?;
        let term = match norm {
            FidelityNorm::MeanSquared => sq.mean_all()?,
            FidelityNorm::Rms => sq.mean(1)?.sqrt()?.mean_all()?,
        };
        terms.push(term);
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}

/// Feature-space distance between the input and enhanced images.
pub fn fidelity_loss(
    extractor: &PerceptualExtractor,
    x_low: &Tensor,
    x_gen: &Tensor,
    norm: FidelityNorm,
) -> Result<Tensor> {
    if x_low.dims() != x_gen.dims() {
        return Err(Error::Shape(format!(
            "fidelity inputs differ in shape: {:?} vs {:?}",
            x_low.dims(),
            x_gen.dims()
        )));
    }
    let fa = extractor.extract(x_low)?;
    let fb = extractor.extract(x_gen)?;
    fidelity_from_features(&fa, &fb, norm)
}

/// Mean absolute deviation between a high-quality image and its own enhancement.
pub fn identity_loss(x_high: &Tensor, g_of_high: &Tensor) -> Result<Tensor> {
    if x_high.dims() != g_of_high.dims() {
        return Err(Error::Shape(format!(
            "identity inputs differ in shape: {:?} vs {:?}",
            x_high.dims(),
            g_of_high.dims()
        )));
    }
    Ok((x_high - g_of_high)?.abs()?.mean_all()?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
