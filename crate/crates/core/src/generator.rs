//! Joint global and local generator.
//!
//! A four-stage encoder/decoder with skip connections. A global attention
//! module sits on the bottleneck and a modulation module fuses first-stage
//! encoder features with the penultimate decoder features right before the
//! output layer. The ablation variants swap or drop those two pieces.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{as_batch, instance_norm, leaky_relu, Conv2d, Linear, ParamBuilder, ParamStore};

pub const NUM_STAGES: usize = 4;
/// Reduction factor of the attention bottleneck (`C -> C/8 -> C`).
pub const GAM_SQUEEZE: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoGam,
    NoGamNoMm,
    GamUnet,
    GamMmPixel,
}

/// How the penultimate decoder features reach the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Modulation,
    Concat,
    PixelModulation,
    Plain,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoGam,
        Variant::NoGamNoMm,
        Variant::GamUnet,
        Variant::GamMmPixel,
    ];

    pub fn has_gam(self) -> bool {
        matches!(self, Variant::Full | Variant::GamUnet | Variant::GamMmPixel)
    }

    pub fn fusion(self) -> Fusion {
        match self {
            Variant::Full | Variant::NoGam => Fusion::Modulation,
            Variant::NoGamNoMm => Fusion::Plain,
            Variant::GamUnet => Fusion::Concat,
            Variant::GamMmPixel => Fusion::PixelModulation,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGam => "no_gam",
            Variant::NoGamNoMm => "no_gam_no_mm",
            Variant::GamUnet => "gam_unet",
            Variant::GamMmPixel => "gam_mm_pixel",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub num_stages: usize,
    pub variant: Variant,
    pub input_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            num_stages: NUM_STAGES,
            variant: Variant::Full,
            input_channels: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn with_variant(variant: Variant, base_channels: usize) -> Self {
        Self {
            base_channels,
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages != NUM_STAGES {
            return Err(Error::Config(format!(
                "num_stages must be {NUM_STAGES}, got {}",
                self.num_stages
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.input_channels != 3 {
            return Err(Error::Config(format!(
                "input_channels must be 3 (RGB), got {}",
                self.input_channels
            )));
        }
        Ok(())
    }

    /// Channel width of encoder stage `i` (doubling per stage).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Inputs must be divisible by this on both spatial axes.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.num_stages
    }
}

/// Encoder stage outputs (finest first) plus the bottleneck.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
    pub bottleneck: Tensor,
}

#[derive(Clone, Debug)]
pub struct GlobalAttentionState {
    /// `(B, C)` spatial mean per channel.
    pub g_mean: Tensor,
    /// `(B, C)` inter-channel response.
    pub rho: Tensor,
}

/// Conv -> instance norm -> leaky rectifier.
#[derive(Clone, Debug)]
struct ConvNormAct {
    conv: Conv2d,
}

impl ConvNormAct {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        // bias is cancelled by the normalization, so none is allocated
        let conv = Conv2d::new(pb, name, cin, cout, 3, stride, 1, false)?;
        Ok(Self { conv })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        leaky_relu(&instance_norm(&self.conv.forward(xs)?)?)
    }

    fn forward_no_act(&self, xs: &Tensor) -> Result<Tensor> {
        instance_norm(&self.conv.forward(xs)?)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    first: ConvNormAct,
    second: ConvNormAct,
}

impl EncoderStage {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.second.forward(&self.first.forward(xs)?)
    }
}

/// Upsample, convolve, concatenate the skip, convolve again.
///
/// Blocks are pre-activated: the rectifier is applied to the block input, so
/// the output of the previous block (or the attention module) feeds a
/// nonlinearity before the next normalization.
#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvNormAct,
    merge: ConvNormAct,
}

impl DecoderStage {
    fn forward(&self, xs: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = xs.dims4()?;
        let up = leaky_relu(xs)?.upsample_nearest2d(h * 2, w * 2)?;
        let up = self.up.forward(&up)?;
        let cat = Tensor::cat(&[&up, skip], 1)?;
        self.merge.forward_no_act(&cat)
    }
}

/// Global attention: channel means -> two FC layers -> expand, concat, 1x1 conv.
#[derive(Clone, Debug)]
pub struct GlobalAttention {
    fc1: Linear,
    fc2: Linear,
    fuse: Conv2d,
    channels: usize,
}

impl GlobalAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        let hidden = (channels / GAM_SQUEEZE).max(1);
        Ok(Self {
            fc1: Linear::new(pb, &format!("{name}.fc1"), channels, hidden)?,
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, channels)?,
            fuse: Conv2d::new(pb, &format!("{name}.fuse"), 2 * channels, channels, 1, 1, 0, true)?,
            channels,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_state(z)?.0)
    }

    pub fn forward_with_state(&self, z: &Tensor) -> Result<(Tensor, GlobalAttentionState)> {
        let (z, unbatched) = as_batch(z)?;
        let (b, c, h, w) = z.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "attention expects {} channels, got {c}",
                self.channels
            )));
        }
        let g_mean = z.reshape((b, c, h * w))?.mean(D::Minus1)?;
        let rho = self.fc2.forward(&self.fc1.forward(&g_mean)?.relu()?)?;
        let expanded = rho.reshape((b, c, 1, 1))?.broadcast_as((b, c, h, w))?;
        let cat = Tensor::cat(&[&expanded, &z], 1)?;
        let mut out = self.fuse.forward(&cat)?;
        if unbatched {
            out = out.squeeze(0)?;
        }
        Ok((out, GlobalAttentionState { g_mean, rho }))
    }
}

/// Two learned branches merged by element-wise multiplication.
#[derive(Clone, Debug)]
pub struct Modulation {
    early: Conv2d,
    late: Conv2d,
}

impl Modulation {
    pub fn new(pb: &mut ParamBuilder, name: &str, early_ch: usize, late_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            early: Conv2d::new(pb, &format!("{name}.early"), early_ch, out_ch, 3, 1, 1, true)?,
            late: Conv2d::new(pb, &format!("{name}.late"), late_ch, out_ch, 3, 1, 1, true)?,
        })
    }

    pub fn branches(&self, early: &Tensor, late: &Tensor) -> Result<(Tensor, Tensor)> {
        let (e, l) = (early.dims(), late.dims());
        if e.len() != l.len() || e.len() < 2 || e[e.len() - 2..] != l[l.len() - 2..] {
            return Err(Error::Shape(format!(
                "modulation branches need matching spatial dims, got {e:?} and {l:?}"
            )));
        }
        let (early, unbatched) = as_batch(early)?;
        let (late, _) = as_batch(late)?;
        let (mut a, mut b) = (self.early.forward(&early)?, self.late.forward(&late)?);
        if unbatched {
            a = a.squeeze(0)?;
            b = b.squeeze(0)?;
        }
        Ok((a, b))
    }

    pub fn forward(&self, early: &Tensor, late: &Tensor) -> Result<Tensor> {
        let (a, b) = self.branches(early, late)?;
        Ok((a * b)?)
    }
}

#[derive(Clone, Debug)]
enum Head {
    Modulated(Modulation),
    Concat,
    Pixel,
    Plain,
}

/// The enhancement generator.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    encoder: Vec<EncoderStage>,
    bottleneck: EncoderStage,
    attention: Option<GlobalAttention>,
    decoder: Vec<DecoderStage>,
    head: Head,
    out: Conv2d,
}

impl Generator {
    pub fn new(config: &GeneratorConfig, seed: u64, device: &Device) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32, device)
    }

    pub fn with_dtype(config: &GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(seed, dtype, device);
        let ch = |i| config.stage_channels(i);

        let mut encoder = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let (cin, stride) = if i == 0 { (config.input_channels, 1) } else { (ch(i - 1), 2) };
            encoder.push(EncoderStage {
                first: ConvNormAct::new(&mut pb, &format!("enc.{i}.conv1"), cin, ch(i), stride)?,
                second: ConvNormAct::new(&mut pb, &format!("enc.{i}.conv2"), ch(i), ch(i), 1)?,
            });
        }
        let deepest = ch(NUM_STAGES - 1);
        let bottleneck = EncoderStage {
            first: ConvNormAct::new(&mut pb, "bottleneck.conv1", deepest, deepest, 2)?,
            second: ConvNormAct::new(&mut pb, "bottleneck.conv2", deepest, deepest, 1)?,
        };
        let attention = if config.variant.has_gam() {
            Some(GlobalAttention::new(&mut pb, "gam", deepest)?)
        } else {
            None
        };

        let mut decoder = Vec::with_capacity(NUM_STAGES);
        let mut cin = deepest;
        for (j, i) in (0..NUM_STAGES).rev().enumerate() {
            decoder.push(DecoderStage {
                up: ConvNormAct::new(&mut pb, &format!("dec.{j}.up"), cin, ch(i), 1)?,
                merge: ConvNormAct::new(&mut pb, &format!("dec.{j}.merge"), 2 * ch(i), ch(i), 1)?,
            });
            cin = ch(i);
        }

        let c0 = ch(0);
        let out_ch = config.input_channels;
        let (head, out) = match config.variant.fusion() {
            Fusion::Modulation => {
                let mm = Modulation::new(&mut pb, "mm", c0, c0, c0)?;
                (Head::Modulated(mm), Conv2d::new(&mut pb, "out", c0, out_ch, 3, 1, 1, true)?)
            }
            Fusion::Concat => (Head::Concat, Conv2d::new(&mut pb, "out", 2 * c0, out_ch, 3, 1, 1, true)?),
            Fusion::PixelModulation => (Head::Pixel, Conv2d::new(&mut pb, "out", c0, out_ch, 3, 1, 1, true)?),
            Fusion::Plain => (Head::Plain, Conv2d::new(&mut pb, "out", c0, out_ch, 3, 1, 1, true)?),
        };

        Ok(Self {
            config: config.clone(),
            params: pb.finish(),
            encoder,
            bottleneck,
            attention,
            decoder,
            head,
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn attention(&self) -> Option<&GlobalAttention> {
        self.attention.as_ref()
    }

    pub fn modulation(&self) -> Option<&Modulation> {
        match &self.head {
            Head::Modulated(m) => Some(m),
            _ => None,
        }
    }

    fn check_input(&self, xs: &Tensor) -> Result<()> {
        let (_, c, h, w) = xs.dims4()?;
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::NotDivisible {
                height: h,
                width: w,
                multiple: m,
            });
        }
        Ok(())
    }

    /// Run the encoder; `image` is `(C,H,W)` or `(B,C,H,W)` in [0,1].
    pub fn encode(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (xs, _) = as_batch(image)?;
        self.check_input(&xs)?;
        check_unit_range(&xs)?;
        self.encode_unchecked(&xs)
    }

    fn encode_unchecked(&self, xs: &Tensor) -> Result<FeaturePyramid> {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut h = xs.clone();
        for stage in &self.encoder {
            h = stage.forward(&h)?;
            stages.push(h.clone());
        }
        let bottleneck = self.bottleneck.forward(&h)?;
        Ok(FeaturePyramid { stages, bottleneck })
    }

    /// Forward pass without input validation; used by training where batches
    /// are known to be well-formed.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let pyramid = self.encode_unchecked(xs)?;
        let mut h = match &self.attention {
            Some(gam) => gam.forward(&pyramid.bottleneck)?,
            None => pyramid.bottleneck.clone(),
        };
        for (stage, skip) in self.decoder.iter().zip(pyramid.stages.iter().rev()) {
            h = stage.forward(&h, skip)?;
        }
        let penultimate = leaky_relu(&h)?;
        let early = &pyramid.stages[0];
        match &self.head {
            Head::Modulated(mm) => {
                let fused = mm.forward(early, &penultimate)?;
                Ok(candle_nn::ops::sigmoid(&self.out.forward(&fused)?)?)
            }
            Head::Concat => {
                let cat = Tensor::cat(&[early, &penultimate], 1)?;
                Ok(candle_nn::ops::sigmoid(&self.out.forward(&cat)?)?)
            }
            Head::Pixel => {
                // gain in (0, 2) applied to the input pixels; identity at init
                let gain = (candle_nn::ops::sigmoid(&self.out.forward(&penultimate)?)? * 2.0)?;
                Ok((xs * gain)?.clamp(0f32, 1f32)?)
            }
            Head::Plain => Ok(candle_nn::ops::sigmoid(&self.out.forward(&penultimate)?)?),
        }
    }

    /// Enhance a preprocessed image (`(C,H,W)` or batched), validating range and size.
    pub fn enhance(&self, image: &Tensor) -> Result<Tensor> {
        let (xs, unbatched) = as_batch(image)?;
        self.check_input(&xs)?;
        check_unit_range(&xs)?;
        let ys = self.forward(&xs)?;
        Ok(if unbatched { ys.squeeze(0)? } else { ys })
    }

    /// Enhance an image of any size by replicate-padding to the required
    /// multiple and cropping the result back.
    pub fn enhance_any_size(&self, image: &Tensor) -> Result<Tensor> {
        let (xs, unbatched) = as_batch(image)?;
        check_unit_range(&xs)?;
        let (_, _, h, w) = xs.dims4()?;
        let m = self.config.spatial_multiple();
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let padded = xs.pad_with_same(2, 0, ph)?.pad_with_same(3, 0, pw)?;
        let ys = self.enhance(&padded)?.narrow(2, 0, h)?.narrow(3, 0, w)?;
        Ok(if unbatched { ys.squeeze(0)? } else { ys })
    }
}

pub(crate) fn check_unit_range(xs: &Tensor) -> Result<()> {
    let flat = xs.flatten_all()?.to_dtype(DType::F32)?;
    let min = flat.min(0)?.to_scalar::<f32>()?;
    let max = flat.max(0)?.to_scalar::<f32>()?;
    if !(min >= 0.0 && max <= 1.0) {
        return Err(Error::Range { min, max });
    }
    Ok(())
}

/// Anything that maps a `(3,H,W)` image in [0,1] to an enhanced image of the same shape.
pub trait Enhancer {
    fn enhance_image(&self, image: &Tensor) -> Result<Tensor>;
}

impl Enhancer for Generator {
    fn enhance_image(&self, image: &Tensor) -> Result<Tensor> {
        self.enhance_any_size(image)
    }
}

/// Returns its input unchanged; the "Input" baseline row of an evaluation.
pub struct IdentityEnhancer;

impl Enhancer for IdentityEnhancer {
    fn enhance_image(&self, image: &Tensor) -> Result<Tensor> {
        Ok(image.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    fn toy(variant: Variant) -> Generator {
        Generator::new(&GeneratorConfig::with_variant(variant, 4), 3, &dev()).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("nope".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn config_rejects_other_stage_counts() {
        let cfg = GeneratorConfig {
            num_stages: 3,
            ..GeneratorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_pyramid_dims() {
        let g = toy(Variant::Full);
        let x = Tensor::full(0.5f32, (3, 64, 48), &dev()).unwrap();
        let p = g.encode(&x).unwrap();
        let dims: Vec<_> = p.stages.iter().map(|s| s.dims4().unwrap()).collect();
        assert_eq!(dims, vec![(1, 4, 64, 48), (1, 8, 32, 24), (1, 16, 16, 12), (1, 32, 8, 6)]);
        assert_eq!(p.bottleneck.dims4().unwrap(), (1, 32, 4, 3));
    }

    #[test]
    fn encode_rejects_indivisible() {
        let g = toy(Variant::Full);
        let x = Tensor::zeros((3, 255, 255), DType::F32, &dev()).unwrap();
        let err = g.encode(&x).unwrap_err();
        assert!(err.to_string().contains("multiples of 16"), "{err}");
    }

    #[test]
    fn enhance_rejects_out_of_range() {
        let g = toy(Variant::Full);
        let x = Tensor::full(1.5f32, (3, 16, 16), &dev()).unwrap();
        assert!(matches!(g.enhance(&x), Err(Error::Range { .. })));
    }

    #[test]
    fn enhance_any_size_keeps_shape() {
        let g = toy(Variant::NoGam);
        let x = Tensor::full(0.25f32, (3, 21, 37), &dev()).unwrap();
        assert_eq!(g.enhance_any_size(&x).unwrap().dims(), &[3, 21, 37]);
    }

    #[test]
    fn modulation_rejects_spatial_mismatch() {
        let g = toy(Variant::Full);
        let mm = g.modulation().unwrap();
        let a = Tensor::zeros((1, 4, 8, 8), DType::F32, &dev()).unwrap();
        let b = Tensor::zeros((1, 4, 4, 8), DType::F32, &dev()).unwrap();
        assert!(mm.forward(&a, &b).is_err());
    }

    #[test]
    fn pixel_variant_is_identity_with_zero_gain_conv() {
        let g = toy(Variant::GamMmPixel);
        for name in ["out.weight", "out.bias"] {
            let v = g.params().get(name).unwrap();
            g.params().set(name, &v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let x = Tensor::rand(0f32, 1f32, (1, 3, 32, 32), &dev()).unwrap();
        let y = g.enhance(&x).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }
}
