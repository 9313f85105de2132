//! Minimal layer toolkit on top of candle.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that models can
//! be compared by inventory, checkpointed, and transplanted between variants.
//! Initialization draws from a seeded ChaCha stream, which keeps model
//! construction reproducible across runs.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Ordered collection of named trainable variables.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite the value of `name` with `value` (shapes must agree).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no parameter named `{name}`")))?;
        if var.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// Copy every parameter that also exists in `other` (same name).
    pub fn copy_from(&self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in other.iter() {
            if self.get(name).is_some() {
                self.set(name, var.as_tensor())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Order-sensitive digest of every parameter's bytes.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, var) in self.iter() {
            hasher.update(name.as_bytes());
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            for v in values.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Builds parameters into a store while drawing initial values from a seeded stream.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    fn push(&mut self, name: &str, tensor: Tensor) -> Result<Var> {
        if self.store.get(name).is_some() {
            return Err(Error::Shape(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?)?;
        self.store.entries.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, dims: &[usize], std: f64) -> Result<Var> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(values, dims, &self.device)?;
        self.push(name, t)
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<Var> {
        let t = Tensor::zeros(dims, DType::F64, &self.device)?;
        self.push(name, t)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = pb.normal(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], INIT_STD)?;
        let bias = if bias {
            Some(pb.zeros(&format!("{name}.bias"), &[out_ch])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let ys = xs.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(ys.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(ys),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.normal(&format!("{name}.weight"), &[out_dim, in_dim], INIT_STD)?;
        let bias = pb.zeros(&format!("{name}.bias"), &[out_dim])?;
        Ok(Self { weight, bias })
    }

    /// `xs` is `(batch, in_dim)`.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let ys = xs.matmul(&self.weight.as_tensor().t()?)?;
        Ok(ys.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Per-sample, per-channel normalization over the spatial dims (no affine).
pub fn instance_norm(xs: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    let flat = xs.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

pub fn leaky_relu(xs: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(xs, LEAKY_SLOPE)?)
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
///
/// Built from a reshape and two max reductions so the backward pass routes
/// the full upstream gradient to each window maximum; candle's fused
/// `max_pool2d` backward scales it by the window's argmax density instead.
pub fn max_pool2x2(xs: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let xs = xs.narrow(2, 0, oh * 2)?.narrow(3, 0, ow * 2)?.contiguous()?;
    Ok(xs.reshape((b, c, oh, 2, ow, 2))?.max(5)?.max(3)?)
}

/// Promote `(C,H,W)` to `(1,C,H,W)`; returns whether a batch dim was added.
pub(crate) fn as_batch(xs: &Tensor) -> Result<(Tensor, bool)> {
    match xs.rank() {
        3 => Ok((xs.unsqueeze(0)?, true)),
        4 => Ok((xs.clone(), false)),
        r => Err(Error::Shape(format!("expected a CxHxW or BxCxHxW tensor, got rank {r}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_reproducible() {
        let dev = Device::Cpu;
        let mut a = ParamBuilder::new(7, DType::F32, &dev);
        let mut b = ParamBuilder::new(7, DType::F32, &dev);
        a.normal("w", &[4, 3], 0.02).unwrap();
        b.normal("w", &[4, 3], 0.02).unwrap();
        assert_eq!(a.finish().digest().unwrap(), b.finish().digest().unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut pb = ParamBuilder::new(0, DType::F32, &Device::Cpu);
        pb.zeros("x", &[2]).unwrap();
        assert!(pb.zeros("x", &[2]).is_err());
    }

    #[test]
    fn max_pool_values_and_gradient() {
        let dev = Device::Cpu;
        let x = Var::new(&[[[[1.0f64, 5.0, 2.0], [3.0, 4.0, 0.0], [9.0, 9.0, 9.0]]]], &dev).unwrap();
        let y = max_pool2x2(x.as_tensor()).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![5.0]);
        let g = (y * 3.0).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(gx, vec![0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let xs = Tensor::arange(0f32, 32., &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 4, 4))
            .unwrap();
        let ys = instance_norm(&xs).unwrap();
        let flat = ys.reshape((2, 16)).unwrap();
        let means = flat.mean(1).unwrap().to_vec1::<f32>().unwrap();
        let vars = flat.sqr().unwrap().mean(1).unwrap().to_vec1::<f32>().unwrap();
        for (m, v) in means.iter().zip(vars) {
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
