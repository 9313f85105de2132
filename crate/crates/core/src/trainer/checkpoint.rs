//! Self-describing training checkpoints.
//!
//! One safetensors file holds generator and discriminator weights, both Adam
//! states, and a string metadata table (epoch, step, config hash, model
//! geometry). A sha256 over every stored tensor is kept in the metadata and
//! re-verified on load.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, Variant};
use crate::nn::ParamStore;

pub const FORMAT_TAG: &str = "uegan-checkpoint-1";

const G_PREFIX: &str = "G/";
const D_PREFIX: &str = "D/";
const OPT_G_PREFIX: &str = "optG/";
const OPT_D_PREFIX: &str = "optD/";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimization steps.
    pub step: u64,
    pub config_hash: String,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
}

/// A checkpoint read back from disk; tensors keyed without their section prefix.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub generator: Vec<(String, Tensor)>,
    pub discriminator: Vec<(String, Tensor)>,
    pub opt_g: Vec<(String, Tensor)>,
    pub opt_d: Vec<(String, Tensor)>,
}

fn digest<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (name, t) in sorted {
        h.update(name.as_bytes());
        h.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn params_with_prefix(prefix: &str, params: &ParamStore) -> Vec<(String, Tensor)> {
    params
        .iter()
        .map(|(n, v)| (format!("{prefix}{n}"), v.as_tensor().clone()))
        .collect()
}

/// Write a checkpoint atomically (temporary file, then rename).
pub fn save(
    path: &Path,
    meta: &CheckpointMeta,
    generator: &Generator,
    discriminator: &Discriminator,
    opt_g: &super::Adam,
    opt_d: &super::Adam,
) -> Result<()> {
    let mut tensors = params_with_prefix(G_PREFIX, generator.params());
    tensors.extend(params_with_prefix(D_PREFIX, discriminator.params()));
    tensors.extend(opt_g.state().into_iter().map(|(k, t)| (format!("{OPT_G_PREFIX}{k}"), t)));
    tensors.extend(opt_d.state().into_iter().map(|(k, t)| (format!("{OPT_D_PREFIX}{k}"), t)));

    let sum = digest(tensors.iter().map(|(k, t)| (k.as_str(), t)))?;
    let g = &meta.generator;
    let d = &meta.discriminator;
    let info: HashMap<String, String> = [
        ("format", FORMAT_TAG.to_string()),
        ("epoch", meta.epoch.to_string()),
        ("step", meta.step.to_string()),
        ("config_hash", meta.config_hash.clone()),
        ("seed", meta.seed.to_string()),
        ("g_variant", g.variant.to_string()),
        ("g_base_channels", g.base_channels.to_string()),
        ("g_num_stages", g.num_stages.to_string()),
        ("g_input_channels", g.input_channels.to_string()),
        ("d_base_channels", d.base_channels.to_string()),
        ("d_num_blocks", d.num_blocks.to_string()),
        ("d_num_scales", d.num_scales.to_string()),
        ("adam_g_step", meta.adam_g_step.to_string()),
        ("adam_d_step", meta.adam_d_step.to_string()),
        ("payload_sha256", sum),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(info))
        .map_err(|e| Error::Integrity(format!("serialize: {e}")))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn field<T: std::str::FromStr>(info: &HashMap<String, String>, key: &str) -> Result<T> {
    info.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Integrity(format!("missing or malformed metadata `{key}`")))
}

/// Read and verify a checkpoint.
pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: &dyn std::fmt::Display| Error::Integrity(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(&e))?;
    let info = header.metadata().clone().unwrap_or_default();
    if info.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(bad(&"not a uegan checkpoint"));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device).map_err(|e| bad(&e))?;
    let expected: String = field(&info, "payload_sha256")?;
    let actual = digest(tensors.iter().map(|(k, t)| (k.as_str(), t)))?;
    if actual != expected {
        return Err(bad(&"payload checksum mismatch"));
    }

    let variant: Variant = info
        .get("g_variant")
        .ok_or_else(|| bad(&"missing generator variant"))?
        .parse()
        .map_err(|e: Error| bad(&e))?;
    let meta = CheckpointMeta {
        epoch: field(&info, "epoch")?,
        step: field(&info, "step")?,
        config_hash: field(&info, "config_hash")?,
        seed: field(&info, "seed")?,
        generator: GeneratorConfig {
            base_channels: field(&info, "g_base_channels")?,
            num_stages: field(&info, "g_num_stages")?,
            variant,
            input_channels: field(&info, "g_input_channels")?,
        },
        discriminator: DiscriminatorConfig {
            base_channels: field(&info, "d_base_channels")?,
            num_blocks: field(&info, "d_num_blocks")?,
            num_scales: field(&info, "d_num_scales")?,
        },
        adam_g_step: field(&info, "adam_g_step")?,
        adam_d_step: field(&info, "adam_d_step")?,
    };

    let mut ckpt = Checkpoint {
        meta,
        generator: Vec::new(),
        discriminator: Vec::new(),
        opt_g: Vec::new(),
        opt_d: Vec::new(),
    };
    let mut names: Vec<_> = tensors.into_iter().collect();
    names.sort_by(|a, b| a.0.cmp(&b.0));
    for (key, t) in names {
        let slot = [
            (G_PREFIX, &mut ckpt.generator),
            (D_PREFIX, &mut ckpt.discriminator),
            (OPT_G_PREFIX, &mut ckpt.opt_g),
            (OPT_D_PREFIX, &mut ckpt.opt_d),
        ]
        .into_iter()
        .find_map(|(p, v)| key.strip_prefix(p).map(|rest| (rest.to_string(), v)));
        match slot {
            Some((name, v)) => v.push((name, t)),
            None => return Err(bad(&format!("unexpected tensor `{key}`"))),
        }
    }
    Ok(ckpt)
}

/// Copy stored values into `params`; every parameter must be present.
pub fn restore_params(params: &ParamStore, stored: &[(String, Tensor)], what: &str) -> Result<()> {
    if stored.len() != params.len() {
        return Err(Error::Integrity(format!(
            "{what}: checkpoint has {} tensors, model has {}",
            stored.len(),
            params.len()
        )));
    }
    for (name, t) in stored {
        if params.get(name).is_none() {
            return Err(Error::Integrity(format!("{what}: unknown parameter `{name}`")));
        }
        params.set(name, t)?;
    }
    Ok(())
}

/// Build a generator from a checkpoint file (for inference).
pub fn load_generator(path: &Path, device: &Device) -> Result<Generator> {
    let ckpt = load(path, device)?;
    let g = Generator::new(&ckpt.meta.generator, ckpt.meta.seed, device)?;
    restore_params(g.params(), &ckpt.generator, "generator")?;
    Ok(g)
}
