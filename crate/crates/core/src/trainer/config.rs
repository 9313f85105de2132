//! Experiment configuration.
//!
//! Stored as a flat TOML file with one table per section (`[train]`, `[loss]`,
//! `[model]`, `[perceptual]`, `[data]`). Overrides are `key=value` pairs where
//! `key` is either `section.name` or a bare `name` that is unique across
//! sections. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, Variant, NUM_STAGES};
use crate::losses::{FidelityNorm, LossWeights};
use crate::perceptual::{default_layers, WeightsSource, WEIGHTS_ENV};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: u64,
    pub decay_start: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    /// 0 means `low pool size / batch_size` (at least one).
    pub steps_per_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 150,
            decay_start: 75,
            lr: 1e-4,
            batch_size: 10,
            crop: 256,
            seed: 0,
            steps_per_epoch: 0,
            beta1: 0.5,
            beta2: 0.999,
            resume: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_qua: f64,
    pub lambda_fid: f64,
    pub lambda_idt: f64,
    pub fidelity_norm: FidelityNorm,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_qua: w.lambda_qua,
            lambda_fid: w.lambda_fid,
            lambda_idt: w.lambda_idt,
            fidelity_norm: FidelityNorm::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub base_channels: usize,
    pub disc_base_channels: usize,
    pub disc_scales: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            base_channels: 32,
            disc_base_channels: 64,
            disc_scales: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualSection {
    pub weights: PathBuf,
    /// Expected sha256 of the weights file; empty to rely on a `.sha256` sidecar.
    pub sha256: String,
    /// Use seeded random VGG-19 weights instead of the pretrained file.
    pub random_init: bool,
    pub width_divisor: usize,
    pub layers: Vec<String>,
}

impl Default for PerceptualSection {
    fn default() -> Self {
        Self {
            weights: PathBuf::from("weights/vgg19.safetensors"),
            sha256: String::new(),
            random_init: false,
            width_divisor: 1,
            layers: default_layers(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: PathBuf,
    pub out_dir: PathBuf,
    /// Split manifest; empty means `<root>/manifest.txt`, generated when absent.
    pub manifest: PathBuf,
    pub long_side: u32,
    pub hflip: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/fivek"),
            out_dir: PathBuf::from("runs/uegan"),
            manifest: PathBuf::new(),
            long_side: crate::data::DEFAULT_LONG_SIDE,
            hflip: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub loss: LossSection,
    pub model: ModelSection,
    pub perceptual: PerceptualSection,
    pub data: DataSection,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.decay_start > t.epochs {
            return Err(Error::Config(format!(
                "decay_start ({}) must not exceed epochs ({})",
                t.decay_start, t.epochs
            )));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", t.lr)));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let multiple = 1usize << NUM_STAGES;
        if t.crop == 0 || t.crop % multiple != 0 {
            return Err(Error::Config(format!("crop must be a positive multiple of {multiple}")));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        self.loss_weights().validate()?;
        self.generator_config().validate()?;
        self.discriminator_config().validate()?;
        if t.crop < self.discriminator_config().min_input_size() {
            return Err(Error::Config(format!(
                "crop {} is below the discriminator minimum {}",
                t.crop,
                self.discriminator_config().min_input_size()
            )));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_qua: self.loss.lambda_qua,
            lambda_fid: self.loss.lambda_fid,
            lambda_idt: self.loss.lambda_idt,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig::with_variant(self.model.variant, self.model.base_channels)
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: self.model.disc_base_channels,
            num_scales: self.model.disc_scales,
            ..DiscriminatorConfig::default()
        }
    }

    /// Perceptual weights, honoring the `UEGAN_VGG_WEIGHTS` environment override.
    pub fn weights_source(&self) -> WeightsSource {
        let p = &self.perceptual;
        if p.random_init {
            return WeightsSource::Random {
                seed: self.train.seed,
                width_divisor: p.width_divisor,
            };
        }
        let path = std::env::var_os(WEIGHTS_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| p.weights.clone());
        WeightsSource::File {
            path,
            sha256: (!p.sha256.is_empty()).then(|| p.sha256.clone()),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.data.manifest.as_os_str().is_empty() {
            self.data.root.join(crate::data::MANIFEST_FILE)
        } else {
            self.data.manifest.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = Self::default().as_table()?;
        check_known(&table, &known)?;
        for (key, value) in overrides {
            apply_override(&mut table, &known, key, value)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    fn as_table(&self) -> Result<Table> {
        Table::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Digest of every setting that affects the trained weights (paths and
    /// the resume flag excluded).
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut canonical = self.clone();
        canonical.data.root = PathBuf::new();
        canonical.data.out_dir = PathBuf::new();
        canonical.data.manifest = PathBuf::new();
        canonical.perceptual.weights = PathBuf::new();
        canonical.train.resume = false;
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }
}

fn check_known(table: &Table, known: &Table) -> Result<()> {
    for (section, value) in table {
        let known_section = known
            .get(section)
            .and_then(Value::as_table)
            .ok_or_else(|| Error::UnknownKey(section.clone()))?;
        let Some(entries) = value.as_table() else {
            return Err(Error::Config(format!("`{section}` must be a table")));
        };
        for key in entries.keys() {
            if !known_section.contains_key(key) {
                return Err(Error::UnknownKey(format!("{section}.{key}")));
            }
        }
    }
    Ok(())
}

/// Locate the section owning `key` (`section.name` or a unique bare name).
fn resolve_key<'a>(known: &'a Table, key: &'a str) -> Result<(&'a str, &'a str)> {
    if let Some((section, name)) = key.split_once('.') {
        let ok = known
            .get(section)
            .and_then(Value::as_table)
            .is_some_and(|t| t.contains_key(name));
        return if ok { Ok((section, name)) } else { Err(Error::UnknownKey(key.to_string())) };
    }
    let owners: Vec<&str> = known
        .iter()
        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(s, _)| s.as_str())
        .collect();
    match owners.as_slice() {
        [one] => Ok((one, key)),
        [] => Err(Error::UnknownKey(key.to_string())),
        many => Err(Error::Config(format!(
            "key `{key}` is ambiguous; qualify it with one of {many:?}"
        ))),
    }
}

fn parse_value(raw: &str, like: &Value) -> Value {
    let parsed = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (like, parsed) {
        (Value::String(_), Some(Value::String(s))) => Value::String(s),
        (Value::String(_), _) => Value::String(raw.to_string()),
        (Value::Float(_), Some(Value::Integer(i))) => Value::Float(i as f64),
        (_, Some(v)) => v,
        (_, None) => Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut Table, known: &Table, key: &str, raw: &str) -> Result<()> {
    let (section, name) = resolve_key(known, key)?;
    let like = &known[section][name];
    let value = parse_value(raw.trim(), like);
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match entry.as_table_mut() {
        Some(t) => {
            t.insert(name.to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!("`{section}` must be a table"))),
    }
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let k = k.trim().trim_start_matches("--");
    if k.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    Ok((k.to_string(), v.to_string()))
}
