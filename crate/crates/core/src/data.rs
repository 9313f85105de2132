//! Unpaired data pipeline: split manifests, preprocessing and patch sampling.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{ColorType, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const RAW_DIR: &str = "raw";
pub const EXPERT_DIR: &str = "expertC";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const DEFAULT_LONG_SIDE: u32 = 512;

/// Full-corpus split sizes out of 5000 photos.
const FULL_CORPUS: usize = 5000;
const SPLIT_SIZES: [usize; 4] = [2250, 2250, 100, 400];
const SECTIONS: [&str; 4] = ["low_train", "high_train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub low_train: Vec<String>,
    pub high_train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitManifest {
    fn sections(&self) -> [&Vec<String>; 4] {
        [&self.low_train, &self.high_train, &self.val, &self.test]
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.sections().iter().flat_map(|s| s.iter()).all(|id| seen.insert(id))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# seed {}\n", self.seed);
        for (name, ids) in SECTIONS.iter().zip(self.sections()) {
            let _ = writeln!(out, "[{name}]");
            for id in ids {
                let _ = writeln!(out, "{id}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut lists: [Vec<String>; 4] = Default::default();
        let mut current: Option<usize> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(s) = rest.trim().strip_prefix("seed") {
                    seed = Some(
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Split(format!("line {}: bad seed", lineno + 1)))?,
                    );
                }
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(
                    SECTIONS
                        .iter()
                        .position(|s| *s == name)
                        .ok_or_else(|| Error::Split(format!("line {}: unknown section [{name}]", lineno + 1)))?,
                );
                continue;
            }
            let idx = current.ok_or_else(|| Error::Split(format!("line {}: id outside a section", lineno + 1)))?;
            lists[idx].push(line.to_string());
        }
        let [low_train, high_train, val, test] = lists;
        let manifest = Self {
            low_train,
            high_train,
            val,
            test,
            seed: seed.unwrap_or(0),
        };
        if !manifest.is_disjoint() {
            return Err(Error::Split("manifest sections overlap".into()));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Split sizes for a corpus of `n` photos: exact for >= 5000, proportional below.
pub fn split_sizes(n: usize) -> [usize; 4] {
    if n >= FULL_CORPUS {
        SPLIT_SIZES
    } else {
        SPLIT_SIZES.map(|s| s * n / FULL_CORPUS)
    }
}

/// Partition photo ids into disjoint low/high/val/test sets.
///
/// Only ids present in both the raw and the retouched listing are used; the
/// high-quality training set takes the retouched versions of its ids.
pub fn build_splits(raw_ids: &[String], retouched_ids: &[String], seed: u64) -> Result<SplitManifest> {
    let retouched: BTreeSet<&String> = retouched_ids.iter().collect();
    let common: BTreeSet<&String> = raw_ids.iter().filter(|id| retouched.contains(id)).collect();
    if common.len() < raw_ids.len().max(retouched_ids.len()) {
        log::warn!(
            "{} raw and {} retouched ids; using the {} present in both",
            raw_ids.len(),
            retouched_ids.len(),
            common.len()
        );
    }
    let mut ids: Vec<String> = common.into_iter().cloned().collect();
    let sizes = split_sizes(ids.len());
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Split(format!(
            "{} photos are too few for four non-empty splits (need at least {})",
            ids.len(),
            FULL_CORPUS / SPLIT_SIZES[2]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut rest = ids.into_iter();
    let mut take = |n| rest.by_ref().take(n).collect::<Vec<_>>();
    Ok(SplitManifest {
        low_train: take(sizes[0]),
        high_train: take(sizes[1]),
        val: take(sizes[2]),
        test: take(sizes[3]),
        seed,
    })
}

/// Target `(width, height)` after scaling the long side to `long_side`.
/// The short side is rounded half up.
pub fn resized_dims(width: u32, height: u32, long_side: u32) -> (u32, u32) {
    let (long, short) = (width.max(height) as u64, width.min(height) as u64);
    if long == long_side as u64 || long == 0 {
        return (width, height);
    }
    let scaled = ((2 * short * long_side as u64 + long) / (2 * long)).max(1) as u32;
    if width >= height {
        (long_side, scaled)
    } else {
        (scaled, long_side)
    }
}

pub fn rgb_to_tensor(img: &RgbImage, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    let mut chw = vec![0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            chw[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(chw, (3, h, w), device)?)
}

/// Quantize a `(3,H,W)` tensor in [0,1] to an 8-bit RGB image.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data = image.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut buf = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            buf[i * 3 + ch] = (data[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    RgbImage::from_raw(w as u32, h as u32, buf).ok_or_else(|| Error::Shape("image buffer size".into()))
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb(image)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Decode an 8-bit RGB(A) file.
pub fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let img_err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| img_err(e.to_string()))?;
    match img.color() {
        ColorType::Rgb8 | ColorType::Rgba8 => Ok(img.to_rgb8()),
        other => Err(img_err(format!("expected 8-bit RGB, found {other:?}"))),
    }
}

/// Decode, scale the long side to `long_side` (bilinear) and map to [0,1].
pub fn preprocess(path: &Path, long_side: u32, device: &Device) -> Result<Tensor> {
    let img = decode_rgb(path)?;
    let (w, h) = img.dimensions();
    let (nw, nh) = resized_dims(w, h, long_side);
    let img = if (nw, nh) == (w, h) {
        img
    } else {
        image::imageops::resize(&img, nw, nh, image::imageops::FilterType::Triangle)
    };
    rgb_to_tensor(&img, device)
}

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "PNG"];

/// Sorted image file names in `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTS.contains(&e) || e.eq_ignore_ascii_case("jpg"));
        if path.is_file() && is_image {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// A set of preprocessed images, each at least `crop` pixels on its short side.
#[derive(Clone, Debug, Default)]
pub struct ImagePool {
    ids: Vec<String>,
    images: Vec<Tensor>,
}

impl ImagePool {
    /// Keep images large enough for `crop`; returns the pool and the rejected ids.
    pub fn new(images: Vec<(String, Tensor)>, crop: usize) -> Result<(Self, Vec<String>)> {
        let mut pool = Self::default();
        let mut rejected = Vec::new();
        for (id, img) in images {
            let (c, h, w) = img.dims3()?;
            if c != 3 {
                return Err(Error::Shape(format!("{id}: expected 3 channels, got {c}")));
            }
            if h < crop || w < crop {
                log::warn!("dropping {id}: {w}x{h} is smaller than the {crop}px crop");
                rejected.push(id);
            } else {
                pool.ids.push(id);
                pool.images.push(img);
            }
        }
        Ok((pool, rejected))
    }

    /// Preprocess every id from `dir`.
    pub fn load(dir: &Path, ids: &[String], long_side: u32, crop: usize, device: &Device) -> Result<(Self, Vec<String>)> {
        let images = ids
            .iter()
            .map(|id| Ok((id.clone(), preprocess(&dir.join(id), long_side, device)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images, crop)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    fn draw(&self, rng: &mut ChaCha8Rng, crop: usize, hflip: bool) -> Result<Tensor> {
        let idx = rng.random_range(0..self.images.len());
        let img = &self.images[idx];
        let (_, h, w) = img.dims3()?;
        let y = rng.random_range(0..=h - crop);
        let x = rng.random_range(0..=w - crop);
        let patch = img.narrow(1, y, crop)?.narrow(2, x, crop)?;
        if hflip && rng.random_bool(0.5) {
            let rev: Vec<u32> = (0..crop as u32).rev().collect();
            let rev = Tensor::new(rev.as_slice(), img.device())?;
            return Ok(patch.contiguous()?.index_select(&rev, 2)?);
        }
        Ok(patch.contiguous()?)
    }
}

/// Independent random streams for the two pools.
#[derive(Clone, Debug)]
pub struct BatchRng {
    pub low: ChaCha8Rng,
    pub high: ChaCha8Rng,
}

impl BatchRng {
    /// Streams for one epoch, derived from the run seed.
    pub fn for_epoch(seed: u64, epoch: u64) -> Self {
        let mix = |pool: u64| {
            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
                ^ epoch.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
                ^ pool.wrapping_mul(0x1656_67B1_9E37_79F9)
        };
        Self {
            low: ChaCha8Rng::seed_from_u64(mix(1)),
            high: ChaCha8Rng::seed_from_u64(mix(2)),
        }
    }
}

/// Draw two unpaired `(B,3,crop,crop)` batches.
pub fn sample_batch(
    low_pool: &ImagePool,
    high_pool: &ImagePool,
    batch_size: usize,
    crop: usize,
    hflip: bool,
    rng: &mut BatchRng,
) -> Result<(Tensor, Tensor)> {
    if low_pool.is_empty() || high_pool.is_empty() {
        return Err(Error::Empty("image pool"));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let low = (0..batch_size)
        .map(|_| low_pool.draw(&mut rng.low, crop, hflip))
        .collect::<Result<Vec<_>>>()?;
    let high = (0..batch_size)
        .map(|_| high_pool.draw(&mut rng.high, crop, hflip))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&low, 0)?, Tensor::stack(&high, 0)?))
}

/// `<root>/raw` and `<root>/expertC`.
pub fn corpus_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join(RAW_DIR), root.join(EXPERT_DIR))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("a{i:04}.png")).collect()
    }

    #[test]
    fn full_corpus_sizes() {
        let m = build_splits(&ids(5000), &ids(5000), 0).unwrap();
        let sizes = [m.low_train.len(), m.high_train.len(), m.val.len(), m.test.len()];
        assert_eq!(sizes, [2250, 2250, 100, 400]);
        assert!(m.is_disjoint());
    }

    #[test]
    fn toy_corpus_is_proportional() {
        let m = build_splits(&ids(50), &ids(50), 3).unwrap();
        let sizes = [m.low_train.len(), m.high_train.len(), m.val.len(), m.test.len()];
        assert_eq!(sizes, [22, 22, 1, 4]);
        assert!(m.is_disjoint());
    }

    #[test]
    fn too_small_corpus_rejected() {
        assert!(build_splits(&ids(49), &ids(49), 0).is_err());
    }

    #[test]
    fn splits_are_deterministic() {
        assert_eq!(build_splits(&ids(80), &ids(80), 9).unwrap(), build_splits(&ids(80), &ids(80), 9).unwrap());
        assert_ne!(build_splits(&ids(80), &ids(80), 9).unwrap(), build_splits(&ids(80), &ids(80), 10).unwrap());
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = build_splits(&ids(60), &ids(60), 4).unwrap();
        assert_eq!(SplitManifest::from_text(&m.to_text()).unwrap(), m);
        assert!(SplitManifest::from_text("[val]\na\n[test]\na\n").is_err());
    }

    #[test]
    fn long_side_rule() {
        assert_eq!(resized_dims(1024, 768, 512), (512, 384));
        assert_eq!(resized_dims(512, 512, 512), (512, 512));
        assert_eq!(resized_dims(300, 200, 512), (512, 341));
        assert_eq!(resized_dims(200, 300, 512), (341, 512));
        // 3 * 512 / 2 = 768 exactly; 5 * 512 / 6 = 426.67 -> 427
        assert_eq!(resized_dims(600, 500, 512), (512, 427));
    }

    #[test]
    fn degenerate_crop_is_whole_image() {
        let dev = Device::Cpu;
        let img = Tensor::rand(0f32, 1f32, (3, 8, 8), &dev).unwrap();
        let (pool, rejected) = ImagePool::new(vec![("x".into(), img.clone())], 8).unwrap();
        assert!(rejected.is_empty());
        let mut rng = BatchRng::for_epoch(0, 0);
        let (lo, _) = sample_batch(&pool, &pool, 2, 8, false, &mut rng).unwrap();
        let diff = (lo.get(0).unwrap() - &img).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn small_images_rejected_at_pool_build() {
        let dev = Device::Cpu;
        let img = Tensor::zeros((3, 10, 30), DType::F32, &dev).unwrap();
        let (pool, rejected) = ImagePool::new(vec![("small".into(), img)], 16).unwrap();
        assert!(pool.is_empty());
        assert_eq!(rejected, vec!["small".to_string()]);
    }
}
