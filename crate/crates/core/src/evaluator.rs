//! Full-reference quality metrics and test-set evaluation.
//!
//! PSNR is computed on RGB with MAX = 1. SSIM runs on BT.601 luminance with an
//! 11x11 Gaussian window (sigma 1.5), valid-mode filtering and mean pooling.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::generator::Enhancer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let diff = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?;
    let mse = diff.sqr()?.mean_all()?.to_scalar::<f64>()?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// `(H, W)` luminance plane from a `(3,H,W)` or `(1,H,W)` image.
fn luminance(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let img = match img.rank() {
        4 if img.dim(0)? == 1 => img.squeeze(0)?,
        3 => img.clone(),
        _ => return Err(Error::Shape(format!("expected a single image, got {:?}", img.dims()))),
    };
    let (c, h, w) = img.dims3()?;
    let planes = img.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let y = match c {
        1 => planes[0].concat(),
        3 => (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .map(|(i, j)| (0..3).map(|k| LUMA[k] * planes[k][i][j]).sum())
            .collect(),
        _ => return Err(Error::Shape(format!("expected 1 or 3 channels, got {c}"))),
    };
    Ok((y, h, w))
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filter; output is `(h-10) x (w-10)`.
fn filter(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Structural similarity on luminance, in [-1, 1]; exactly 1 for identical inputs.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (ya, h, w) = luminance(a)?;
    let (yb, _, _) = luminance(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter(&ya, h, w, &k);
    let mu_b = filter(&yb, h, w, &k);
    let e_aa = filter(&prod(&ya, &ya), h, w, &k);
    let e_bb = filter(&prod(&yb, &yb), h, w, &k);
    let e_ab = filter(&prod(&ya, &yb), h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Optional no-reference aesthetic scorer (e.g. a NIMA model) supplied by the caller.
pub trait AestheticScorer {
    fn score(&self, image: &Tensor) -> Result<f64>;
}

/// One test item; `reference` is `None` when the expert image is missing.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub id: String,
    pub input: Tensor,
    pub reference: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub count: usize,
    /// Ids that could not be scored, with the reason.
    pub skipped: Vec<(String, String)>,
    /// Means of the unenhanced inputs against the references.
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub mean_aesthetic: Option<f64>,
}

/// Arithmetic means over scores, summed in id order so that input order
/// never changes the result.
pub fn mean_scores(scores: &[ImageScore]) -> (f64, f64) {
    if scores.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut sorted: Vec<&ImageScore> = scores.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let n = sorted.len() as f64;
    let p = sorted.iter().map(|s| s.psnr).sum::<f64>() / n;
    let s = sorted.iter().map(|s| s.ssim).sum::<f64>() / n;
    (p, s)
}

pub fn evaluate(enhancer: &dyn Enhancer, pairs: &[EvalPair]) -> Result<MetricsReport> {
    evaluate_with(enhancer, pairs, None)
}

pub fn evaluate_with(
    enhancer: &dyn Enhancer,
    pairs: &[EvalPair],
    scorer: Option<&dyn AestheticScorer>,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    let mut baseline = Vec::new();
    let mut aesthetic = Vec::new();
    for pair in pairs {
        let Some(reference) = &pair.reference else {
            report.skipped.push((pair.id.clone(), "missing reference".into()));
            continue;
        };
        if reference.dims() != pair.input.dims() {
            report.skipped.push((
                pair.id.clone(),
                format!("reference {:?} vs input {:?}", reference.dims(), pair.input.dims()),
            ));
            continue;
        }
        let out = enhancer.enhance_image(&pair.input)?;
        report.per_image.push(ImageScore {
            id: pair.id.clone(),
            psnr: psnr(&out, reference)?,
            ssim: ssim(&out, reference)?,
        });
        baseline.push(ImageScore {
            id: pair.id.clone(),
            psnr: psnr(&pair.input, reference)?,
            ssim: ssim(&pair.input, reference)?,
        });
        if let Some(s) = scorer {
            aesthetic.push(s.score(&out)?);
        }
    }
    report.count = report.per_image.len();
    (report.mean_psnr, report.mean_ssim) = mean_scores(&report.per_image);
    (report.baseline_psnr, report.baseline_ssim) = mean_scores(&baseline);
    if scorer.is_some() && !aesthetic.is_empty() {
        report.mean_aesthetic = Some(aesthetic.iter().sum::<f64>() / aesthetic.len() as f64);
    }
    Ok(report)
}

/// Preprocess raw/expert pairs for evaluation; ids without a readable
/// reference get `reference: None`.
pub fn load_pairs(raw_dir: &Path, expert_dir: &Path, ids: &[String], long_side: u32, device: &Device) -> Result<Vec<EvalPair>> {
    ids.iter()
        .map(|id| {
            let input = crate::data::preprocess(&raw_dir.join(id), long_side, device)?;
            let reference = match crate::data::preprocess(&expert_dir.join(id), long_side, device) {
                Ok(r) => Some(r),
                Err(e) => {
                    log::warn!("{id}: no usable reference ({e})");
                    None
                }
            };
            Ok(EvalPair {
                id: id.clone(),
                input,
                reference,
            })
        })
        .collect()
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl MetricsReport {
    /// `id,psnr,ssim` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr,ssim\n");
        for r in &self.per_image {
            let _ = writeln!(s, "{},{},{}", r.id, fmt_db(r.psnr), r.ssim);
        }
        s
    }

    /// Two-row comparison table: unenhanced input vs the model.
    pub fn summary(&self, model_name: &str) -> String {
        let nima = self.mean_aesthetic.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("{:<16} {:>10} {:>8} {:>8}\n", "Method", "PSNR", "SSIM", "NIMA");
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>8.4} {:>8}",
            "Input",
            fmt_db(self.baseline_psnr),
            self.baseline_ssim,
            "-"
        );
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>8.4} {:>8}",
            model_name,
            fmt_db(self.mean_psnr),
            self.mean_ssim,
            nima
        );
        let _ = writeln!(s, "images: {}  skipped: {}", self.count, self.skipped.len());
        s
    }
}
