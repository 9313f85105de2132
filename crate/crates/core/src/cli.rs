//! Command-line front end: `train`, `enhance`, `evaluate`, `ablate`, `make-splits`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Parser, Subcommand};

use crate::data;
use crate::error::{Error, Result};
use crate::evaluator::{self, MetricsReport};
use crate::generator::{Enhancer, IdentityEnhancer, Variant};
use crate::trainer::{self, checkpoint, parse_override, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const ENHANCE_MANIFEST: &str = "enhance_manifest.csv";

#[derive(Debug, Parser)]
#[command(name = "uegan", version, about = "Unsupervised image enhancement GAN")]
pub struct Cli {
    /// TOML configuration file (defaults are used when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `key=value` or `section.key=value`; applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub input_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or resume) a model; writes checkpoints, metrics.csv and the effective config.
    Train,
    /// Enhance every image in --input-dir with --checkpoint into --output-dir.
    Enhance,
    /// PSNR/SSIM on the test split (identity baseline when no --checkpoint is given).
    Evaluate,
    /// Train and evaluate every generator variant with and without the identity loss.
    Ablate,
    /// Build the low/high/val/test split manifest for a corpus.
    MakeSplits,
}

const KNOWN_FLAGS: [&str; 8] = [
    "config",
    "override",
    "checkpoint",
    "input-dir",
    "output-dir",
    "seed",
    "help",
    "version",
];

/// Rewrite bare `--key=value` arguments that are not CLI flags into overrides.
pub fn normalize_args<I, T>(args: I) -> Vec<OsString>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let mut out = Vec::new();
    for arg in args {
        let arg: OsString = arg.into();
        let rewritten = arg.to_str().and_then(|s| {
            let body = s.strip_prefix("--")?;
            let (key, _) = body.split_once('=')?;
            (!KNOWN_FLAGS.contains(&key)).then(|| body.to_string())
        });
        match rewritten {
            Some(body) => {
                out.push("--override".into());
                out.push(body.into());
            }
            None => out.push(arg),
        }
    }
    out
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownKey(_) | Error::UnknownVariant(_) => EXIT_USAGE,
        Error::Variant { source, .. } => exit_code(source),
        _ => EXIT_RUNTIME,
    }
}

/// Parse `args` (including the program name) and execute; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let cli = match Cli::try_parse_from(normalize_args(args)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

impl Cli {
    pub fn load_config(&self) -> Result<TrainConfig> {
        let mut overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            overrides.push(("train.seed".into(), seed.to_string()));
        }
        match &self.config {
            Some(path) => TrainConfig::load(path, &overrides),
            None => TrainConfig::from_toml_with_overrides("", &overrides),
        }
    }

    fn required<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("`{flag}` is required for this command")))
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = cli.load_config()?;
    let device = Device::Cpu;
    match cli.command {
        Command::Train => {
            if let Some(dir) = &cli.output_dir {
                cfg.data.out_dir = dir.clone();
            }
            if let Some(dir) = &cli.input_dir {
                cfg.data.root = dir.clone();
            }
            let summary = trainer::train(&cfg, &device)?;
            println!(
                "trained {} epochs ({} steps); last checkpoint {}",
                summary.last_epoch,
                summary.steps,
                summary.last_checkpoint.display()
            );
            if let Some((epoch, psnr)) = summary.best {
                println!("best validation PSNR {psnr:.4} dB at epoch {epoch}");
            }
            Ok(())
        }
        Command::Enhance => {
            let ckpt = cli.required(&cli.checkpoint, "--checkpoint")?;
            let input = cli.required(&cli.input_dir, "--input-dir")?;
            let output = cli.required(&cli.output_dir, "--output-dir")?;
            let generator = checkpoint::load_generator(ckpt, &device)?;
            enhance_dir(&generator, input, output, cfg.data.long_side, &device).map(|_| ())
        }
        Command::Evaluate => {
            if let Some(dir) = &cli.input_dir {
                cfg.data.root = dir.clone();
            }
            let out = cli.output_dir.clone().unwrap_or_else(|| cfg.data.out_dir.join("eval"));
            let (name, report) = match &cli.checkpoint {
                Some(path) => ("UEGAN", evaluate_split(&checkpoint::load_generator(path, &device)?, &cfg, &device)?),
                None => ("Identity", evaluate_split(&IdentityEnhancer, &cfg, &device)?),
            };
            write_report(&report, name, &out)?;
            print!("{}", report.summary(name));
            Ok(())
        }
        Command::Ablate => {
            if let Some(dir) = &cli.output_dir {
                cfg.data.out_dir = dir.clone();
            }
            let table = ablate(&cfg, &device)?;
            print!("{table}");
            Ok(())
        }
        Command::MakeSplits => {
            let root = cli.input_dir.clone().unwrap_or_else(|| cfg.data.root.clone());
            let (raw, expert) = data::corpus_dirs(&root);
            let m = data::build_splits(&data::list_images(&raw)?, &data::list_images(&expert)?, cfg.train.seed)?;
            let path = match &cli.output_dir {
                Some(dir) => dir.join(data::MANIFEST_FILE),
                None if cli.input_dir.is_some() => root.join(data::MANIFEST_FILE),
                None => cfg.manifest_path(),
            };
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            m.save(&path)?;
            println!(
                "wrote {} (low {}, high {}, val {}, test {})",
                path.display(),
                m.low_train.len(),
                m.high_train.len(),
                m.val.len(),
                m.test.len()
            );
            Ok(())
        }
    }
}

/// Per-file outcome of [`enhance_dir`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnhanceManifest {
    pub processed: Vec<String>,
    pub skipped: Vec<(String, String)>,
}

/// Enhance every regular file in `input` into `output` under the same name.
/// Unreadable files are skipped; failure only if every file fails.
pub fn enhance_dir(
    enhancer: &dyn Enhancer,
    input: &Path,
    output: &Path,
    long_side: u32,
    device: &Device,
) -> Result<EnhanceManifest> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(input).map_err(|e| Error::io(input, e))? {
        let entry = entry.map_err(|e| Error::io(input, e))?;
        if entry.path().is_file() {
            if let Some(name) = entry.file_name().to_str() {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let mut manifest = EnhanceManifest::default();
    if names.is_empty() {
        log::warn!("no files found in {}", input.display());
        eprintln!("warning: no files found in {}", input.display());
    }
    for name in &names {
        let result = data::preprocess(&input.join(name), long_side, device)
            .and_then(|img| enhancer.enhance_image(&img))
            .and_then(|out| data::save_image(&out, &output.join(name)));
        match result {
            Ok(()) => manifest.processed.push(name.clone()),
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                manifest.skipped.push((name.clone(), e.to_string()));
            }
        }
    }
    let mut text = String::from("file,status,detail\n");
    for name in &manifest.processed {
        let _ = writeln!(text, "{name},processed,");
    }
    for (name, why) in &manifest.skipped {
        let _ = writeln!(text, "{name},skipped,\"{}\"", why.replace('"', "'"));
    }
    let path = output.join(ENHANCE_MANIFEST);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    if !names.is_empty() && manifest.processed.is_empty() {
        return Err(Error::Empty("enhance: every input failed"));
    }
    Ok(manifest)
}

/// Evaluate on the test split of `cfg.data.root`.
pub fn evaluate_split(enhancer: &dyn Enhancer, cfg: &TrainConfig, device: &Device) -> Result<MetricsReport> {
    let manifest = data::SplitManifest::load(&cfg.manifest_path())?;
    let (raw, expert) = data::corpus_dirs(&cfg.data.root);
    let pairs = evaluator::load_pairs(&raw, &expert, &manifest.test, cfg.data.long_side, device)?;
    evaluator::evaluate(enhancer, &pairs)
}

fn write_report(report: &MetricsReport, name: &str, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join("metrics.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let summary = out.join("summary.txt");
    std::fs::write(&summary, report.summary(name)).map_err(|e| Error::io(&summary, e))
}

pub const ABLATION_IDT: [f64; 2] = [0.0, 0.1];

/// One row of the ablation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub lambda_idt: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Train every variant with and without the identity loss, then evaluate each
/// on the test split. Returns the formatted comparison table.
pub fn ablate(base: &TrainConfig, device: &Device) -> Result<String> {
    let rows = ablation_rows(base, device)?;
    let mut s = format!("{:<14} {:>8} {:>10} {:>8}\n", "variant", "idt", "PSNR", "SSIM");
    for r in &rows {
        let _ = writeln!(s, "{:<14} {:>8} {:>10.4} {:>8.4}", r.variant.as_str(), r.lambda_idt, r.psnr, r.ssim);
    }
    let path = base.data.out_dir.join("ablation.txt");
    std::fs::create_dir_all(&base.data.out_dir).map_err(|e| Error::io(&base.data.out_dir, e))?;
    std::fs::write(&path, &s).map_err(|e| Error::io(&path, e))?;
    Ok(s)
}

pub fn ablation_rows(base: &TrainConfig, device: &Device) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        for idt in ABLATION_IDT {
            let mut cfg = base.clone();
            cfg.model.variant = variant;
            cfg.loss.lambda_idt = idt;
            cfg.data.out_dir = base.data.out_dir.join(format!("{variant}_idt{idt}"));
            let wrap = |e: Error| Error::Variant {
                variant: format!("{variant} (lambda_idt {idt})"),
                source: Box::new(e),
            };
            let summary = trainer::train(&cfg, device).map_err(wrap)?;
            let ckpt = cfg
                .data
                .out_dir
                .join(trainer::CHECKPOINT_DIR)
                .join(trainer::BEST_CHECKPOINT);
            let ckpt = if ckpt.exists() { ckpt } else { summary.last_checkpoint };
            let g = checkpoint::load_generator(&ckpt, device).map_err(wrap)?;
            let report = evaluate_split(&g, &cfg, device).map_err(wrap)?;
            rows.push(AblationRow {
                variant,
                lambda_idt: idt,
                psnr: report.mean_psnr,
                ssim: report.mean_ssim,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_keys_become_overrides() {
        let args = normalize_args(["uegan", "train", "--lr=0.0002", "--seed=3", "--config=a.toml"]);
        let args: Vec<_> = args.iter().map(|a| a.to_str().unwrap()).collect();
        assert_eq!(
            args,
            ["uegan", "train", "--override", "lr=0.0002", "--seed=3", "--config=a.toml"]
        );
    }

    #[test]
    fn unknown_key_is_usage_error() {
        assert_eq!(run(["uegan", "train", "--lrr=1"]), EXIT_USAGE);
    }

    #[test]
    fn missing_subcommand_is_usage_error() {
        assert_eq!(run(["uegan"]), EXIT_USAGE);
    }
}
