//! `cascade-depth` command-line driver.
//!
//! Exit status: 0 on success, 1 on usage or I/O errors, 2 when a tolerance
//! or acceptance check fails.

mod demo;
mod files;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cascade_depth::cascade::{fuse_mask_grids, generate_sight_masks, intervals_from_edges};
use cascade_depth::evaluation::{
    aggregate, binned_accuracy, evaluate, format_table, reports_to_csv, validate_edges, EvalOptions, DEFAULT_CAP,
};
use cascade_depth::gradcheck::{run_gradcheck, GradcheckConfig, PipelineStage};
use cascade_depth::Error as CoreError;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::files::{load_depth, mask_from_grid, mask_to_grid, overlay_config, parse_list, sorted_pfms, write_text};

#[derive(Parser, Debug)]
#[command(
    name = "cascade-depth",
    version,
    about = "Cascaded sight-distance depth optimization"
)]
struct Cli {
    /// JSON file whose keys override the command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check analytic gradients of every pipeline stage against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 50)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one stage's adjoint (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Run the cascade and the single-layer baseline on the three-band scene.
    CascadeDemo(demo::DemoArgs),
    /// Evaluate predicted depth maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: f64,
        #[arg(long)]
        median_scale: bool,
        /// Depth bin edges, e.g. 0,30,60,80.
        #[arg(long)]
        bins: Option<String>,
        /// Write per-frame metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write per-bin metrics as CSV.
        #[arg(long)]
        bins_csv: Option<PathBuf>,
    },
    /// Split a rough depth map into sight masks.
    Mask {
        #[arg(long)]
        rough: PathBuf,
        /// Interval edges, e.g. 0,30,60,80.
        #[arg(long)]
        intervals: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse per-layer depth maps with their sight masks.
    Fuse {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        depths: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A check failed; maps to exit status 2.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let failed = e.downcast_ref::<CheckFailed>().is_some()
                || matches!(e.downcast_ref::<CoreError>(), Some(CoreError::MaskOverlap { .. }));
            ExitCode::from(if failed { 2 } else { 1 })
        }
    }
}

/// Caps the worker pool at `CMDEN_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CMDEN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("CMDEN_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        bail!("CMDEN_THREADS must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Gradcheck {
            size,
            probes,
            seed,
            inject_fault,
        } => {
            let inject_fault = match inject_fault {
                Some(name) => Some(PipelineStage::from_name(&name).with_context(|| format!("unknown stage {name:?}"))?),
                None => None,
            };
            let flags = GradcheckConfig {
                size,
                probes,
                seed,
                inject_fault,
                ..GradcheckConfig::default()
            };
            gradcheck(&overlay_config(flags, config)?)
        }
        Command::CascadeDemo(args) => demo::run(args, config),
        Command::Eval {
            pred,
            gt,
            cap,
            median_scale,
            bins,
            csv,
            bins_csv,
        } => {
            let flags = EvalSettings {
                cap,
                median_scale,
                bins: bins.as_deref().map(parse_list).transpose()?,
            };
            eval(
                &pred,
                &gt,
                &overlay_config(flags, config)?,
                csv.as_deref(),
                bins_csv.as_deref(),
            )
        }
        Command::Mask { rough, intervals, out } => {
            let flags = MaskSettings {
                intervals: parse_list(&intervals)?,
            };
            mask(&rough, &overlay_config(flags, config)?, &out)
        }
        Command::Fuse { masks, depths, out } => fuse(&masks, &depths, &out),
    }
}

fn gradcheck(config: &GradcheckConfig) -> Result<()> {
    let report = run_gradcheck(config)?;
    print!("{}", report.to_table());
    if !report.passed() {
        let names: Vec<&str> = report.failed_stages().iter().map(|s| s.name()).collect();
        return Err(CheckFailed(format!("gradient check failed in: {}", names.join(", "))).into());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSettings {
    cap: f64,
    median_scale: bool,
    bins: Option<Vec<f64>>,
}

fn eval(
    pred_dir: &Path,
    gt_dir: &Path,
    settings: &EvalSettings,
    csv: Option<&Path>,
    bins_csv: Option<&Path>,
) -> Result<()> {
    if let Some(edges) = &settings.bins {
        validate_edges(edges)?;
    }
    let options = EvalOptions {
        cap: settings.cap,
        median_scale: settings.median_scale,
    };
    let preds = files::depth_files(pred_dir)?;
    let gts = files::depth_files(gt_dir)?;
    let missing_gt: Vec<&str> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(String::as_str)
        .collect();
    let missing_pred: Vec<&str> = gts
        .keys()
        .filter(|k| !preds.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !missing_gt.is_empty() || !missing_pred.is_empty() {
        let mut msg = String::from("prediction and ground-truth lists differ");
        if !missing_gt.is_empty() {
            msg += &format!("; no ground truth for: {}", missing_gt.join(", "));
        }
        if !missing_pred.is_empty() {
            msg += &format!("; no prediction for: {}", missing_pred.join(", "));
        }
        return Err(CheckFailed(msg).into());
    }
    if preds.is_empty() {
        bail!("no depth maps found in {}", pred_dir.display());
    }
    let mut rows = Vec::new();
    let mut bin_csv = String::new();
    for (name, pred_path) in &preds {
        let (pred, _) = load_depth(pred_path)?;
        let (gt, valid) = load_depth(&gts[name])?;
        let report = evaluate(&pred, &gt, &valid, &options).with_context(|| format!("evaluating {name}"))?;
        rows.push((name.clone(), report));
        if let Some(edges) = &settings.bins {
            let b = binned_accuracy(&pred, &gt, &valid, edges, &options)?;
            let body = b.to_csv();
            let mut lines = body.lines();
            if bin_csv.is_empty() {
                bin_csv = format!("frame,{}\n", lines.next().unwrap_or_default());
            } else {
                lines.next();
            }
            for l in lines {
                bin_csv += &format!("{name},{l}\n");
            }
        }
    }
    let reports: Vec<_> = rows.iter().map(|(_, r)| *r).collect();
    rows.push(("mean".to_string(), aggregate(&reports)?));
    print!("{}", format_table(&rows));
    if let Some(path) = csv {
        write_text(path, &reports_to_csv(&rows))?;
    }
    if settings.bins.is_some() {
        println!();
        print!("{bin_csv}");
        if let Some(path) = bins_csv {
            write_text(path, &bin_csv)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskSettings {
    intervals: Vec<f64>,
}

fn mask(rough_path: &Path, settings: &MaskSettings, out: &Path) -> Result<()> {
    let intervals = intervals_from_edges(&settings.intervals)?;
    let (rough, _) = load_depth(rough_path)?;
    let masks = generate_sight_masks(&rough, &intervals)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, m) in masks.iter().enumerate() {
        let path = out.join(format!("mask_{i}.pfm"));
        cascade_depth::dataio::write_pfm(&path, &mask_to_grid(&m.mask))?;
        println!(
            "mask {i} [{}, {}): coverage {:.4} -> {}",
            m.alpha,
            m.beta,
            m.coverage(),
            path.display()
        );
    }
    Ok(())
}

fn fuse(mask_dir: &Path, depth_dir: &Path, out: &Path) -> Result<()> {
    let mask_paths = sorted_pfms(mask_dir)?;
    let depth_paths = sorted_pfms(depth_dir)?;
    if mask_paths.is_empty() || mask_paths.len() != depth_paths.len() {
        bail!(
            "found {} masks in {} and {} depth maps in {}",
            mask_paths.len(),
            mask_dir.display(),
            depth_paths.len(),
            depth_dir.display()
        );
    }
    let masks = mask_paths
        .iter()
        .map(|p| mask_from_grid(&cascade_depth::dataio::read_pfm(p)?, p))
        .collect::<Result<Vec<_>>>()?;
    let depths = depth_paths
        .iter()
        .map(|p| Ok(cascade_depth::dataio::read_pfm(p)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = masks.iter().collect();
    let fused = fuse_mask_grids(&refs, &depths)?;
    cascade_depth::dataio::write_pfm(out, &fused)?;
    println!("fused {} layers -> {}", masks.len(), out.display());
    Ok(())
}
