//! `cascade-demo`: cascade versus single-layer baseline on the three-band scene.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cascade_depth::cascade::{run_cascade, CascadeConfig, CascadeOutput, PosePrior};
use cascade_depth::dataio::{depth_preview, write_pfm, write_png};
use cascade_depth::evaluation::{binned_accuracy, evaluate, format_table, reports_to_csv, BinnedAccuracy, EvalOptions};
use cascade_depth::geometry::DepthRange;
use cascade_depth::imaging::{ImageGrid, Mask};
use cascade_depth::optimization::{LearningRateSchedule, OptimizerConfig};
use cascade_depth::synthscene::{make_three_band_scene, BandSceneOptions};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::files::{mask_to_grid, overlay_config, parse_list, write_text};
use crate::CheckFailed;

/// Relative far-bin improvement the cascade must reach.
const FAR_BIN_GAIN: f64 = 0.2;

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    xi: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "cascade-demo-out")]
    out: PathBuf,
    /// Interval edges; defaults to 0,30,60,80 for three layers and an even
    /// split of [0, 80) otherwise.
    #[arg(long)]
    intervals: Option<String>,
    /// Adam iterations per stage.
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Refine camera poses instead of holding them at ground truth.
    #[arg(long)]
    estimate_pose: bool,
}

/// Resolved demo settings; `--config` keys override these.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSettings {
    pub layers: usize,
    pub xi: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub edges: Vec<f64>,
    pub iterations: usize,
    pub lr: f64,
    pub estimate_pose: bool,
    pub depth_range: DepthRange,
    pub init_depth: f64,
    pub step: f64,
    pub noise_std: f64,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("size must look like HxW, got {s:?}"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn default_edges(layers: usize) -> Vec<f64> {
    if layers == 3 {
        return vec![0.0, 30.0, 60.0, 80.0];
    }
    (0..=layers).map(|i| 80.0 * i as f64 / layers as f64).collect()
}

impl DemoSettings {
    fn from_args(a: &DemoArgs) -> Result<Self> {
        let (height, width) = parse_size(&a.size)?;
        let edges = match &a.intervals {
            Some(s) => parse_list(s)?,
            None => default_edges(a.layers.max(1)),
        };
        Ok(Self {
            layers: a.layers,
            xi: a.xi,
            height,
            width,
            seed: a.seed,
            edges,
            iterations: a.iterations,
            lr: a.lr,
            estimate_pose: a.estimate_pose,
            depth_range: DepthRange {
                min_depth: 5.0,
                max_depth: 100.0,
            },
            init_depth: 80.0,
            step: 0.5,
            noise_std: 0.0,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            bail!("--layers must be at least 1");
        }
        if self.xi == 0 {
            bail!("--xi must be at least 1");
        }
        if self.edges.len() != self.layers + 1 {
            bail!(
                "{} layers need {} interval edges, got {}",
                self.layers,
                self.layers + 1,
                self.edges.len()
            );
        }
        if self.height < 8 || self.width < 8 {
            bail!("image size must be at least 8x8");
        }
        if self.iterations == 0 {
            bail!("--iterations must be at least 1");
        }
        Ok(())
    }

    fn intervals(&self) -> Vec<(f64, f64)> {
        self.edges.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn cascade_config(&self, target: usize) -> Result<CascadeConfig> {
        let mut c = CascadeConfig::from_intervals(&self.intervals(), self.xi)?;
        self.apply(&mut c, target);
        Ok(c)
    }

    fn baseline_config(&self, target: usize) -> Result<CascadeConfig> {
        let mut c = CascadeConfig::single_layer(*self.edges.last().expect("validated"))?;
        self.apply(&mut c, target);
        Ok(c)
    }

    fn apply(&self, c: &mut CascadeConfig, target: usize) {
        c.optimizer = OptimizerConfig {
            schedule: LearningRateSchedule {
                base: self.lr,
                ..LearningRateSchedule::default()
            },
            max_iterations: self.iterations,
            ..OptimizerConfig::default()
        };
        c.depth_range = self.depth_range;
        c.init_depth = self.init_depth;
        c.target_index = target;
    }
}

fn format_offsets(c: &CascadeConfig) -> String {
    let layers: Vec<String> = c
        .layers
        .iter()
        .map(|l| {
            let mut mags: Vec<u64> = l.offsets.iter().map(|o| o.unsigned_abs()).collect();
            mags.dedup();
            let parts: Vec<String> = mags.iter().map(|m| format!("±{m}")).collect();
            format!("[{}]", parts.join(","))
        })
        .collect();
    format!("[{}]", layers.join(","))
}

fn save_depth(dir: &Path, name: &str, depth: &ImageGrid) -> Result<()> {
    write_pfm(&dir.join(format!("{name}.pfm")), depth)?;
    write_png(&dir.join(format!("{name}.png")), &depth_preview(depth)?)?;
    Ok(())
}

fn save_run(dir: &Path, prefix: &str, out: &CascadeOutput) -> Result<()> {
    save_depth(dir, &format!("{prefix}rough"), &out.rough)?;
    save_depth(dir, &format!("{prefix}fused"), &out.fused)?;
    out.report
        .rough
        .trace
        .write_csv(&dir.join(format!("{prefix}trace_rough.csv")))?;
    for (i, (d, m)) in out.layer_depths.iter().zip(&out.masks).enumerate() {
        save_depth(dir, &format!("{prefix}layer_{i}"), d)?;
        write_pfm(&dir.join(format!("{prefix}mask_{i}.pfm")), &mask_to_grid(&m.mask))?;
        if let Some(stage) = &out.report.layers[i].stage {
            stage
                .trace
                .write_csv(&dir.join(format!("{prefix}trace_layer_{i}.csv")))?;
        }
    }
    Ok(())
}

fn bins_table(rows: &[(&str, &BinnedAccuracy)]) -> String {
    let mut s = String::from("bin        ");
    for (name, _) in rows {
        let _ = write!(s, " {name:>10}");
    }
    s.push_str("  pixels\n");
    let first = rows[0].1;
    for (k, b) in first.bins.iter().enumerate() {
        let _ = write!(s, "{:<11}", format!("[{}, {})", b.lower, b.upper));
        for (_, acc) in rows {
            match acc.bins[k].abs_rel {
                Some(v) => {
                    let _ = write!(s, " {v:>10.4}");
                }
                None => {
                    let _ = write!(s, " {:>10}", "-");
                }
            }
        }
        let _ = writeln!(s, "  {}", b.count);
    }
    s
}

pub fn run(args: DemoArgs, config: Option<&Path>) -> Result<()> {
    let settings = overlay_config(DemoSettings::from_args(&args)?, config)?;
    settings.validate()?;
    let out_dir = &args.out;

    let reach = settings
        .xi
        .checked_pow(settings.layers as u32 - 1)
        .context("frame offsets overflow")?;
    let frames = 2 * reach + 1;
    let target = reach;
    let scene = make_three_band_scene(
        &settings.intervals(),
        &BandSceneOptions {
            width: settings.width,
            height: settings.height,
            frames,
            target_index: target,
            step: settings.step,
            noise_std: settings.noise_std,
            seed: settings.seed,
            ..BandSceneOptions::default()
        },
    )?;
    let cascade_cfg = settings.cascade_config(target)?;
    let baseline_cfg = settings.baseline_config(target)?;
    let cascade_on = settings.layers > 1;

    println!(
        "three-band scene {}x{}, {} frames, target {}, layers {}, xi {}",
        settings.height, settings.width, frames, target, settings.layers, settings.xi
    );
    println!("intervals: {:?}", settings.intervals());
    println!("frame offsets: {}", format_offsets(&cascade_cfg));

    let renders = (0..frames)
        .map(|i| scene.render(i))
        .collect::<cascade_depth::Result<Vec<_>>>()?;
    let images: Vec<ImageGrid> = renders.iter().map(|r| r.image.clone()).collect();
    let gt = &renders[target].depth;
    let prior = PosePrior {
        world_to_camera: scene.camera_path.clone(),
        freeze: !settings.estimate_pose,
    };

    let (baseline, cascade) = rayon::join(
        || run_cascade(&images, &scene.intrinsics, &baseline_cfg, Some(&prior)),
        || {
            cascade_on
                .then(|| run_cascade(&images, &scene.intrinsics, &cascade_cfg, Some(&prior)))
                .transpose()
        },
    );
    let (baseline, cascade) = (baseline?, cascade?);

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_text(
        &out_dir.join("settings.json"),
        &serde_json::to_string_pretty(&settings)?,
    )?;
    save_depth(out_dir, "gt", gt)?;
    write_png(&out_dir.join("target.png"), &images[target])?;
    save_run(out_dir, "baseline_", &baseline)?;
    if let Some(c) = &cascade {
        write_text(&out_dir.join("cascade_config.json"), &cascade_cfg.to_json()?)?;
        save_run(out_dir, "", c)?;
    }

    // Known metric scale, so no median scaling.
    let eo = EvalOptions {
        cap: *settings.edges.last().expect("validated"),
        median_scale: settings.estimate_pose,
    };
    let valid = Mask::filled(gt.height(), gt.width(), true);
    let mut rows = vec![("baseline".to_string(), evaluate(&baseline.fused, gt, &valid, &eo)?)];
    let base_bins = binned_accuracy(&baseline.fused, gt, &valid, &settings.edges, &eo)?;
    let mut bin_rows = vec![("baseline", &base_bins)];
    let cascade_bins = match &cascade {
        Some(c) => {
            rows.push(("cascade".to_string(), evaluate(&c.fused, gt, &valid, &eo)?));
            Some(binned_accuracy(&c.fused, gt, &valid, &settings.edges, &eo)?)
        }
        None => None,
    };
    if let Some(b) = &cascade_bins {
        bin_rows.push(("cascade", b));
    }
    println!();
    print!("{}", format_table(&rows));
    println!();
    print!("{}", bins_table(&bin_rows));
    write_text(&out_dir.join("metrics.csv"), &reports_to_csv(&rows))?;
    let mut bins_csv = String::new();
    for (name, b) in &bin_rows {
        for (i, line) in b.to_csv().lines().enumerate() {
            if i == 0 {
                if bins_csv.is_empty() {
                    let _ = writeln!(bins_csv, "run,{line}");
                }
            } else {
                let _ = writeln!(bins_csv, "{name},{line}");
            }
        }
    }
    write_text(&out_dir.join("bins.csv"), &bins_csv)?;

    if let Some(c) = &cascade {
        if c.report.degenerate {
            log::warn!("rough stage flagged degenerate motion");
        }
        let (base, fused) = (rows[0].1.abs_rel, rows[1].1.abs_rel);
        let far = settings.edges[settings.edges.len() - 2];
        let far_base = base_bins.bin_abs_rel(far);
        let far_fused = cascade_bins.as_ref().and_then(|b| b.bin_abs_rel(far));
        let gain = match (far_base, far_fused) {
            (Some(b), Some(f)) if b > 0.0 => Some((b - f) / b),
            _ => None,
        };
        println!();
        println!("fused abs_rel {fused:.4} vs baseline {base:.4}");
        match gain {
            Some(g) => println!("far bin [{far}, ..) improvement {:.1}%", 100.0 * g),
            None => println!("far bin [{far}, ..) is empty"),
        }
        let ok = fused < base && gain.is_some_and(|g| g >= FAR_BIN_GAIN);
        if !ok {
            return Err(CheckFailed(format!(
                "cascade did not beat the baseline by the required margin (fused {fused:.4}, baseline {base:.4}, far-bin gain {})",
                gain.map_or("n/a".to_string(), |g| format!("{:.1}%", 100.0 * g))
            ))
            .into());
        }
        println!("PASS");
    }
    Ok(())
}
