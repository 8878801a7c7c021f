//! Stage-by-stage gradient verification of the loss pipeline.
//!
//! Each stage is reduced to a scalar `Σ w · output` with random weights `w`
//! and its adjoint is compared with central differences on random inputs.
//! The last stage checks the composed total loss end to end.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    sigma_to_depth, sigma_to_depth_adjoint, warp_coordinates, warp_coordinates_adjoint, CameraIntrinsics,
    CoordinateField, DepthRange, PoseSE3,
};
use crate::imaging::{
    bilinear_sample, bilinear_sample_adjoint, locate_cell, upsample_bilinear, upsample_bilinear_adjoint, ImageGrid,
    Mask,
};
use crate::optimization::{finite_difference_check, finite_difference_check_fn, FdReport, FieldState};
use crate::photometric::{
    pe_adjoint_b, pe_forward, smoothness_forward_adjoint, LossInputs, LossSettings, Signature, DEFAULT_ALPHA,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    SigmaToDepth,
    UpsampleBilinear,
    WarpCoordinates,
    BilinearSample,
    PhotometricError,
    Smoothness,
    TotalLoss,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 7] = [
        PipelineStage::SigmaToDepth,
        PipelineStage::UpsampleBilinear,
        PipelineStage::WarpCoordinates,
        PipelineStage::BilinearSample,
        PipelineStage::PhotometricError,
        PipelineStage::Smoothness,
        PipelineStage::TotalLoss,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PipelineStage::SigmaToDepth => "sigma_to_depth",
            PipelineStage::UpsampleBilinear => "upsample_bilinear",
            PipelineStage::WarpCoordinates => "warp_coordinates",
            PipelineStage::BilinearSample => "bilinear_sample",
            PipelineStage::PhotometricError => "pe_map",
            PipelineStage::Smoothness => "smoothness",
            PipelineStage::TotalLoss => "total_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl std::fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    /// Side length of the square test images.
    pub size: usize,
    /// σ / input entries probed per stage.
    pub probes: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Scales the analytic adjoint of one stage by `1 + FAULT_SCALE` (test hook).
    pub inject_fault: Option<PipelineStage>,
}

const FAULT_SCALE: f64 = 0.05;

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            size: 16,
            probes: 50,
            seed: 0,
            epsilon: 1e-5,
            tolerance: 1e-4,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: PipelineStage,
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub stages: Vec<StageResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.stages.iter().all(|s| s.passed)
    }

    pub fn failed_stages(&self) -> Vec<PipelineStage> {
        self.stages.iter().filter(|s| !s.passed).map(|s| s.stage).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<18} {:>14} {:>8} {:>8}  {:<24} {}\n",
            "stage", "max_rel_err", "checked", "skipped", "worst", "status"
        );
        for r in &self.stages {
            let _ = writeln!(
                s,
                "{:<18} {:>14.3e} {:>8} {:>8}  {:<24} {}",
                r.stage.name(),
                r.max_relative_error,
                r.checked,
                r.skipped,
                r.worst,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "overall: {} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.config.tolerance
        );
        s
    }
}

/// Random band-limited texture in (0, 1).
fn random_texture(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> ImageGrid {
    let terms: Vec<(f64, f64, f64, f64)> = (0..3 * ch)
        .map(|_| {
            (
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.12),
            )
        })
        .collect();
    ImageGrid::from_fn(h, w, ch, |y, x, c| {
        0.5 + terms[3 * c..3 * c + 3]
            .iter()
            .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
            .sum::<f64>()
    })
    .expect("finite texture")
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize, lo: f64, hi: f64) -> ImageGrid {
    let data = (0..h * w * ch).map(|_| rng.random_range(lo..hi)).collect();
    ImageGrid::new(h, w, ch, data).expect("finite grid")
}

fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> PoseSE3 {
    let mut p = [0.0; 6];
    for (i, v) in p.iter_mut().enumerate() {
        let s = if i < 3 { rot } else { trans };
        *v = rng.random_range(-s..s);
    }
    PoseSE3::exp6(p).expect("finite pose")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn probe_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}

struct StageCheck {
    report: FdReport,
    describe: Box<dyn Fn(usize) -> String>,
}

/// Runs the finite-difference checks of every stage.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.probes == 0 {
        return Err(Error::invalid("probes must be ≥ 1"));
    }
    if config.size < 4 {
        return Err(Error::invalid(format!("size must be at least 4, got {}", config.size)));
    }
    if !(config.epsilon > 0.0) || !(config.tolerance > 0.0) {
        return Err(Error::invalid("epsilon and tolerance must be positive"));
    }
    let mut stages = Vec::with_capacity(PipelineStage::ALL.len());
    for (k, stage) in PipelineStage::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(k as u64));
        let fault = if config.inject_fault == Some(stage) {
            1.0 + FAULT_SCALE
        } else {
            1.0
        };
        let check = run_stage(stage, config, fault, &mut rng)?;
        let worst = check
            .report
            .worst
            .map(|c| match c {
                crate::optimization::Coordinate::Flat(i) => (check.describe)(i),
                other => other.to_string(),
            })
            .unwrap_or_else(|| "-".into());
        let passed = check.report.checked > 0 && check.report.max_relative_error <= config.tolerance;
        log::info!(
            "gradcheck {stage}: max rel err {:.3e} over {} probes ({} skipped)",
            check.report.max_relative_error,
            check.report.checked,
            check.report.skipped
        );
        stages.push(StageResult {
            stage,
            max_relative_error: check.report.max_relative_error,
            checked: check.report.checked,
            skipped: check.report.skipped,
            worst,
            passed,
        });
    }
    Ok(GradcheckReport {
        config: *config,
        stages,
    })
}

fn run_stage(stage: PipelineStage, config: &GradcheckConfig, fault: f64, rng: &mut ChaCha8Rng) -> Result<StageCheck> {
    let n = config.size;
    let eps = config.epsilon;
    let range = DepthRange::default();
    let k = CameraIntrinsics::new(n as f64, n as f64, n as f64 / 2.0, n as f64 / 2.0, n, n)?;
    let pixel = move |i: usize| format!("({},{})", i / n, i % n);
    match stage {
        PipelineStage::SigmaToDepth => {
            let sigma = random_grid(rng, n, n, 1, 0.05, 0.95);
            let w = random_grid(rng, n, n, 1, -1.0, 1.0);
            let depth = sigma_to_depth(&sigma, &range)?;
            let g = sigma_to_depth_adjoint(&depth, &w, &range)?.map(|v| v * fault);
            let idx = probe_indices(rng, n * n, config.probes);
            let f = |x: &[f64]| {
                let s = ImageGrid::new(n, n, 1, x.to_vec())?;
                Ok((dot(sigma_to_depth(&s, &range)?.as_slice(), w.as_slice()), 0))
            };
            let report = finite_difference_check_fn(f, sigma.as_slice(), g.as_slice(), &idx, eps)?;
            Ok(StageCheck {
                report,
                describe: Box::new(pixel),
            })
        }
        PipelineStage::UpsampleBilinear => {
            let (hs, ws) = (n / 2, n / 2 + 1);
            let src = random_grid(rng, hs, ws, 1, 0.0, 1.0);
            let w = random_grid(rng, n, n, 1, -1.0, 1.0);
            let g = upsample_bilinear_adjoint(&w, hs, ws)?.map(|v| v * fault);
            let idx = probe_indices(rng, hs * ws, config.probes);
            let f = |x: &[f64]| {
                let s = ImageGrid::new(hs, ws, 1, x.to_vec())?;
                Ok((dot(upsample_bilinear(&s, n, n)?.as_slice(), w.as_slice()), 0))
            };
            let report = finite_difference_check_fn(f, src.as_slice(), g.as_slice(), &idx, eps)?;
            Ok(StageCheck {
                report,
                describe: Box::new(move |i| format!("({},{})", i / ws, i % ws)),
            })
        }
        PipelineStage::WarpCoordinates => {
            let depth = random_grid(rng, n, n, 1, 2.0, 8.0);
            let pose = random_pose(rng, 0.1, 0.5);
            let wu = random_grid(rng, n, n, 1, -1.0, 1.0);
            let wv = random_grid(rng, n, n, 1, -1.0, 1.0);
            let (gd, gp) = warp_coordinates_adjoint(&depth, &pose, &k, wu.as_slice(), wv.as_slice())?;
            let mut x = depth.as_slice().to_vec();
            x.extend_from_slice(&pose.params());
            let mut g = gd.as_slice().to_vec();
            g.extend_from_slice(&gp);
            g.iter_mut().for_each(|v| *v *= fault);
            let mut idx = probe_indices(rng, n * n, config.probes);
            idx.extend(n * n..n * n + 6);
            let f = |x: &[f64]| {
                let d = ImageGrid::new(n, n, 1, x[..n * n].to_vec())?;
                let p = PoseSE3::exp6(x[n * n..].try_into().expect("six pose entries"))?;
                let c = warp_coordinates(&d, &p, &k)?;
                let mut sig = Signature::default();
                c.validity().iter().for_each(|&b| sig.push(b));
                Ok((dot(c.xs(), wu.as_slice()) + dot(c.ys(), wv.as_slice()), sig.value()))
            };
            let report = finite_difference_check_fn(f, &x, &g, &idx, eps)?;
            Ok(StageCheck {
                report,
                describe: Box::new(move |i| {
                    if i < n * n {
                        pixel(i)
                    } else {
                        format!("pose[{}]", i - n * n)
                    }
                }),
            })
        }
        PipelineStage::BilinearSample => {
            let src = random_texture(rng, n, n, 3);
            let hi = (n - 1) as f64;
            let xs: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..hi)).collect();
            let ys: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..hi)).collect();
            let field =
                |xs: &[f64], ys: &[f64]| CoordinateField::from_fn(n, n, |y, x| (xs[y * n + x], ys[y * n + x], true));
            let w = random_grid(rng, n, n, 3, -1.0, 1.0);
            let coords = field(&xs, &ys);
            let view = bilinear_sample(&src, &coords)?;
            let (gx, gy) = bilinear_sample_adjoint(&src, &coords, &view.valid, &w)?;
            let mut x = xs.clone();
            x.extend_from_slice(&ys);
            let mut g = gx;
            g.extend(gy);
            g.iter_mut().for_each(|v| *v *= fault);
            let idx = probe_indices(rng, 2 * n * n, config.probes);
            let f = |x: &[f64]| {
                let c = field(&x[..n * n], &x[n * n..]);
                let v = bilinear_sample(&src, &c)?;
                let mut sig = Signature::default();
                for i in 0..n * n {
                    match locate_cell(c.xs()[i], c.ys()[i], n, n) {
                        Some(cell) => sig.push_u64((cell.x0 as u64) << 32 | cell.y0 as u64),
                        None => sig.push_u64(u64::MAX),
                    }
                }
                Ok((dot(v.image.as_slice(), w.as_slice()), sig.value()))
            };
            let report = finite_difference_check_fn(f, &x, &g, &idx, eps)?;
            Ok(StageCheck {
                report,
                describe: Box::new(move |i| {
                    let axis = if i < n * n { "u" } else { "v" };
                    format!("{axis}{}", pixel(i % (n * n)))
                }),
            })
        }
        PipelineStage::PhotometricError => {
            let a = random_texture(rng, n, n, 3);
            let b = random_texture(rng, n, n, 3);
            let w = random_grid(rng, n, n, 1, -1.0, 1.0);
            let (_, cache) = pe_forward(&a, &b, DEFAULT_ALPHA)?;
            let g = pe_adjoint_b(&a, &b, DEFAULT_ALPHA, &cache, &w)?.map(|v| v * fault);
            let idx = probe_indices(rng, n * n * 3, config.probes);
            let f = |x: &[f64]| {
                let bb = ImageGrid::new(n, n, 3, x.to_vec())?;
                let (pe, _) = pe_forward(&a, &bb, DEFAULT_ALPHA)?;
                let ssim = crate::photometric::ssim_map(&a, &bb)?;
                let mut sig = Signature::default();
                for (i, &xi) in x.iter().enumerate() {
                    sig.push(ssim.as_slice()[i] > 1.0);
                    sig.push(xi > a.as_slice()[i]);
                }
                Ok((dot(pe.as_slice(), w.as_slice()), sig.value()))
            };
            let report = finite_difference_check_fn(f, b.as_slice(), g.as_slice(), &idx, eps)?;
            Ok(StageCheck {
                report,
                describe: Box::new(move |i| format!("{}c{}", pixel(i / 3), i % 3)),
            })
        }
        PipelineStage::Smoothness => {
            let depth = random_grid(rng, n, n, 1, 1.0, 10.0);
            let image = random_texture(rng, n, n, 3);
            let seed_mask = Mask::from_fn(n, n, |y, x| (y * 7 + x * 3) % 11 < 4);
            let gate = seed_mask.dilate(1);
            let (_, g) = smoothness_forward_adjoint(&depth, &image, Some(&gate), true, &mut Signature::default())?;
            let g = g.expect("gradient requested").map(|v| v * fault);
            let idx = probe_indices(rng, n * n, config.probes);
            let f = |x: &[f64]| {
                let d = ImageGrid::new(n, n, 1, x.to_vec())?;
                let mut sig = Signature::default();
                let (l, _) = smoothness_forward_adjoint(&d, &image, Some(&gate), false, &mut sig)?;
                Ok((l, sig.value()))
            };
            let report = finite_difference_check_fn(f, depth.as_slice(), g.as_slice(), &idx, eps)?;
            Ok(StageCheck {
                report,
                describe: Box::new(pixel),
            })
        }
        PipelineStage::TotalLoss => {
            let target = random_texture(rng, n, n, 3);
            let sources = vec![random_texture(rng, n, n, 3), random_texture(rng, n, n, 3)];
            let inputs = LossInputs::new(target, sources, k);
            let h2 = n / 2;
            let state = FieldState::new(
                vec![
                    random_grid(rng, h2, h2, 1, 0.05, 0.5),
                    random_grid(rng, n, n, 1, 0.05, 0.5),
                ],
                vec![
                    random_pose(rng, 0.02, 0.05).params(),
                    random_pose(rng, 0.02, 0.05).params(),
                ],
            );
            let settings = LossSettings {
                use_auto_mask: true,
                ..Default::default()
            };
            let probe_seed = rng.random();
            let mut report = finite_difference_check(&state, &inputs, &settings, eps, config.probes, probe_seed)?;
            if fault != 1.0 {
                for p in &mut report.probes {
                    p.analytic *= fault;
                    p.relative_error = crate::optimization::relative_error(p.analytic, p.numeric);
                }
                report = FdReport::from_probes(report.probes);
            }
            Ok(StageCheck {
                report,
                describe: Box::new(|i| format!("x[{i}]")),
            })
        }
    }
}
