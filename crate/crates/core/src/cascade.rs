//! Cascaded depth estimation: a rough depth map partitions the image into
//! sight-distance intervals, each interval is re-optimized against source
//! frames further apart in time, and the per-interval maps are fused.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{sigma_to_depth, CameraIntrinsics, DepthRange, PoseSE3};
use crate::imaging::{ImageGrid, Mask};
use crate::optimization::{optimize, FieldState, LossTrace, OptimizerConfig};
use crate::photometric::{LossInputs, LossSettings, Reduction, DEFAULT_ALPHA, DEFAULT_LAMBDA};
use crate::{Error, Result};

/// Pixels whose rough depth lies in `[alpha, beta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SightMask {
    pub mask: Mask,
    pub alpha: f64,
    pub beta: f64,
}

impl SightMask {
    pub fn coverage(&self) -> f64 {
        self.mask.fraction()
    }
}

/// Checks that intervals are nonnegative, non-empty, ordered and disjoint.
pub fn validate_intervals(intervals: &[(f64, f64)]) -> Result<()> {
    if intervals.is_empty() {
        return Err(Error::invalid("at least one interval is required"));
    }
    for &(a, b) in intervals {
        if !(a >= 0.0 && a < b && b.is_finite()) {
            return Err(Error::invalid(format!(
                "interval [{a}, {b}) is inverted or out of range"
            )));
        }
    }
    for w in intervals.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::invalid(format!(
                "intervals [{}, {}) and [{}, {}) overlap or are out of order",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    Ok(())
}

/// Contiguous intervals from edges `e0 < e1 < …`.
pub fn intervals_from_edges(edges: &[f64]) -> Result<Vec<(f64, f64)>> {
    if edges.len() < 2 {
        return Err(Error::invalid("at least two interval edges are required"));
    }
    let iv: Vec<(f64, f64)> = edges.windows(2).map(|w| (w[0], w[1])).collect();
    validate_intervals(&iv)?;
    Ok(iv)
}

/// One mask per interval: `mask_i(p) = [α_i ≤ rough(p) < β_i]`.
///
/// Bounds above `MAX(rough)` are accepted; the corresponding masks are
/// simply empty.
pub fn generate_sight_masks(rough_depth: &ImageGrid, intervals: &[(f64, f64)]) -> Result<Vec<SightMask>> {
    rough_depth.require_single_channel("rough depth")?;
    validate_intervals(intervals)?;
    if rough_depth.first_non_finite().is_some() {
        return Err(Error::invalid("rough depth must be finite"));
    }
    Ok(intervals
        .iter()
        .map(|&(alpha, beta)| {
            let data = rough_depth.as_slice().iter().map(|&d| d >= alpha && d < beta).collect();
            SightMask {
                mask: Mask::new(rough_depth.height(), rough_depth.width(), data).expect("matching size"),
                alpha,
                beta,
            }
        })
        .collect())
}

/// Offsets `±ξ^{i-1}` for layers `i = 1..=n`.
pub fn plan_frame_offsets(xi: usize, n_layers: usize) -> Result<Vec<Vec<i64>>> {
    if xi == 0 {
        return Err(Error::invalid("xi must be at least 1"));
    }
    if n_layers == 0 {
        return Err(Error::invalid("at least one layer is required"));
    }
    let mut out = Vec::with_capacity(n_layers);
    let mut step: i64 = 1;
    for i in 0..n_layers {
        if i > 0 {
            step = step
                .checked_mul(xi as i64)
                .ok_or_else(|| Error::invalid("frame offsets overflow"))?;
        }
        out.push(vec![-step, step]);
    }
    Ok(out)
}

/// `fused(p) = Σ_i mask_i(p) · depth_i(p)`; pixels outside every mask take
/// the value of the last layer.
pub fn fuse_depth(masks: &[SightMask], layer_depths: &[ImageGrid]) -> Result<ImageGrid> {
    let raw: Vec<&Mask> = masks.iter().map(|m| &m.mask).collect();
    fuse_mask_grids(&raw, layer_depths)
}

pub fn fuse_mask_grids(masks: &[&Mask], layer_depths: &[ImageGrid]) -> Result<ImageGrid> {
    if masks.is_empty() || masks.len() != layer_depths.len() {
        return Err(Error::invalid(format!(
            "need one depth map per mask, got {} masks and {} depths",
            masks.len(),
            layer_depths.len()
        )));
    }
    let first = &layer_depths[0];
    first.require_single_channel("layer depth")?;
    for (m, d) in masks.iter().zip(layer_depths) {
        first.require_same_shape(d)?;
        if !m.matches_grid(first) {
            return Err(Error::shape(
                first.shape_string(),
                format!("{}x{} mask", m.height(), m.width()),
            ));
        }
    }
    let last = layer_depths.last().expect("non-empty");
    let mut fused = ImageGrid::zeros(first.height(), first.width(), 1);
    for i in 0..first.as_slice().len() {
        let mut owner = None;
        for (k, m) in masks.iter().enumerate() {
            if m.as_slice()[i] {
                if let Some(prev) = owner {
                    return Err(Error::MaskOverlap {
                        first: prev,
                        second: k,
                        y: i / first.width(),
                        x: i % first.width(),
                    });
                }
                owner = Some(k);
            }
        }
        fused.as_mut_slice()[i] = match owner {
            Some(k) => layer_depths[k].as_slice()[i],
            None => last.as_slice()[i],
        };
    }
    Ok(fused)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalUnits {
    /// Bounds are rough-depth values.
    #[default]
    Absolute,
    /// Bounds are fractions of the maximum rough depth.
    FractionOfMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub interval: [f64; 2],
    pub offsets: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub layers: Vec<LayerConfig>,
    pub xi: usize,
    /// Pyramid levels of the σ field.
    pub scales: usize,
    pub interval_units: IntervalUnits,
    /// Optimizer of the rough stage.
    pub optimizer: OptimizerConfig,
    /// Optimizer of each layer; the rough-stage optimizer when absent.
    pub layer_optimizer: Option<OptimizerConfig>,
    pub lambda: f64,
    pub alpha: f64,
    pub depth_range: DepthRange,
    /// Constant depth the rough stage starts from.
    pub init_depth: f64,
    pub target_index: usize,
    /// Clamp offsets that reach past the sequence instead of failing.
    pub clamp_offsets: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self::from_intervals(&[(0.0, 30.0), (30.0, 60.0), (60.0, 80.0)], 2).expect("valid default")
    }
}

impl CascadeConfig {
    /// Layers over `intervals` with offsets `±ξ^{i-1}`.
    pub fn from_intervals(intervals: &[(f64, f64)], xi: usize) -> Result<Self> {
        validate_intervals(intervals)?;
        let offsets = plan_frame_offsets(xi, intervals.len())?;
        Ok(Self {
            layers: intervals
                .iter()
                .zip(offsets)
                .map(|(&(a, b), offsets)| LayerConfig {
                    interval: [a, b],
                    offsets,
                })
                .collect(),
            xi,
            scales: 1,
            interval_units: IntervalUnits::Absolute,
            optimizer: OptimizerConfig::default(),
            layer_optimizer: None,
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
            depth_range: DepthRange::default(),
            init_depth: 50.0,
            target_index: 0,
            clamp_offsets: false,
        })
    }

    /// One layer over `[0, top)` at offsets ±1.
    pub fn single_layer(top: f64) -> Result<Self> {
        Self::from_intervals(&[(0.0, top)], 1)
    }

    pub fn intervals(&self) -> Vec<(f64, f64)> {
        self.layers.iter().map(|l| (l.interval[0], l.interval[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("cascade needs at least one layer"));
        }
        validate_intervals(&self.intervals())?;
        if self.interval_units == IntervalUnits::FractionOfMax && self.layers.iter().any(|l| l.interval[1] > 1.0) {
            return Err(Error::invalid("fractional interval bounds must lie in [0, 1]"));
        }
        for l in &self.layers {
            if l.offsets.is_empty() || l.offsets.contains(&0) {
                return Err(Error::invalid("every layer needs nonzero frame offsets"));
            }
        }
        if self.xi == 0 {
            return Err(Error::invalid("xi must be at least 1"));
        }
        if self.scales == 0 {
            return Err(Error::invalid("at least one scale is required"));
        }
        self.optimizer.validate()?;
        if let Some(o) = &self.layer_optimizer {
            o.validate()?;
        }
        self.depth_range.validate()?;
        if !(self.init_depth > 0.0) {
            return Err(Error::invalid("initial depth must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: CascadeConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    fn loss_settings(&self, use_auto_mask: bool) -> LossSettings {
        LossSettings {
            lambda: self.lambda,
            alpha: self.alpha,
            use_auto_mask,
            reduction: Reduction::PerPixelMin,
        }
    }
}

/// Known camera motion for the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePrior {
    /// World→camera pose of every frame.
    pub world_to_camera: Vec<PoseSE3>,
    /// Hold relative poses fixed instead of refining them.
    pub freeze: bool,
}

impl PosePrior {
    fn relative(&self, target: usize, source: usize) -> PoseSE3 {
        self.world_to_camera[source].compose(&self.world_to_camera[target].invert())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub offsets: Vec<i64>,
    pub trace: LossTrace,
    pub final_loss: f64,
    pub valid_fraction: f64,
    pub poses: Vec<[f64; 6]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub interval: (f64, f64),
    pub coverage: f64,
    /// `None` when the mask is empty and the layer kept the rough depth.
    pub stage: Option<StageReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeReport {
    pub rough: StageReport,
    pub layers: Vec<LayerReport>,
    /// Rough-stage auto-mask was empty: frames carry no usable motion.
    pub degenerate: bool,
    pub offsets_clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub fused: ImageGrid,
    pub layer_depths: Vec<ImageGrid>,
    pub rough: ImageGrid,
    pub masks: Vec<SightMask>,
    pub report: CascadeReport,
}

fn pyramid_sizes(h: usize, w: usize, scales: usize) -> Vec<(usize, usize)> {
    (0..scales).rev().map(|s| ((h >> s).max(1), (w >> s).max(1))).collect()
}

fn optimizer_for_layer(config: &CascadeConfig) -> &OptimizerConfig {
    config.layer_optimizer.as_ref().unwrap_or(&config.optimizer)
}

/// Resolves offsets against the sequence bounds.
fn resolve_offsets(offsets: &[i64], target: usize, len: usize, clamp: bool) -> Result<(Vec<i64>, bool)> {
    let lo = -(target as i64);
    let hi = len as i64 - 1 - target as i64;
    let mut out = Vec::with_capacity(offsets.len());
    let mut clamped = false;
    for &o in offsets {
        if o >= lo && o <= hi {
            out.push(o);
            continue;
        }
        if !clamp {
            let reach = offsets.iter().map(|o| o.unsigned_abs() as usize).max().unwrap_or(0);
            return Err(Error::InsufficientFrames {
                required: 2 * reach + 1,
                available: len,
            });
        }
        let c = o.clamp(lo, hi);
        clamped = true;
        if c != 0 && !out.contains(&c) {
            log::warn!("frame offset {o} clamped to {c}");
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(Error::InsufficientFrames {
            required: 2,
            available: len,
        });
    }
    Ok((out, clamped))
}

struct StageRun {
    state: FieldState,
    report: StageReport,
    degenerate: bool,
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    frames: &[ImageGrid],
    intrinsics: &CameraIntrinsics,
    config: &CascadeConfig,
    optimizer: &OptimizerConfig,
    offsets: &[i64],
    sigma0: Vec<ImageGrid>,
    poses0: Vec<[f64; 6]>,
    freeze_pose: bool,
    use_auto_mask: bool,
    gate: Option<&Mask>,
) -> Result<StageRun> {
    let t = config.target_index;
    let sources = offsets
        .iter()
        .map(|&o| frames[(t as i64 + o) as usize].clone())
        .collect();
    let mut inputs = LossInputs::new(frames[t].clone(), sources, *intrinsics);
    inputs.depth_range = config.depth_range;
    if let Some(g) = gate {
        inputs.photometric_gate = Some(g.clone());
        inputs.smoothness_gate = Some(g.dilate(1));
    }
    let settings = config.loss_settings(use_auto_mask);
    let opt = OptimizerConfig {
        freeze_pose,
        ..*optimizer
    };
    let result = optimize(&FieldState::new(sigma0, poses0), &inputs, &settings, &opt)?;
    let degenerate = result.breakdown.degenerate;
    Ok(StageRun {
        report: StageReport {
            offsets: offsets.to_vec(),
            final_loss: result.breakdown.total,
            valid_fraction: result.breakdown.valid_fraction,
            poses: result.state.poses.clone(),
            trace: result.trace,
        },
        state: result.state,
        degenerate,
    })
}

/// Scales a ±1 pose to offset `k` assuming constant velocity.
fn extrapolate_pose(unit: &[f64; 6], k: i64) -> [f64; 6] {
    unit.map(|v| v * k.unsigned_abs() as f64)
}

/// Runs the three-stage cascade on `frames` around `config.target_index`.
///
/// Stage 1 fits a rough depth and the ±1 poses with auto-masking. Stage 2
/// re-fits each layer, warm-started from the rough field, with the
/// photometric term gated by the layer's sight mask and auto-masking off.
/// Stage 3 fuses the layer depths.
pub fn run_cascade(
    frames: &[ImageGrid],
    intrinsics: &CameraIntrinsics,
    config: &CascadeConfig,
    pose_prior: Option<&PosePrior>,
) -> Result<CascadeOutput> {
    config.validate()?;
    let t = config.target_index;
    if t >= frames.len() {
        return Err(Error::invalid(format!(
            "target index {t} outside {} frames",
            frames.len()
        )));
    }
    for f in frames {
        frames[t].require_same_shape(f)?;
    }
    if let Some(p) = pose_prior {
        if p.world_to_camera.len() != frames.len() {
            return Err(Error::invalid("pose prior must list one pose per frame"));
        }
    }
    let (h, w) = (frames[t].height(), frames[t].width());
    let freeze = pose_prior.is_some_and(|p| p.freeze);

    let (rough_offsets, mut clamped) = resolve_offsets(&[-1, 1], t, frames.len(), config.clamp_offsets)?;
    let mut layer_offsets = Vec::with_capacity(config.layers.len());
    for l in &config.layers {
        let (o, c) = resolve_offsets(&l.offsets, t, frames.len(), config.clamp_offsets)?;
        clamped |= c;
        layer_offsets.push(o);
    }

    let initial_poses = |offsets: &[i64]| -> Vec<[f64; 6]> {
        offsets
            .iter()
            .map(|&o| match pose_prior {
                Some(p) => p.relative(t, (t as i64 + o) as usize).params(),
                None => [0.0; 6],
            })
            .collect()
    };
    let sigma_init = config.depth_range.sigma_for(config.init_depth);
    let sigma0: Vec<ImageGrid> = pyramid_sizes(h, w, config.scales)
        .into_iter()
        .map(|(sh, sw)| ImageGrid::filled(sh, sw, 1, sigma_init))
        .collect();

    let rough_run = run_stage(
        frames,
        intrinsics,
        config,
        &config.optimizer,
        &rough_offsets,
        sigma0,
        initial_poses(&rough_offsets),
        freeze,
        true,
        None,
    )?;
    let finest = |s: &FieldState| sigma_to_depth(s.finest_sigma(), &config.depth_range);
    let rough = finest(&rough_run.state)?;
    let degenerate = rough_run.degenerate;
    if degenerate {
        log::warn!("rough stage auto-mask is empty; frames show no usable motion");
    }

    let intervals: Vec<(f64, f64)> = match config.interval_units {
        IntervalUnits::Absolute => config.intervals(),
        IntervalUnits::FractionOfMax => {
            let max = rough.max_value();
            config.intervals().iter().map(|&(a, b)| (a * max, b * max)).collect()
        }
    };
    let masks = generate_sight_masks(&rough, &intervals)?;

    let unit_poses: Vec<[f64; 6]> = rough_run.state.poses.clone();
    let layer_runs: Vec<Result<(ImageGrid, LayerReport)>> = masks
        .par_iter()
        .zip(layer_offsets.par_iter())
        .map(|(mask, offsets)| {
            let interval = (mask.alpha, mask.beta);
            if mask.mask.count() == 0 {
                return Ok((
                    rough.clone(),
                    LayerReport {
                        interval,
                        coverage: 0.0,
                        stage: None,
                    },
                ));
            }
            let poses0: Vec<[f64; 6]> = if pose_prior.is_some() {
                initial_poses(offsets)
            } else {
                // Stage-1 sources are ordered (-1, +1).
                offsets
                    .iter()
                    .map(|&o| {
                        let unit = if o < 0 {
                            &unit_poses[0]
                        } else {
                            &unit_poses[unit_poses.len() - 1]
                        };
                        extrapolate_pose(unit, o)
                    })
                    .collect()
            };
            let run = run_stage(
                frames,
                intrinsics,
                config,
                optimizer_for_layer(config),
                offsets,
                rough_run.state.sigma.clone(),
                poses0,
                freeze,
                false,
                Some(&mask.mask),
            )?;
            Ok((
                finest(&run.state)?,
                LayerReport {
                    interval,
                    coverage: mask.coverage(),
                    stage: Some(run.report),
                },
            ))
        })
        .collect();
    let mut layer_depths = Vec::with_capacity(masks.len());
    let mut layers = Vec::with_capacity(masks.len());
    for r in layer_runs {
        let (d, rep) = r?;
        layer_depths.push(d);
        layers.push(rep);
    }
    let fused = fuse_depth(&masks, &layer_depths)?;
    Ok(CascadeOutput {
        fused,
        layer_depths,
        rough,
        masks,
        report: CascadeReport {
            rough: rough_run.report,
            layers,
            degenerate,
            offsets_clamped: clamped,
        },
    })
}
