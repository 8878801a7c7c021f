//! View-synthesis training objective: SSIM, photometric error, reprojection
//! reduction, auto-masking, edge-aware smoothness and the multi-scale total.
//!
//! Every stage has a forward and an adjoint; [`evaluate_objective`] chains
//! them into exact reverse-mode gradients of the total loss.

use serde::{Deserialize, Serialize};

use crate::geometry::{
    sigma_to_depth, sigma_to_depth_adjoint, warp_coordinates, warp_coordinates_adjoint, CameraIntrinsics,
    CoordinateField, DepthRange, PoseSE3,
};
use crate::imaging::{
    bilinear_sample, bilinear_sample_adjoint, box_filter_adjoint, forward_differences, local_mean_var, locate_cell,
    upsample_bilinear, upsample_bilinear_adjoint, ImageGrid, LocalStats, Mask, SampledView,
};
use crate::{Error, Result};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 3;
pub const DEFAULT_ALPHA: f64 = 0.85;
pub const DEFAULT_LAMBDA: f64 = 0.001;

/// Per-pixel, per-channel SSIM over 3×3 reflection-padded windows.
pub fn ssim_map(a: &ImageGrid, b: &ImageGrid) -> Result<ImageGrid> {
    let stats = local_mean_var(a, b, SSIM_WINDOW)?;
    Ok(ssim_from_stats(&stats))
}

fn ssim_from_stats(s: &LocalStats) -> ImageGrid {
    let mut out = s.mean_a.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let (ma, mb) = (s.mean_a.as_slice()[i], s.mean_b.as_slice()[i]);
        let (va, vb, cab) = (s.var_a.as_slice()[i], s.var_b.as_slice()[i], s.cov_ab.as_slice()[i]);
        *v =
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    out
}

/// Intermediates of [`pe_map`] reused by its adjoint.
pub(crate) struct PeCache {
    stats: LocalStats,
    ssim: ImageGrid,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Photometric error `α/2 (1 - SSIM) + (1 - α) |a - b|`, averaged over
/// channels. SSIM is clamped to at most 1 so the error is nonnegative.
pub fn pe_map(a: &ImageGrid, b: &ImageGrid, alpha: f64) -> Result<ImageGrid> {
    Ok(pe_forward(a, b, alpha)?.0)
}

pub(crate) fn pe_forward(a: &ImageGrid, b: &ImageGrid, alpha: f64) -> Result<(ImageGrid, PeCache)> {
    check_alpha(alpha)?;
    a.require_same_shape(b)?;
    let stats = local_mean_var(a, b, SSIM_WINDOW)?;
    let ssim = ssim_from_stats(&stats);
    let ch = a.channels();
    let inv_c = 1.0 / ch as f64;
    let mut pe = ImageGrid::zeros(a.height(), a.width(), 1);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let mut acc = 0.0;
            for c in 0..ch {
                let s = ssim.get(y, x, c).min(1.0);
                acc += 0.5 * alpha * (1.0 - s) + (1.0 - alpha) * (a.get(y, x, c) - b.get(y, x, c)).abs();
            }
            pe.set(y, x, 0, acc * inv_c);
        }
    }
    Ok((pe, PeCache { stats, ssim }))
}

/// Adjoint of [`pe_map`] with respect to its second argument.
pub(crate) fn pe_adjoint_b(
    a: &ImageGrid,
    b: &ImageGrid,
    alpha: f64,
    cache: &PeCache,
    grad_pe: &ImageGrid,
) -> Result<ImageGrid> {
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let inv_c = 1.0 / ch as f64;
    let mut grad_b = ImageGrid::zeros(h, w, ch);
    let mut g_mean = ImageGrid::zeros(h, w, ch);
    let mut g_sq = ImageGrid::zeros(h, w, ch);
    let mut g_cross = ImageGrid::zeros(h, w, ch);
    let s = &cache.stats;
    for y in 0..h {
        for x in 0..w {
            let g = grad_pe.get(y, x, 0) * inv_c;
            if g == 0.0 {
                continue;
            }
            for c in 0..ch {
                let i = a.index(y, x, c);
                let diff = b.as_slice()[i] - a.as_slice()[i];
                grad_b.as_mut_slice()[i] += (1.0 - alpha) * g * sign(diff);

                let ssim = cache.ssim.as_slice()[i];
                if ssim > 1.0 {
                    continue;
                }
                let g_ssim = -0.5 * alpha * g;
                let (ma, mb) = (s.mean_a.as_slice()[i], s.mean_b.as_slice()[i]);
                let a1 = 2.0 * ma * mb + SSIM_C1;
                let a2 = 2.0 * s.cov_ab.as_slice()[i] + SSIM_C2;
                let b1 = ma * ma + mb * mb + SSIM_C1;
                let b2 = s.var_a.as_slice()[i] + s.var_b.as_slice()[i] + SSIM_C2;
                let den = b1 * b2;
                let d_a1 = a2 / den;
                let d_a2 = a1 / den;
                let d_b1 = -ssim / b1;
                let d_b2 = -ssim / b2;
                // μb enters A1, B1 directly and A2, B2 through σab = E[ab] - μaμb, σb² = E[b²] - μb².
                let d_mean = d_a1 * 2.0 * ma - d_a2 * 2.0 * ma + d_b1 * 2.0 * mb - d_b2 * 2.0 * mb;
                g_mean.as_mut_slice()[i] = g_ssim * d_mean;
                g_sq.as_mut_slice()[i] = g_ssim * d_b2;
                g_cross.as_mut_slice()[i] = g_ssim * 2.0 * d_a2;
            }
        }
    }
    let bm = box_filter_adjoint(&g_mean, SSIM_WINDOW)?;
    let bs = box_filter_adjoint(&g_sq, SSIM_WINDOW)?;
    let bc = box_filter_adjoint(&g_cross, SSIM_WINDOW)?;
    for (i, gb) in grad_b.as_mut_slice().iter_mut().enumerate() {
        *gb += bm.as_slice()[i] + 2.0 * b.as_slice()[i] * bs.as_slice()[i] + a.as_slice()[i] * bc.as_slice()[i];
    }
    Ok(grad_b)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// How per-view errors combine at each pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Per-pixel minimum over views.
    #[default]
    PerPixelMin,
    Sum,
    Mean,
}

/// Combines per-view error maps at each pixel, skipping views invalid there.
/// Returns the reduced map (0 where no view is valid), the pixels with at
/// least one valid view, and the per-pixel argmin view.
fn reduce_views(pes: &[ImageGrid], valid: &[&Mask], reduction: Reduction) -> (ImageGrid, Mask, Vec<usize>) {
    let (h, w) = (pes[0].height(), pes[0].width());
    let mut out = ImageGrid::zeros(h, w, 1);
    let mut any = Mask::filled(h, w, false);
    let mut argmin = vec![usize::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::INFINITY;
            let mut sum = 0.0;
            let mut count = 0usize;
            for (v, pe) in pes.iter().enumerate() {
                if !valid[v].get(y, x) {
                    continue;
                }
                let e = pe.get(y, x, 0);
                sum += e;
                count += 1;
                if e < best {
                    best = e;
                    argmin[y * w + x] = v;
                }
            }
            if count == 0 {
                continue;
            }
            any.set(y, x, true);
            let value = match reduction {
                Reduction::PerPixelMin => best,
                Reduction::Sum => sum,
                Reduction::Mean => sum / count as f64,
            };
            out.set(y, x, 0, value);
        }
    }
    (out, any, argmin)
}

/// Reprojection error of `target` against synthesized views.
///
/// Returns the mean over pixels valid in at least one view and the per-pixel
/// reduced map.
pub fn reprojection_loss(
    target: &ImageGrid,
    synthesized: &[SampledView],
    reduction: Reduction,
    alpha: f64,
) -> Result<(f64, ImageGrid)> {
    if synthesized.is_empty() {
        return Err(Error::invalid("reprojection loss needs at least one synthesized view"));
    }
    let mut pes = Vec::with_capacity(synthesized.len());
    for view in synthesized {
        if !view.valid.matches_grid(target) {
            return Err(Error::shape(target.shape_string(), view.image.shape_string()));
        }
        pes.push(pe_map(target, &view.image, alpha)?);
    }
    let valid: Vec<&Mask> = synthesized.iter().map(|v| &v.valid).collect();
    let (map, any, _) = reduce_views(&pes, &valid, reduction);
    let n = any.count();
    let loss = if n == 0 {
        0.0
    } else {
        map.as_slice().iter().sum::<f64>() / n as f64
    };
    Ok((loss, map))
}

/// Auto-mask: 1 where the best warped error is strictly below the best error
/// of the raw, unwarped sources.
pub fn auto_mask(target: &ImageGrid, sources: &[ImageGrid], synthesized: &[SampledView], alpha: f64) -> Result<Mask> {
    if sources.is_empty() || sources.len() != synthesized.len() {
        return Err(Error::invalid(format!(
            "auto-mask needs aligned non-empty lists, got {} sources and {} views",
            sources.len(),
            synthesized.len()
        )));
    }
    let warped: Vec<ImageGrid> = synthesized
        .iter()
        .map(|v| pe_map(target, &v.image, alpha))
        .collect::<Result<_>>()?;
    let raw = identity_errors(target, sources, alpha)?;
    let valid: Vec<&Mask> = synthesized.iter().map(|v| &v.valid).collect();
    Ok(auto_mask_from_errors(&warped, &valid, &raw))
}

/// Per-pixel minimum error of the raw sources against the target.
fn identity_errors(target: &ImageGrid, sources: &[ImageGrid], alpha: f64) -> Result<ImageGrid> {
    let mut best = ImageGrid::filled(target.height(), target.width(), 1, f64::MAX);
    for src in sources {
        let pe = pe_map(target, src, alpha)?;
        for (b, &e) in best.as_mut_slice().iter_mut().zip(pe.as_slice()) {
            *b = b.min(e);
        }
    }
    Ok(best)
}

fn auto_mask_from_errors(warped: &[ImageGrid], valid: &[&Mask], raw: &ImageGrid) -> Mask {
    let (h, w) = (raw.height(), raw.width());
    Mask::from_fn(h, w, |y, x| {
        let best = warped
            .iter()
            .zip(valid)
            .filter(|(_, m)| m.get(y, x))
            .map(|(pe, _)| pe.get(y, x, 0))
            .fold(f64::INFINITY, f64::min);
        best < raw.get(y, x, 0)
    })
}

/// Edge-aware smoothness of mean-normalized inverse depth.
pub fn smoothness_loss(depth: &ImageGrid, image: &ImageGrid) -> Result<f64> {
    Ok(smoothness_forward_adjoint(depth, image, None, false, &mut Signature::default())?.0)
}

/// [`smoothness_loss`] restricted to a pixel support.
///
/// Only pixels in `gate` contribute, the normalizing mean is taken over the
/// gate, and a difference term is counted only when both endpoints lie in
/// the gate. Depth outside the gate therefore has no influence.
pub fn smoothness_loss_gated(depth: &ImageGrid, image: &ImageGrid, gate: Option<&Mask>) -> Result<f64> {
    Ok(smoothness_forward_adjoint(depth, image, gate, false, &mut Signature::default())?.0)
}

pub(crate) fn smoothness_forward_adjoint(
    depth: &ImageGrid,
    image: &ImageGrid,
    gate: Option<&Mask>,
    want_grad: bool,
    signature: &mut Signature,
) -> Result<(f64, Option<ImageGrid>)> {
    depth.require_single_channel("depth")?;
    if depth.height() != image.height() || depth.width() != image.width() {
        return Err(Error::shape(
            format!("{}x{}", image.height(), image.width()),
            depth.shape_string(),
        ));
    }
    if let Some(g) = gate {
        if !g.matches_grid(depth) {
            return Err(Error::shape(
                depth.shape_string(),
                format!("{}x{} gate", g.height(), g.width()),
            ));
        }
    }
    if let Some(i) = depth.as_slice().iter().position(|&d| !(d > 0.0)) {
        return Err(Error::invalid(format!("depth must be positive (index {i})")));
    }
    let (h, w) = (depth.height(), depth.width());
    let inside = |y: usize, x: usize| gate.is_none_or(|g| g.get(y, x));
    let n = (0..h * w).filter(|&i| inside(i / w, i % w)).count();
    if n == 0 {
        return Ok((0.0, want_grad.then(|| ImageGrid::zeros(h, w, 1))));
    }
    let inv: Vec<f64> = depth.as_slice().iter().map(|&d| 1.0 / d).collect();
    let mean = (0..h * w)
        .filter(|&i| inside(i / w, i % w))
        .map(|i| inv[i])
        .sum::<f64>()
        / n as f64;
    let (ix, iy) = forward_differences(image);
    let ch = image.channels() as f64;
    let edge_weight = |g: &ImageGrid, y: usize, x: usize| {
        let m = (0..image.channels()).map(|c| g.get(y, x, c).abs()).sum::<f64>() / ch;
        (-m).exp()
    };

    let mut loss = 0.0;
    let mut g_norm = vec![0.0; h * w];
    let inv_n = 1.0 / n as f64;
    for y in 0..h {
        for x in 0..w {
            if !inside(y, x) {
                continue;
            }
            let i = y * w + x;
            let mut edge = |j: usize, weight: f64, signature: &mut Signature| {
                let diff = (inv[j] - inv[i]) / mean;
                signature.push(diff > 0.0);
                loss += weight * diff.abs();
                let s = sign(diff) * weight * inv_n;
                g_norm[j] += s;
                g_norm[i] -= s;
            };
            if x + 1 < w && inside(y, x + 1) {
                edge(i + 1, edge_weight(&ix, y, x), signature);
            }
            if y + 1 < h && inside(y + 1, x) {
                edge(i + w, edge_weight(&iy, y, x), signature);
            }
        }
    }
    loss *= inv_n;
    if !want_grad {
        return Ok((loss, None));
    }
    // d* = d / mean(d) over the gate.
    let dot = (0..h * w)
        .filter(|&i| inside(i / w, i % w))
        .map(|i| g_norm[i] * inv[i])
        .sum::<f64>();
    let mut grad = ImageGrid::zeros(h, w, 1);
    for i in 0..h * w {
        if !inside(i / w, i % w) {
            continue;
        }
        let g_inv = g_norm[i] / mean - dot / (mean * mean) * inv_n;
        grad.as_mut_slice()[i] = -g_inv * inv[i] * inv[i];
    }
    Ok((loss, Some(grad)))
}

/// Fingerprint of every discrete branch taken during an evaluation
/// (sampling cells, validity, argmin view, absolute-value signs, masks).
/// Two evaluations with equal signatures lie on the same smooth piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signature(u64);

impl Default for Signature {
    fn default() -> Self {
        Signature(0xcbf2_9ce4_8422_2325)
    }
}

impl Signature {
    #[inline]
    pub(crate) fn push_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, b: bool) {
        self.push_u64(b as u64);
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

/// Loss weights and switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSettings {
    pub lambda: f64,
    pub alpha: f64,
    pub use_auto_mask: bool,
    pub reduction: Reduction,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
            use_auto_mask: true,
            reduction: Reduction::PerPixelMin,
        }
    }
}

/// Fixed data of one target frame's objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossInputs {
    pub target: ImageGrid,
    pub sources: Vec<ImageGrid>,
    pub intrinsics: CameraIntrinsics,
    pub depth_range: DepthRange,
    /// Pixels allowed to contribute photometric error (sight mask).
    pub photometric_gate: Option<Mask>,
    /// Support of the smoothness term.
    pub smoothness_gate: Option<Mask>,
}

impl LossInputs {
    pub fn new(target: ImageGrid, sources: Vec<ImageGrid>, intrinsics: CameraIntrinsics) -> Self {
        Self {
            target,
            sources,
            intrinsics,
            depth_range: DepthRange::default(),
            photometric_gate: None,
            smoothness_gate: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::invalid("at least one source frame is required"));
        }
        for s in &self.sources {
            self.target.require_same_shape(s)?;
        }
        if self.intrinsics.width != self.target.width() || self.intrinsics.height != self.target.height() {
            return Err(Error::shape(
                format!("{}x{} intrinsics", self.intrinsics.height, self.intrinsics.width),
                self.target.shape_string(),
            ));
        }
        for g in self.photometric_gate.iter().chain(self.smoothness_gate.iter()) {
            if !g.matches_grid(&self.target) {
                return Err(Error::shape(
                    self.target.shape_string(),
                    format!("{}x{} gate", g.height(), g.width()),
                ));
            }
        }
        self.depth_range.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleTerms {
    pub photometric: f64,
    pub smoothness: f64,
    pub included_pixels: usize,
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Photometric term averaged over scales.
    pub photometric: f64,
    /// Smoothness term averaged over scales (before λ).
    pub smoothness: f64,
    pub total: f64,
    /// Reduced per-pixel error at the finest scale (0 where no view is valid).
    pub per_pixel_photometric: ImageGrid,
    pub auto_mask: Mask,
    /// Pixels valid in some view at the finest scale.
    pub valid: Mask,
    /// Fraction of pixels that are valid, auto-mask-kept and inside the gate.
    pub valid_fraction: f64,
    /// Set when some scale had no contributing pixel; its photometric term is 0.
    pub degenerate: bool,
    pub scales: Vec<ScaleTerms>,
}

/// Gradients of the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// One grid per scale, matching the σ grids.
    pub sigma: Vec<ImageGrid>,
    /// One 6-vector per source view.
    pub pose: Vec<[f64; 6]>,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.sigma.iter().all(|g| g.first_non_finite().is_none()) && self.pose.iter().flatten().all(|v| v.is_finite())
    }
}

/// Multi-scale total loss.
///
/// Scales are ordered coarse→fine. Each σ grid is upsampled to full
/// resolution, converted to depth and used to synthesize every source view;
/// the photometric and smoothness terms are computed at full resolution and
/// averaged across scales. The auto-mask is computed once from the finest
/// scale and shared.
pub fn multiscale_total_loss(
    inputs: &LossInputs,
    settings: &LossSettings,
    sigma_per_scale: &[ImageGrid],
    poses: &[PoseSE3],
) -> Result<LossBreakdown> {
    Ok(evaluate_objective(inputs, settings, sigma_per_scale, poses, false)?.breakdown)
}

pub(crate) struct Evaluation {
    pub breakdown: LossBreakdown,
    pub gradients: Option<GradientBundle>,
    pub signature: Signature,
}

struct ViewPass {
    coords: CoordinateField,
    view: SampledView,
    pe: ImageGrid,
    cache: PeCache,
}

struct ScalePass {
    depth: ImageGrid,
    views: Vec<ViewPass>,
    reduced: ImageGrid,
    any_valid: Mask,
    argmin: Vec<usize>,
}

fn check_finite(grid: &ImageGrid, stage: &'static str) -> Result<()> {
    match grid.first_non_finite() {
        Some(_) => Err(Error::NonFinite { stage }),
        None => Ok(()),
    }
}

pub(crate) fn evaluate_objective(
    inputs: &LossInputs,
    settings: &LossSettings,
    sigma_per_scale: &[ImageGrid],
    poses: &[PoseSE3],
    want_grad: bool,
) -> Result<Evaluation> {
    inputs.validate()?;
    check_alpha(settings.alpha)?;
    if !(settings.lambda >= 0.0 && settings.lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda must be finite and >= 0, got {}",
            settings.lambda
        )));
    }
    if sigma_per_scale.is_empty() {
        return Err(Error::invalid("at least one scale is required"));
    }
    if poses.len() != inputs.sources.len() {
        return Err(Error::invalid(format!(
            "{} poses for {} source frames",
            poses.len(),
            inputs.sources.len()
        )));
    }
    let target = &inputs.target;
    let (h, w) = (target.height(), target.width());
    let mut sig = Signature::default();

    let mut passes = Vec::with_capacity(sigma_per_scale.len());
    for sigma in sigma_per_scale {
        sigma.require_single_channel("sigma")?;
        let full = upsample_bilinear(sigma, h, w)?;
        let depth = sigma_to_depth(&full, &inputs.depth_range)?;
        check_finite(&depth, "sigma_to_depth")?;
        let mut views = Vec::with_capacity(poses.len());
        for (src, pose) in inputs.sources.iter().zip(poses) {
            let coords = warp_coordinates(&depth, pose, &inputs.intrinsics)?;
            if coords.xs().iter().chain(coords.ys()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    stage: "warp_coordinates",
                });
            }
            let view = bilinear_sample(src, &coords)?;
            check_finite(&view.image, "bilinear_sample")?;
            let (pe, cache) = pe_forward(target, &view.image, settings.alpha)?;
            check_finite(&pe, "pe_map")?;
            for y in 0..h {
                for x in 0..w {
                    let ok = view.valid.get(y, x);
                    sig.push(ok);
                    if ok {
                        let (u, v) = coords.get(y, x);
                        if let Some(cell) = locate_cell(u, v, src.width(), src.height()) {
                            sig.push_u64((cell.x0 as u64) << 32 | cell.y0 as u64);
                        }
                    }
                }
            }
            for (i, &s) in cache.ssim.as_slice().iter().enumerate() {
                sig.push(s > 1.0);
                sig.push(view.image.as_slice()[i] > target.as_slice()[i]);
            }
            views.push(ViewPass {
                coords,
                view,
                pe,
                cache,
            });
        }
        let pes: Vec<ImageGrid> = views.iter().map(|v| v.pe.clone()).collect();
        let valid: Vec<&Mask> = views.iter().map(|v| &v.view.valid).collect();
        let (reduced, any_valid, argmin) = reduce_views(&pes, &valid, settings.reduction);
        for &a in &argmin {
            sig.push_u64(a as u64);
        }
        passes.push(ScalePass {
            depth,
            views,
            reduced,
            any_valid,
            argmin,
        });
    }

    let finest = passes.last().expect("non-empty scales");
    let auto = if settings.use_auto_mask {
        let raw = identity_errors(target, &inputs.sources, settings.alpha)?;
        let pes: Vec<ImageGrid> = finest.views.iter().map(|v| v.pe.clone()).collect();
        let valid: Vec<&Mask> = finest.views.iter().map(|v| &v.view.valid).collect();
        auto_mask_from_errors(&pes, &valid, &raw)
    } else {
        Mask::filled(h, w, true)
    };
    for &b in auto.as_slice() {
        sig.push(b);
    }

    let scale_weight = 1.0 / passes.len() as f64;
    let mut scale_terms = Vec::with_capacity(passes.len());
    let mut grad_sigma = Vec::with_capacity(passes.len());
    let mut grad_pose = vec![[0.0; 6]; poses.len()];
    let mut degenerate = false;
    let mut finest_included = 0;

    for (pass, sigma) in passes.iter().zip(sigma_per_scale) {
        let mut included = pass.any_valid.and(&auto);
        if let Some(g) = &inputs.photometric_gate {
            included = included.and(g);
        }
        let n_inc = included.count();
        finest_included = n_inc;
        let photometric = if n_inc == 0 {
            degenerate = true;
            0.0
        } else {
            pass.reduced
                .as_slice()
                .iter()
                .zip(included.as_slice())
                .filter(|(_, &m)| m)
                .map(|(v, _)| v)
                .sum::<f64>()
                / n_inc as f64
        };
        let (smoothness, smooth_grad) = smoothness_forward_adjoint(
            &pass.depth,
            target,
            inputs.smoothness_gate.as_ref(),
            want_grad,
            &mut sig,
        )?;
        if !smoothness.is_finite() {
            return Err(Error::NonFinite { stage: "smoothness" });
        }
        scale_terms.push(ScaleTerms {
            photometric,
            smoothness,
            included_pixels: n_inc,
        });

        if !want_grad {
            continue;
        }
        let mut grad_depth = smooth_grad
            .expect("requested gradient")
            .map(|g| g * settings.lambda * scale_weight);
        if n_inc > 0 {
            let g_pixel = scale_weight / n_inc as f64;
            for (v, vp) in pass.views.iter().enumerate() {
                let mut g_pe = ImageGrid::zeros(h, w, 1);
                let mut touched = false;
                for i in 0..h * w {
                    if !included.as_slice()[i] || !vp.view.valid.as_slice()[i] {
                        continue;
                    }
                    let g = match settings.reduction {
                        Reduction::PerPixelMin => {
                            if pass.argmin[i] == v {
                                g_pixel
                            } else {
                                0.0
                            }
                        }
                        Reduction::Sum => g_pixel,
                        Reduction::Mean => {
                            let k = pass.views.iter().filter(|o| o.view.valid.as_slice()[i]).count();
                            g_pixel / k as f64
                        }
                    };
                    if g != 0.0 {
                        g_pe.as_mut_slice()[i] = g;
                        touched = true;
                    }
                }
                if !touched {
                    continue;
                }
                let g_img = pe_adjoint_b(target, &vp.view.image, settings.alpha, &vp.cache, &g_pe)?;
                let (gu, gv) = bilinear_sample_adjoint(&inputs.sources[v], &vp.coords, &vp.view.valid, &g_img)?;
                let (gd, gp) = warp_coordinates_adjoint(&pass.depth, &poses[v], &inputs.intrinsics, &gu, &gv)?;
                for (acc, g) in grad_depth.as_mut_slice().iter_mut().zip(gd.as_slice()) {
                    *acc += g;
                }
                for k in 0..6 {
                    grad_pose[v][k] += gp[k];
                }
            }
        }
        let g_full = sigma_to_depth_adjoint(&pass.depth, &grad_depth, &inputs.depth_range)?;
        let g_sigma = upsample_bilinear_adjoint(&g_full, sigma.height(), sigma.width())?;
        check_finite(&g_sigma, "gradient")?;
        grad_sigma.push(g_sigma);
    }

    let photometric = scale_terms.iter().map(|s| s.photometric).sum::<f64>() * scale_weight;
    let smoothness = scale_terms.iter().map(|s| s.smoothness).sum::<f64>() * scale_weight;
    let total = scale_terms
        .iter()
        .map(|s| s.photometric + settings.lambda * s.smoothness)
        .sum::<f64>()
        * scale_weight;
    let finest = passes.pop().expect("non-empty scales");
    let breakdown = LossBreakdown {
        photometric,
        smoothness,
        total,
        per_pixel_photometric: finest.reduced,
        auto_mask: auto,
        valid: finest.any_valid,
        valid_fraction: finest_included as f64 / (h * w) as f64,
        degenerate,
        scales: scale_terms,
    };
    if !total.is_finite() {
        return Err(Error::NonFinite { stage: "total_loss" });
    }
    Ok(Evaluation {
        breakdown,
        gradients: want_grad.then_some(GradientBundle {
            sigma: grad_sigma,
            pose: grad_pose,
        }),
        signature: sig,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn texture(h: usize, w: usize, ch: usize, phase: f64) -> ImageGrid {
        ImageGrid::from_fn(h, w, ch, |y, x, c| {
            0.5 + 0.2 * (0.7 * x as f64 + 0.3 * y as f64 + phase + c as f64).sin()
                + 0.15 * (0.4 * y as f64 - 0.5 * x as f64 + 2.0 * c as f64).cos()
        })
        .unwrap()
    }

    fn full_view(image: ImageGrid) -> SampledView {
        let valid = Mask::filled(image.height(), image.width(), true);
        SampledView { image, valid }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = texture(6, 7, 3, 0.0);
        let b = texture(6, 7, 3, 0.9);
        let s = ssim_map(&a, &a).unwrap();
        assert!(s.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let ab = ssim_map(&a, &b).unwrap();
        let ba = ssim_map(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!(ab.as_slice().iter().all(|&v| (-1.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn ssim_of_black_against_white() {
        let s = ssim_map(&ImageGrid::filled(4, 4, 1, 0.0), &ImageGrid::filled(4, 4, 1, 1.0)).unwrap();
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!(s.as_slice().iter().all(|&v| (v - expect).abs() < 1e-15));
        assert_abs_diff_eq!(expect, 9.999e-5, epsilon = 1e-8);
    }

    #[test]
    fn pe_examples() {
        let a = texture(5, 5, 3, 0.3);
        assert!(pe_map(&a, &a, 0.85)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v.abs() < 1e-12));
        let black = ImageGrid::filled(4, 4, 3, 0.0);
        let white = ImageGrid::filled(4, 4, 3, 1.0);
        let pe = pe_map(&black, &white, 0.85).unwrap();
        let expect = 0.425 * (1.0 - SSIM_C1 / (1.0 + SSIM_C1)) + 0.15;
        assert!(pe.as_slice().iter().all(|&v| (v - expect).abs() < 1e-12));
        assert_abs_diff_eq!(expect, 0.574957, epsilon = 1e-6);
        let b = texture(5, 5, 3, 1.1);
        let l1 = pe_map(&a, &b, 0.0).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let direct = (0..3).map(|c| (a.get(y, x, c) - b.get(y, x, c)).abs()).sum::<f64>() / 3.0;
                assert_abs_diff_eq!(l1.get(y, x, 0), direct, epsilon = 1e-15);
            }
        }
        assert!(pe_map(&a, &b, 1.5).is_err());
        assert!(pe_map(&a, &texture(5, 6, 3, 0.0), 0.85).is_err());
    }

    #[test]
    fn pe_is_nonnegative() {
        let a = texture(8, 8, 3, 0.0);
        let b = texture(8, 8, 3, 2.5).map(|v| 1.0 - v);
        assert!(pe_map(&a, &b, 0.85).unwrap().as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pe_adjoint_matches_finite_differences() {
        let a = texture(6, 5, 2, 0.0);
        let b = texture(6, 5, 2, 0.8);
        let weights = ImageGrid::from_fn(6, 5, 1, |y, x, _| ((y * 5 + x) % 7) as f64 / 7.0 - 0.3).unwrap();
        let f = |b: &ImageGrid| -> f64 {
            pe_map(&a, b, 0.85)
                .unwrap()
                .as_slice()
                .iter()
                .zip(weights.as_slice())
                .map(|(p, w)| p * w)
                .sum()
        };
        let (_, cache) = pe_forward(&a, &b, 0.85).unwrap();
        let g = pe_adjoint_b(&a, &b, 0.85, &cache, &weights).unwrap();
        let eps = 1e-6;
        for i in 0..b.as_slice().len() {
            let mut p = b.clone();
            let mut m = b.clone();
            p.as_mut_slice()[i] += eps;
            m.as_mut_slice()[i] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            let an = g.as_slice()[i];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-5,
                "i={i} {an} {fd}"
            );
        }
    }

    #[test]
    fn reprojection_reductions() {
        let target = ImageGrid::filled(2, 2, 1, 0.3);
        let v1 = full_view(ImageGrid::filled(2, 2, 1, 0.5));
        let v2 = full_view(ImageGrid::filled(2, 2, 1, 0.8));
        let (min, _) = reprojection_loss(&target, &[v1.clone(), v2.clone()], Reduction::PerPixelMin, 0.0).unwrap();
        let (sum, _) = reprojection_loss(&target, &[v1.clone(), v2.clone()], Reduction::Sum, 0.0).unwrap();
        let (mean, _) = reprojection_loss(&target, &[v1, v2], Reduction::Mean, 0.0).unwrap();
        assert_abs_diff_eq!(min, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(sum, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(mean, 0.35, epsilon = 1e-12);
        assert!(reprojection_loss(&target, &[], Reduction::Sum, 0.0).is_err());
    }

    #[test]
    fn reprojection_min_dominance_and_identity() {
        let t = texture(6, 6, 3, 0.0);
        let other = full_view(texture(6, 6, 3, 1.3));
        let (l, map) =
            reprojection_loss(&t, &[other.clone(), full_view(t.clone())], Reduction::PerPixelMin, 0.85).unwrap();
        assert!(l.abs() < 1e-12);
        let single = pe_map(&t, &other.image, 0.85).unwrap();
        for (m, s) in map.as_slice().iter().zip(single.as_slice()) {
            assert!(m <= s);
        }
    }

    #[test]
    fn reprojection_excludes_pixels_invalid_everywhere() {
        let t = ImageGrid::filled(3, 3, 1, 0.5);
        let mut v = full_view(ImageGrid::filled(3, 3, 1, 0.6));
        v.valid.set(0, 0, false);
        v.image.set(0, 0, 0, 0.0);
        let (l, map) = reprojection_loss(&t, &[v], Reduction::PerPixelMin, 0.0).unwrap();
        assert_abs_diff_eq!(l, 0.1, epsilon = 1e-12);
        assert_eq!(map.get(0, 0, 0), 0.0);
    }

    #[test]
    fn auto_mask_static_scene_is_zero() {
        let t = texture(6, 6, 3, 0.0);
        let sources = vec![t.clone(), t.clone()];
        let views = vec![full_view(t.clone()), full_view(t.clone())];
        assert_eq!(auto_mask(&t, &sources, &views, 0.85).unwrap().count(), 0);
    }

    #[test]
    fn auto_mask_keeps_pixels_where_warp_helps() {
        let t = texture(6, 6, 3, 0.0);
        let sources = vec![texture(6, 6, 3, 1.0)];
        let m = auto_mask(&t, &sources, &[full_view(t.clone())], 0.85).unwrap();
        assert_eq!(m.count(), 36);
        assert!(auto_mask(&t, &sources, &[], 0.85).is_err());
    }

    #[test]
    fn smoothness_examples() {
        let depth = ImageGrid::new(1, 3, 1, vec![1.0, 0.5, 1.0 / 3.0]).unwrap();
        let img = ImageGrid::filled(1, 3, 3, 0.4);
        assert_abs_diff_eq!(smoothness_loss(&depth, &img).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        let flat = ImageGrid::filled(4, 4, 1, 7.0);
        assert_eq!(smoothness_loss(&flat, &texture(4, 4, 3, 0.0)).unwrap(), 0.0);
        let d = ImageGrid::from_fn(5, 5, 1, |y, x, _| 1.0 + (x * y) as f64 * 0.3).unwrap();
        let img = texture(5, 5, 3, 0.2);
        let l1 = smoothness_loss(&d, &img).unwrap();
        let l2 = smoothness_loss(&d.map(|v| v * 4.7), &img).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn smoothness_adjoint_matches_finite_differences() {
        let d = ImageGrid::from_fn(5, 6, 1, |y, x, _| 1.0 + ((x * 7 + y * 3) % 5) as f64 * 0.37).unwrap();
        let img = texture(5, 6, 3, 0.5);
        let mut gate = Mask::filled(5, 6, true);
        gate.set(0, 0, false);
        gate.set(3, 4, false);
        for g in [None, Some(&gate)] {
            let (_, grad) = smoothness_forward_adjoint(&d, &img, g, true, &mut Signature::default()).unwrap();
            let grad = grad.unwrap();
            let eps = 1e-6;
            for i in 0..30 {
                let mut p = d.clone();
                let mut m = d.clone();
                p.as_mut_slice()[i] += eps;
                m.as_mut_slice()[i] -= eps;
                let fd = (smoothness_loss_gated(&p, &img, g).unwrap() - smoothness_loss_gated(&m, &img, g).unwrap())
                    / (2.0 * eps);
                let an = grad.as_slice()[i];
                assert!((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-5);
            }
            if g.is_some() {
                assert_eq!(grad.get(0, 0, 0), 0.0);
                assert_eq!(grad.get(3, 4, 0), 0.0);
            }
        }
    }

    /// Sources are the target shifted by ±1 px, matching a lateral
    /// translation of fx·t/z = 1 px at the depth encoded by σ = 0.3.
    fn small_problem() -> (LossInputs, Vec<PoseSE3>, ImageGrid) {
        let k = CameraIntrinsics::new(10.0, 10.0, 5.0, 4.0, 10, 8).unwrap();
        let shifted = |dx: f64| {
            ImageGrid::from_fn(8, 10, 3, |y, x, c| {
                let x = x as f64 - dx;
                0.5 + 0.2 * (0.7 * x + 0.3 * y as f64 + c as f64).sin() + 0.15 * (0.4 * y as f64 - 0.5 * x).cos()
            })
            .unwrap()
        };
        let range = DepthRange::default();
        let tx = range.depth(0.3) / k.fx;
        let inputs = LossInputs::new(shifted(0.0), vec![shifted(1.0), shifted(-1.0)], k);
        let poses = vec![
            PoseSE3::exp6([0.001, -0.002, 0.0, tx, 0.0, 0.001]).unwrap(),
            PoseSE3::exp6([-0.001, 0.002, 0.001, -tx, 0.001, 0.0]).unwrap(),
        ];
        let sigma = ImageGrid::from_fn(8, 10, 1, |y, x, _| 0.3 + 0.002 * x as f64 + 0.001 * y as f64).unwrap();
        (inputs, poses, sigma)
    }

    #[test]
    fn lambda_zero_removes_smoothness() {
        let (inputs, poses, sigma) = small_problem();
        let settings = LossSettings {
            lambda: 0.0,
            use_auto_mask: false,
            ..Default::default()
        };
        let b = multiscale_total_loss(&inputs, &settings, &[sigma], &poses).unwrap();
        assert_eq!(b.total, b.photometric);
    }

    #[test]
    fn duplicated_scale_matches_single_scale() {
        let (inputs, poses, sigma) = small_problem();
        let settings = LossSettings::default();
        let one = multiscale_total_loss(&inputs, &settings, std::slice::from_ref(&sigma), &poses).unwrap();
        let two = multiscale_total_loss(&inputs, &settings, &[sigma.clone(), sigma], &poses).unwrap();
        assert!((one.total - two.total).abs() < 1e-15);
    }

    #[test]
    fn breakdown_total_identity() {
        let (mut inputs, poses, sigma) = small_problem();
        let mut gate = Mask::filled(8, 10, true);
        gate.set(2, 2, false);
        inputs.photometric_gate = Some(gate.clone());
        let settings = LossSettings::default();
        let b = multiscale_total_loss(&inputs, &settings, &[sigma], &poses).unwrap();
        let kept = b.valid.and(&b.auto_mask).and(&gate);
        let sum: f64 = b
            .per_pixel_photometric
            .as_slice()
            .iter()
            .zip(kept.as_slice())
            .filter(|(_, &k)| k)
            .map(|(v, _)| v)
            .sum();
        let expect = sum / kept.count() as f64 + settings.lambda * b.smoothness;
        assert!((b.total - expect).abs() < 1e-12, "{} {}", b.total, expect);
        assert!((0.0..=1.0).contains(&b.valid_fraction));
        assert!(b.auto_mask.as_slice().iter().any(|&v| v));
    }

    #[test]
    fn evaluations_are_bit_identical() {
        let (inputs, poses, sigma) = small_problem();
        let settings = LossSettings::default();
        let a = evaluate_objective(&inputs, &settings, std::slice::from_ref(&sigma), &poses, true).unwrap();
        let b = evaluate_objective(&inputs, &settings, &[sigma], &poses, true).unwrap();
        assert_eq!(a.breakdown.total.to_bits(), b.breakdown.total.to_bits());
        assert_eq!(a.gradients, b.gradients);
        assert_eq!(a.signature, b.signature);
    }
}
