//! Image grids, differentiable bilinear sampling, view synthesis, resampling
//! and windowed statistics.
//!
//! Pixel centers sit on integer coordinates: column `x ∈ [0, W-1]`, row
//! `y ∈ [0, H-1]`. Grids are row-major with interleaved channels.

use serde::{Deserialize, Serialize};

use crate::geometry::{warp_coordinates, CameraIntrinsics, CoordinateField, PoseSE3};
use crate::{Error, Result};

/// H×W×C grid of `f64` values.
///
/// Used for images (values in `[0, 1]`), depth maps, σ fields and per-pixel
/// loss maps. All values are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{} values", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite grid value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Grid filled with `value`. Panics on zero dimensions.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty grid");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// Builds a grid from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep values finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Applies `f` to every value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> ImageGrid {
        let mut out = ImageGrid::zeros(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(y, x, c));
                }
            }
        }
        out
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean over all pixels and channels.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Returns the first non-finite index, if any.
    pub(crate) fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub(crate) fn require_single_channel(&self, what: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::invalid(format!(
                "{what} must be single-channel, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }

    pub(crate) fn require_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(self.shape_string(), other.shape_string()));
        }
        Ok(())
    }
}

/// H×W binary grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{} values", height * width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        assert!(height > 0 && width > 0, "empty mask");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    /// Thresholds a single-channel grid: `value > 0.5` is set.
    pub fn from_grid(grid: &ImageGrid) -> Result<Self> {
        grid.require_single_channel("mask grid")?;
        Ok(Self {
            height: grid.height(),
            width: grid.width(),
            data: grid.as_slice().iter().map(|&v| v > 0.5).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn matches_grid(&self, grid: &ImageGrid) -> bool {
        self.height == grid.height() && self.width == grid.width()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert!(self.same_shape(other), "mask shape mismatch");
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        assert!(self.same_shape(other), "mask shape mismatch");
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn not(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&a| !a).collect(),
        }
    }

    /// Dilation by `radius` pixels with a square (Chebyshev) structuring element.
    pub fn dilate(&self, radius: usize) -> Mask {
        let (h, w) = (self.height as isize, self.width as isize);
        let r = radius as isize;
        Mask::from_fn(self.height, self.width, |y, x| {
            let (y, x) = (y as isize, x as isize);
            ((y - r).max(0)..=(y + r).min(h - 1))
                .any(|yy| ((x - r).max(0)..=(x + r).min(w - 1)).any(|xx| self.get(yy as usize, xx as usize)))
        })
    }

    /// Keeps pixels whose whole Chebyshev neighbourhood (clipped to the
    /// grid) is set.
    pub fn erode(&self, radius: usize) -> Mask {
        self.not().dilate(radius).not()
    }

    /// 0/1 single-channel float grid.
    pub fn to_grid(&self) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Result of resampling a source image at warped coordinates.
///
/// Invalid pixels (out of bounds or behind the camera) carry value 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledView {
    pub image: ImageGrid,
    pub valid: Mask,
}

/// Bilinear cell for a continuous coordinate: top-left corner and fractional
/// offsets. `None` when the coordinate lies outside `[0, W-1] × [0, H-1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Cell {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub ax: f64,
    pub ay: f64,
}

#[inline]
pub(crate) fn locate_cell(x: f64, y: f64, width: usize, height: usize) -> Option<Cell> {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let (x0, x1) = lattice_pair(x, width);
    let (y0, y1) = lattice_pair(y, height);
    Some(Cell {
        x0,
        y0,
        x1,
        y1,
        ax: x - x0 as f64,
        ay: y - y0 as f64,
    })
}

#[inline]
fn lattice_pair(v: f64, n: usize) -> (usize, usize) {
    if n == 1 {
        return (0, 0);
    }
    let i0 = (v.floor() as usize).min(n - 2);
    (i0, i0 + 1)
}

/// Samples `source` bilinearly at `coords`.
///
/// Pixels whose coordinate is geometrically invalid or outside the source
/// bounds are marked invalid and set to 0. Sampling at integer coordinates
/// reproduces source values exactly.
pub fn bilinear_sample(source: &ImageGrid, coords: &CoordinateField) -> Result<SampledView> {
    let (h, w, ch) = (coords.height(), coords.width(), source.channels());
    let mut image = ImageGrid::zeros(h, w, ch);
    let mut valid = Mask::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            if !coords.is_valid(y, x) {
                continue;
            }
            let (u, v) = coords.get(y, x);
            if !u.is_finite() || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite sampling coordinate at pixel ({x}, {y})"
                )));
            }
            let Some(cell) = locate_cell(u, v, source.width(), source.height()) else {
                continue;
            };
            valid.set(y, x, true);
            for c in 0..ch {
                image.set(y, x, c, interpolate(source, &cell, c));
            }
        }
    }
    Ok(SampledView { image, valid })
}

#[inline]
fn interpolate(source: &ImageGrid, cell: &Cell, c: usize) -> f64 {
    let v00 = source.get(cell.y0, cell.x0, c);
    let v01 = source.get(cell.y0, cell.x1, c);
    let v10 = source.get(cell.y1, cell.x0, c);
    let v11 = source.get(cell.y1, cell.x1, c);
    let top = (1.0 - cell.ax) * v00 + cell.ax * v01;
    let bottom = (1.0 - cell.ax) * v10 + cell.ax * v11;
    (1.0 - cell.ay) * top + cell.ay * bottom
}

/// Adjoint of [`bilinear_sample`] with respect to the sampling coordinates.
///
/// `grad_output` has the shape of the sampled image. Returns per-pixel
/// `(∂L/∂x, ∂L/∂y)`; invalid pixels receive zero.
pub fn bilinear_sample_adjoint(
    source: &ImageGrid,
    coords: &CoordinateField,
    valid: &Mask,
    grad_output: &ImageGrid,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w) = (coords.height(), coords.width());
    if grad_output.height() != h || grad_output.width() != w || grad_output.channels() != source.channels() {
        return Err(Error::shape(
            format!("{h}x{w}x{}", source.channels()),
            grad_output.shape_string(),
        ));
    }
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if !valid.get(y, x) {
                continue;
            }
            let (u, v) = coords.get(y, x);
            let Some(cell) = locate_cell(u, v, source.width(), source.height()) else {
                continue;
            };
            let (mut sx, mut sy) = (0.0, 0.0);
            for c in 0..source.channels() {
                let g = grad_output.get(y, x, c);
                if g == 0.0 {
                    continue;
                }
                let v00 = source.get(cell.y0, cell.x0, c);
                let v01 = source.get(cell.y0, cell.x1, c);
                let v10 = source.get(cell.y1, cell.x0, c);
                let v11 = source.get(cell.y1, cell.x1, c);
                let dx = (1.0 - cell.ay) * (v01 - v00) + cell.ay * (v11 - v10);
                let dy = (1.0 - cell.ax) * (v10 - v00) + cell.ax * (v11 - v01);
                sx += g * dx;
                sy += g * dy;
            }
            gx[y * w + x] = sx;
            gy[y * w + x] = sy;
        }
    }
    Ok((gx, gy))
}

/// Synthesizes the target view by warping target pixels into `source` with
/// the target depth map and the target→source pose, then sampling.
pub fn synthesize_view(
    source: &ImageGrid,
    depth: &ImageGrid,
    pose: &PoseSE3,
    intrinsics: &CameraIntrinsics,
) -> Result<SampledView> {
    let coords = warp_coordinates(depth, pose, intrinsics)?;
    bilinear_sample(source, &coords)
}

fn align_corners_scale(src: usize, dst: usize) -> f64 {
    if dst > 1 {
        (src - 1) as f64 / (dst - 1) as f64
    } else {
        0.0
    }
}

/// Align-corners bilinear enlargement to `target_h × target_w`.
pub fn upsample_bilinear(image: &ImageGrid, target_h: usize, target_w: usize) -> Result<ImageGrid> {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    if target_h < h || target_w < w {
        return Err(Error::invalid(format!(
            "upsample target {target_h}x{target_w} is smaller than source {h}x{w}"
        )));
    }
    if target_h == h && target_w == w {
        return Ok(image.clone());
    }
    let sy = align_corners_scale(h, target_h);
    let sx = align_corners_scale(w, target_w);
    let mut out = ImageGrid::zeros(target_h, target_w, ch);
    for y in 0..target_h {
        let (y0, y1, ay) = upsample_taps(y as f64 * sy, h);
        for x in 0..target_w {
            let (x0, x1, ax) = upsample_taps(x as f64 * sx, w);
            for c in 0..ch {
                let top = (1.0 - ax) * image.get(y0, x0, c) + ax * image.get(y0, x1, c);
                let bottom = (1.0 - ax) * image.get(y1, x0, c) + ax * image.get(y1, x1, c);
                out.set(y, x, c, (1.0 - ay) * top + ay * bottom);
            }
        }
    }
    Ok(out)
}

#[inline]
fn upsample_taps(pos: f64, n: usize) -> (usize, usize, f64) {
    let (i0, i1) = lattice_pair(pos, n);
    let a = if n == 1 { 0.0 } else { pos - i0 as f64 };
    (i0, i1, a)
}

/// Transpose of [`upsample_bilinear`]: maps a full-resolution gradient back to
/// the `src_h × src_w` grid.
pub fn upsample_bilinear_adjoint(grad: &ImageGrid, src_h: usize, src_w: usize) -> Result<ImageGrid> {
    let (th, tw, ch) = (grad.height(), grad.width(), grad.channels());
    if th < src_h || tw < src_w || src_h == 0 || src_w == 0 {
        return Err(Error::invalid(format!(
            "cannot pull {th}x{tw} gradient back to {src_h}x{src_w}"
        )));
    }
    if th == src_h && tw == src_w {
        return Ok(grad.clone());
    }
    let sy = align_corners_scale(src_h, th);
    let sx = align_corners_scale(src_w, tw);
    let mut out = ImageGrid::zeros(src_h, src_w, ch);
    for y in 0..th {
        let (y0, y1, ay) = upsample_taps(y as f64 * sy, src_h);
        for x in 0..tw {
            let (x0, x1, ax) = upsample_taps(x as f64 * sx, src_w);
            for c in 0..ch {
                let g = grad.get(y, x, c);
                let d = out.as_mut_slice();
                d[(y0 * src_w + x0) * ch + c] += (1.0 - ay) * (1.0 - ax) * g;
                d[(y0 * src_w + x1) * ch + c] += (1.0 - ay) * ax * g;
                d[(y1 * src_w + x0) * ch + c] += ay * (1.0 - ax) * g;
                d[(y1 * src_w + x1) * ch + c] += ay * ax * g;
            }
        }
    }
    Ok(out)
}

/// Forward differences `I(x+1) - I(x)` and `I(y+1) - I(y)`.
///
/// The last column of ∂x and the last row of ∂y are zero so both outputs
/// keep the input shape.
pub fn spatial_gradients(image: &ImageGrid) -> Result<(ImageGrid, ImageGrid)> {
    if image.width() < 2 || image.height() < 2 {
        return Err(Error::invalid(format!(
            "spatial gradients need at least 2x2 pixels, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    Ok(forward_differences(image))
}

/// Same as [`spatial_gradients`] but tolerates single-row or single-column
/// grids (the degenerate direction is all zeros).
pub(crate) fn forward_differences(image: &ImageGrid) -> (ImageGrid, ImageGrid) {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let mut dx = ImageGrid::zeros(h, w, ch);
    let mut dy = ImageGrid::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                if x + 1 < w {
                    dx.set(y, x, c, image.get(y, x + 1, c) - image.get(y, x, c));
                }
                if y + 1 < h {
                    dy.set(y, x, c, image.get(y + 1, x, c) - image.get(y, x, c));
                }
            }
        }
    }
    (dx, dy)
}

/// Per-pixel windowed statistics of two images.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStats {
    pub mean_a: ImageGrid,
    pub mean_b: ImageGrid,
    pub var_a: ImageGrid,
    pub var_b: ImageGrid,
    pub cov_ab: ImageGrid,
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn check_window(window: usize, h: usize, w: usize) -> Result<usize> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("window must be odd and >= 1, got {window}")));
    }
    let r = window / 2;
    if h <= r || w <= r {
        return Err(Error::invalid(format!(
            "reflection padding of radius {r} needs an image larger than {r} pixels per side, got {h}x{w}"
        )));
    }
    Ok(r)
}

/// Mean over `window × window` neighborhoods with reflection padding.
pub(crate) fn box_filter(image: &ImageGrid, window: usize) -> Result<ImageGrid> {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let r = check_window(window, h, w)? as isize;
    let norm = 1.0 / (window * window) as f64;
    let mut out = ImageGrid::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -r..=r {
                        acc += image.get(yy, reflect(x as isize + dx, w), c);
                    }
                }
                out.set(y, x, c, acc * norm);
            }
        }
    }
    Ok(out)
}

/// Transpose of [`box_filter`].
pub(crate) fn box_filter_adjoint(grad: &ImageGrid, window: usize) -> Result<ImageGrid> {
    let (h, w, ch) = (grad.height(), grad.width(), grad.channels());
    let r = check_window(window, h, w)? as isize;
    let norm = 1.0 / (window * window) as f64;
    let mut out = ImageGrid::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let g = grad.get(y, x, c) * norm;
                if g == 0.0 {
                    continue;
                }
                for dy in -r..=r {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -r..=r {
                        let xx = reflect(x as isize + dx, w);
                        let i = out.index(yy, xx, c);
                        out.as_mut_slice()[i] += g;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Windowed means, population variances and covariance of `a` and `b`.
pub fn local_mean_var(a: &ImageGrid, b: &ImageGrid, window: usize) -> Result<LocalStats> {
    a.require_same_shape(b)?;
    let mean_a = box_filter(a, window)?;
    let mean_b = box_filter(b, window)?;
    let sq_a = box_filter(&a.map(|v| v * v), window)?;
    let sq_b = box_filter(&b.map(|v| v * v), window)?;
    let ab = ImageGrid {
        height: a.height,
        width: a.width,
        channels: a.channels,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    };
    let e_ab = box_filter(&ab, window)?;
    let var = |sq: &ImageGrid, m: &ImageGrid| ImageGrid {
        height: m.height,
        width: m.width,
        channels: m.channels,
        data: sq.data.iter().zip(&m.data).map(|(s, m)| s - m * m).collect(),
    };
    let var_a = var(&sq_a, &mean_a);
    let var_b = var(&sq_b, &mean_b);
    let cov_ab = ImageGrid {
        height: a.height,
        width: a.width,
        channels: a.channels,
        data: e_ab
            .data
            .iter()
            .zip(mean_a.data.iter().zip(&mean_b.data))
            .map(|(e, (ma, mb))| e - ma * mb)
            .collect(),
    };
    Ok(LocalStats {
        mean_a,
        mean_b,
        var_a,
        var_b,
        cov_ab,
    })
}
