//! Pinhole camera model, rigid poses, inverse-depth parameterization and the
//! target→source pixel warp.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::imaging::ImageGrid;
use crate::{Error, Result};

/// Transformed points with camera-frame `z` at or below this are behind the camera.
pub const Z_EPS: f64 = 1e-6;

/// Below this rotation angle the Rodrigues coefficients use their Taylor series.
const SMALL_ANGLE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!(
                "focal lengths must be finite and positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Closed-form inverse of [`Self::matrix`].
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K⁻¹ (x, y, 1)ᵀ`: the viewing ray with unit `z`.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn backproject(&self, x: f64, y: f64, depth: f64) -> Vector3<f64> {
        self.ray(x, y) * depth
    }

    /// Perspective projection; `None` for points with `z <= Z_EPS`.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= Z_EPS {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Rigid transform `x ↦ R x + t` parameterized by axis-angle ‖ translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 6]", try_from = "[f64; 6]")]
pub struct PoseSE3 {
    params: [f64; 6],
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl From<PoseSE3> for [f64; 6] {
    fn from(p: PoseSE3) -> Self {
        p.params
    }
}

impl TryFrom<[f64; 6]> for PoseSE3 {
    type Error = Error;

    fn try_from(params: [f64; 6]) -> Result<Self> {
        PoseSE3::exp6(params)
    }
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

/// Rodrigues coefficients `A = sinθ/θ`, `B = (1-cosθ)/θ²` and their scaled
/// derivatives `A'/θ`, `B'/θ`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE {
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            -1.0 / 3.0 + t2 / 30.0,
            -1.0 / 12.0 + t2 / 180.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            s / theta,
            (1.0 - c) / t2,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            params: [0.0; 6],
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from `(ω, t)`; rotation is `exp([ω]×)`.
    pub fn exp6(params: [f64; 6]) -> Result<Self> {
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite pose parameters {params:?}")));
        }
        let w = Vector3::new(params[0], params[1], params[2]);
        let (a, b, _, _) = rodrigues_coefficients(w.norm());
        let k = skew(&w);
        let rotation = Matrix3::identity() + k * a + k * k * b;
        Ok(Self {
            params,
            rotation,
            translation: Vector3::new(params[3], params[4], params[5]),
        })
    }

    /// Builds a pose from a rotation matrix (assumed orthonormal) and translation.
    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite rotation or translation"));
        }
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rotation));
        let w = q.scaled_axis();
        Ok(Self {
            params: [w.x, w.y, w.z, translation.x, translation.y, translation.z],
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self::exp6([0.0, 0.0, 0.0, t[0], t[1], t[2]]).expect("finite translation")
    }

    pub fn params(&self) -> [f64; 6] {
        self.params
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        Self::from_rotation_translation(rotation, translation).expect("composition of finite poses")
    }

    pub fn invert(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        let translation = -(rt * self.translation);
        Self::from_rotation_translation(rt, translation).expect("inverse of finite pose")
    }

    /// Partial derivatives `∂R/∂ω_k` for `k = 0, 1, 2`.
    pub fn rotation_jacobians(&self) -> [Matrix3<f64>; 3] {
        let w = Vector3::new(self.params[0], self.params[1], self.params[2]);
        let (a, b, da, db) = rodrigues_coefficients(w.norm());
        let k = skew(&w);
        let k2 = k * k;
        let mut out = [Matrix3::zeros(); 3];
        for (i, d) in out.iter_mut().enumerate() {
            let e = skew(&Vector3::ith(i, 1.0));
            *d = e * a + (e * k + k * e) * b + (k * da + k2 * db) * w[i];
        }
        out
    }
}

/// Maps σ ∈ [0, 1] to depth `D = 1 / (a σ + b)` with `D(0) = max`, `D(1) = min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self {
            min_depth: 0.1,
            max_depth: 100.0,
        }
    }
}

impl DepthRange {
    pub fn new(min_depth: f64, max_depth: f64) -> Result<Self> {
        let r = Self { min_depth, max_depth };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth && self.max_depth.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < min_depth < max_depth, got {} and {}",
                self.min_depth, self.max_depth
            )));
        }
        Ok(())
    }

    pub fn a(&self) -> f64 {
        1.0 / self.min_depth - 1.0 / self.max_depth
    }

    pub fn b(&self) -> f64 {
        1.0 / self.max_depth
    }

    #[inline]
    pub fn depth(&self, sigma: f64) -> f64 {
        1.0 / (self.a() * sigma + self.b())
    }

    /// σ that maps to `depth`, clamped to [0, 1].
    pub fn sigma_for(&self, depth: f64) -> f64 {
        ((1.0 / depth - self.b()) / self.a()).clamp(0.0, 1.0)
    }
}

/// Per-pixel σ parameters with their depth range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthField {
    pub sigma: ImageGrid,
    pub range: DepthRange,
}

impl DepthField {
    pub fn new(sigma: ImageGrid, range: DepthRange) -> Result<Self> {
        sigma.require_single_channel("sigma")?;
        range.validate()?;
        check_sigma(&sigma)?;
        Ok(Self { sigma, range })
    }

    pub fn from_depth(depth: &ImageGrid, range: DepthRange) -> Result<Self> {
        depth.require_single_channel("depth")?;
        let sigma = depth.map(|d| range.sigma_for(d));
        Self::new(sigma, range)
    }

    pub fn depth(&self) -> ImageGrid {
        self.sigma.map(|s| self.range.depth(s))
    }
}

fn check_sigma(sigma: &ImageGrid) -> Result<()> {
    for (i, &s) in sigma.as_slice().iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::invalid(format!("non-finite sigma at index {i}")));
        }
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::invalid(format!("sigma {s} at index {i} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Converts a σ grid to depth. Monotone decreasing; bounds hold by construction.
pub fn sigma_to_depth(sigma: &ImageGrid, range: &DepthRange) -> Result<ImageGrid> {
    range.validate()?;
    check_sigma(sigma)?;
    Ok(sigma.map(|s| range.depth(s)))
}

/// Adjoint of [`sigma_to_depth`]: `∂L/∂σ = ∂L/∂D · (-a D²)`.
pub fn sigma_to_depth_adjoint(depth: &ImageGrid, grad_depth: &ImageGrid, range: &DepthRange) -> Result<ImageGrid> {
    depth.require_same_shape(grad_depth)?;
    let a = range.a();
    let data = depth
        .as_slice()
        .iter()
        .zip(grad_depth.as_slice())
        .map(|(&d, &g)| -a * d * d * g)
        .collect();
    ImageGrid::new(depth.height(), depth.width(), depth.channels(), data)
}

/// Per-pixel continuous source coordinates with a validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateField {
    height: usize,
    width: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    valid: Vec<bool>,
}

impl CoordinateField {
    /// Builds a field from `f(y, x) -> (u, v, valid)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64, bool)) -> Self {
        let n = height * width;
        let (mut xs, mut ys, mut valid) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for y in 0..height {
            for x in 0..width {
                let (u, v, ok) = f(y, x);
                xs.push(u);
                ys.push(v);
                valid.push(ok);
            }
        }
        Self {
            height,
            width,
            xs,
            ys,
            valid,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.xs[i], self.ys[i])
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }
}

fn check_depth(depth: &ImageGrid) -> Result<()> {
    depth.require_single_channel("depth")?;
    if let Some(i) = depth.as_slice().iter().position(|&d| !(d > 0.0)) {
        return Err(Error::invalid(format!(
            "depth must be positive, index {i} is {}",
            depth.as_slice()[i]
        )));
    }
    Ok(())
}

/// Warps every target pixel into the source view:
/// `p_s ~ K (R · D(p_t) K⁻¹ p_t + t)` followed by perspective division.
///
/// Pixels whose transformed point has `z <= Z_EPS` are marked invalid.
/// The identity pose maps each pixel exactly onto itself.
pub fn warp_coordinates(depth: &ImageGrid, pose: &PoseSE3, intrinsics: &CameraIntrinsics) -> Result<CoordinateField> {
    check_depth(depth)?;
    let (h, w) = (depth.height(), depth.width());
    if pose.is_identity() {
        return Ok(CoordinateField::from_fn(h, w, |y, x| {
            (x as f64, y as f64, depth.get(y, x, 0) > Z_EPS)
        }));
    }
    Ok(CoordinateField::from_fn(h, w, |y, x| {
        let p = intrinsics.backproject(x as f64, y as f64, depth.get(y, x, 0));
        match intrinsics.project(&pose.transform_point(&p)) {
            Some((u, v)) => (u, v, true),
            None => (0.0, 0.0, false),
        }
    }))
}

/// Adjoint of [`warp_coordinates`].
///
/// Takes `∂L/∂u`, `∂L/∂v` per pixel and returns `∂L/∂D` per pixel and
/// `∂L/∂params` for the pose. Invalid pixels contribute nothing.
pub fn warp_coordinates_adjoint(
    depth: &ImageGrid,
    pose: &PoseSE3,
    intrinsics: &CameraIntrinsics,
    grad_u: &[f64],
    grad_v: &[f64],
) -> Result<(ImageGrid, [f64; 6])> {
    check_depth(depth)?;
    let (h, w) = (depth.height(), depth.width());
    if grad_u.len() != h * w || grad_v.len() != h * w {
        return Err(Error::shape(
            format!("{} gradients", h * w),
            format!("{}/{}", grad_u.len(), grad_v.len()),
        ));
    }
    let jac = pose.rotation_jacobians();
    let r = pose.rotation();
    let mut grad_depth = ImageGrid::zeros(h, w, 1);
    let mut grad_pose = [0.0; 6];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (gu, gv) = (grad_u[i], grad_v[i]);
            if gu == 0.0 && gv == 0.0 {
                continue;
            }
            let ray = intrinsics.ray(x as f64, y as f64);
            let d = depth.get(y, x, 0);
            let p = ray * d;
            let q = pose.transform_point(&p);
            if q.z <= Z_EPS {
                continue;
            }
            let iz = 1.0 / q.z;
            let gq = Vector3::new(
                gu * intrinsics.fx * iz,
                gv * intrinsics.fy * iz,
                -(gu * intrinsics.fx * q.x + gv * intrinsics.fy * q.y) * iz * iz,
            );
            grad_depth.set(y, x, 0, gq.dot(&(r * ray)));
            for k in 0..3 {
                grad_pose[k] += gq.dot(&(jac[k] * p));
                grad_pose[3 + k] += gq[k];
            }
        }
    }
    Ok((grad_depth, grad_pose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn k(w: usize, h: usize, f: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    /// Rodrigues from the axis/angle form, evaluated independently.
    fn rodrigues_oracle(w: [f64; 3]) -> Matrix3<f64> {
        let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        if theta == 0.0 {
            return Matrix3::identity();
        }
        let n = [w[0] / theta, w[1] / theta, w[2] / theta];
        let (s, c) = theta.sin_cos();
        let mut m = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let delta = if i == j { 1.0 } else { 0.0 };
                let eps = match (i, j) {
                    (0, 1) => -n[2],
                    (1, 0) => n[2],
                    (0, 2) => n[1],
                    (2, 0) => -n[1],
                    (1, 2) => -n[0],
                    (2, 1) => n[0],
                    _ => 0.0,
                };
                m[(i, j)] = c * delta + s * eps + (1.0 - c) * n[i] * n[j];
            }
        }
        m
    }

    #[test]
    fn intrinsics_validation_and_inverse() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        let k = CameraIntrinsics::new(718.856, 702.1, 607.19, 185.2, 1242, 375).unwrap();
        let prod = k.inverse_matrix() * k.matrix();
        assert!((prod - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn sigma_endpoints_and_midpoint() {
        let r = DepthRange::default();
        assert_abs_diff_eq!(r.depth(0.0), 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.depth(1.0), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(r.a(), 9.99, epsilon = 1e-12);
        assert_abs_diff_eq!(r.depth(0.5), 1.0 / (0.5 * 9.99 + 0.01), epsilon = 1e-12);
        assert_abs_diff_eq!(r.depth(0.5), 0.19980, epsilon = 1e-5);
    }

    #[test]
    fn sigma_to_depth_rejects_bad_input() {
        let r = DepthRange::default();
        let mut g = ImageGrid::filled(2, 2, 1, 0.5);
        g.as_mut_slice()[1] = 1.5;
        assert!(sigma_to_depth(&g, &r).is_err());
        g.as_mut_slice()[1] = f64::NAN;
        assert!(sigma_to_depth(&g, &r).is_err());
        assert!(DepthRange::new(1.0, 0.5).is_err());
    }

    #[test]
    fn sigma_adjoint_matches_finite_difference() {
        let r = DepthRange::default();
        for &s in &[0.01, 0.3, 0.77, 0.99] {
            let eps = 1e-6;
            let fd = (r.depth(s + eps) - r.depth(s - eps)) / (2.0 * eps);
            let d = ImageGrid::filled(1, 1, 1, r.depth(s));
            let g = sigma_to_depth_adjoint(&d, &ImageGrid::filled(1, 1, 1, 1.0), &r).unwrap();
            assert!((g.get(0, 0, 0) - fd).abs() / fd.abs() < 1e-7);
        }
    }

    #[test]
    fn exp6_zero_is_identity() {
        let p = PoseSE3::exp6([0.0; 6]).unwrap();
        assert_eq!(*p.rotation(), Matrix3::identity());
        assert!(p.is_identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = PoseSE3::exp6([0.0, 0.0, FRAC_PI_2, 0.0, 0.0, 0.0]).unwrap();
        let v = p.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((v - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-10);
        assert!((p.rotation() - rodrigues_oracle([0.0, 0.0, FRAC_PI_2])).abs().max() < 1e-12);
    }

    #[test]
    fn rotation_jacobians_match_finite_differences() {
        for params in [[0.3, -0.2, 0.5], [1e-6, 2e-6, -1e-6], [2.0, 1.0, -0.5], [0.0, 0.0, 0.0]] {
            let pose = PoseSE3::exp6([params[0], params[1], params[2], 0.0, 0.0, 0.0]).unwrap();
            let jac = pose.rotation_jacobians();
            for kk in 0..3 {
                let eps = 1e-6;
                let mut plus = params;
                let mut minus = params;
                plus[kk] += eps;
                minus[kk] -= eps;
                let fd = (rodrigues_oracle(plus) - rodrigues_oracle(minus)) / (2.0 * eps);
                assert!((fd - jac[kk]).abs().max() < 1e-8, "k={kk} params={params:?}");
            }
        }
    }

    #[test]
    fn pure_translation_shifts_columns() {
        let k = k(32, 16, 100.0);
        let depth = ImageGrid::filled(16, 32, 1, 10.0);
        let pose = PoseSE3::from_translation([1.0, 0.0, 0.0]);
        let f = warp_coordinates(&depth, &pose, &k).unwrap();
        for y in 0..16 {
            for x in 0..32 {
                let (u, v) = f.get(y, x);
                assert_abs_diff_eq!(u, x as f64 + 10.0, epsilon = 1e-12);
                assert_abs_diff_eq!(v, y as f64, epsilon = 1e-12);
                // Point-by-point oracle: backproject, translate, project.
                let xn = (x as f64 - k.cx) / k.fx * 10.0 + 1.0;
                assert_abs_diff_eq!(u, k.fx * xn / 10.0 + k.cx, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn optical_axis_is_fixed_under_forward_motion() {
        let k = k(8, 8, 10.0);
        let depth = ImageGrid::filled(8, 8, 1, 6.0);
        let f = warp_coordinates(&depth, &PoseSE3::from_translation([0.0, 0.0, -3.0]), &k).unwrap();
        assert_eq!(f.get(4, 4), (4.0, 4.0));
    }

    #[test]
    fn identity_warp_is_exact_and_behind_camera_is_invalid() {
        let k = k(7, 5, 3.3);
        let depth = ImageGrid::from_fn(5, 7, 1, |y, x, _| 0.3 + (x * y) as f64 * 0.17).unwrap();
        let f = warp_coordinates(&depth, &PoseSE3::identity(), &k).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                assert_eq!(f.get(y, x), (x as f64, y as f64));
            }
        }
        let back = warp_coordinates(&depth, &PoseSE3::from_translation([0.0, 0.0, -50.0]), &k).unwrap();
        assert!(back.validity().iter().all(|v| !v));
        assert!(back.xs().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn warp_adjoint_matches_finite_differences() {
        let k = k(6, 5, 5.0);
        let depth = ImageGrid::from_fn(5, 6, 1, |y, x, _| 2.0 + 0.3 * x as f64 - 0.2 * y as f64).unwrap();
        let pose = PoseSE3::exp6([0.05, -0.03, 0.02, 0.2, -0.1, 0.15]).unwrap();
        let wu: Vec<f64> = (0..30).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let wv: Vec<f64> = (0..30).map(|i| ((i * 3) % 4) as f64 - 1.5).collect();
        let objective = |d: &ImageGrid, p: &PoseSE3| {
            let f = warp_coordinates(d, p, &k).unwrap();
            f.xs().iter().zip(&wu).map(|(a, b)| a * b).sum::<f64>()
                + f.ys().iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>()
        };
        let (gd, gp) = warp_coordinates_adjoint(&depth, &pose, &k, &wu, &wv).unwrap();
        let eps = 1e-5;
        for i in 0..30 {
            let mut plus = depth.clone();
            let mut minus = depth.clone();
            plus.as_mut_slice()[i] += eps;
            minus.as_mut_slice()[i] -= eps;
            let fd = (objective(&plus, &pose) - objective(&minus, &pose)) / (2.0 * eps);
            let a = gd.as_slice()[i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4);
        }
        for j in 0..6 {
            let mut pp = pose.params();
            let mut pm = pose.params();
            pp[j] += eps;
            pm[j] -= eps;
            let fd = (objective(&depth, &PoseSE3::exp6(pp).unwrap()) - objective(&depth, &PoseSE3::exp6(pm).unwrap()))
                / (2.0 * eps);
            assert!(
                (gp[j] - fd).abs() / gp[j].abs().max(fd.abs()).max(1e-6) < 1e-4,
                "pose {j}"
            );
        }
    }

    #[test]
    fn pose_serializes_as_params() {
        let p = PoseSE3::exp6([0.1, 0.2, 0.3, 1.0, 2.0, 3.0]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, "[0.1,0.2,0.3,1.0,2.0,3.0]");
        let back: PoseSE3 = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    fn pose_strategy() -> impl Strategy<Value = [f64; 6]> {
        (
            -2.5f64..2.5,
            -2.5f64..2.5,
            -2.5f64..2.5,
            -10.0f64..10.0,
            -10.0f64..10.0,
            -10.0f64..10.0,
        )
            .prop_map(|(a, b, c, d, e, f)| [a, b, c, d, e, f])
    }

    proptest! {
        #[test]
        fn rotations_are_orthonormal(params in pose_strategy()) {
            let p = PoseSE3::exp6(params).unwrap();
            let r = p.rotation();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-10);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn compose_with_inverse_is_identity(params in pose_strategy()) {
            let p = PoseSE3::exp6(params).unwrap();
            let e = p.compose(&p.invert());
            prop_assert!((e.rotation() - Matrix3::identity()).abs().max() < 1e-10);
            prop_assert!(e.translation().norm() < 1e-10 * (1.0 + p.translation().norm()));
            let e2 = p.invert().compose(&p);
            prop_assert!(e2.params().iter().all(|v| v.abs() < 1e-9));
        }

        #[test]
        fn compose_recovers_params(params in pose_strategy()) {
            let p = PoseSE3::exp6(params).unwrap();
            let q = PoseSE3::exp6(p.params()).unwrap();
            prop_assert!((q.rotation() - p.rotation()).abs().max() < 1e-10);
            let r = PoseSE3::identity().compose(&p);
            prop_assert!((r.rotation() - p.rotation()).abs().max() < 1e-10);
        }

        #[test]
        fn project_backproject_round_trip(x in 0.0f64..63.0, y in 0.0f64..47.0, d in 0.1f64..100.0) {
            let k = CameraIntrinsics::new(52.3, 48.9, 31.7, 23.2, 64, 48).unwrap();
            let (u, v) = k.project(&k.backproject(x, y, d)).unwrap();
            prop_assert!((u - x).abs() < 1e-9 && (v - y).abs() < 1e-9);
        }

        #[test]
        fn warp_is_scale_covariant(params in pose_strategy(), s in 0.1f64..10.0) {
            let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 6.0, 16, 12).unwrap();
            let depth = ImageGrid::from_fn(12, 16, 1, |y, x, _| 20.0 + x as f64 + 0.5 * y as f64).unwrap();
            let small = [params[0] * 0.1, params[1] * 0.1, params[2] * 0.1, params[3], params[4], params[5]];
            let pose = PoseSE3::exp6(small).unwrap();
            let scaled_pose = PoseSE3::exp6([small[0], small[1], small[2], s * small[3], s * small[4], s * small[5]]).unwrap();
            let a = warp_coordinates(&depth, &pose, &k).unwrap();
            let b = warp_coordinates(&depth.map(|d| d * s), &scaled_pose, &k).unwrap();
            prop_assert_eq!(a.validity(), b.validity());
            for i in 0..a.xs().len() {
                if a.validity()[i] {
                    let tol = 1e-9 * (1.0 + a.xs()[i].abs().max(a.ys()[i].abs()));
                    prop_assert!((a.xs()[i] - b.xs()[i]).abs() < tol);
                    prop_assert!((a.ys()[i] - b.ys()[i]).abs() < tol);
                }
            }
        }
    }
}
