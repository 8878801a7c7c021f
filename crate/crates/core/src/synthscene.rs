//! Ray-cast synthetic scenes with exact ground truth.
//!
//! Scenes are sets of textured planes seen by a pinhole camera along a path
//! of world→camera poses. Textures are sums of sinusoids evaluated at the
//! exact ray hit, so rendered images carry no resampling error.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, DepthRange, PoseSE3, Z_EPS};
use crate::imaging::{ImageGrid, Mask};
use crate::{Error, Result};

/// Stand-in for an infinite plane extent (JSON has no infinity).
pub const UNBOUNDED: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub channel: usize,
    pub amplitude: f64,
    /// Cycles per unit length along the plane's u and v axes.
    pub freq_u: f64,
    pub freq_v: f64,
    pub phase: f64,
}

/// `base[c] + Σ amplitude · sin(2π(freq_u·u + freq_v·v) + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: Vec<f64>,
    pub terms: Vec<Sinusoid>,
}

impl Texture {
    pub fn constant(base: Vec<f64>) -> Self {
        Self {
            base,
            terms: Vec::new(),
        }
    }

    /// Random texture whose frequencies stay below `max_freq` cycles per
    /// unit and whose values stay inside [0.1, 0.9].
    pub fn random(rng: &mut impl Rng, channels: usize, terms_per_channel: usize, max_freq: f64) -> Self {
        let base: Vec<f64> = (0..channels).map(|_| rng.random_range(0.45..0.55)).collect();
        let mut terms = Vec::with_capacity(channels * terms_per_channel);
        for c in 0..channels {
            let budget = 0.35;
            let mut weights: Vec<f64> = (0..terms_per_channel).map(|_| rng.random_range(0.5..1.0)).collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w *= budget / total);
            for w in weights {
                let f = rng.random_range(0.4..1.0) * max_freq;
                let angle = rng.random_range(0.0..TAU);
                terms.push(Sinusoid {
                    channel: c,
                    amplitude: w,
                    freq_u: f * angle.cos(),
                    freq_v: f * angle.sin(),
                    phase: rng.random_range(0.0..TAU),
                });
            }
        }
        Self { base, terms }
    }

    pub fn channels(&self) -> usize {
        self.base.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.is_empty() {
            return Err(Error::invalid("texture needs at least one channel"));
        }
        for (c, &b) in self.base.iter().enumerate() {
            let amp: f64 = self
                .terms
                .iter()
                .filter(|t| t.channel == c)
                .map(|t| t.amplitude.abs())
                .sum();
            if b - amp < 0.0 || b + amp > 1.0 {
                return Err(Error::invalid(format!("texture channel {c} can leave [0, 1]")));
            }
        }
        if self.terms.iter().any(|t| t.channel >= self.base.len()) {
            return Err(Error::invalid("texture term refers to a missing channel"));
        }
        Ok(())
    }

    pub fn eval(&self, u: f64, v: f64, c: usize) -> f64 {
        self.base[c]
            + self
                .terms
                .iter()
                .filter(|t| t.channel == c)
                .map(|t| t.amplitude * (TAU * (t.freq_u * u + t.freq_v * v) + t.phase).sin())
                .sum::<f64>()
    }

    /// Largest frequency magnitude in cycles per unit.
    pub fn max_frequency(&self) -> f64 {
        self.terms.iter().map(|t| t.freq_u.hypot(t.freq_v)).fold(0.0, f64::max)
    }
}

/// Planar patch `origin + a·u_axis + b·v_axis` with orthonormal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TexturedPlane {
    pub origin: [f64; 3],
    pub u_axis: [f64; 3],
    pub v_axis: [f64; 3],
    /// `[a_min, a_max, b_min, b_max]`; unbounded when absent.
    #[serde(default)]
    pub extent: Option<[f64; 4]>,
    pub texture: Texture,
    /// World displacement per frame index (moving objects).
    #[serde(default)]
    pub velocity: [f64; 3],
}

impl TexturedPlane {
    /// Fronto-parallel plane `z = depth` with axes along world x and y.
    pub fn fronto_parallel(depth: f64, texture: Texture) -> Self {
        Self {
            origin: [0.0, 0.0, depth],
            u_axis: [1.0, 0.0, 0.0],
            v_axis: [0.0, 1.0, 0.0],
            extent: None,
            texture,
            velocity: [0.0; 3],
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::from(self.u_axis).cross(&Vector3::from(self.v_axis))
    }

    fn validate(&self) -> Result<()> {
        let u = Vector3::from(self.u_axis);
        let v = Vector3::from(self.v_axis);
        if (u.norm() - 1.0).abs() > 1e-9 || (v.norm() - 1.0).abs() > 1e-9 || u.dot(&v).abs() > 1e-9 {
            return Err(Error::invalid("plane axes must be orthonormal"));
        }
        if let Some([a0, a1, b0, b1]) = self.extent {
            if !(a0 < a1 && b0 < b1) {
                return Err(Error::invalid("plane extent must be ordered"));
            }
        }
        self.texture.validate()
    }

    /// Ray parameter and plane coordinates of the hit, if any.
    fn intersect(&self, centre: &Vector3<f64>, dir: &Vector3<f64>, frame: usize) -> Option<(f64, f64, f64)> {
        let origin = Vector3::from(self.origin) + Vector3::from(self.velocity) * frame as f64;
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = n.dot(&(origin - centre)) / denom;
        if !(s > Z_EPS) {
            return None;
        }
        let rel = centre + dir * s - origin;
        let a = rel.dot(&Vector3::from(self.u_axis));
        let b = rel.dot(&Vector3::from(self.v_axis));
        if let Some([a0, a1, b0, b1]) = self.extent {
            if !(a >= a0 && a < a1 && b >= b0 && b < b1) {
                return None;
            }
        }
        Some((s, a, b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub planes: Vec<TexturedPlane>,
    /// World→camera pose of each frame.
    pub camera_path: Vec<PoseSE3>,
    pub intrinsics: CameraIntrinsics,
    pub depth_range: DepthRange,
    /// Standard deviation of additive Gaussian image noise.
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

/// One rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub image: ImageGrid,
    /// Camera-frame z of the hit.
    pub depth: ImageGrid,
    /// Index of the plane hit by each pixel's ray.
    pub surface: Vec<usize>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.planes.is_empty() {
            return Err(Error::invalid("scene has no planes"));
        }
        if self.camera_path.is_empty() {
            return Err(Error::invalid("scene has no cameras"));
        }
        self.intrinsics.validate()?;
        self.depth_range.validate()?;
        let ch = self.planes[0].texture.channels();
        for p in &self.planes {
            p.validate()?;
            if p.texture.channels() != ch {
                return Err(Error::invalid("all textures must have the same channel count"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.camera_path.len()
    }

    pub fn channels(&self) -> usize {
        self.planes[0].texture.channels()
    }

    /// Adds the six faces of an axis-aligned box, normals pointing outward.
    pub fn add_box(&mut self, centre: [f64; 3], half: [f64; 3], texture: &Texture) {
        let c = Vector3::from(centre);
        for axis in 0..3 {
            let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
            for sign in [-1.0, 1.0] {
                let mut origin = c;
                origin[axis] += sign * half[axis];
                origin[ua] -= half[ua];
                origin[va] -= half[va];
                let mut u = [0.0; 3];
                let mut v = [0.0; 3];
                u[ua] = 1.0;
                v[va] = 1.0;
                // Swapping the axes flips the normal for the negative face.
                let (u, v, a_len, b_len) = if sign > 0.0 {
                    (u, v, 2.0 * half[ua], 2.0 * half[va])
                } else {
                    (v, u, 2.0 * half[va], 2.0 * half[ua])
                };
                self.planes.push(TexturedPlane {
                    origin: origin.into(),
                    u_axis: u,
                    v_axis: v,
                    extent: Some([0.0, a_len, 0.0, b_len]),
                    texture: texture.clone(),
                    velocity: [0.0; 3],
                });
            }
        }
    }

    fn ray(&self, frame: usize, x: f64, y: f64) -> (Vector3<f64>, Vector3<f64>) {
        let pose = &self.camera_path[frame];
        let rt = pose.rotation().transpose();
        let centre = -(rt * pose.translation());
        let dir = rt * self.intrinsics.ray(x, y);
        (centre, dir)
    }

    /// Nearest hit `(depth, plane, a, b)` along the ray through `(x, y)`.
    fn cast(&self, frame: usize, x: f64, y: f64) -> Option<(f64, usize, f64, f64)> {
        let (centre, dir) = self.ray(frame, x, y);
        let mut best: Option<(f64, usize, f64, f64)> = None;
        for (k, plane) in self.planes.iter().enumerate() {
            if let Some((s, a, b)) = plane.intersect(&centre, &dir, frame) {
                if best.is_none_or(|(bs, ..)| s < bs) {
                    best = Some((s, k, a, b));
                }
            }
        }
        best
    }

    /// Renders frame `index`. Fails if any pixel ray escapes the scene.
    pub fn render(&self, index: usize) -> Result<Rendering> {
        self.validate()?;
        if index >= self.frame_count() {
            return Err(Error::invalid(format!(
                "frame {index} out of range {}",
                self.frame_count()
            )));
        }
        let (h, w, ch) = (self.intrinsics.height, self.intrinsics.width, self.channels());
        let mut image = ImageGrid::zeros(h, w, ch);
        let mut depth = ImageGrid::zeros(h, w, 1);
        let mut surface = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (s, k, a, b) =
                    self.cast(index, x as f64, y as f64)
                        .ok_or(Error::RayEscaped { frame: index, x, y })?;
                depth.set(y, x, 0, s);
                surface[y * w + x] = k;
                for c in 0..ch {
                    image.set(y, x, c, self.planes[k].texture.eval(a, b, c));
                }
            }
        }
        if self.noise_std > 0.0 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.noise_seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let normal = Normal::new(0.0, self.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
            for v in image.as_mut_slice() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        Ok(Rendering { image, depth, surface })
    }

    /// Pose mapping camera-`i` coordinates to camera-`j` coordinates.
    pub fn relative_pose(&self, i: usize, j: usize) -> Result<PoseSE3> {
        let n = self.frame_count();
        if i >= n || j >= n {
            return Err(Error::invalid(format!("frame pair ({i}, {j}) out of range {n}")));
        }
        Ok(self.camera_path[j].compose(&self.camera_path[i].invert()))
    }

    /// Pixels of frame `i` whose surface point is seen unoccluded and inside
    /// the image in frame `j`.
    pub fn covisibility(&self, i: usize, j: usize, rendering_i: &Rendering) -> Result<Mask> {
        let rel = self.relative_pose(i, j)?;
        let k = &self.intrinsics;
        let (h, w) = (k.height, k.width);
        let mut mask = Mask::filled(h, w, false);
        for y in 0..h {
            for x in 0..w {
                let plane = &self.planes[rendering_i.surface[y * w + x]];
                let p_i = k.backproject(x as f64, y as f64, rendering_i.depth.get(y, x, 0));
                let shift = self.camera_path[j].rotation() * Vector3::from(plane.velocity) * (j as f64 - i as f64);
                let p_j = rel.transform_point(&p_i) + shift;
                let Some((u, v)) = k.project(&p_j) else { continue };
                if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
                    continue;
                }
                if let Some((s, ..)) = self.cast(j, u, v) {
                    if (s - p_j.z).abs() <= 1e-6 * p_j.z.max(1.0) {
                        mask.set(y, x, true);
                    }
                }
            }
        }
        Ok(mask)
    }

    /// Camera poses from one frame to each listed frame.
    pub fn relative_poses(&self, target: usize, sources: &[usize]) -> Result<Vec<PoseSE3>> {
        sources.iter().map(|&s| self.relative_pose(target, s)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Parameters of [`make_three_band_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandSceneOptions {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub target_index: usize,
    /// Lateral camera displacement between consecutive frames.
    pub step: f64,
    /// Highest texture frequency in image space, cycles per pixel.
    pub max_image_frequency: f64,
    pub terms_per_channel: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for BandSceneOptions {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 9,
            target_index: 4,
            step: 0.5,
            max_image_frequency: 1.0 / 16.0,
            terms_per_channel: 3,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

/// Camera path translating along world x, target camera at the origin.
fn lateral_path(frames: usize, target: usize, step: f64) -> Vec<PoseSE3> {
    (0..frames)
        .map(|f| PoseSE3::from_translation([-(f as f64 - target as f64) * step, 0.0, 0.0]))
        .collect()
}

/// Horizontal fronto-parallel bands, one per depth interval, placed at the
/// interval midpoints. The farthest band occupies the top rows. Band
/// extents are bounded at half-pixel row boundaries so each image row sees
/// exactly one band from every camera on the lateral path.
pub fn make_three_band_scene(intervals: &[(f64, f64)], options: &BandSceneOptions) -> Result<SceneSpec> {
    if intervals.is_empty() {
        return Err(Error::invalid("at least one depth interval is required"));
    }
    for &(lo, hi) in intervals {
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::invalid(format!("invalid interval [{lo}, {hi})")));
        }
    }
    if options.frames == 0 || options.target_index >= options.frames {
        return Err(Error::invalid("target index must lie inside the frame range"));
    }
    let (w, h) = (options.width, options.height);
    let n = intervals.len();
    if h < n {
        return Err(Error::invalid("image must have at least one row per band"));
    }
    let k = CameraIntrinsics::new(w as f64, w as f64, w as f64 / 2.0, h as f64 / 2.0, w, h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| intervals[b].0.total_cmp(&intervals[a].0));
    let mut planes = Vec::with_capacity(n);
    for (slot, &band) in order.iter().enumerate() {
        let (lo, hi) = intervals[band];
        let z = 0.5 * (lo + hi);
        let max_freq = options.max_image_frequency * k.fx / z;
        let texture = Texture::random(&mut rng, 3, options.terms_per_channel, max_freq);
        let mut plane = TexturedPlane::fronto_parallel(z, texture);
        if n > 1 {
            let r0 = slot * h / n;
            let r1 = (slot + 1) * h / n;
            let to_world = |row: f64| (row - 0.5 - k.cy) * z / k.fy;
            let b0 = if slot == 0 { -UNBOUNDED } else { to_world(r0 as f64) };
            let b1 = if slot + 1 == n { UNBOUNDED } else { to_world(r1 as f64) };
            plane.extent = Some([-UNBOUNDED, UNBOUNDED, b0, b1]);
        }
        planes.push(plane);
    }
    let spec = SceneSpec {
        planes,
        camera_path: lateral_path(options.frames, options.target_index, options.step),
        intrinsics: k,
        depth_range: DepthRange::default(),
        noise_std: options.noise_std,
        noise_seed: options.seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// A static background plane and a square patch that moves with the
/// camera, so the patch occupies the same pixels in every frame.
pub fn make_moving_patch_scene(size: usize, frames: usize, seed: u64) -> Result<SceneSpec> {
    if frames < 2 || size < 16 {
        return Err(Error::invalid("moving-patch scene needs ≥ 2 frames and size ≥ 16"));
    }
    let k = CameraIntrinsics::new(
        size as f64,
        size as f64,
        size as f64 / 2.0,
        size as f64 / 2.0,
        size,
        size,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z_bg, z_patch) = (20.0, 10.0);
    let bg = TexturedPlane::fronto_parallel(z_bg, Texture::random(&mut rng, 3, 3, k.fx / z_bg / 12.0));
    let step = 1.0;
    let half = 0.15 * size as f64 * z_patch / k.fx;
    let mut patch = TexturedPlane::fronto_parallel(z_patch, Texture::random(&mut rng, 3, 3, k.fx / z_patch / 12.0));
    patch.extent = Some([-half, half, -half, half]);
    patch.velocity = [step, 0.0, 0.0];
    let target = frames / 2;
    let path = lateral_path(frames, target, step);
    // The patch origin is its frame-0 position; centre it in front of the camera.
    patch.origin[0] -= step * target as f64;
    let spec = SceneSpec {
        planes: vec![bg, patch],
        camera_path: path,
        intrinsics: k,
        depth_range: DepthRange::default(),
        noise_std: 0.0,
        noise_seed: seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// Textured-plane scene used by the two-frame convergence test: a slanted
/// plane in front of a fronto-parallel backdrop.
pub fn make_two_plane_scene(size: usize, seed: u64) -> Result<SceneSpec> {
    let k = CameraIntrinsics::new(
        size as f64,
        size as f64,
        size as f64 / 2.0,
        size as f64 / 2.0,
        size,
        size,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fimg = 1.0 / 16.0;
    let back = TexturedPlane::fronto_parallel(12.0, Texture::random(&mut rng, 3, 3, fimg * k.fx / 12.0));
    let tilt: f64 = 0.35;
    let mut front = TexturedPlane::fronto_parallel(6.0, Texture::random(&mut rng, 3, 3, fimg * k.fx / 6.0));
    front.u_axis = [tilt.cos(), 0.0, tilt.sin()];
    let y_cut = 0.0;
    front.extent = Some([-UNBOUNDED, UNBOUNDED, y_cut, UNBOUNDED]);
    let spec = SceneSpec {
        planes: vec![back, front],
        camera_path: lateral_path(2, 0, 0.4),
        intrinsics: k,
        depth_range: DepthRange::default(),
        noise_std: 0.0,
        noise_seed: seed,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synthesize_view;
    use crate::photometric::pe_map;

    fn single_plane(z: f64, pose: PoseSE3) -> SceneSpec {
        SceneSpec {
            planes: vec![TexturedPlane::fronto_parallel(z, Texture::constant(vec![0.5]))],
            camera_path: vec![pose],
            intrinsics: CameraIntrinsics::new(8.0, 8.0, 4.0, 3.0, 8, 6).unwrap(),
            depth_range: DepthRange::default(),
            noise_std: 0.0,
            noise_seed: 0,
        }
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let r = single_plane(10.0, PoseSE3::identity()).render(0).unwrap();
        assert!(r.depth.as_slice().iter().all(|&d| (d - 10.0).abs() < 1e-12));
        let r = single_plane(10.0, PoseSE3::from_translation([0.0, 0.0, -5.0]))
            .render(0)
            .unwrap();
        assert!(r.depth.as_slice().iter().all(|&d| (d - 5.0).abs() < 1e-12));
    }

    #[test]
    fn slanted_plane_matches_closed_form() {
        let n = Vector3::new(0.0, 0.5, 1.0).normalize();
        let u = Vector3::new(1.0, 0.0, 0.0);
        let v = n.cross(&u);
        let mut spec = single_plane(10.0, PoseSE3::identity());
        spec.planes[0].u_axis = u.into();
        spec.planes[0].v_axis = v.into();
        let r = spec.render(0).unwrap();
        let k = spec.intrinsics;
        for y in 0..k.height {
            for x in 0..k.width {
                // n·(s·ray) = n·origin
                let ray = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let s = n.dot(&Vector3::new(0.0, 0.0, 10.0)) / n.dot(&ray);
                assert!((r.depth.get(y, x, 0) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn escaping_ray_is_an_error() {
        let mut spec = single_plane(10.0, PoseSE3::identity());
        spec.planes[0].extent = Some([-1.0, 1.0, -1.0, 1.0]);
        assert!(matches!(spec.render(0), Err(Error::RayEscaped { .. })));
    }

    #[test]
    fn band_scene_depths_and_parallax() {
        let intervals = [(0.0, 30.0), (30.0, 60.0), (60.0, 80.0)];
        let spec = make_three_band_scene(&intervals, &BandSceneOptions::default()).unwrap();
        let mut depths: Vec<f64> = spec.planes.iter().map(|p| p.origin[2]).collect();
        depths.sort_by(f64::total_cmp);
        assert_eq!(depths, vec![15.0, 45.0, 70.0]);
        let r = spec.render(4).unwrap();
        assert!((r.depth.get(0, 0, 0) - 70.0).abs() < 1e-9);
        assert!((r.depth.get(63, 0, 0) - 15.0).abs() < 1e-9);
        for &d in r.depth.as_slice() {
            assert!(intervals.iter().any(|&(lo, hi)| d >= lo && d < hi));
        }
        let k = spec.intrinsics;
        let disp: Vec<f64> = [15.0, 45.0, 70.0].iter().map(|z| k.fx * 0.5 / z).collect();
        assert!(disp.windows(2).all(|w| w[0] > w[1]));
        let single = make_three_band_scene(&[(0.0, 80.0)], &BandSceneOptions::default()).unwrap();
        assert_eq!(single.planes.len(), 1);
        assert_eq!(single.planes[0].origin[2], 40.0);
    }

    #[test]
    fn cross_frame_synthesis_reproduces_target() {
        let spec =
            make_three_band_scene(&[(0.0, 30.0), (30.0, 60.0), (60.0, 80.0)], &BandSceneOptions::default()).unwrap();
        let t = spec.render(4).unwrap();
        for j in [3, 5, 8] {
            let src = spec.render(j).unwrap();
            let pose = spec.relative_pose(4, j).unwrap();
            let view = synthesize_view(&src.image, &t.depth, &pose, &spec.intrinsics).unwrap();
            // pe at a pixel depends on its 3×3 window, which must be valid too.
            let vis = spec.covisibility(4, j, &t).unwrap().and(&view.valid).erode(1);
            let pe = pe_map(&t.image, &view.image, 0.85).unwrap();
            let mean = pe
                .as_slice()
                .iter()
                .zip(vis.as_slice())
                .filter(|(_, &m)| m)
                .map(|(v, _)| v)
                .sum::<f64>()
                / vis.count() as f64;
            assert!(mean <= 1e-3, "frame {j}: {mean}");
            assert!(vis.count() > 1000);
        }
    }

    #[test]
    fn moving_patch_stays_put_in_image() {
        let spec = make_moving_patch_scene(32, 3, 1).unwrap();
        let a = spec.render(0).unwrap();
        let b = spec.render(1).unwrap();
        for i in 0..a.surface.len() {
            if a.surface[i] == 1 {
                assert_eq!(b.surface[i], 1);
            }
        }
        assert!(a.surface.iter().filter(|&&s| s == 1).count() > 50);
    }

    #[test]
    fn box_faces_are_closed() {
        let mut spec = single_plane(50.0, PoseSE3::identity());
        spec.add_box([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], &Texture::constant(vec![0.3]));
        assert_eq!(spec.planes.len(), 7);
        spec.validate().unwrap();
        let r = spec.render(0).unwrap();
        let (cy, cx) = (3, 4);
        assert!((r.depth.get(cy, cx, 0) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn textures_stay_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = Texture::random(&mut rng, 3, 4, 0.5);
            t.validate().unwrap();
            assert!(t.max_frequency() <= 0.5);
        }
        let bad = Texture {
            base: vec![0.9],
            terms: vec![Sinusoid {
                channel: 0,
                amplitude: 0.2,
                freq_u: 1.0,
                freq_v: 0.0,
                phase: 0.0,
            }],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scene_json_round_trip() {
        let spec = make_three_band_scene(&[(0.0, 30.0), (30.0, 80.0)], &BandSceneOptions::default()).unwrap();
        let back = SceneSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert!(back.render(2).unwrap() == spec.render(2).unwrap());
    }
}
