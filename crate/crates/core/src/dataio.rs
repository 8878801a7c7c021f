//! File formats: PFM float maps, 16-bit PNG depth, 8-bit previews, split
//! lists, frame triplets and the KITTI intrinsics convention.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::geometry::CameraIntrinsics;
use crate::imaging::{ImageGrid, Mask};
use crate::{Error, Result};

/// Depth in metres of one stored unit in 16-bit depth PNGs.
pub const DEPTH_PNG_SCALE: f64 = 256.0;

/// Serializes a 1- or 3-channel grid as little-endian PFM.
pub fn encode_pfm(grid: &ImageGrid) -> Result<Vec<u8>> {
    let tag = match grid.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::invalid(format!("PFM stores 1 or 3 channels, got {c}"))),
    };
    let (h, w, ch) = (grid.height(), grid.width(), grid.channels());
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w * ch);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..ch {
                let v = grid.get(y, x, c);
                let f = v as f32;
                if !f.is_finite() {
                    return Err(Error::invalid(format!(
                        "value {v} at ({y}, {x}) is not representable as f32"
                    )));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses a PFM file; `path` is only used in error messages.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<ImageGrid> {
    let err = |m: String| Error::format(path, m);
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(err(format!("bad magic {other:?}"))),
    };
    let w: usize = token()?.parse().map_err(|_| err("bad width".into()))?;
    let h: usize = token()?.parse().map_err(|_| err("bad height".into()))?;
    let scale: f64 = token()?.parse().map_err(|_| err("bad scale".into()))?;
    if w == 0 || h == 0 {
        return Err(err(format!("empty image {w}x{h}")));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(err(format!("bad scale {scale}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    let payload = &bytes[(pos + 1).min(bytes.len())..];
    let expected = 4 * w * h * channels;
    if payload.len() != expected {
        return Err(err(format!(
            "expected {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; w * h * channels];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("4-byte chunk");
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        if !v.is_finite() {
            return Err(err(format!("non-finite value at payload index {k}")));
        }
        let row = k / (w * channels);
        let rest = k % (w * channels);
        data[(h - 1 - row) * w * channels + rest] = v as f64;
    }
    ImageGrid::new(h, w, channels, data)
}

pub fn write_pfm(path: &Path, grid: &ImageGrid) -> Result<()> {
    std::fs::write(path, encode_pfm(grid)?)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<ImageGrid> {
    decode_pfm(&std::fs::read(path)?, path)
}

/// Stored 16-bit value of a depth; 0 marks invalid.
pub fn depth_to_u16(depth: f64) -> u16 {
    if !(depth > 0.0) || !depth.is_finite() {
        return 0;
    }
    // Tiny positive depths must stay distinguishable from "invalid".
    (depth * DEPTH_PNG_SCALE).round().clamp(1.0, u16::MAX as f64) as u16
}

/// Encodes depth as a 16-bit grayscale PNG (`stored = round(256·d)`).
pub fn encode_depth_png(depth: &ImageGrid, valid: Option<&Mask>) -> Result<Vec<u8>> {
    depth.require_single_channel("depth")?;
    if let Some(m) = valid {
        if !m.matches_grid(depth) {
            return Err(Error::shape(
                depth.shape_string(),
                format!("{}x{} mask", m.height(), m.width()),
            ));
        }
    }
    let (h, w) = (depth.height(), depth.width());
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let ok = valid.is_none_or(|m| m.get(y, x));
        Luma([if ok { depth_to_u16(depth.get(y, x, 0)) } else { 0 }])
    });
    let mut out = Cursor::new(Vec::new());
    DynamicImage::ImageLuma16(buf).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes a 16-bit depth PNG into depth and validity (stored value ≠ 0).
pub fn decode_depth_png(bytes: &[u8], path: &Path) -> Result<(ImageGrid, Mask)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::format(
            path,
            format!("depth PNG must be 16-bit single channel, got {:?}", img.color()),
        ));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut depth = ImageGrid::zeros(h, w, 1);
    let mut valid = Mask::filled(h, w, false);
    for (x, y, p) in buf.enumerate_pixels() {
        let v = p.0[0];
        if v != 0 {
            depth.set(y as usize, x as usize, 0, v as f64 / DEPTH_PNG_SCALE);
            valid.set(y as usize, x as usize, true);
        }
    }
    Ok((depth, valid))
}

pub fn write_depth_png(path: &Path, depth: &ImageGrid, valid: Option<&Mask>) -> Result<()> {
    std::fs::write(path, encode_depth_png(depth, valid)?)?;
    Ok(())
}

pub fn read_depth_png(path: &Path) -> Result<(ImageGrid, Mask)> {
    decode_depth_png(&std::fs::read(path)?, path)
}

/// Reads an 8- or 16-bit PNG/PPM colour or gray image scaled to [0, 1].
pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb = img.to_rgb32f();
    let data = rgb.into_raw().into_iter().map(f64::from).collect();
    ImageGrid::new(h, w, 3, data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel grid in [0, 1] as an 8-bit PNG.
pub fn write_png(path: &Path, image: &ImageGrid) -> Result<()> {
    let (h, w) = (image.height() as u32, image.width() as u32);
    let dynamic = match image.channels() {
        1 => DynamicImage::ImageLuma8(ImageBuffer::from_fn(w, h, |x, y| {
            Luma([to_u8(image.get(y as usize, x as usize, 0))])
        })),
        3 => DynamicImage::ImageRgb8(ImageBuffer::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                to_u8(image.get(y, x, 0)),
                to_u8(image.get(y, x, 1)),
                to_u8(image.get(y, x, 2)),
            ])
        })),
        c => return Err(Error::invalid(format!("PNG export supports 1 or 3 channels, got {c}"))),
    };
    dynamic.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Control points of the preview colormap, near (dark blue) to far (yellow).
const COLORMAP: [[f64; 3]; 5] = [
    [0.05, 0.03, 0.35],
    [0.35, 0.10, 0.55],
    [0.75, 0.25, 0.45],
    [0.97, 0.55, 0.20],
    [0.99, 0.95, 0.45],
];

fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let i = (t.floor() as usize).min(COLORMAP.len() - 2);
    let a = t - i as f64;
    let (c0, c1) = (COLORMAP[i], COLORMAP[i + 1]);
    [0, 1, 2].map(|k| c0[k] + a * (c1[k] - c0[k]))
}

/// Colour preview of a depth map, normalized by its own min and max.
pub fn depth_preview(depth: &ImageGrid) -> Result<ImageGrid> {
    depth.require_single_channel("depth")?;
    let (lo, hi) = (depth.min_value(), depth.max_value());
    let span = if hi > lo { hi - lo } else { 1.0 };
    ImageGrid::from_fn(depth.height(), depth.width(), 3, |y, x, c| {
        colormap((depth.get(y, x, 0) - lo) / span)[c]
    })
}

/// KITTI convention: a single focal length equal to the mean of the
/// calibration focals, rescaled from the native to the working width, and
/// the principal point at the image centre.
pub fn kitti_intrinsics(
    width: usize,
    height: usize,
    focals: &[f64],
    native_width: Option<usize>,
) -> Result<CameraIntrinsics> {
    if focals.is_empty() {
        return Err(Error::invalid("focal list must not be empty"));
    }
    let mean = focals.iter().sum::<f64>() / focals.len() as f64;
    let scale = match native_width {
        Some(0) => return Err(Error::invalid("native width must be positive")),
        Some(nw) => width as f64 / nw as f64,
        None => 1.0,
    };
    let f = mean * scale;
    CameraIntrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
}

/// One line of a split file: `folder frame_index [side]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub folder: String,
    pub frame_index: usize,
    pub side: Option<String>,
}

pub fn parse_split(text: &str, path: &Path) -> Result<Vec<SplitEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(Error::format(
                path,
                format!("line {}: expected `folder index [side]`", n + 1),
            ));
        }
        let frame_index = parts[1]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad frame index {:?}", n + 1, parts[1])))?;
        out.push(SplitEntry {
            folder: parts[0].to_string(),
            frame_index,
            side: parts.get(2).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

pub fn read_split(path: &Path) -> Result<Vec<SplitEntry>> {
    parse_split(&std::fs::read_to_string(path)?, path)
}

/// Path of a frame in the KITTI raw layout: `root/folder/image_0X/data/NNNNNNNNNN.png`.
pub fn kitti_frame_path(root: &Path, folder: &str, index: usize, side: Option<&str>) -> PathBuf {
    let cam = match side {
        Some("r") => "image_03",
        _ => "image_02",
    };
    root.join(folder)
        .join(cam)
        .join("data")
        .join(format!("{index:010}.png"))
}

/// Target frame with temporally offset source frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTriplet {
    pub target: PathBuf,
    pub sources: Vec<(i64, PathBuf)>,
    pub intrinsics: CameraIntrinsics,
}

impl FrameTriplet {
    /// Frames around a split entry at the given signed offsets.
    pub fn from_entry(root: &Path, entry: &SplitEntry, offsets: &[i64], intrinsics: CameraIntrinsics) -> Result<Self> {
        let side = entry.side.as_deref();
        let mut sources = Vec::with_capacity(offsets.len());
        for &o in offsets {
            let idx = entry.frame_index as i64 + o;
            if o == 0 || idx < 0 {
                return Err(Error::invalid(format!(
                    "offset {o} is zero or reaches before frame 0 from {}",
                    entry.frame_index
                )));
            }
            sources.push((o, kitti_frame_path(root, &entry.folder, idx as usize, side)));
        }
        Ok(Self {
            target: kitti_frame_path(root, &entry.folder, entry.frame_index, side),
            sources,
            intrinsics,
        })
    }

    /// Loads all frames, checking offsets and dimensions.
    pub fn load(&self) -> Result<(ImageGrid, Vec<ImageGrid>)> {
        if self.sources.is_empty() || self.sources.iter().any(|(o, _)| *o == 0) {
            return Err(Error::invalid("triplet needs nonzero source offsets"));
        }
        let target = read_image(&self.target)?;
        if target.width() != self.intrinsics.width || target.height() != self.intrinsics.height {
            return Err(Error::shape(
                format!("{}x{}", self.intrinsics.height, self.intrinsics.width),
                target.shape_string(),
            ));
        }
        let mut sources = Vec::with_capacity(self.sources.len());
        for (_, p) in &self.sources {
            let s = read_image(p)?;
            target.require_same_shape(&s)?;
            sources.push(s);
        }
        Ok((target, sources))
    }
}
