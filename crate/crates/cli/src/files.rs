//! File discovery, depth loading and config overlays.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cascade_depth::dataio::{read_depth_png, read_pfm};
use cascade_depth::imaging::{ImageGrid, Mask};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Comma-separated numbers.
pub fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("not a number: {s:?}")))
        .collect()
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies the keys of a JSON config file on top of flag-derived settings.
pub fn overlay_config<T: Serialize + DeserializeOwned>(flags: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(flags);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let over: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if !over.is_object() {
        bail!("{} must contain a JSON object", path.display());
    }
    let mut base = serde_json::to_value(flags)?;
    merge(&mut base, over);
    serde_json::from_value(base).with_context(|| format!("applying {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Depth maps (`.pfm`, `.png`) in a directory keyed by file stem.
pub fn depth_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("pfm" | "png")) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            bail!("{} and {} share the name {stem:?}", prev.display(), path.display());
        }
    }
    Ok(out)
}

/// Single-channel depth and its validity (finite and positive).
pub fn load_depth(path: &Path) -> Result<(ImageGrid, Mask)> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return Ok(read_depth_png(path)?);
    }
    let grid = read_pfm(path)?;
    if grid.channels() != 1 {
        bail!("{} must hold a single-channel depth map", path.display());
    }
    let valid = Mask::new(
        grid.height(),
        grid.width(),
        grid.as_slice().iter().map(|&d| d > 0.0).collect(),
    )?;
    Ok((grid, valid))
}

pub fn mask_to_grid(mask: &Mask) -> ImageGrid {
    let data = mask.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    ImageGrid::new(mask.height(), mask.width(), 1, data).expect("finite mask")
}

pub fn mask_from_grid(grid: &ImageGrid, path: &Path) -> Result<Mask> {
    if grid.channels() != 1 || grid.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
        bail!("{} is not a 0/1 single-channel mask", path.display());
    }
    Ok(Mask::new(
        grid.height(),
        grid.width(),
        grid.as_slice().iter().map(|&v| v == 1.0).collect(),
    )?)
}

/// `.pfm` files ordered by their trailing number, then by name.
pub fn sorted_pfms(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")));
    let key = |p: &PathBuf| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
        let n = digits.chars().rev().collect::<String>().parse::<u64>().ok();
        (n, stem)
    };
    v.sort_by_key(key);
    Ok(v)
}
