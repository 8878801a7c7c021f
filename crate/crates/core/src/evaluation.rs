//! Depth accuracy metrics with per-image median scaling and a depth cap.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::imaging::{ImageGrid, Mask};
use crate::{Error, Result};

pub const DEFAULT_CAP: f64 = 80.0;
/// Lower clamp applied to both maps before computing metrics.
pub const MIN_DEPTH: f64 = 1e-3;
pub const DELTA_BASE: f64 = 1.25;

/// Column order of every table and CSV.
pub const COLUMNS: [&str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub cap: f64,
    pub median_scale: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            median_scale: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixel_count: usize,
    /// Factor applied to the prediction (1 without median scaling).
    pub applied_scale: f64,
}

impl EvalReport {
    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }
}

/// Running sums of the per-pixel metric terms.
#[derive(Debug, Clone, Copy, Default)]
struct Accumulator {
    n: usize,
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    sq_log: f64,
    d: [usize; 3],
}

impl Accumulator {
    fn add(&mut self, p: f64, g: f64) {
        let diff = p - g;
        self.n += 1;
        self.abs_rel += diff.abs() / g;
        self.sq_rel += diff * diff / g;
        self.sq += diff * diff;
        let dl = p.ln() - g.ln();
        self.sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        for (k, d) in self.d.iter_mut().enumerate() {
            if ratio < DELTA_BASE.powi(k as i32 + 1) {
                *d += 1;
            }
        }
    }

    fn report(&self, scale: f64) -> EvalReport {
        let n = self.n as f64;
        EvalReport {
            abs_rel: self.abs_rel / n,
            sq_rel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            rmse_log: (self.sq_log / n).sqrt(),
            delta1: self.d[0] as f64 / n,
            delta2: self.d[1] as f64 / n,
            delta3: self.d[2] as f64 / n,
            valid_pixel_count: self.n,
            applied_scale: scale,
        }
    }
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

fn check_inputs(pred: &ImageGrid, gt: &ImageGrid, valid: &Mask, options: &EvalOptions) -> Result<Vec<usize>> {
    pred.require_single_channel("prediction")?;
    gt.require_single_channel("ground truth")?;
    pred.require_same_shape(gt)?;
    if !valid.matches_grid(gt) {
        return Err(Error::shape(
            gt.shape_string(),
            format!("{}x{} mask", valid.height(), valid.width()),
        ));
    }
    if !(options.cap > MIN_DEPTH) {
        return Err(Error::invalid(format!(
            "cap must exceed {MIN_DEPTH}, got {}",
            options.cap
        )));
    }
    let idx: Vec<usize> = (0..valid.len()).filter(|&i| valid.as_slice()[i]).collect();
    if idx.is_empty() {
        return Err(Error::invalid("no valid ground-truth pixels"));
    }
    for &i in &idx {
        let (p, g) = (pred.as_slice()[i], gt.as_slice()[i]);
        if !(g > 0.0 && g.is_finite()) || !(p > 0.0 && p.is_finite()) {
            return Err(Error::invalid(format!(
                "valid pixels need positive finite depths, got pred {p} and gt {g} at index {i}"
            )));
        }
    }
    Ok(idx)
}

/// Median scale and clamped (pred, gt) pairs of the valid pixels.
fn prepared_pairs(
    pred: &ImageGrid,
    gt: &ImageGrid,
    valid: &Mask,
    options: &EvalOptions,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let idx = check_inputs(pred, gt, valid, options)?;
    let scale = if options.median_scale {
        let p: Vec<f64> = idx.iter().map(|&i| pred.as_slice()[i]).collect();
        let g: Vec<f64> = idx.iter().map(|&i| gt.as_slice()[i]).collect();
        median(&g).expect("non-empty") / median(&p).expect("non-empty")
    } else {
        1.0
    };
    let pairs = idx
        .iter()
        .map(|&i| {
            let p = (pred.as_slice()[i] * scale).clamp(MIN_DEPTH, options.cap);
            let g = gt.as_slice()[i].clamp(MIN_DEPTH, options.cap);
            (p, g)
        })
        .collect();
    Ok((scale, pairs))
}

/// Standard depth metrics over pixels where `valid` is set.
///
/// With median scaling the prediction is multiplied by
/// `median(gt) / median(pred)` first; both maps are then clamped to
/// `[MIN_DEPTH, cap]`.
pub fn evaluate(pred: &ImageGrid, gt: &ImageGrid, valid: &Mask, options: &EvalOptions) -> Result<EvalReport> {
    let (scale, pairs) = prepared_pairs(pred, gt, valid, options)?;
    let mut acc = Accumulator::default();
    for (p, g) in pairs {
        acc.add(p, g);
    }
    Ok(acc.report(scale))
}

/// Frame-mean of per-frame reports; pixel counts are summed.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let n = reports.len() as f64;
    let mut sums = [0.0; 7];
    for r in reports {
        for (s, v) in sums.iter_mut().zip(r.values()) {
            *s += v;
        }
    }
    Ok(EvalReport {
        abs_rel: sums[0] / n,
        sq_rel: sums[1] / n,
        rmse: sums[2] / n,
        rmse_log: sums[3] / n,
        delta1: sums[4] / n,
        delta2: sums[5] / n,
        delta3: sums[6] / n,
        valid_pixel_count: reports.iter().map(|r| r.valid_pixel_count).sum(),
        applied_scale: reports.iter().map(|r| r.applied_scale).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub abs_rel: Option<f64>,
    pub rmse: Option<f64>,
    pub rmse_log: Option<f64>,
    pub delta1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedAccuracy {
    pub edges: Vec<f64>,
    pub bins: Vec<BinStats>,
    /// Valid pixels whose ground truth falls outside the edges.
    pub out_of_range: usize,
    pub applied_scale: f64,
}

impl BinnedAccuracy {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lower,upper,count,abs_rel,rmse,rmse_log,delta1\n");
        let f = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        for b in &self.bins {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                b.lower,
                b.upper,
                b.count,
                f(b.abs_rel),
                f(b.rmse),
                f(b.rmse_log),
                f(b.delta1)
            );
        }
        s
    }

    pub fn bin_abs_rel(&self, lower: f64) -> Option<f64> {
        self.bins.iter().find(|b| b.lower == lower).and_then(|b| b.abs_rel)
    }
}

pub fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::invalid("at least two bin edges are required"));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid(format!(
            "bin edges must be finite and strictly increasing: {edges:?}"
        )));
    }
    Ok(())
}

/// Metrics per ground-truth depth bin, after one global median scale.
/// Bins are half-open except the last, which includes its upper edge.
pub fn binned_accuracy(
    pred: &ImageGrid,
    gt: &ImageGrid,
    valid: &Mask,
    edges: &[f64],
    options: &EvalOptions,
) -> Result<BinnedAccuracy> {
    validate_edges(edges)?;
    let (scale, pairs) = prepared_pairs(pred, gt, valid, options)?;
    let nb = edges.len() - 1;
    let mut accs = vec![Accumulator::default(); nb];
    let mut out_of_range = 0;
    for (p, g) in pairs {
        let bin = (0..nb).find(|&k| g >= edges[k] && (g < edges[k + 1] || (k + 1 == nb && g == edges[nb])));
        match bin {
            Some(k) => accs[k].add(p, g),
            None => out_of_range += 1,
        }
    }
    let bins = accs
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let r = (a.n > 0).then(|| a.report(scale));
            BinStats {
                lower: edges[k],
                upper: edges[k + 1],
                count: a.n,
                abs_rel: r.map(|r| r.abs_rel),
                rmse: r.map(|r| r.rmse),
                rmse_log: r.map(|r| r.rmse_log),
                delta1: r.map(|r| r.delta1),
            }
        })
        .collect();
    Ok(BinnedAccuracy {
        edges: edges.to_vec(),
        bins,
        out_of_range,
        applied_scale: scale,
    })
}

/// CSV with one row per labelled report.
pub fn reports_to_csv(rows: &[(String, EvalReport)]) -> String {
    let mut s = format!("name,{},valid_pixels,scale\n", COLUMNS.join(","));
    for (name, r) in rows {
        let vals: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(
            s,
            "{name},{},{},{:.6}",
            vals.join(","),
            r.valid_pixel_count,
            r.applied_scale
        );
    }
    s
}

/// Aligned text table with one row per labelled report.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(4);
    let mut s = format!("{:<width$}", "name");
    for c in COLUMNS {
        let _ = write!(s, " {c:>9}");
    }
    s.push('\n');
    for (name, r) in rows {
        let _ = write!(s, "{name:<width$}");
        for v in r.values() {
            let _ = write!(s, " {v:>9.4}");
        }
        s.push('\n');
    }
    s
}
