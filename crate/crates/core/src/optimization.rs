//! Gradients of the total loss, finite-difference verification and an Adam
//! optimizer over (σ field, pose parameters).

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::PoseSE3;
use crate::imaging::ImageGrid;
use crate::photometric::{evaluate_objective, GradientBundle, LossBreakdown, LossInputs, LossSettings};
use crate::{Error, Result};

/// σ is kept strictly inside (0, 1) during optimization.
pub const SIGMA_CLAMP: (f64, f64) = (1e-4, 1.0 - 1e-4);

/// Relative-error floor used by every gradient comparison.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Optimization variables: one σ grid per scale (coarse→fine) and one
/// axis-angle ‖ translation vector per source view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub sigma: Vec<ImageGrid>,
    pub poses: Vec<[f64; 6]>,
}

impl FieldState {
    pub fn new(sigma: Vec<ImageGrid>, poses: Vec<[f64; 6]>) -> Self {
        Self { sigma, poses }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_empty() {
            return Err(Error::invalid("state needs at least one σ grid"));
        }
        for g in &self.sigma {
            g.require_single_channel("sigma")?;
            if let Some(i) = g.as_slice().iter().position(|&s| !(0.0..=1.0).contains(&s)) {
                return Err(Error::invalid(format!(
                    "σ must lie in [0, 1], got {} at {i}",
                    g.as_slice()[i]
                )));
            }
        }
        if self.poses.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose parameters must be finite"));
        }
        Ok(())
    }

    pub fn pose_objects(&self) -> Result<Vec<PoseSE3>> {
        self.poses.iter().map(|p| PoseSE3::exp6(*p)).collect()
    }

    /// σ of the finest scale.
    pub fn finest_sigma(&self) -> &ImageGrid {
        self.sigma.last().expect("validated state has a scale")
    }

    fn sigma_len(&self) -> usize {
        self.sigma.iter().map(|g| g.as_slice().len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.sigma_len() + 6 * self.poses.len());
        for g in &self.sigma {
            v.extend_from_slice(g.as_slice());
        }
        for p in &self.poses {
            v.extend_from_slice(p);
        }
        v
    }

    fn with_flat(&self, flat: &[f64]) -> FieldState {
        let mut out = self.clone();
        let mut off = 0;
        for g in &mut out.sigma {
            let n = g.as_slice().len();
            g.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        for p in &mut out.poses {
            p.copy_from_slice(&flat[off..off + 6]);
            off += 6;
        }
        out
    }
}

fn flatten_gradients(g: &GradientBundle) -> Vec<f64> {
    let mut v: Vec<f64> = g.sigma.iter().flat_map(|s| s.as_slice().iter().copied()).collect();
    v.extend(g.pose.iter().flatten());
    v
}

/// Total loss and its exact gradients.
pub fn loss_and_gradients(
    state: &FieldState,
    inputs: &LossInputs,
    settings: &LossSettings,
) -> Result<(LossBreakdown, GradientBundle)> {
    state.validate()?;
    let poses = state.pose_objects()?;
    let eval = evaluate_objective(inputs, settings, &state.sigma, &poses, true)?;
    let grads = eval.gradients.expect("gradients requested");
    if !grads.is_finite() {
        return Err(Error::NonFinite { stage: "gradient" });
    }
    Ok((eval.breakdown, grads))
}

/// A single optimization variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coordinate {
    /// Entry of a flat parameter vector.
    Flat(usize),
    Sigma {
        scale: usize,
        y: usize,
        x: usize,
    },
    Pose {
        view: usize,
        component: usize,
    },
}

impl std::fmt::Display for Coordinate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coordinate::Flat(i) => write!(f, "x[{i}]"),
            Coordinate::Sigma { scale, y, x } => write!(f, "sigma[{scale}]({y},{x})"),
            Coordinate::Pose { view, component } => write!(f, "pose[{view}][{component}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub coordinate: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    /// The perturbation crossed a non-differentiable locus; excluded from the maximum.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    pub skipped: usize,
    pub probes: Vec<Probe>,
}

impl FdReport {
    pub(crate) fn from_probes(probes: Vec<Probe>) -> Self {
        let mut max = 0.0;
        let mut worst = None;
        let mut checked = 0;
        for p in probes.iter().filter(|p| !p.skipped) {
            checked += 1;
            if p.relative_error > max || worst.is_none() {
                max = p.relative_error.max(max);
                worst = Some(p.coordinate);
            }
        }
        let skipped = probes.len() - checked;
        Self {
            max_relative_error: max,
            worst,
            checked,
            skipped,
            probes,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Central-difference check of `analytic` at the listed indices.
///
/// `f` returns the function value and a signature of the discrete branches
/// it took; a probe whose ±ε evaluations disagree with the centre signature
/// is flagged as skipped rather than compared.
pub fn finite_difference_check_fn<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    epsilon: f64,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<(f64, u64)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if x.len() != analytic.len() {
        return Err(Error::shape(
            format!("{} gradient entries", x.len()),
            analytic.len().to_string(),
        ));
    }
    let (_, centre) = f(x)?;
    let mut probes = Vec::with_capacity(indices.len());
    let mut work = x.to_vec();
    for &i in indices {
        if i >= x.len() {
            return Err(Error::invalid(format!("probe index {i} out of range {}", x.len())));
        }
        work[i] = x[i] + epsilon;
        let (fp, sp) = f(&work)?;
        work[i] = x[i] - epsilon;
        let (fm, sm) = f(&work)?;
        work[i] = x[i];
        let numeric = (fp - fm) / (2.0 * epsilon);
        probes.push(Probe {
            coordinate: Coordinate::Flat(i),
            analytic: analytic[i],
            numeric,
            relative_error: relative_error(analytic[i], numeric),
            skipped: sp != centre || sm != centre,
        });
    }
    Ok(FdReport::from_probes(probes))
}

/// Finite-difference check of [`loss_and_gradients`] on `sample_count`
/// randomly chosen σ entries and every pose entry.
pub fn finite_difference_check(
    state: &FieldState,
    inputs: &LossInputs,
    settings: &LossSettings,
    epsilon: f64,
    sample_count: usize,
    seed: u64,
) -> Result<FdReport> {
    let (_, grads) = loss_and_gradients(state, inputs, settings)?;
    let n_sigma = state.sigma_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = sample(&mut rng, n_sigma, sample_count.min(n_sigma)).into_vec();
    indices.sort_unstable();
    indices.extend(n_sigma..n_sigma + 6 * state.poses.len());
    let x = state.flatten();
    // Perturbations may leave [0, 1] by ε; evaluate without the state check.
    let f = |flat: &[f64]| -> Result<(f64, u64)> {
        let s = state.with_flat(flat);
        let poses = s.pose_objects()?;
        let eval = evaluate_objective(inputs, settings, &s.sigma, &poses, false)?;
        Ok((eval.breakdown.total, eval.signature.value()))
    };
    let mut report = finite_difference_check_fn(f, &x, &flatten_gradients(&grads), &indices, epsilon)?;
    for p in &mut report.probes {
        if let Coordinate::Flat(i) = p.coordinate {
            p.coordinate = state_coordinate(state, i);
        }
    }
    report.worst = report.worst.map(|c| match c {
        Coordinate::Flat(i) => state_coordinate(state, i),
        other => other,
    });
    Ok(report)
}

fn state_coordinate(state: &FieldState, mut i: usize) -> Coordinate {
    for (scale, g) in state.sigma.iter().enumerate() {
        let n = g.as_slice().len();
        if i < n {
            return Coordinate::Sigma {
                scale,
                y: i / g.width(),
                x: i % g.width(),
            };
        }
        i -= n;
    }
    Coordinate::Pose {
        view: i / 6,
        component: i % 6,
    }
}

/// Base rate for the first part of the run, `base · tail_factor` after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRateSchedule {
    pub base: f64,
    pub tail_factor: f64,
    /// Fraction of the iteration budget run at the reduced rate.
    pub tail_fraction: f64,
}

impl Default for LearningRateSchedule {
    fn default() -> Self {
        Self {
            base: 1e-2,
            tail_factor: 0.1,
            tail_fraction: 0.25,
        }
    }
}

impl LearningRateSchedule {
    pub fn rate(&self, iteration: usize, max_iterations: usize) -> f64 {
        let switch = ((1.0 - self.tail_fraction) * max_iterations as f64).ceil() as usize;
        if iteration >= switch {
            self.base * self.tail_factor
        } else {
            self.base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub schedule: LearningRateSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iterations: usize,
    /// Stop once the relative loss decrease stays below this for
    /// [`OptimizerConfig::patience`] consecutive iterations; 0 disables.
    pub tolerance: f64,
    pub patience: usize,
    /// Multiplier on the learning rate of pose parameters.
    pub pose_lr_scale: f64,
    pub freeze_pose: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            schedule: LearningRateSchedule::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_iterations: 500,
            tolerance: 0.0,
            patience: 20,
            pose_lr_scale: 1.0,
            freeze_pose: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.base > 0.0 && s.tail_factor > 0.0 && s.base.is_finite() && s.tail_factor.is_finite()) {
            return Err(Error::invalid("learning rates must be positive and finite"));
        }
        if !(0.0..=1.0).contains(&s.tail_fraction) {
            return Err(Error::invalid("tail fraction must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.tolerance >= 0.0) || !(self.pose_lr_scale >= 0.0) {
            return Err(Error::invalid(
                "eps must be positive; tolerance and pose scale nonnegative",
            ));
        }
        Ok(())
    }
}

/// First- and second-moment state of the Adam update.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, config: &OptimizerConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update; `lr[i]` is the step size of parameter `i`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr(i) * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub photometric: f64,
    pub smoothness: f64,
    pub total: f64,
    pub valid_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,photometric,smoothness,total,valid_fraction\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.12e},{:.12e},{:.12e},{:.6}",
                r.iteration, r.photometric, r.smoothness, r.total, r.valid_fraction
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn initial(&self) -> Option<f64> {
        self.rows.first().map(|r| r.total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxIterations,
    Converged,
}

/// Output of a generic Adam run.
#[derive(Debug, Clone)]
pub struct AdamRun {
    /// Parameters with the lowest observed loss.
    pub x: Vec<f64>,
    pub loss: f64,
    pub trace: LossTrace,
    pub stop: StopReason,
    pub iterations: usize,
}

/// Adam loop with best-state return and divergence abort.
///
/// `eval` returns the loss, its gradient and a trace row; `project` is
/// applied after every step.
pub fn adam_loop<E, P>(
    x0: Vec<f64>,
    lr_scale: &[f64],
    config: &OptimizerConfig,
    mut eval: E,
    project: P,
) -> Result<AdamRun>
where
    E: FnMut(&[f64]) -> Result<(f64, Vec<f64>, TraceRow)>,
    P: Fn(&mut [f64]),
{
    config.validate()?;
    if lr_scale.len() != x0.len() {
        return Err(Error::shape(x0.len().to_string(), lr_scale.len().to_string()));
    }
    let mut x = x0;
    project(&mut x);
    let mut adam = Adam::new(x.len(), config);
    let mut trace = LossTrace::default();
    let mut best = (f64::INFINITY, x.clone());
    let mut initial = 0.0;
    let mut previous = f64::NAN;
    let mut flat_steps = 0;
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    for it in 0..=config.max_iterations {
        let (loss, grad, mut row) = eval(&x)?;
        row.iteration = it;
        trace.rows.push(row);
        if it == 0 {
            initial = loss;
        }
        let limit = 1e6 * initial.abs().max(f64::MIN_POSITIVE);
        if !loss.is_finite() || loss > limit {
            return Err(Error::Diverged {
                iteration: it,
                loss,
                limit,
                trace,
            });
        }
        if loss < best.0 {
            best = (loss, x.clone());
        }
        iterations = it;
        if it == config.max_iterations {
            break;
        }
        if config.tolerance > 0.0 && it > 0 {
            let rel = (previous - loss) / previous.abs().max(f64::MIN_POSITIVE);
            flat_steps = if rel.abs() < config.tolerance {
                flat_steps + 1
            } else {
                0
            };
            if flat_steps >= config.patience.max(1) {
                stop = StopReason::Converged;
                break;
            }
        }
        previous = loss;
        if grad.len() != x.len() {
            return Err(Error::shape(x.len().to_string(), grad.len().to_string()));
        }
        let lr = config.schedule.rate(it, config.max_iterations);
        adam.step(&mut x, &grad, |i| lr * lr_scale[i]);
        project(&mut x);
    }
    Ok(AdamRun {
        x: best.1,
        loss: best.0,
        trace,
        stop,
        iterations,
    })
}

/// Minimizes an arbitrary differentiable function with Adam.
pub fn minimize<F>(x0: Vec<f64>, config: &OptimizerConfig, mut f: F) -> Result<AdamRun>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let scale = vec![1.0; x0.len()];
    adam_loop(
        x0,
        &scale,
        config,
        |x| {
            let (loss, g) = f(x)?;
            let row = TraceRow {
                iteration: 0,
                photometric: loss,
                smoothness: 0.0,
                total: loss,
                valid_fraction: 1.0,
            };
            Ok((loss, g, row))
        },
        |_| {},
    )
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub state: FieldState,
    pub breakdown: LossBreakdown,
    pub trace: LossTrace,
    pub stop: StopReason,
    pub iterations: usize,
}

/// Fits the state to the objective. The returned state is the best one
/// visited, so its loss never exceeds the initial loss.
pub fn optimize(
    state0: &FieldState,
    inputs: &LossInputs,
    settings: &LossSettings,
    config: &OptimizerConfig,
) -> Result<OptimizeResult> {
    state0.validate()?;
    let n_sigma = state0.sigma_len();
    let x0 = state0.flatten();
    let pose_scale = if config.freeze_pose { 0.0 } else { config.pose_lr_scale };
    let lr_scale: Vec<f64> = (0..x0.len())
        .map(|i| if i < n_sigma { 1.0 } else { pose_scale })
        .collect();
    let run = adam_loop(
        x0,
        &lr_scale,
        config,
        |x| {
            let s = state0.with_flat(x);
            let (b, g) = loss_and_gradients(&s, inputs, settings)?;
            let row = TraceRow {
                iteration: 0,
                photometric: b.photometric,
                smoothness: b.smoothness,
                total: b.total,
                valid_fraction: b.valid_fraction,
            };
            let mut flat = flatten_gradients(&g);
            if config.freeze_pose {
                flat[n_sigma..].iter_mut().for_each(|v| *v = 0.0);
            }
            Ok((b.total, flat, row))
        },
        |x| {
            for s in &mut x[..n_sigma] {
                *s = s.clamp(SIGMA_CLAMP.0, SIGMA_CLAMP.1);
            }
        },
    )?;
    let state = state0.with_flat(&run.x);
    let poses = state.pose_objects()?;
    let breakdown = evaluate_objective(inputs, settings, &state.sigma, &poses, false)?.breakdown;
    Ok(OptimizeResult {
        state,
        breakdown,
        trace: run.trace,
        stop: run.stop,
        iterations: run.iterations,
    })
}
