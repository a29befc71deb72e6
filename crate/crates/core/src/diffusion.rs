//! DDPM machinery: linear β schedule, closed-form forward noising, the ε
//! training objective, ancestral sampling with optional test-time guidance,
//! and spherical interpolation of noise trajectories.
//!
//! Everything here works on standardized `N x C` arrays; conversion to
//! world units goes through [`ChannelScalers`].

use std::ops::RangeInclusive;

use thiserror::Error;

use crate::field::{self, ChannelScalers, FieldState, SDF};
use crate::geom;
use crate::rng::{self, Domain};
use crate::tensorops::{Tensor, TensorError};
use crate::tetgrid::GridLevel;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Field(#[from] field::FieldError),
    #[error("slerp endpoints are antiparallel or zero; interpolation axis undefined")]
    DegenerateSlerp,
    #[error("invalid guidance: {0}")]
    Guidance(String),
    #[error("model: {0}")]
    Model(String),
}

pub type Result<T, E = DiffusionError> = std::result::Result<T, E>;

/// Precomputed β, α and ᾱ for steps `1..=T` (stored 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub const DEFAULT_STEPS: usize = 1000;
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 0.02;

    /// Linear schedule from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DiffusionError::Schedule("need at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Schedule(format!(
                "require 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    return beta_start;
                }
                // lerp form keeps both endpoints exact
                let f = i as f64 / (steps - 1) as f64;
                beta_start * (1.0 - f) + beta_end * f
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps(), "step {t} out of range");
        t - 1
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(Self::DEFAULT_STEPS, Self::DEFAULT_BETA_START, Self::DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// `(x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn reconstruct_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)?)
}

/// Noise consistent with `x_t` and a given `x0`; inverse of [`reconstruct_x0`].
pub fn eps_from_x0(x_t: &Tensor, x0: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.zip_map(x0, |x, x0| (x - a * x0) / b)?)
}

/// `ε + √(1−ᾱ_t)·grad`.
pub fn guided_eps(eps: &Tensor, grad: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let c = (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(eps.zip_map(grad, |e, g| e + c * g)?)
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

fn mean_sq_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Mean squared error between `ε` and the prediction on `q_sample(x0, t, ε)`.
pub fn training_loss(
    model: &dyn NoisePredictor,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<f64> {
    let x_t = q_sample(x0, t, eps, sched)?;
    let pred = model.predict(&x_t, t)?;
    mean_sq_diff(&pred, eps)
}

/// One reverse step. `z` is ignored at `t = 1`.
pub fn ancestral_step(
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    z: &Tensor,
    sched: &DiffusionSchedule,
    guide: Option<&Guide<'_>>,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let mut eps = model.predict(x_t, t)?;
    if let Some(g) = guide {
        if g.active_at(t) {
            eps = g.apply(x_t, &eps, t, sched)?;
        }
    }
    step_with_eps(x_t, &eps, t, z, sched)
}

/// `x_{t−1}` from `x_t` and an already computed `ε̂`.
pub fn step_with_eps(x_t: &Tensor, eps: &Tensor, t: usize, z: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let alpha = sched.alpha(t);
    let c = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out = x_t.zip_map(eps, |x, e| inv * (x - c * e))?;
    if t > 1 {
        out.same_shape(z)?;
        let sigma = sched.beta(t).sqrt();
        for (o, zz) in out.data_mut().iter_mut().zip(z.data()) {
            *o += sigma * zz;
        }
    }
    Ok(out)
}

/// Source of the prior draw `x_T` and the per-step noise `z_t`.
pub trait NoiseSource: Sync {
    fn prior(&self) -> Tensor;
    fn step(&self, t: usize) -> Tensor;
}

/// Noise regenerated on demand from `(seed, t)`; the prior uses index 0.
#[derive(Debug, Clone, Copy)]
pub struct SeededNoise {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
}

impl NoiseSource for SeededNoise {
    fn prior(&self) -> Tensor {
        rng::normal_tensor(self.seed, Domain::Sampling, 0, self.rows, self.cols)
    }

    fn step(&self, t: usize) -> Tensor {
        rng::normal_tensor(self.seed, Domain::Sampling, t as u64, self.rows, self.cols)
    }
}

/// Slerp between the draws of two seeded trajectories.
#[derive(Debug, Clone, Copy)]
pub struct SlerpNoise {
    pub a: SeededNoise,
    pub b: SeededNoise,
    pub k: f64,
}

impl SlerpNoise {
    fn mix(&self, za: Tensor, zb: Tensor) -> Tensor {
        let (r, c) = za.shape();
        let v = slerp(za.data(), zb.data(), self.k).expect("gaussian draws are never antiparallel");
        Tensor::from_vec(r, c, v).expect("sized buffer")
    }
}

impl NoiseSource for SlerpNoise {
    fn prior(&self) -> Tensor {
        self.mix(self.a.prior(), self.b.prior())
    }

    fn step(&self, t: usize) -> Tensor {
        self.mix(self.a.step(t), self.b.step(t))
    }
}

/// Full ancestral chain from `x_T` to `x_0`.
///
/// `on_snapshot(t, x̂0)` fires for every `t` listed in `snapshots`; `t = 0`
/// delivers the final sample.
pub fn sample(
    model: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    noise: &dyn NoiseSource,
    guide: Option<&Guide<'_>>,
    snapshots: &[usize],
    on_snapshot: &mut dyn FnMut(usize, &Tensor) -> Result<()>,
) -> Result<Tensor> {
    let mut x = noise.prior();
    for t in (1..=sched.steps()).rev() {
        let mut eps = model.predict(&x, t)?;
        if let Some(g) = guide {
            if g.active_at(t) {
                eps = g.apply(&x, &eps, t, sched)?;
            }
        }
        if snapshots.contains(&t) {
            on_snapshot(t, &reconstruct_x0(&x, &eps, t, sched)?)?;
        }
        let z = if t > 1 { noise.step(t) } else { Tensor::zeros(x.rows(), x.cols()) };
        x = step_with_eps(&x, &eps, t, &z, sched)?;
    }
    if snapshots.contains(&0) {
        on_snapshot(0, &x)?;
    }
    Ok(x)
}

/// Samples along a slerp path between the noise of `seed_a` and `seed_b`,
/// one per `k` in a uniform grid of `count` points over `[0, 1]`.
pub fn interpolate_shapes(
    model: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    seed_a: u64,
    seed_b: u64,
    count: usize,
    shape: (usize, usize),
) -> Result<Vec<Tensor>> {
    let a = SeededNoise { seed: seed_a, rows: shape.0, cols: shape.1 };
    let b = SeededNoise { seed: seed_b, rows: shape.0, cols: shape.1 };
    uniform_grid(count)
        .into_iter()
        .map(|k| sample(model, sched, &SlerpNoise { a, b, k }, None, &[], &mut |_, _| Ok(())))
        .collect()
}

/// `count` evenly spaced values on `[0, 1]` (just `0` for `count = 1`).
pub fn uniform_grid(count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Spherical interpolation; falls back to lerp for nearly parallel inputs.
pub fn slerp(z0: &[f64], z1: &[f64], k: f64) -> Result<Vec<f64>> {
    if z0.len() != z1.len() {
        return Err(TensorError::Shape(format!("slerp of lengths {} and {}", z0.len(), z1.len())).into());
    }
    let n0 = z0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n1 = z1.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n0 == 0.0 || n1 == 0.0 {
        return Err(DiffusionError::DegenerateSlerp);
    }
    let cos = (z0.iter().zip(z1).map(|(a, b)| a * b).sum::<f64>() / (n0 * n1)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if std::f64::consts::PI - omega < 1e-7 {
        return Err(DiffusionError::DegenerateSlerp);
    }
    if k == 0.0 {
        return Ok(z0.to_vec());
    }
    if k == 1.0 {
        return Ok(z1.to_vec());
    }
    if omega < 1e-7 {
        return Ok(z0.iter().zip(z1).map(|(a, b)| a * (1.0 - k) + b * k).collect());
    }
    let s = omega.sin();
    let (w0, w1) = (((1.0 - k) * omega).sin() / s, (k * omega).sin() / s);
    Ok(z0.iter().zip(z1).map(|(a, b)| w0 * a + w1 * b).collect())
}

/// `ω·(−mean(s₊) + mean(s₋))` and its gradient wrt `s`, with the sign masks
/// held constant. An empty side contributes nothing.
pub fn volume_loss(s: &[f64], omega: f64) -> (f64, Vec<f64>) {
    let pos = s.iter().filter(|v| **v > 0.0).count();
    let neg = s.iter().filter(|v| **v < 0.0).count();
    let mean = |pred: fn(f64) -> bool, n: usize| {
        if n == 0 {
            0.0
        } else {
            s.iter().copied().filter(|v| pred(*v)).sum::<f64>() / n as f64
        }
    };
    let loss = omega * (-mean(|v| v > 0.0, pos) + mean(|v| v < 0.0, neg));
    let grad = s
        .iter()
        .map(|&v| {
            if v > 0.0 {
                -omega / pos as f64
            } else if v < 0.0 {
                omega / neg as f64
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}

/// Vertices of tets whose SDF signs are mixed (zero counts as inside).
pub fn surface_adjacent(level: &GridLevel, sdf: impl Fn(usize) -> f64) -> Vec<bool> {
    let mut mark = vec![false; level.num_vertices()];
    for tet in level.tets() {
        let inside = tet.map(|v| sdf(v) >= 0.0);
        if inside.iter().any(|&b| b) && inside.iter().any(|&b| !b) {
            for &v in tet {
                mark[v] = true;
            }
        }
    }
    mark
}

/// `p̂ = p + λ(p − mean of neighbours)` on the deformed positions of
/// surface-adjacent vertices; other channels pass through. Values are in
/// world units.
pub fn laplacian_correct_values(values: &Tensor, level: &GridLevel, lambda: f64) -> Result<Tensor> {
    if values.rows() != level.num_vertices() || values.cols() < 4 {
        return Err(TensorError::Shape(format!(
            "field {:?} does not fit level with {} vertices",
            values.shape(),
            level.num_vertices()
        ))
        .into());
    }
    let mut out = values.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    let pos = field::deformed_positions(values, level);
    let mark = surface_adjacent(level, |v| values.get(v, SDF));
    for v in 0..level.num_vertices() {
        let nbrs = level.neighbors(v);
        if !mark[v] || nbrs.is_empty() {
            continue;
        }
        let mut mean = [0.0; 3];
        for &j in nbrs {
            mean = geom::add(mean, pos[j]);
        }
        mean = geom::scale(mean, 1.0 / nbrs.len() as f64);
        let p = pos[v];
        let q = geom::add(p, geom::scale(geom::sub(p, mean), lambda));
        let rest = level.vertices()[v];
        for k in 0..3 {
            out.set(v, field::DISPLACEMENT + k, q[k] - rest[k]);
        }
    }
    Ok(out)
}

pub fn laplacian_correct(x0: &FieldState, level: &GridLevel, lambda: f64) -> Result<FieldState> {
    x0.check_level(level)?;
    let values = laplacian_correct_values(&x0.values, level, lambda)?;
    Ok(FieldState { values, ..x0.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceKind {
    /// Signed strength ω of the volume loss; positive grows the shape.
    Volume { omega: f64 },
    /// Signed λ of the Laplacian correction; negative smooths.
    Laplacian { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    /// Loss gradient folded into ε̂.
    Gradient,
    /// Edit x̂₀, then re-derive ε̂ from it.
    Posthoc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    pub kind: GuidanceKind,
    pub mode: GuidanceMode,
    /// Steps at which guidance is applied.
    pub steps: RangeInclusive<usize>,
}

impl GuidanceSpec {
    pub const DEFAULT_OMEGA: f64 = 256.0;

    pub fn new(kind: GuidanceKind, steps: RangeInclusive<usize>) -> Result<Self> {
        let mode = match kind {
            GuidanceKind::Volume { omega } if omega.is_finite() => GuidanceMode::Gradient,
            GuidanceKind::Laplacian { lambda } if lambda.is_finite() => GuidanceMode::Posthoc,
            _ => return Err(DiffusionError::Guidance("strength must be finite".into())),
        };
        if steps.is_empty() {
            return Err(DiffusionError::Guidance(format!("empty step range {steps:?}")));
        }
        Ok(Self { kind, mode, steps })
    }

    /// Parses `volume:+256`, `volume:-256` or `laplacian:-0.5`.
    pub fn parse(text: &str, steps: RangeInclusive<usize>) -> Result<Self> {
        let (kind, value) = text
            .split_once(':')
            .ok_or_else(|| DiffusionError::Guidance(format!("expected kind:strength, got {text:?}")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| DiffusionError::Guidance(format!("bad strength {value:?}")))?;
        let kind = match kind.trim() {
            "volume" => GuidanceKind::Volume { omega: v },
            "laplacian" => GuidanceKind::Laplacian { lambda: v },
            other => return Err(DiffusionError::Guidance(format!("unknown guidance kind {other:?}"))),
        };
        Self::new(kind, steps)
    }
}

/// Parses a step range `a..b` (inclusive, either order).
pub fn parse_step_range(text: &str) -> Result<RangeInclusive<usize>> {
    let bad = || DiffusionError::Guidance(format!("expected a..b, got {text:?}"));
    let (a, b) = text.split_once("..").ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    Ok(a.min(b)..=a.max(b))
}

/// A guidance spec bound to the grid level and channel scalers of a model.
pub struct Guide<'a> {
    pub spec: GuidanceSpec,
    pub level: &'a GridLevel,
    pub scalers: &'a ChannelScalers,
}

impl Guide<'_> {
    pub fn active_at(&self, t: usize) -> bool {
        self.spec.steps.contains(&t)
    }

    /// The guided noise estimate ε̂ for `x_t`.
    pub fn apply(&self, x_t: &Tensor, eps: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
        match self.spec.kind {
            GuidanceKind::Volume { omega } => {
                // Loss on the world-unit SDF of x_t; descending it means
                // adding +∇L to ε̂ (the step subtracts ε̂).
                let (mean, std) = (self.scalers.mean[SDF], self.scalers.std[SDF]);
                let s: Vec<f64> = (0..x_t.rows()).map(|r| x_t.get(r, SDF) * std + mean).collect();
                let (_, gs) = volume_loss(&s, omega);
                let mut grad = Tensor::zeros(x_t.rows(), x_t.cols());
                for (r, g) in gs.into_iter().enumerate() {
                    grad.set(r, SDF, g * std);
                }
                guided_eps(eps, &grad, t, sched)
            }
            GuidanceKind::Laplacian { lambda } => {
                let x0 = reconstruct_x0(x_t, eps, t, sched)?;
                let world = self.scalers.destandardize(&x0)?;
                let fixed = laplacian_correct_values(&world, self.level, lambda)?;
                let x0 = self.scalers.standardize(&fixed)?;
                eps_from_x0(x_t, &x0, t, sched)
            }
        }
    }
}
