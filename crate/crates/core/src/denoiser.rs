//! The tetrahedral U-Net noise predictor and its training loop.
//!
//! Layout: sinusoidal time embedding → Linear → GELU → Linear feeds every
//! residual block. A linear stem lifts the input channels to `base_width`;
//! encoder stage `i` runs on grid level `level − i` with width
//! `base_width·2^i`, mean-pooling into each stage after the first. The
//! decoder unpools, concatenates the matching encoder features and runs the
//! same residual blocks back up. A plain linear head (no time input) maps
//! back to the field channels.
//!
//! Residual block: MLP (Linear, LayerNorm, SiLU) → + time → TetraConv
//! (conv, LayerNorm, SiLU) → + time → MLP, plus a skip (linear when the
//! width changes). Each "+ time" is SiLU → Linear of the shared embedding.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{self, DiffusionError, DiffusionSchedule, NoisePredictor};
use crate::field::{self, ChannelScalers, FieldError};
use crate::rng::{self, Domain};
use crate::tensorops::{
    adam_step, time_embedding, AdamConfig, AdamState, Aggregation, NodeId, Tape, Tensor, TensorError,
};
use crate::tetgrid::{GridError, GridLevel, TetGrid};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Io(io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint size mismatch: {0}")]
    SizeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("field shape {found:?} does not match the model input {expected:?}")]
    Shape { expected: (usize, usize), found: (usize, usize) },
    #[error("loss became non-finite at step {step} (epoch {epoch}, t = {t})")]
    NanLoss { step: u64, epoch: usize, t: usize },
}

impl From<io::Error> for DenoiserError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            DenoiserError::SizeMismatch("file ends early".into())
        } else {
            DenoiserError::Io(e)
        }
    }
}

pub type Result<T, E = DenoiserError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Encoder stages (grid levels visited).
    pub levels_used: usize,
    /// Channels at the finest stage; doubled per stage.
    pub base_width: usize,
    pub res_blocks_per_stage: usize,
    pub time_embed_dim: usize,
    /// Field channels in and out (4 or 7).
    pub channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            levels_used: 3,
            base_width: 16,
            res_blocks_per_stage: 1,
            time_embed_dim: 32,
            channels: 4,
        }
    }
}

impl DenoiserConfig {
    /// The large reference network: five stages from width 120, three
    /// residual blocks each.
    pub fn reference(channels: usize) -> Self {
        Self {
            levels_used: 5,
            base_width: 120,
            res_blocks_per_stage: 3,
            time_embed_dim: 128,
            channels,
        }
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn validate(&self) -> Result<()> {
        field::check_channels(self.channels)?;
        if self.levels_used == 0 || self.base_width == 0 || self.res_blocks_per_stage == 0 {
            return Err(DenoiserError::Config("levels, width and block count must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(DenoiserError::Config("time_embed_dim must be even and at least 2".into()));
        }
        if self.levels_used > 24 {
            return Err(DenoiserError::Config("too many levels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    o: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    k: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    level: usize,
    mlp1: Lin,
    norm1: Norm,
    time1: Lin,
    conv: Conv,
    norm2: Norm,
    time2: Lin,
    mlp2: Lin,
    norm3: Norm,
    skip: Option<Lin>,
}

#[derive(Debug, Clone)]
struct Layout {
    time_a: Lin,
    time_b: Lin,
    stem: Lin,
    encoder: Vec<Vec<ResBlock>>,
    /// `decoder[i]` produces stage `i`; only stages below the deepest.
    decoder: Vec<Vec<ResBlock>>,
    head: Lin,
}

/// Name, shape and initialisation of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(ParamSpec { name, rows, cols, init });
        self.specs.len() - 1
    }

    fn lin(&mut self, name: &str, c_in: usize, c_out: usize) -> Lin {
        Lin {
            w: self.add(format!("{name}.weight"), c_in, c_out, Init::Uniform { fan_in: c_in }),
            b: self.add(format!("{name}.bias"), 1, c_out, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.gain"), 1, c, Init::Ones),
            o: self.add(format!("{name}.offset"), 1, c, Init::Zeros),
        }
    }

    fn conv(&mut self, name: &str, m: usize, c_in: usize, c_out: usize) -> Conv {
        let fan_in = (m + 1) * c_in;
        Conv {
            k: self.add(format!("{name}.kernel"), (m + 1) * c_in, c_out, Init::Uniform { fan_in }),
            b: self.add(format!("{name}.bias"), 1, c_out, Init::Zeros),
        }
    }

    fn res(&mut self, name: &str, level: usize, m: usize, c_in: usize, c_out: usize, d: usize) -> ResBlock {
        ResBlock {
            level,
            mlp1: self.lin(&format!("{name}.mlp1"), c_in, c_out),
            norm1: self.norm(&format!("{name}.norm1"), c_out),
            time1: self.lin(&format!("{name}.time1"), d, c_out),
            conv: self.conv(&format!("{name}.conv"), m, c_out, c_out),
            norm2: self.norm(&format!("{name}.norm2"), c_out),
            time2: self.lin(&format!("{name}.time2"), d, c_out),
            mlp2: self.lin(&format!("{name}.mlp2"), c_out, c_out),
            norm3: self.norm(&format!("{name}.norm3"), c_out),
            skip: (c_in != c_out).then(|| self.lin(&format!("{name}.skip"), c_in, c_out)),
        }
    }
}

fn layout(cfg: &DenoiserConfig, grid: &TetGrid, level: usize) -> Result<(Layout, Vec<ParamSpec>)> {
    cfg.validate()?;
    if level >= grid.num_levels() {
        return Err(DenoiserError::Config(format!(
            "level {level} out of range for {} grid levels",
            grid.num_levels()
        )));
    }
    if cfg.levels_used > level + 1 {
        return Err(DenoiserError::Config(format!(
            "{} stages need {} levels at or below level {level}",
            cfg.levels_used, cfg.levels_used
        )));
    }
    let d = cfg.time_embed_dim;
    let mut b = Builder { specs: Vec::new() };
    let time_a = b.lin("time.0", d, d);
    let time_b = b.lin("time.1", d, d);
    let stem = b.lin("stem", cfg.channels, cfg.width(0));
    let mut encoder = Vec::new();
    for i in 0..cfg.levels_used {
        let lvl = level - i;
        let m = grid.level(lvl).m();
        let mut c_in = if i == 0 { cfg.width(0) } else { cfg.width(i - 1) };
        let mut blocks = Vec::new();
        for r in 0..cfg.res_blocks_per_stage {
            blocks.push(b.res(&format!("enc{i}.{r}"), lvl, m, c_in, cfg.width(i), d));
            c_in = cfg.width(i);
        }
        encoder.push(blocks);
    }
    let mut decoder: Vec<Vec<ResBlock>> = vec![Vec::new(); cfg.levels_used.saturating_sub(1)];
    for i in (0..cfg.levels_used - 1).rev() {
        let lvl = level - i;
        let m = grid.level(lvl).m();
        let mut c_in = cfg.width(i + 1) + cfg.width(i);
        for r in 0..cfg.res_blocks_per_stage {
            decoder[i].push(b.res(&format!("dec{i}.{r}"), lvl, m, c_in, cfg.width(i), d));
            c_in = cfg.width(i);
        }
    }
    let head = b.lin("head", cfg.width(0), cfg.channels);
    Ok((
        Layout {
            time_a,
            time_b,
            stem,
            encoder,
            decoder,
            head,
        },
        b.specs,
    ))
}

/// Training-time hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr_start: 1e-3,
            lr_end: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, shapes: usize) -> u64 {
        shapes.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn total_steps(&self, shapes: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(shapes)
    }

    /// Linear anneal over the whole run.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if total <= 1 {
            return self.lr_start;
        }
        let f = step as f64 / (total - 1) as f64;
        self.lr_start * (1.0 - f) + self.lr_end * f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DiffusionSchedule::DEFAULT_STEPS,
            beta_start: DiffusionSchedule::DEFAULT_BETA_START,
            beta_end: DiffusionSchedule::DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        Ok(DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)?)
    }
}

/// One line of training progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Optimiser state and history; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub adam: AdamState,
    pub history: Vec<LossRecord>,
}

/// Mean of the first and of the last `window` losses.
pub fn smoothed_ends(history: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    let w = window.min(history.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&history[..w]), mean(&history[history.len() - w..])))
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub grid: TetGrid,
    /// Grid level of the input field.
    pub level: usize,
    pub schedule: ScheduleConfig,
    /// Field standardisation used for training and sampling.
    pub scalers: ChannelScalers,
    pub params: Vec<Tensor>,
    specs: Vec<ParamSpec>,
    layout: Layout,
    pub train_state: Option<TrainState>,
}

impl Denoiser {
    /// Fresh model with parameters drawn deterministically from `seed`.
    pub fn new(config: DenoiserConfig, grid: TetGrid, level: usize, seed: u64) -> Result<Self> {
        let (layout, specs) = layout(&config, &grid, level)?;
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = rng::generator(seed, Domain::Init, i as u64);
                match s.init {
                    Init::Zeros => Tensor::zeros(s.rows, s.cols),
                    Init::Ones => Tensor::filled(s.rows, s.cols, 1.0),
                    Init::Uniform { fan_in } => {
                        let a = 1.0 / (fan_in as f64).sqrt();
                        let data = (0..s.rows * s.cols).map(|_| r.random_range(-a..a)).collect();
                        Tensor::from_vec(s.rows, s.cols, data).expect("sized buffer")
                    }
                }
            })
            .collect();
        Ok(Self {
            config,
            level,
            schedule: ScheduleConfig::default(),
            scalers: ChannelScalers::identity(config.channels),
            params,
            specs,
            layout,
            grid,
            train_state: None,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn input_level(&self) -> &GridLevel {
        self.grid.level(self.level)
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.input_level().num_vertices(), self.config.channels)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(DenoiserError::Shape {
                expected: self.input_shape(),
                found: x.shape(),
            });
        }
        Ok(())
    }

    /// Records the network on `tape`; `p[i]` is the node of parameter `i`.
    pub fn forward_on<'a>(&'a self, tape: &mut Tape<'a>, p: &[NodeId], x: NodeId, t: usize) -> Result<NodeId> {
        let lay = &self.layout;
        let lin = |tape: &mut Tape<'a>, x: NodeId, l: Lin| tape.linear(x, p[l.w], p[l.b]);
        let sinus = tape.leaf(Tensor::from_vec(1, self.config.time_embed_dim, time_embedding(t, self.config.time_embed_dim))?);
        let e = lin(tape, sinus, lay.time_a)?;
        let e = tape.gelu(e);
        let temb = lin(tape, e, lay.time_b)?;
        let temb_act = tape.silu(temb);

        let block = |tape: &mut Tape<'a>, x: NodeId, b: &ResBlock| -> Result<NodeId> {
            let level = self.grid.level(b.level);
            let h = lin(tape, x, b.mlp1)?;
            let h = tape.layer_norm(h, p[b.norm1.g], p[b.norm1.o])?;
            let h = tape.silu(h);
            let te = lin(tape, temb_act, b.time1)?;
            let h = tape.add_row(h, te)?;
            let h = tape.conv(h, p[b.conv.k], p[b.conv.b], level)?;
            let h = tape.layer_norm(h, p[b.norm2.g], p[b.norm2.o])?;
            let h = tape.silu(h);
            let te = lin(tape, temb_act, b.time2)?;
            let h = tape.add_row(h, te)?;
            let h = lin(tape, h, b.mlp2)?;
            let h = tape.layer_norm(h, p[b.norm3.g], p[b.norm3.o])?;
            let h = tape.silu(h);
            let skip = match b.skip {
                Some(s) => lin(tape, x, s)?,
                None => x,
            };
            Ok(tape.add(h, skip)?)
        };

        let mut h = lin(tape, x, lay.stem)?;
        let mut skips = Vec::with_capacity(lay.encoder.len());
        for (i, stage) in lay.encoder.iter().enumerate() {
            if i > 0 {
                h = tape.pool(h, self.grid.level(self.level - i + 1), Aggregation::Mean)?;
            }
            for b in stage {
                h = block(tape, h, b)?;
            }
            skips.push(h);
        }
        for i in (0..lay.decoder.len()).rev() {
            h = tape.unpool(h, self.grid.level(self.level - i))?;
            h = tape.concat(h, skips[i])?;
            for b in &lay.decoder[i] {
                h = block(tape, h, b)?;
            }
        }
        Ok(lin(tape, h, lay.head)?)
    }

    /// Noise prediction for a standardized `x_t`.
    pub fn forward(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.check_input(x_t)?;
        let mut tape = Tape::new();
        let p: Vec<NodeId> = self.params.iter().map(|w| tape.leaf(w.clone())).collect();
        let x = tape.leaf(x_t.clone());
        let out = self.forward_on(&mut tape, &p, x, t)?;
        Ok(tape.value(out).clone())
    }

    /// Denoising loss on `q_sample(x0, t, ε)` and its parameter gradients.
    pub fn loss_and_grads(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        self.check_input(x0)?;
        let sched = self.schedule.build()?;
        let x_t = diffusion::q_sample(x0, t, eps, &sched)?;
        let mut tape = Tape::new();
        let p: Vec<NodeId> = self.params.iter().map(|w| tape.leaf(w.clone())).collect();
        let x = tape.leaf(x_t);
        let out = self.forward_on(&mut tape, &p, x, t)?;
        let loss = tape.mse(out, eps.clone())?;
        let value = tape.value(loss).item();
        let mut g = tape.backward(loss)?;
        let grads = p.iter().map(|&id| g.take(id)).collect::<Result<Vec<_>, _>>()?;
        Ok((value, grads))
    }

    fn fresh_state(&self, config: TrainConfig) -> TrainState {
        TrainState {
            config,
            step: 0,
            adam: AdamState::new(&self.params),
            history: Vec::new(),
        }
    }

    /// Runs (or resumes) training on standardized fields until the
    /// configured number of epochs is done. Step `k` draws its shapes, steps
    /// and noise from `(seed, k)` alone, so a resumed run matches an
    /// uninterrupted one. `on_epoch` fires after every completed epoch.
    pub fn train(
        &mut self,
        data: &[Tensor],
        config: TrainConfig,
        on_step: &mut dyn FnMut(&LossRecord),
        on_epoch: &mut dyn FnMut(&Denoiser, usize) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(DenoiserError::EmptyDataset);
        }
        if config.batch_size == 0 || config.epochs == 0 {
            return Err(DenoiserError::Config("epochs and batch size must be positive".into()));
        }
        for x in data {
            self.check_input(x)?;
        }
        let sched = self.schedule.build()?;
        let mut state = match self.train_state.take() {
            Some(mut s) => {
                s.config = config;
                s
            }
            None => self.fresh_state(config),
        };
        let per_epoch = config.steps_per_epoch(data.len());
        let total = config.total_steps(data.len());
        let (rows, cols) = self.input_shape();
        let adam = AdamConfig::default();
        let result = (|| {
            while state.step < total {
                let k = state.step;
                let epoch = (k / per_epoch) as usize;
                let mut r = rng::generator(config.seed, Domain::Training, k);
                let batch: Vec<(usize, usize, Tensor)> = (0..config.batch_size)
                    .map(|_| {
                        let shape = r.random_range(0..data.len());
                        let t = r.random_range(1..=sched.steps());
                        let eps = (0..rows * cols).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                        (shape, t, Tensor::from_vec(rows, cols, eps).expect("sized buffer"))
                    })
                    .collect();
                let results: Vec<(f64, Vec<Tensor>)> = batch
                    .par_iter()
                    .map(|(s, t, eps)| self.loss_and_grads(&data[*s], *t, eps))
                    .collect::<Result<_>>()?;
                // fixed-order reduction
                let n = results.len() as f64;
                let mut loss = 0.0;
                let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
                for (l, g) in &results {
                    loss += l;
                    for (acc, gi) in grads.iter_mut().zip(g) {
                        acc.add_assign(gi);
                    }
                }
                loss /= n;
                if !loss.is_finite() {
                    return Err(DenoiserError::NanLoss { step: k, epoch, t: batch[0].1 });
                }
                for g in &mut grads {
                    *g = g.map(|v| v / n);
                }
                let lr = config.lr_at(k, total);
                adam_step(&mut self.params, &grads, &mut state.adam, lr, &adam)?;
                state.step += 1;
                let rec = LossRecord { epoch, step: k, loss, lr };
                state.history.push(rec);
                on_step(&rec);
                if state.step % per_epoch == 0 {
                    self.train_state = Some(state.clone());
                    on_epoch(self, epoch)?;
                }
            }
            Ok(())
        })();
        self.train_state = Some(state);
        result
    }

    pub fn history(&self) -> &[LossRecord] {
        self.train_state.as_ref().map_or(&[], |s| &s.history)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_t: &Tensor, t: usize) -> diffusion::Result<Tensor> {
        self.forward(x_t, t).map_err(|e| DiffusionError::Model(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "TDMC" | u32 version | u64 len + JSON header | u64 tensor count, then per
// tensor u64 rows, u64 cols, f64 data | u64 channels, f64 means, f64 stds |
// u8 optimiser flag [+ Adam state]. All integers and floats little-endian.

const MAGIC: &[u8; 4] = b"TDMC";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: DenoiserConfig,
    level: usize,
    schedule: ScheduleConfig,
    train: Option<TrainHeader>,
    grid: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainHeader {
    config: TrainConfig,
    step: u64,
    history: Vec<LossRecord>,
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f64::from_bits(get_u64(r)?));
    }
    Ok(out)
}

impl Denoiser {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            model: self.config,
            level: self.level,
            schedule: self.schedule,
            train: self.train_state.as_ref().map(|s| TrainHeader {
                config: s.config,
                step: s.step,
                history: s.history.clone(),
            }),
            grid: serde_json::from_slice(&self.grid.to_json()?)?,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_u64(w, json.len() as u64)?;
        w.write_all(&json)?;
        put_u64(w, self.params.len() as u64)?;
        for p in &self.params {
            put_u64(w, p.rows() as u64)?;
            put_u64(w, p.cols() as u64)?;
            p.write_le(w)?;
        }
        put_u64(w, self.scalers.channels() as u64)?;
        for v in self.scalers.mean.iter().chain(&self.scalers.std) {
            w.write_all(&v.to_le_bytes())?;
        }
        match &self.train_state {
            Some(s) => {
                w.write_all(&[1])?;
                s.adam.write_le(w)?;
            }
            None => w.write_all(&[0])?,
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DenoiserError::Magic);
        }
        let mut vb = [0u8; 4];
        r.read_exact(&mut vb)?;
        let version = u32::from_le_bytes(vb);
        if version != VERSION {
            return Err(DenoiserError::Version(version));
        }
        let len = get_u64(r)?;
        if len > (1 << 34) {
            return Err(DenoiserError::SizeMismatch(format!("header length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let grid = TetGrid::from_json(&serde_json::to_vec(&header.grid)?)?;
        let mut model = Denoiser::new(header.model, grid, header.level, 0)?;
        model.schedule = header.schedule;
        model.schedule.build()?;
        let count = get_u64(r)? as usize;
        if count != model.params.len() {
            return Err(DenoiserError::SizeMismatch(format!(
                "{count} parameter tensors, architecture has {}",
                model.params.len()
            )));
        }
        for (i, p) in model.params.iter_mut().enumerate() {
            let (rows, cols) = (get_u64(r)? as usize, get_u64(r)? as usize);
            if (rows, cols) != p.shape() {
                return Err(DenoiserError::SizeMismatch(format!(
                    "parameter {i} is {rows}x{cols}, expected {:?}",
                    p.shape()
                )));
            }
            *p = Tensor::read_le(r, rows, cols)?;
        }
        let c = get_u64(r)? as usize;
        if c != model.config.channels {
            return Err(DenoiserError::SizeMismatch(format!("{c} scaler channels")));
        }
        let mean = get_f64s(r, c)?;
        let std = get_f64s(r, c)?;
        model.scalers = ChannelScalers::new(mean, std)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        model.train_state = match (flag[0], header.train) {
            (0, None) => None,
            (1, Some(t)) => Some(TrainState {
                config: t.config,
                step: t.step,
                adam: AdamState::read_le(r, &model.params)?,
                history: t.history,
            }),
            _ => return Err(DenoiserError::SizeMismatch("optimiser flag disagrees with header".into())),
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(DenoiserError::SizeMismatch("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so a crash never leaves a half checkpoint
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write_checkpoint(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(&mut BufReader::new(fs::File::open(path)?))
    }
}

impl PartialEq for Denoiser {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.level == other.level
            && self.schedule == other.schedule
            && self.scalers == other.scalers
            && self.grid == other.grid
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
            && self.train_state == other.train_state
    }
}
