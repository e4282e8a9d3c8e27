//! A small dense flow network `v(x_t, t, y)` with hand-written backpropagation,
//! a plain gradient-descent trainer with EMA shadow weights, and the
//! enhancement sampler.
//!
//! Network input is `[x_t - y, y, t, sin(2 pi t), cos(2 pi t)]` up to the
//! fixed scales of [`Scaling`]; output has the dimension of `x_t`. Complex feature grids are handled tile by tile (see
//! [`TileGeometry`] and [`TiledField`]).

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::{SigmaProfile, StateLayout};
use crate::error::{Error, Result};
use crate::features::ComplexGrid;
use crate::flowmath::{sample_x0, training_pair, FlowSample, PathSpec, VelocityField};
use crate::odesolve::{solve, SolverConfig, SolverRun};

/// Number of time features appended to the input.
pub const TIME_FEATURES: usize = 3;

/// Default EMA decay of the shadow weights.
pub const DEFAULT_EMA_DECAY: f64 = 0.999;

/// Default hidden layer widths.
pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let h = z.tanh();
                1.0 - h * h
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    [t, (2.0 * PI * t).sin(), (2.0 * PI * t).cos()]
}

/// Weights and biases of a dense network; `weights[l]` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            weights: other.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: other.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// All parameters flattened layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                f(i, v);
                i += 1;
            }
        }
    }

    fn zip_update(&mut self, other: &Params, f: impl Fn(&mut f64, f64)) {
        for (w, ow) in self.weights.iter_mut().zip(&other.weights) {
            w.zip_mut_with(ow, |a, &b| f(a, b));
        }
        for (b, ob) in self.biases.iter_mut().zip(&other.biases) {
            b.zip_mut_with(ob, |a, &v| f(a, v));
        }
    }
}

/// Dense flow network with live and EMA weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    /// Layer widths from input to output.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub live: Params,
    pub ema: Params,
    pub ema_decay: f64,
    pub seed: u64,
    /// Set when the model acts on tiles of complex feature grids.
    pub tile: Option<TileGeometry>,
    pub scaling: Scaling,
    /// Per-frequency-row divisors applied to tiles before the network (tiled models only).
    pub row_scale: Option<Vec<f64>>,
}

/// Fixed affine maps around the trainable network `N`.
///
/// With `z = (x_t - y) / state`, the network sees `[c_in z, y / cond, time features]`
/// and the field is `state (c_skip z + c_out N)`. Without preconditioning
/// `c_in = c_out = 1` and `c_skip = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub state: f64,
    pub cond: f64,
    pub precondition: Option<Precondition>,
}

impl Default for Scaling {
    fn default() -> Self {
        Self {
            state: 1.0,
            cond: 1.0,
            precondition: None,
        }
    }
}

impl Scaling {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(self.state) && ok(self.cond)) {
            return Err(Error::InvalidConfig(format!("scales must be positive, got {self:?}")));
        }
        if let Some(p) = self.precondition {
            if !(ok(p.noise) && ok(p.residual)) {
                return Err(Error::InvalidConfig(format!("preconditioning scales must be positive, got {p:?}")));
            }
        }
        Ok(())
    }

    /// `(c_in, c_skip, c_out)` at time `t`.
    pub fn coefficients(&self, t: f64) -> (f64, f64, f64) {
        match self.precondition {
            Some(p) => p.coefficients(t),
            None => (1.0, 0.0, 1.0),
        }
    }
}

/// Linear least-squares part of the field for prior noise `noise` and a
/// clean-minus-observation spread `residual`, both in scaled units.
///
/// Treating `x1 - y ~ N(0, residual^2)` per entry, `c_skip z` is the best
/// linear predictor of `x1 - x0` from `z`, `c_out` the standard deviation of
/// what it leaves, and `c_in` normalizes `z` to unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Precondition {
    pub noise: f64,
    pub residual: f64,
}

impl Precondition {
    pub fn coefficients(&self, t: f64) -> (f64, f64, f64) {
        let (s, r) = (self.noise, self.residual);
        let var = (t * r).powi(2) + ((1.0 - t) * s).powi(2);
        let sd = var.sqrt();
        (1.0 / sd, (t * r * r - (1.0 - t) * s * s) / var, r * s / sd)
    }
}

/// Network inputs plus the fixed skip term and per-row output gain.
#[derive(Debug, Clone, PartialEq)]
pub struct NetBatch {
    pub inputs: Array2<f64>,
    pub skip: Array2<f64>,
    pub gain: Array1<f64>,
}

impl FlowModel {
    /// LeCun-normal weights and zero biases. EMA starts equal to the live weights.
    pub fn new(state_dim: usize, hidden: &[usize], activation: Activation, ema_decay: f64, seed: u64) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::InvalidConfig("state dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(Error::InvalidConfig(format!("EMA decay {ema_decay} outside [0, 1)")));
        }
        let mut layer_dims = vec![2 * state_dim + TIME_FEATURES];
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(state_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            }));
            biases.push(Array1::zeros(fan_out));
        }
        let live = Params { weights, biases };
        Ok(Self {
            layer_dims,
            activation,
            ema: live.clone(),
            live,
            ema_decay,
            seed,
            tile: None,
            scaling: Scaling::default(),
            row_scale: None,
        })
    }

    /// A model for tiles of complex feature grids.
    pub fn new_tiled(tile: TileGeometry, hidden: &[usize], activation: Activation, ema_decay: f64, seed: u64) -> Result<Self> {
        tile.validate()?;
        let mut model = Self::new(tile.state_dim(), hidden, activation, ema_decay, seed)?;
        model.tile = Some(tile);
        Ok(model)
    }

    pub fn state_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least one layer")
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Result<Self> {
        scaling.validate()?;
        self.scaling = scaling;
        Ok(self)
    }

    pub fn with_row_scale(mut self, row_scale: Vec<f64>) -> Result<Self> {
        check_row_scale(&row_scale)?;
        self.row_scale = Some(row_scale);
        Ok(self)
    }

    /// Fill one network input row and skip row; returns the output gain.
    fn fill_row(&self, x_t: &[f64], t: f64, y: &[f64], input: &mut [f64], skip: &mut [f64]) -> f64 {
        let d = self.state_dim();
        let sc = &self.scaling;
        let (c_in, c_skip, c_out) = sc.coefficients(t);
        for i in 0..d {
            let z = (x_t[i] - y[i]) / sc.state;
            input[i] = c_in * z;
            input[d + i] = y[i] / sc.cond;
            skip[i] = sc.state * c_skip * z;
        }
        input[2 * d..].copy_from_slice(&time_features(t));
        sc.state * c_out
    }

    fn check_shapes(&self, x_t: &[f64], y: &[f64], t: f64) -> Result<()> {
        let d = self.state_dim();
        if x_t.len() != d {
            return Err(Error::shape("model x_t", d, x_t.len()));
        }
        if y.len() != d {
            return Err(Error::shape("model y", d, y.len()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok(())
    }

    fn empty_batch(&self, n: usize) -> NetBatch {
        NetBatch {
            inputs: Array2::zeros((n, self.input_dim())),
            skip: Array2::zeros((n, self.state_dim())),
            gain: Array1::zeros(n),
        }
    }

    /// Network inputs for `(x_t, t, y)` triples.
    pub fn net_batch(&self, samples: &[(&[f64], f64, &[f64])]) -> Result<NetBatch> {
        let mut batch = self.empty_batch(samples.len());
        for (i, &(x_t, t, y)) in samples.iter().enumerate() {
            self.check_shapes(x_t, y, t)?;
            let mut input = batch.inputs.row_mut(i);
            let mut skip = batch.skip.row_mut(i);
            batch.gain[i] = self.fill_row(
                x_t,
                t,
                y,
                input.as_slice_mut().expect("standard layout"),
                skip.as_slice_mut().expect("standard layout"),
            );
        }
        Ok(batch)
    }

    /// Raw network output `N` for an input matrix.
    pub fn network(&self, params: &Params, inputs: &Array2<f64>) -> Array2<f64> {
        let mut h = inputs.clone();
        let last = params.weights.len() - 1;
        for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
            let mut z = h.dot(&w.t());
            z += b;
            if l != last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            h = z;
        }
        h
    }

    /// Batched field values with the given parameters.
    pub fn forward_batch(&self, params: &Params, batch: &NetBatch) -> Array2<f64> {
        let mut out = self.network(params, &batch.inputs);
        for ((mut row, skip), g) in out.axis_iter_mut(Axis(0)).zip(batch.skip.axis_iter(Axis(0))).zip(&batch.gain) {
            row.zip_mut_with(&skip, |o, s| *o = s + g * *o);
        }
        out
    }

    /// Forward pass with the live weights.
    pub fn forward(&self, x_t: &[f64], t: f64, y: &[f64]) -> Result<Vec<f64>> {
        self.forward_with(&self.live, x_t, t, y)
    }

    /// Forward pass with the EMA weights.
    pub fn forward_ema(&self, x_t: &[f64], t: f64, y: &[f64]) -> Result<Vec<f64>> {
        self.forward_with(&self.ema, x_t, t, y)
    }

    fn forward_with(&self, params: &Params, x_t: &[f64], t: f64, y: &[f64]) -> Result<Vec<f64>> {
        let batch = self.net_batch(&[(x_t, t, y)])?;
        Ok(self.forward_batch(params, &batch).into_raw_vec_and_offset().0)
    }

    /// Mean-squared loss over a batch and its exact gradient.
    pub fn backward(&self, params: &Params, batch: &[FlowSample]) -> Result<(f64, Params)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        let d = self.state_dim();
        let rows: Vec<(&[f64], f64, &[f64])> = batch.iter().map(|s| (s.x_t.as_slice(), s.t, s.y.as_slice())).collect();
        let net_batch = self.net_batch(&rows)?;
        let mut targets = Array2::zeros((batch.len(), d));
        for (mut row, s) in targets.axis_iter_mut(Axis(0)).zip(batch) {
            if s.target_u.len() != d {
                return Err(Error::shape("training target", d, s.target_u.len()));
            }
            row.assign(&ndarray::ArrayView1::from(&s.target_u[..]));
        }
        Ok(self.loss_and_grad(params, &net_batch, &targets))
    }

    fn loss_and_grad(&self, params: &Params, batch: &NetBatch, targets: &Array2<f64>) -> (f64, Params) {
        let n_layers = params.weights.len();
        // Pre-activations per layer and the activations feeding each layer.
        let mut acts = vec![batch.inputs.clone()];
        let mut pre = Vec::with_capacity(n_layers);
        for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
            let mut z = acts[l].dot(&w.t());
            z += b;
            let h = if l + 1 == n_layers {
                z.clone()
            } else {
                z.mapv(|v| self.activation.apply(v))
            };
            pre.push(z);
            acts.push(h);
        }
        let gain = batch.gain.view().insert_axis(Axis(1));
        let out = &batch.skip + &(&acts[n_layers] * &gain);
        let count = out.len() as f64;
        let diff = out - targets;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / count;

        let mut grads = Params::zeros_like(params);
        let mut delta = diff * &gain * (2.0 / count);
        for l in (0..n_layers).rev() {
            grads.weights[l] = delta.t().dot(&acts[l]);
            grads.biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&params.weights[l]);
                back.zip_mut_with(&pre[l - 1], |g, &z| *g *= self.activation.derivative(z));
                delta = back;
            }
        }
        (loss, grads)
    }

    /// Loss of the given parameters on a batch.
    pub fn loss(&self, params: &Params, batch: &[FlowSample]) -> Result<f64> {
        let rows: Vec<(&[f64], f64, &[f64])> = batch.iter().map(|s| (s.x_t.as_slice(), s.t, s.y.as_slice())).collect();
        let out = self.forward_batch(params, &self.net_batch(&rows)?);
        let mut sum = 0.0;
        for (row, s) in out.axis_iter(Axis(0)).zip(batch) {
            sum += row.iter().zip(&s.target_u).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(sum / out.len() as f64)
    }

    /// `ema <- ema + (1 - decay) (live - ema)`.
    pub fn update_ema(&mut self) {
        let rate = 1.0 - self.ema_decay;
        self.ema.zip_update(&self.live, |e, w| *e += rate * (w - *e));
    }
}

/// The EMA weights as a velocity field on plain vectors.
impl VelocityField for FlowModel {
    fn velocity(&self, x: &[f64], t: f64, y: &[f64]) -> Result<Vec<f64>> {
        self.forward_ema(x, t, y)
    }
}

fn check_row_scale(row_scale: &[f64]) -> Result<()> {
    if row_scale.is_empty() || row_scale.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidConfig("row scales must be positive and finite".into()));
    }
    Ok(())
}

/// Source of `(x1, y)` training pairs.
pub trait PairSource {
    fn layout(&self) -> StateLayout;

    /// Draw a pair; also returns the first frequency row the pair covers.
    fn draw(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize);

    /// Per-row divisors already applied to drawn pairs, if any.
    fn row_scale(&self) -> Option<&[f64]> {
        None
    }
}

/// Fixed list of vector pairs, drawn uniformly.
#[derive(Debug, Clone)]
pub struct PointPairs {
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl PairSource for PointPairs {
    fn layout(&self) -> StateLayout {
        StateLayout::flat(self.pairs[0].0.len())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize) {
        let (x1, y) = &self.pairs[rng.random_range(0..self.pairs.len())];
        (x1.clone(), y.clone(), 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub path: PathSpec,
    /// Size of the fixed held-out batch used to report progress.
    pub holdout_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be non-negative".into()));
        }
        if self.batch_size == 0 || self.holdout_size == 0 {
            return Err(Error::InvalidConfig("batch and holdout sizes must be positive".into()));
        }
        self.path.sigma.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
    /// Held-out loss of the EMA weights after training.
    pub final_holdout_loss_ema: f64,
    /// Mean training loss over the last tenth of the run.
    pub final_train_loss: f64,
}

fn draw_sample(source: &dyn PairSource, path: &PathSpec, rng: &mut ChaCha8Rng) -> Result<FlowSample> {
    let layout = source.layout();
    let (x1, y, row) = source.draw(rng);
    let sigma = match (&path.sigma, source.row_scale()) {
        (SigmaProfile::Scalar(_), None) => path.sigma.clone(),
        (SigmaProfile::PerFrequency(_), None) => path.sigma.window(row, layout.rows)?,
        (sigma, Some(scale)) => {
            let full = sigma.expand(&StateLayout::flat(scale.len()))?;
            SigmaProfile::PerFrequency((row..row + layout.rows).map(|r| full[r] / scale[r]).collect())
        }
    };
    let local = PathSpec {
        kind: path.kind,
        sigma,
    };
    let eps: Vec<f64> = (0..x1.len()).map(|_| rng.sample(StandardNormal)).collect();
    let t = rng.random::<f64>();
    training_pair(&local, &x1, &y, &layout, &eps, t)
}

fn draw_batch(source: &dyn PairSource, path: &PathSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<FlowSample>> {
    (0..n).map(|_| draw_sample(source, path, rng)).collect()
}

/// Plain gradient descent on the flow-matching loss, updating the EMA after every step.
pub fn train(model: &mut FlowModel, source: &dyn PairSource, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if source.layout().len() != model.state_dim() {
        return Err(Error::shape("training pairs vs model", model.state_dim(), source.layout().len()));
    }
    if source.row_scale() != model.row_scale.as_deref() {
        return Err(Error::InvalidConfig("model and training pairs use different row scales".into()));
    }
    let mut holdout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_401d_0u64);
    let holdout = draw_batch(source, &cfg.path, cfg.holdout_size, &mut holdout_rng)?;
    let initial_holdout_loss = model.loss(&model.live, &holdout)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tail_start = cfg.iterations - cfg.iterations / 10;
    let (mut tail_sum, mut tail_n) = (0.0, 0usize);
    for step in 0..cfg.iterations {
        let batch = draw_batch(source, &cfg.path, cfg.batch_size, &mut rng)?;
        let (loss, grads) = model.backward(&model.live, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss",
                step,
            });
        }
        if step >= tail_start {
            tail_sum += loss;
            tail_n += 1;
        }
        // Step size is expressed for the loss in scaled units.
        let lr = cfg.learning_rate / (model.scaling.state * model.scaling.state);
        model.live.zip_update(&grads, |w, g| *w -= lr * g);
        model.update_ema();
    }
    Ok(TrainReport {
        initial_holdout_loss,
        final_holdout_loss: model.loss(&model.live, &holdout)?,
        final_holdout_loss_ema: model.loss(&model.ema, &holdout)?,
        final_train_loss: if tail_n > 0 { tail_sum / tail_n as f64 } else { f64::NAN },
    })
}

/// Draw `x0 = y + sigma * eps` with a seeded `eps` and integrate `field` from it.
pub fn enhance(
    field: &dyn VelocityField,
    y: &[f64],
    sigma: &SigmaProfile,
    layout: &StateLayout,
    solver: &SolverConfig,
    seed: u64,
) -> Result<SolverRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..y.len()).map(|_| rng.sample(StandardNormal)).collect();
    let x0 = sample_x0(y, sigma, layout, &eps)?;
    solve(|x, t| field.velocity(x, t, y), &x0, solver)
}

/// Rectangular patch of a complex feature grid handled by the dense model.
///
/// Tiles overlap by `2 * margin` bins; each bin takes the model output of the
/// tile in whose interior it lies, and the outer margins of edge tiles are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGeometry {
    pub rows: usize,
    pub cols: usize,
    pub margin: usize,
}

impl Default for TileGeometry {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            margin: 1,
        }
    }
}

/// A tile's position and the part of it whose output is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilePlacement {
    pub row: usize,
    pub col: usize,
    pub keep_rows: (usize, usize),
    pub keep_cols: (usize, usize),
}

impl TileGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || 2 * self.margin >= self.rows.min(self.cols) {
            return Err(Error::InvalidConfig(format!("invalid tile geometry {self:?}")));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        2 * self.rows * self.cols
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::complex_grid(self.rows, self.cols)
    }

    fn starts(len: usize, size: usize, margin: usize) -> Result<Vec<(usize, usize, usize)>> {
        if len < size {
            return Err(Error::InputTooShort { len, min: size });
        }
        let stride = size - 2 * margin;
        let mut starts = vec![0];
        while starts.last().unwrap() + size < len {
            let next = (starts.last().unwrap() + stride).min(len - size);
            starts.push(next);
        }
        let last = starts.len() - 1;
        Ok(starts
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let lo = if i == 0 { 0 } else { p + margin };
                let hi = if i == last { len } else { p + size - margin };
                (p, lo, hi)
            })
            .collect())
    }

    /// Tiles covering a `rows x cols` grid; every bin is kept by exactly one tile.
    pub fn placements(&self, rows: usize, cols: usize) -> Result<Vec<TilePlacement>> {
        self.validate()?;
        let rs = Self::starts(rows, self.rows, self.margin)?;
        let cs = Self::starts(cols, self.cols, self.margin)?;
        let mut out = Vec::with_capacity(rs.len() * cs.len());
        for &(r, rlo, rhi) in &rs {
            for &(c, clo, chi) in &cs {
                out.push(TilePlacement {
                    row: r,
                    col: c,
                    keep_rows: (rlo, rhi),
                    keep_cols: (clo, chi),
                });
            }
        }
        Ok(out)
    }

    /// Copy the tile at `(row, col)` out of a stacked `grid_rows x grid_cols` state.
    pub fn extract(&self, state: &[f64], grid_rows: usize, grid_cols: usize, row: usize, col: usize, out: &mut [f64]) {
        let plane = grid_rows * grid_cols;
        let tile_plane = self.rows * self.cols;
        for ch in 0..2 {
            for r in 0..self.rows {
                let src = ch * plane + (row + r) * grid_cols + col;
                let dst = ch * tile_plane + r * self.cols;
                out[dst..dst + self.cols].copy_from_slice(&state[src..src + self.cols]);
            }
        }
    }

    /// Divide each tile row `r` (both channels) by `scale[r]`.
    pub fn unscale(&self, v: &mut [f64], scale: &[f64]) {
        for (i, x) in v.iter_mut().enumerate() {
            *x /= scale[(i / self.cols) % self.rows];
        }
    }

    /// Multiply each tile row `r` (both channels) by `scale[r]`.
    pub fn rescale(&self, v: &mut [f64], scale: &[f64]) {
        for (i, x) in v.iter_mut().enumerate() {
            *x *= scale[(i / self.cols) % self.rows];
        }
    }

    /// Random tile drawn uniformly over positions of a pair of grids.
    pub fn random_tile(&self, clean: &ComplexGrid, degraded: &ComplexGrid, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize) {
        let row = rng.random_range(0..=clean.rows - self.rows);
        let col = rng.random_range(0..=clean.cols - self.cols);
        let pick = |g: &ComplexGrid| {
            let mut v = vec![0.0; self.state_dim()];
            let plane = self.rows * self.cols;
            for r in 0..self.rows {
                for c in 0..self.cols {
                    let z = g.get(row + r, col + c);
                    v[r * self.cols + c] = z.re;
                    v[plane + r * self.cols + c] = z.im;
                }
            }
            v
        };
        (pick(clean), pick(degraded), row)
    }
}

/// Tiles drawn from `(clean, degraded)` feature-grid pairs.
#[derive(Debug, Clone)]
pub struct TilePairs {
    pub tile: TileGeometry,
    pub pairs: Vec<(ComplexGrid, ComplexGrid)>,
    pub row_scale: Option<Vec<f64>>,
}

impl TilePairs {
    pub fn new(tile: TileGeometry, pairs: Vec<(ComplexGrid, ComplexGrid)>) -> Result<Self> {
        tile.validate()?;
        if pairs.is_empty() {
            return Err(Error::EmptyInput("training grids"));
        }
        for (c, d) in &pairs {
            if c.rows != d.rows || c.cols != d.cols {
                return Err(Error::shape("training pair grid", c.len(), d.len()));
            }
            if c.rows < tile.rows || c.cols < tile.cols {
                return Err(Error::InputTooShort {
                    len: c.rows.min(c.cols),
                    min: tile.rows.max(tile.cols),
                });
            }
        }
        Ok(Self {
            tile,
            pairs,
            row_scale: None,
        })
    }

    /// Divide every grid row by `row_scale[row]` when drawing.
    pub fn with_row_scale(mut self, row_scale: Vec<f64>) -> Result<Self> {
        check_row_scale(&row_scale)?;
        if row_scale.len() != self.pairs[0].0.rows {
            return Err(Error::shape("row scales vs grid rows", self.pairs[0].0.rows, row_scale.len()));
        }
        self.row_scale = Some(row_scale);
        Ok(self)
    }

    /// Scaling matched to the (row-scaled) data: conditioning divided by the
    /// RMS of `y`, preconditioned for unit prior noise and the RMS of `x1 - y`.
    pub fn whitened_scaling(&self) -> Result<Scaling> {
        let (mut cond, mut residual, mut n) = (0.0, 0.0, 0.0);
        for (c, d) in &self.pairs {
            for r in 0..c.rows {
                let s = self.row_scale.as_ref().map_or(1.0, |v| v[r]);
                for (a, b) in c.row(r).iter().zip(d.row(r)) {
                    cond += b.norm_sqr() / (s * s);
                    residual += (a - b).norm_sqr() / (s * s);
                    n += 2.0;
                }
            }
        }
        let rms = |v: f64| (v / n).sqrt().max(1e-6);
        let scaling = Scaling {
            state: 1.0,
            cond: rms(cond),
            precondition: Some(Precondition {
                noise: 1.0,
                residual: rms(residual),
            }),
        };
        scaling.validate()?;
        Ok(scaling)
    }
}

impl PairSource for TilePairs {
    fn layout(&self) -> StateLayout {
        self.tile.layout()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize) {
        let (c, d) = &self.pairs[rng.random_range(0..self.pairs.len())];
        let (mut x1, mut y, row) = self.tile.random_tile(c, d, rng);
        if let Some(scale) = &self.row_scale {
            self.tile.unscale(&mut x1, &scale[row..]);
            self.tile.unscale(&mut y, &scale[row..]);
        }
        (x1, y, row)
    }

    fn row_scale(&self) -> Option<&[f64]> {
        self.row_scale.as_deref()
    }
}

/// A tiled model applied over a whole `rows x cols` complex grid (stacked state).
pub struct TiledField<'a> {
    pub model: &'a FlowModel,
    pub rows: usize,
    pub cols: usize,
    placements: Vec<TilePlacement>,
}

impl<'a> TiledField<'a> {
    pub fn new(model: &'a FlowModel, rows: usize, cols: usize) -> Result<Self> {
        let tile = model
            .tile
            .ok_or_else(|| Error::InvalidConfig("model has no tile geometry".into()))?;
        if let Some(scale) = &model.row_scale {
            if scale.len() != rows {
                return Err(Error::shape("model row scales vs grid rows", rows, scale.len()));
            }
        }
        Ok(Self {
            model,
            rows,
            cols,
            placements: tile.placements(rows, cols)?,
        })
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::complex_grid(self.rows, self.cols)
    }
}

impl VelocityField for TiledField<'_> {
    fn velocity(&self, x: &[f64], t: f64, y: &[f64]) -> Result<Vec<f64>> {
        let n = 2 * self.rows * self.cols;
        if x.len() != n || y.len() != n {
            return Err(Error::shape("tiled field state", n, x.len().min(y.len())));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        let tile = self.model.tile.expect("checked in new");
        let d = tile.state_dim();
        let mut batch = self.model.empty_batch(self.placements.len());
        let mut xt = vec![0.0; d];
        let mut yt = vec![0.0; d];
        for (i, p) in self.placements.iter().enumerate() {
            tile.extract(x, self.rows, self.cols, p.row, p.col, &mut xt);
            tile.extract(y, self.rows, self.cols, p.row, p.col, &mut yt);
            if let Some(scale) = &self.model.row_scale {
                tile.unscale(&mut xt, &scale[p.row..]);
                tile.unscale(&mut yt, &scale[p.row..]);
            }
            let mut input = batch.inputs.row_mut(i);
            let mut skip = batch.skip.row_mut(i);
            batch.gain[i] = self.model.fill_row(
                &xt,
                t,
                &yt,
                input.as_slice_mut().expect("standard layout"),
                skip.as_slice_mut().expect("standard layout"),
            );
        }
        let out = self.model.forward_batch(&self.model.ema, &batch);
        let mut u = vec![0.0; n];
        let plane = self.rows * self.cols;
        let tile_plane = tile.rows * tile.cols;
        let unit = vec![1.0; self.rows];
        let scale = self.model.row_scale.as_deref().unwrap_or(&unit);
        for (o, p) in out.axis_iter(Axis(0)).zip(&self.placements) {
            for r in p.keep_rows.0..p.keep_rows.1 {
                for c in p.keep_cols.0..p.keep_cols.1 {
                    let local = (r - p.row) * tile.cols + (c - p.col);
                    for ch in 0..2 {
                        u[ch * plane + r * self.cols + c] = o[ch * tile_plane + local] * scale[r];
                    }
                }
            }
        }
        Ok(u)
    }
}

/// Enhance a whole compressed feature grid with a tiled model.
pub fn enhance_grid(
    model: &FlowModel,
    degraded: &ComplexGrid,
    sigma: &SigmaProfile,
    solver: &SolverConfig,
    seed: u64,
) -> Result<(ComplexGrid, SolverRun)> {
    let field = TiledField::new(model, degraded.rows, degraded.cols)?;
    let y = degraded.to_stacked();
    let run = enhance(&field, &y, sigma, &field.layout(), solver, seed)?;
    let grid = ComplexGrid::from_stacked(degraded.rows, degraded.cols, &run.endpoint)?;
    Ok((grid, run))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"JFLOWCKP";
const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_params(w: &mut impl Write, p: &Params) -> std::io::Result<()> {
    for v in p.flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

impl FlowModel {
    /// Little-endian binary checkpoint with both weight sets.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(&mut w, CHECKPOINT_VERSION)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.ema_decay.to_le_bytes())?;
        w.write_all(&[self.activation.code()])?;
        put_u32(&mut w, self.layer_dims.len() as u32)?;
        for &d in &self.layer_dims {
            put_u32(&mut w, d as u32)?;
        }
        match self.tile {
            Some(t) => {
                w.write_all(&[1])?;
                for v in [t.rows, t.cols, t.margin] {
                    put_u32(&mut w, v as u32)?;
                }
            }
            None => w.write_all(&[0])?,
        }
        w.write_all(&self.scaling.state.to_le_bytes())?;
        w.write_all(&self.scaling.cond.to_le_bytes())?;
        match self.scaling.precondition {
            Some(p) => {
                w.write_all(&[1])?;
                w.write_all(&p.noise.to_le_bytes())?;
                w.write_all(&p.residual.to_le_bytes())?;
            }
            None => w.write_all(&[0])?,
        }
        match &self.row_scale {
            Some(v) => {
                put_u32(&mut w, v.len() as u32)?;
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            None => put_u32(&mut w, 0)?,
        }
        put_params(&mut w, &self.live)?;
        put_params(&mut w, &self.ema)?;
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let malformed = |detail: &str| Error::Malformed {
            what: "checkpoint",
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(malformed("bad magic"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut b1 = [0u8; 1];
        let mut u32_ = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4))
        };
        let version = u32_(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(malformed(&format!("unsupported version {version}")));
        }
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let ema_decay = f64::from_le_bytes(b8);
        r.read_exact(&mut b1)?;
        let activation = Activation::from_code(b1[0]).ok_or_else(|| malformed("unknown activation"))?;
        let n = u32_(&mut r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(malformed("implausible layer count"));
        }
        let layer_dims = (0..n).map(|_| u32_(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        r.read_exact(&mut b1)?;
        let tile = match b1[0] {
            0 => None,
            1 => Some(TileGeometry {
                rows: u32_(&mut r)? as usize,
                cols: u32_(&mut r)? as usize,
                margin: u32_(&mut r)? as usize,
            }),
            _ => return Err(malformed("bad tile flag")),
        };
        r.read_exact(&mut b8)?;
        let state = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let cond = f64::from_le_bytes(b8);
        r.read_exact(&mut b1)?;
        let precondition = match b1[0] {
            0 => None,
            1 => {
                r.read_exact(&mut b8)?;
                let noise = f64::from_le_bytes(b8);
                r.read_exact(&mut b8)?;
                Some(Precondition {
                    noise,
                    residual: f64::from_le_bytes(b8),
                })
            }
            _ => return Err(malformed("bad preconditioning flag")),
        };
        let scaling = Scaling {
            state,
            cond,
            precondition,
        };
        scaling.validate()?;
        let n_scale = u32_(&mut r)? as usize;
        if n_scale > 1 << 20 {
            return Err(malformed("implausible row scale count"));
        }
        let row_scale = if n_scale == 0 {
            None
        } else {
            let mut v = Vec::with_capacity(n_scale);
            for _ in 0..n_scale {
                r.read_exact(&mut b8)?;
                v.push(f64::from_le_bytes(b8));
            }
            check_row_scale(&v)?;
            Some(v)
        };
        let mut read_params = |r: &mut dyn Read| -> Result<Params> {
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            for pair in layer_dims.windows(2) {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let mut vals = vec![0.0; fan_in * fan_out + fan_out];
                for v in vals.iter_mut() {
                    r.read_exact(&mut b8)?;
                    *v = f64::from_le_bytes(b8);
                }
                let bias = vals.split_off(fan_in * fan_out);
                weights.push(Array2::from_shape_vec((fan_out, fan_in), vals).map_err(|e| malformed(&e.to_string()))?);
                biases.push(Array1::from(bias));
            }
            Ok(Params { weights, biases })
        };
        let live = read_params(&mut r)?;
        let ema = read_params(&mut r)?;
        let model = FlowModel {
            layer_dims,
            activation,
            live,
            ema,
            ema_decay,
            seed,
            tile,
            scaling,
            row_scale,
        };
        if model.input_dim() != 2 * model.state_dim() + TIME_FEATURES {
            return Err(malformed("layer dims inconsistent with conditioning input"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::SigmaProfile;
    use crate::odesolve::Method;

    fn tiny(seed: u64) -> FlowModel {
        FlowModel::new(3, &[5, 4], Activation::Silu, 0.9, seed).unwrap()
    }

    fn random_batch(d: usize, n: usize, seed: u64) -> Vec<FlowSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = PathSpec::joint(SigmaProfile::scalar(0.4).unwrap());
        let layout = StateLayout::flat(d);
        (0..n)
            .map(|_| {
                let v = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
                let (x1, y, e) = (v(&mut rng), v(&mut rng), v(&mut rng));
                training_pair(&path, &x1, &y, &layout, &e, rng.random()).unwrap()
            })
            .collect()
    }

    /// Straight-line evaluation of the network, one scalar at a time.
    fn scalar_forward(m: &FlowModel, x: &[f64], t: f64, y: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).chain(y.iter().copied()).collect();
        h.extend_from_slice(&[t, (2.0 * PI * t).sin(), (2.0 * PI * t).cos()]);
        let n = m.live.weights.len();
        for l in 0..n {
            let w = &m.live.weights[l];
            let mut next = Vec::new();
            for o in 0..w.nrows() {
                let mut s = m.live.biases[l][o];
                for i in 0..w.ncols() {
                    s += w[[o, i]] * h[i];
                }
                next.push(if l + 1 < n { s / (1.0 + (-s).exp()) } else { s });
            }
            h = next;
        }
        h
    }

    #[test]
    fn dims_follow_conditioning() {
        let m = FlowModel::new(4, &DEFAULT_HIDDEN, Activation::Tanh, DEFAULT_EMA_DECAY, 0).unwrap();
        assert_eq!(m.layer_dims, vec![11, 128, 128, 128, 4]);
        assert_eq!(m.ema, m.live);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = tiny(1);
        m.live.visit_mut(|_, v| *v = 0.0);
        assert_eq!(m.forward(&[1.0, -2.0, 3.0], 0.3, &[0.5, 0.5, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn forward_is_deterministic_and_matches_scalar_loop() {
        let (a, b) = (tiny(7), tiny(7));
        let x = [0.3, -0.2, 1.1];
        let y = [0.0, 0.4, -0.5];
        let out = a.forward(&x, 0.42, &y).unwrap();
        assert_eq!(out, b.forward(&x, 0.42, &y).unwrap());
        let oracle = scalar_forward(&a, &x, 0.42, &y);
        for (p, q) in out.iter().zip(&oracle) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(a.forward(&x[..2], 0.1, &y).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (activation, scaling) in [
            (Activation::Tanh, Scaling::default()),
            (Activation::Silu, Scaling::default()),
            (Activation::Silu, Scaling { state: 0.3, cond: 2.0, precondition: None }),
            (
                Activation::Tanh,
                Scaling {
                    state: 0.7,
                    cond: 1.5,
                    precondition: Some(Precondition { noise: 0.4, residual: 2.0 }),
                },
            ),
        ] {
            let m = FlowModel::new(3, &[6, 5], activation, 0.9, 3).unwrap().with_scaling(scaling).unwrap();
            let batch = random_batch(3, 4, 5);
            let (_, grads) = m.backward(&m.live, &batch).unwrap();
            let analytic = grads.flatten();
            let h = 1e-5;
            for i in 0..analytic.len() {
                let mut plus = m.live.clone();
                plus.visit_mut(|j, v| if j == i { *v += h });
                let mut minus = m.live.clone();
                minus.visit_mut(|j, v| if j == i { *v -= h });
                let fd = (m.loss(&plus, &batch).unwrap() - m.loss(&minus, &batch).unwrap()) / (2.0 * h);
                let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!(rel < 1e-4, "param {i}: {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn zero_residual_has_zero_gradient() {
        let mut m = tiny(2);
        m.live.visit_mut(|_, v| *v = 0.0);
        let mut batch = random_batch(3, 3, 1);
        for s in &mut batch {
            s.target_u = vec![0.0; 3];
        }
        let (loss, g) = m.backward(&m.live, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let m = tiny(4);
        let batch = random_batch(3, 5, 8);
        let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
        let (l1, g1) = m.backward(&m.live, &batch).unwrap();
        let (l2, g2) = m.backward(&m.live, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    fn one_pair() -> PointPairs {
        PointPairs {
            pairs: vec![(vec![1.0, -0.5], vec![0.2, 0.3])],
        }
    }

    fn cfg(lr: f64, iterations: usize, sigma: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            iterations,
            batch_size: 16,
            seed: 9,
            path: PathSpec::joint(SigmaProfile::scalar(sigma).unwrap()),
            holdout_size: 64,
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut m = FlowModel::new(2, &[8, 8], Activation::Silu, 0.99, 1).unwrap();
        let before = m.clone();
        train(&mut m, &one_pair(), &cfg(0.0, 20, 0.1)).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn ema_matches_replayed_history() {
        let mut m = FlowModel::new(2, &[8], Activation::Tanh, 0.9, 1).unwrap();
        let decay = m.ema_decay;
        let init = m.live.flatten();
        // Replay: train step by step and keep the live-weight history.
        let mut history = vec![init.clone()];
        let mut c = cfg(0.05, 1, 0.1);
        for step in 0..25 {
            c.seed = 100 + step;
            train(&mut m, &one_pair(), &c).unwrap();
            history.push(m.live.flatten());
        }
        // Closed form: ema_n = decay^n w_0 + sum_k (1 - decay) decay^(n - k) w_k.
        let n = history.len() - 1;
        let ema = m.ema.flatten();
        for i in 0..ema.len() {
            let mut expect = decay.powi(n as i32) * history[0][i];
            for (k, w) in history.iter().enumerate().skip(1) {
                expect += (1.0 - decay) * decay.powi((n - k) as i32) * w[i];
            }
            assert!((ema[i] - expect).abs() < 1e-12, "{i}: {} vs {expect}", ema[i]);
        }
    }

    #[test]
    fn single_pair_loss_collapses_and_enhances_to_target() {
        let mut m = FlowModel::new(2, &[32, 32], Activation::Silu, 0.99, 5).unwrap();
        let report = train(&mut m, &one_pair(), &cfg(0.05, 5000, 1e-3)).unwrap();
        assert!(report.final_holdout_loss < 0.05 * report.initial_holdout_loss, "{report:?}");

        let y = [0.2, 0.3];
        let sigma = SigmaProfile::scalar(1e-3).unwrap();
        let solver = SolverConfig::new(Method::Midpoint, 3);
        let run = enhance(&m, &y, &sigma, &StateLayout::flat(2), &solver, 3).unwrap();
        assert_eq!(run.nfe, 6);
        assert!((run.endpoint[0] - 1.0).abs() < 0.05 && (run.endpoint[1] + 0.5).abs() < 0.05, "{:?}", run.endpoint);
        let again = enhance(&m, &y, &sigma, &StateLayout::flat(2), &solver, 3).unwrap();
        assert_eq!(run.endpoint, again.endpoint);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut m = FlowModel::new(2, &[8], Activation::Silu, 0.9, 1).unwrap();
        let err = train(&mut m, &one_pair(), &cfg(1e6, 50, 0.1)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn placements_cover_every_bin_once() {
        let tile = TileGeometry { rows: 4, cols: 6, margin: 1 };
        for (rows, cols) in [(4, 6), (9, 17), (13, 6), (32, 101)] {
            let mut count = vec![0u32; rows * cols];
            for p in tile.placements(rows, cols).unwrap() {
                assert!(p.row + tile.rows <= rows && p.col + tile.cols <= cols);
                for r in p.keep_rows.0..p.keep_rows.1 {
                    for c in p.keep_cols.0..p.keep_cols.1 {
                        count[r * cols + c] += 1;
                    }
                }
            }
            // Later tiles may overwrite an earlier one's edge; every bin needs at least one.
            assert!(count.iter().all(|&c| c >= 1), "{rows}x{cols}");
        }
        assert!(tile.placements(3, 10).is_err());
    }

    #[test]
    fn tiled_field_matches_per_tile_forward() {
        let tile = TileGeometry { rows: 2, cols: 3, margin: 0 };
        let model = FlowModel::new_tiled(tile, &[7], Activation::Silu, 0.9, 2).unwrap();
        let (rows, cols) = (4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2 * rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..2 * rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        let field = TiledField::new(&model, rows, cols).unwrap();
        let u = field.velocity(&x, 0.3, &y).unwrap();
        // Non-overlapping tiles: each tile's output lands in place.
        let mut xt = vec![0.0; tile.state_dim()];
        let mut yt = vec![0.0; tile.state_dim()];
        tile.extract(&x, rows, cols, 2, 3, &mut xt);
        tile.extract(&y, rows, cols, 2, 3, &mut yt);
        let local = model.forward_ema(&xt, 0.3, &yt).unwrap();
        let mut got = vec![0.0; tile.state_dim()];
        tile.extract(&u, rows, cols, 2, 3, &mut got);
        for (a, b) in local.iter().zip(&got) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let scaling = Scaling {
            state: 0.5,
            cond: 2.0,
            precondition: Some(Precondition { noise: 1.0, residual: 0.3 }),
        };
        let mut m = FlowModel::new_tiled(TileGeometry::default(), &[9, 4], Activation::Tanh, 0.999, 77)
            .unwrap()
            .with_scaling(scaling)
            .unwrap()
            .with_row_scale(vec![0.5; 4])
            .unwrap();
        m.ema.visit_mut(|i, v| *v += i as f64 * 1e-3);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = FlowModel::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(buf, again);
        buf[0] = b'X';
        assert!(FlowModel::read_checkpoint(&buf[..]).is_err());
    }
}
