//! Q function: input -> 128 -> ReLU -> 128 -> ReLU -> 3 action values.
//!
//! Gradients are derived by hand for this fixed architecture. Parameters are
//! `f64` so that finite-difference checks stay meaningful.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::Action;
use crate::error::{Error, Result};

pub const HIDDEN: usize = 128;
pub const NUM_ACTIONS: usize = 3;

const MAGIC: &[u8; 8] = b"SQVQNET\0";
const FORMAT_VERSION: u32 = 1;

/// Action values in declaration order: same, different, unsure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QValues {
    pub same: f64,
    pub different: f64,
    pub unsure: f64,
}

impl QValues {
    pub fn new(same: f64, different: f64, unsure: f64) -> Self {
        Self {
            same,
            different,
            unsure,
        }
    }

    pub fn get(&self, action: Action) -> f64 {
        match action {
            Action::Same => self.same,
            Action::Different => self.different,
            Action::Unsure => self.unsure,
        }
    }

    pub fn to_array(self) -> [f64; NUM_ACTIONS] {
        [self.same, self.different, self.unsure]
    }

    /// Highest-valued action; ties go to the earlier action.
    pub fn argmax(&self) -> Action {
        let mut best = Action::Same;
        for a in [Action::Different, Action::Unsure] {
            if self.get(a) > self.get(best) {
                best = a;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.same.max(self.different).max(self.unsure)
    }

    /// Ranking score: q_same - q_different.
    pub fn margin(&self) -> f64 {
        self.same - self.different
    }

    pub fn is_finite(&self) -> bool {
        self.same.is_finite() && self.different.is_finite() && self.unsure.is_finite()
    }
}

/// Fully connected layer, weights row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let weights = (0..rows * cols)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            rows,
            cols,
            weights,
            bias: vec![0.0; rows],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    /// out = W x + b
    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.bias[r] + dot(self.row(r), x);
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn num_values(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = i * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks * 4..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Gradients (or any other tensor set) shaped like the three layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: [Dense; 3],
}

impl Gradients {
    pub fn zeros(input_dim: usize) -> Self {
        Self {
            layers: [
                Dense::zeros(HIDDEN, input_dim),
                Dense::zeros(HIDDEN, HIDDEN),
                Dense::zeros(NUM_ACTIONS, HIDDEN),
            ],
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.values_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.values_mut().for_each(|v| *v *= factor);
        }
    }

    /// Clamp every coordinate to `[-limit, limit]`.
    pub fn clip(&mut self, limit: f64) {
        for l in &mut self.layers {
            l.values_mut().for_each(|v| *v = v.clamp(-limit, limit));
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::values)
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Network weights plus the momentum buffers of the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetworkParams {
    pub input_dim: usize,
    /// Seed the weights were initialized from.
    pub seed: u64,
    pub layers: [Dense; 3],
    pub velocity: Gradients,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pre1: Vec<f64>,
    pub act1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub act2: Vec<f64>,
    pub q: [f64; NUM_ACTIONS],
}

impl ForwardTrace {
    fn new() -> Self {
        Self {
            pre1: vec![0.0; HIDDEN],
            act1: vec![0.0; HIDDEN],
            pre2: vec![0.0; HIDDEN],
            act2: vec![0.0; HIDDEN],
            q: [0.0; NUM_ACTIONS],
        }
    }

    pub fn q_values(&self) -> QValues {
        QValues::new(self.q[0], self.q[1], self.q[2])
    }
}

/// Input width for embeddings of dimension `d`: history, observation and
/// three distance statistics.
pub fn input_dim_for(d: usize) -> usize {
    2 * d + 3
}

impl QNetworkParams {
    /// Uniform fan-based initialization, zero biases, zero momentum.
    pub fn init(input_dim: usize, seed: u64) -> Self {
        assert!(input_dim >= 1, "input_dim must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = [
            Dense::glorot(HIDDEN, input_dim, &mut rng),
            Dense::glorot(HIDDEN, HIDDEN, &mut rng),
            Dense::glorot(NUM_ACTIONS, HIDDEN, &mut rng),
        ];
        Self {
            input_dim,
            seed,
            layers,
            velocity: Gradients::zeros(input_dim),
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<QValues> {
        let mut trace = ForwardTrace::new();
        self.forward_into(input, &mut trace)?;
        Ok(trace.q_values())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        let mut trace = ForwardTrace::new();
        self.forward_into(input, &mut trace)?;
        Ok(trace)
    }

    pub fn forward_into(&self, input: &[f64], trace: &mut ForwardTrace) -> Result<()> {
        self.check_input(input)?;
        let [l1, l2, l3] = &self.layers;
        l1.affine(input, &mut trace.pre1);
        relu(&trace.pre1, &mut trace.act1);
        l2.affine(&trace.act1, &mut trace.pre2);
        relu(&trace.pre2, &mut trace.act2);
        l3.affine(&trace.act2, &mut trace.q);
        Ok(())
    }

    /// Gradient of `0.5 * (Q(input, action) - target)^2`.
    pub fn backward(&self, input: &[f64], action: Action, target: f64) -> Result<Gradients> {
        let trace = self.forward_trace(input)?;
        let mut grads = Gradients::zeros(self.input_dim);
        let mut scratch = vec![0.0; 2 * HIDDEN];
        self.accumulate_gradient(input, &trace, action, target, 1.0, &mut grads, &mut scratch);
        Ok(grads)
    }

    /// Add `scale` times the gradient for one sample into `grads`; returns the
    /// residual `Q(input, action) - target`. `trace` must come from
    /// `forward_into` on the same input.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_gradient(
        &self,
        input: &[f64],
        trace: &ForwardTrace,
        action: Action,
        target: f64,
        scale: f64,
        grads: &mut Gradients,
        scratch: &mut [f64],
    ) -> f64 {
        let a = action.index();
        let residual = trace.q[a] - target;
        let delta = scale * residual;
        if delta == 0.0 {
            return residual;
        }
        let [_, l2, l3] = &self.layers;
        let [g1, g2, g3] = &mut grads.layers;
        let (d2, d1) = scratch.split_at_mut(HIDDEN);

        // output layer: only the chosen action's row sees the error
        axpy(delta, &trace.act2, &mut g3.weights[a * HIDDEN..(a + 1) * HIDDEN]);
        g3.bias[a] += delta;

        for (k, d) in d2.iter_mut().enumerate() {
            *d = if trace.pre2[k] > 0.0 {
                delta * l3.weights[a * HIDDEN + k]
            } else {
                0.0
            };
        }

        d1.iter_mut().for_each(|v| *v = 0.0);
        for (k, &d) in d2.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            axpy(d, &trace.act1, &mut g2.weights[k * HIDDEN..(k + 1) * HIDDEN]);
            g2.bias[k] += d;
            axpy(d, l2.row(k), d1);
        }

        let n = self.input_dim;
        for (k, d) in d1.iter().enumerate() {
            if *d == 0.0 || trace.pre1[k] <= 0.0 {
                continue;
            }
            axpy(*d, input, &mut g1.weights[k * n..(k + 1) * n]);
            g1.bias[k] += *d;
        }
        residual
    }

    /// buffer <- momentum * buffer + grad; param <- param - lr * buffer
    pub fn sgd_momentum_step(&mut self, grads: &Gradients, lr: f64, momentum: f64) {
        for ((layer, vel), g) in self
            .layers
            .iter_mut()
            .zip(self.velocity.layers.iter_mut())
            .zip(&grads.layers)
        {
            for ((p, v), &gi) in layer.values_mut().zip(vel.values_mut()).zip(g.values()) {
                *v = momentum * *v + gi;
                *p -= lr * *v;
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(Dense::num_values).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    /// Parameter coordinates in a fixed order: layer by layer, weights then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Dense::values_mut)
    }

    /// Weights only, sharing nothing mutable; used for target snapshots.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }
}

fn relu(pre: &[f64], out: &mut [f64]) {
    for (o, &p) in out.iter_mut().zip(pre) {
        *o = p.max(0.0);
    }
}

/// Training progress stored alongside the weights so runs can resume.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Progress {
    pub epochs_completed: u32,
    pub updates: u64,
}

pub fn save_params(path: &Path, params: &QNetworkParams) -> Result<()> {
    save_checkpoint(path, params, Progress::default())
}

pub fn load_params(path: &Path) -> Result<QNetworkParams> {
    load_checkpoint(path).map(|(p, _)| p)
}

/// Load and insist on a particular input width.
pub fn load_params_for(path: &Path, input_dim: usize) -> Result<QNetworkParams> {
    let params = load_params(path)?;
    if params.input_dim != input_dim {
        return Err(Error::DimensionMismatch {
            expected: input_dim,
            found: params.input_dim,
        });
    }
    Ok(params)
}

/// Binary layout, little endian: magic, u32 version, u32 input_dim,
/// u32 hidden, u32 actions, u64 seed, u32 epochs_completed, u64 updates,
/// then each layer's weights (row-major) and bias as f64, then the momentum
/// buffers in the same order.
pub fn encode_checkpoint(params: &QNetworkParams, progress: Progress) -> Vec<u8> {
    let mut buf = Vec::with_capacity(48 + 16 * params.num_parameters());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.input_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(HIDDEN as u32).to_le_bytes());
    buf.extend_from_slice(&(NUM_ACTIONS as u32).to_le_bytes());
    buf.extend_from_slice(&params.seed.to_le_bytes());
    buf.extend_from_slice(&progress.epochs_completed.to_le_bytes());
    buf.extend_from_slice(&progress.updates.to_le_bytes());
    for v in params.values().chain(params.velocity.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(QNetworkParams, Progress)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::FormatVersionMismatch("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch(format!(
            "version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let input_dim = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let actions = r.u32()? as usize;
    if hidden != HIDDEN || actions != NUM_ACTIONS || input_dim == 0 {
        return Err(Error::FormatVersionMismatch(format!(
            "unexpected shape {input_dim}x{hidden}x{actions}"
        )));
    }
    let seed = r.u64()?;
    let progress = Progress {
        epochs_completed: r.u32()?,
        updates: r.u64()?,
    };
    let mut params = QNetworkParams {
        input_dim,
        seed,
        layers: Gradients::zeros(input_dim).layers,
        velocity: Gradients::zeros(input_dim),
    };
    for v in params.values_mut() {
        *v = r.f64()?;
    }
    for l in &mut params.velocity.layers {
        for v in l.values_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::FormatVersionMismatch(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((params, progress))
}

pub fn save_checkpoint(path: &Path, params: &QNetworkParams, progress: Progress) -> Result<()> {
    fs::write(path, encode_checkpoint(params, progress)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(QNetworkParams, Progress)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::FormatVersionMismatch("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
