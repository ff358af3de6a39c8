//! The classifier: a batch-normalized ReLU projection, a bidirectional QRNN
//! with fo-pooling and zoneout, and a batch-normalized softmax head, with
//! hand-written reverse-mode gradients.
//!
//! Sequences in a batch are padded to a common length `T` and stored as
//! `B * T` rows (`row = b * T + t`). Padded rows never influence valid rows:
//! batch statistics are taken over valid rows only, projected padded rows
//! are zeroed, and both QRNN directions see padding only after the valid
//! part of a sequence.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::NUM_CLASSES;
use crate::dsp::MEL_BANDS;
use crate::rng::{derive_seed, SplitMix64};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

pub trait Real:
    Float + LinalgScalar + ScalarOperand + AddAssign + SubAssign + MulAssign + DivAssign + Debug + Display + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + LinalgScalar + ScalarOperand + AddAssign + SubAssign + MulAssign + DivAssign + Debug + Display + Send + Sync + 'static
{
}

/// `a · b` on the single-threaded `gemm` kernels. Any strides are accepted,
/// so transposed views need no copy.
pub fn matmul<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let (m, k) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(k, kb, "matmul inner dimensions");
    let mut c = Array2::zeros((m, n));
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (a_rs, a_cs) = (a.strides()[0], a.strides()[1]);
    let (b_rs, b_cs) = (b.strides()[0], b.strides()[1]);
    // SAFETY: the pointers and strides describe live arrays of the shapes
    // checked above, and `c` is a fresh contiguous allocation.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            false,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            F::zero(),
            F::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
    c
}

#[inline]
fn real<F: Real>(x: f64) -> F {
    F::from(x).expect("representable constant")
}

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("non-finite values after {layer}")]
    NonFinite { layer: &'static str },
    #[error("trace does not match the gradient shape")]
    TraceMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub proj_dim: usize,
    pub qrnn_hidden: usize,
    pub kernel_width: usize,
    pub zoneout_p: f64,
    pub n_classes: usize,
    /// Output channels of the per-token map applied to the trailing 128
    /// log-mel columns of the input. `None` feeds inputs straight to the
    /// projection.
    #[serde(default)]
    pub mel_channels: Option<usize>,
}

impl ModelConfig {
    /// Full-size hyperparameters: projection 256, hidden 80, kernel 7,
    /// zoneout 0.1.
    pub fn full(input_dim: usize) -> Self {
        Self {
            input_dim,
            proj_dim: 256,
            qrnn_hidden: 80,
            kernel_width: 7,
            zoneout_p: 0.1,
            n_classes: NUM_CLASSES,
            mel_channels: None,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.input_dim == 0 || self.proj_dim == 0 || self.qrnn_hidden == 0 || self.kernel_width == 0 {
            return bad("all dimensions must be at least 1");
        }
        if self.n_classes != NUM_CLASSES {
            return bad("n_classes must be 5");
        }
        if !(0.0..1.0).contains(&self.zoneout_p) {
            return bad("zoneout_p must lie in [0, 1)");
        }
        if let Some(c) = self.mel_channels {
            if c == 0 || self.input_dim <= MEL_BANDS {
                return bad("mel_channels needs C >= 1 and input_dim > 128");
            }
        }
        Ok(())
    }

    /// Width of the projection input after the optional mel map.
    pub fn proj_input_dim(&self) -> usize {
        match self.mel_channels {
            Some(c) => self.input_dim - MEL_BANDS + c,
            None => self.input_dim,
        }
    }

    fn gates(&self) -> usize {
        3 * self.qrnn_hidden
    }
}

/// Trainable scalars: weights, biases, and batch-norm scale/shift. Running
/// statistics are not counted.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let p = cfg.proj_dim;
    let h = cfg.qrnn_hidden;
    let mel = cfg.mel_channels.map_or(0, |c| MEL_BANDS * c + c);
    let proj = cfg.proj_input_dim() * p + p + 2 * p;
    let qrnn = 2 * (cfg.kernel_width * p * 3 * h + 3 * h);
    let head = 2 * (2 * h) + 2 * h * cfg.n_classes + cfg.n_classes;
    mel + proj + qrnn + head
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Dense<F> {
    fn zeros(inp: usize, out: usize) -> Self {
        Self { weight: Array2::zeros((inp, out)), bias: Array1::zeros(out) }
    }

    fn glorot(inp: usize, out: usize, fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((inp, out), || real(rng.uniform(-a, a)));
        Self { weight, bias: Array1::zeros(out) }
    }

    fn apply(&self, x: ArrayView2<F>) -> Array2<F> {
        matmul(x, self.weight.view()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

impl<F: Real> BatchNorm<F> {
    fn new(n: usize) -> Self {
        Self {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
        }
    }
}

/// Every tensor of the model, including batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub mel: Option<Dense<F>>,
    pub proj: Dense<F>,
    pub proj_bn: BatchNorm<F>,
    /// Convolution weights as `[kernel_width * proj_dim, 3 * hidden]`,
    /// row `k * proj_dim + i` holding tap `k` (oldest first) of input
    /// channel `i`; gate columns are ordered z, f, o.
    pub qrnn_fwd: Dense<F>,
    pub qrnn_bwd: Dense<F>,
    pub head_bn: BatchNorm<F>,
    pub head: Dense<F>,
}

/// A named view of one tensor.
pub struct TensorRef<'a, F> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [F],
    pub trainable: bool,
    /// Weight matrices carry the L2 penalty; biases and batch-norm
    /// parameters do not.
    pub decayed: bool,
}

pub struct TensorMut<'a, F> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a mut [F],
    pub trainable: bool,
    pub decayed: bool,
}

struct TensorMeta {
    name: &'static str,
    shape: Vec<usize>,
    trainable: bool,
    decayed: bool,
}

fn slice<F, D: ndarray::Dimension>(a: &ndarray::Array<F, D>) -> &[F] {
    a.as_slice().expect("standard layout")
}

fn slice_mut<F, D: ndarray::Dimension>(a: &mut ndarray::Array<F, D>) -> &mut [F] {
    a.as_slice_mut().expect("standard layout")
}

fn meta(name: &'static str, shape: Vec<usize>, trainable: bool, decayed: bool) -> TensorMeta {
    TensorMeta { name, shape, trainable, decayed }
}

impl<F: Real> ModelParams<F> {
    /// Glorot-uniform weights, zero biases, unit batch-norm scale.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(seed);
        let (p, h, k) = (cfg.proj_dim, cfg.qrnn_hidden, cfg.kernel_width);
        let mel = cfg.mel_channels.map(|c| Dense::glorot(MEL_BANDS, c, MEL_BANDS, c, &mut rng));
        let proj = Dense::glorot(cfg.proj_input_dim(), p, cfg.proj_input_dim(), p, &mut rng);
        let qrnn_fwd = Dense::glorot(k * p, 3 * h, k * p, 3 * h, &mut rng);
        let qrnn_bwd = Dense::glorot(k * p, 3 * h, k * p, 3 * h, &mut rng);
        let head = Dense::glorot(2 * h, cfg.n_classes, 2 * h, cfg.n_classes, &mut rng);
        Ok(Self {
            mel,
            proj,
            proj_bn: BatchNorm::new(p),
            qrnn_fwd,
            qrnn_bwd,
            head_bn: BatchNorm::new(2 * h),
            head,
        })
    }

    /// All-zero tensors shaped like `cfg` (gradient accumulators).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (p, h, k) = (cfg.proj_dim, cfg.qrnn_hidden, cfg.kernel_width);
        let zero_bn = |n| BatchNorm { gamma: Array1::zeros(n), beta: Array1::zeros(n), running_mean: Array1::zeros(n), running_var: Array1::zeros(n) };
        Self {
            mel: cfg.mel_channels.map(|c| Dense::zeros(MEL_BANDS, c)),
            proj: Dense::zeros(cfg.proj_input_dim(), p),
            proj_bn: zero_bn(p),
            qrnn_fwd: Dense::zeros(k * p, 3 * h),
            qrnn_bwd: Dense::zeros(k * p, 3 * h),
            head_bn: zero_bn(2 * h),
            head: Dense::zeros(2 * h, cfg.n_classes),
        }
    }

    fn layout(&self, cfg: &ModelConfig) -> Vec<TensorMeta> {
        let (k, p, g) = (cfg.kernel_width, cfg.proj_dim, cfg.gates());
        let hh = self.head_bn.gamma.len();
        let mut v = Vec::with_capacity(18);
        if let Some(mel) = &self.mel {
            v.push(meta("mel.weight", vec![mel.weight.nrows(), mel.weight.ncols()], true, true));
            v.push(meta("mel.bias", vec![mel.bias.len()], true, false));
        }
        v.extend([
            meta("proj.weight", vec![self.proj.weight.nrows(), p], true, true),
            meta("proj.bias", vec![p], true, false),
            meta("proj_bn.gamma", vec![p], true, false),
            meta("proj_bn.beta", vec![p], true, false),
            meta("proj_bn.running_mean", vec![p], false, false),
            meta("proj_bn.running_var", vec![p], false, false),
            meta("qrnn_fwd.weight", vec![k, p, g], true, true),
            meta("qrnn_fwd.bias", vec![g], true, false),
            meta("qrnn_bwd.weight", vec![k, p, g], true, true),
            meta("qrnn_bwd.bias", vec![g], true, false),
            meta("head_bn.gamma", vec![hh], true, false),
            meta("head_bn.beta", vec![hh], true, false),
            meta("head_bn.running_mean", vec![hh], false, false),
            meta("head_bn.running_var", vec![hh], false, false),
            meta("head.weight", vec![hh, cfg.n_classes], true, true),
            meta("head.bias", vec![cfg.n_classes], true, false),
        ]);
        v
    }

    fn slices(&self) -> Vec<&[F]> {
        let mut v: Vec<&[F]> = Vec::with_capacity(18);
        if let Some(mel) = &self.mel {
            v.push(slice(&mel.weight));
            v.push(slice(&mel.bias));
        }
        v.extend([
            slice(&self.proj.weight),
            slice(&self.proj.bias),
            slice(&self.proj_bn.gamma),
            slice(&self.proj_bn.beta),
            slice(&self.proj_bn.running_mean),
            slice(&self.proj_bn.running_var),
            slice(&self.qrnn_fwd.weight),
            slice(&self.qrnn_fwd.bias),
            slice(&self.qrnn_bwd.weight),
            slice(&self.qrnn_bwd.bias),
            slice(&self.head_bn.gamma),
            slice(&self.head_bn.beta),
            slice(&self.head_bn.running_mean),
            slice(&self.head_bn.running_var),
            slice(&self.head.weight),
            slice(&self.head.bias),
        ]);
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut v: Vec<&mut [F]> = Vec::with_capacity(18);
        if let Some(mel) = &mut self.mel {
            v.push(slice_mut(&mut mel.weight));
            v.push(slice_mut(&mut mel.bias));
        }
        v.extend([
            slice_mut(&mut self.proj.weight),
            slice_mut(&mut self.proj.bias),
            slice_mut(&mut self.proj_bn.gamma),
            slice_mut(&mut self.proj_bn.beta),
            slice_mut(&mut self.proj_bn.running_mean),
            slice_mut(&mut self.proj_bn.running_var),
            slice_mut(&mut self.qrnn_fwd.weight),
            slice_mut(&mut self.qrnn_fwd.bias),
            slice_mut(&mut self.qrnn_bwd.weight),
            slice_mut(&mut self.qrnn_bwd.bias),
            slice_mut(&mut self.head_bn.gamma),
            slice_mut(&mut self.head_bn.beta),
            slice_mut(&mut self.head_bn.running_mean),
            slice_mut(&mut self.head_bn.running_var),
            slice_mut(&mut self.head.weight),
            slice_mut(&mut self.head.bias),
        ]);
        v
    }

    /// Every tensor in a fixed order, running statistics included.
    pub fn tensors(&self, cfg: &ModelConfig) -> Vec<TensorRef<'_, F>> {
        self.layout(cfg)
            .into_iter()
            .zip(self.slices())
            .map(|(m, data)| TensorRef { name: m.name, shape: m.shape, data, trainable: m.trainable, decayed: m.decayed })
            .collect()
    }

    pub fn tensors_mut(&mut self, cfg: &ModelConfig) -> Vec<TensorMut<'_, F>> {
        let layout = self.layout(cfg);
        layout
            .into_iter()
            .zip(self.slices_mut())
            .map(|(m, data)| TensorMut { name: m.name, shape: m.shape, data, trainable: m.trainable, decayed: m.decayed })
            .collect()
    }

    pub fn is_finite(&self, cfg: &ModelConfig) -> bool {
        self.tensors(cfg).iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let d = |x: &Dense<F>| Dense { weight: x.weight.mapv(|v| G::from(v).unwrap()), bias: x.bias.mapv(|v| G::from(v).unwrap()) };
        let b = |x: &BatchNorm<F>| BatchNorm {
            gamma: x.gamma.mapv(|v| G::from(v).unwrap()),
            beta: x.beta.mapv(|v| G::from(v).unwrap()),
            running_mean: x.running_mean.mapv(|v| G::from(v).unwrap()),
            running_var: x.running_var.mapv(|v| G::from(v).unwrap()),
        };
        ModelParams {
            mel: self.mel.as_ref().map(d),
            proj: d(&self.proj),
            proj_bn: b(&self.proj_bn),
            qrnn_fwd: d(&self.qrnn_fwd),
            qrnn_bwd: d(&self.qrnn_bwd),
            head_bn: b(&self.head_bn),
            head: d(&self.head),
        }
    }
}

/// Padded batch of feature sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    /// `[B * T, input_dim]`, zero on padded rows.
    pub x: Array2<F>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl<F: Real> Batch<F> {
    /// Pads `seqs` (each `[T_i, dim]`) to the longest one.
    pub fn from_sequences(seqs: &[ArrayView2<'_, f32>]) -> Self {
        Self::padded(seqs, seqs.iter().map(|s| s.nrows()).max().unwrap_or(0))
    }

    /// Pads to `max_len`, which must be at least the longest sequence.
    pub fn padded(seqs: &[ArrayView2<'_, f32>], max_len: usize) -> Self {
        let dim = seqs.first().map_or(0, |s| s.ncols());
        let mut x = Array2::zeros((seqs.len() * max_len, dim));
        for (b, seq) in seqs.iter().enumerate() {
            assert!(seq.nrows() <= max_len, "sequence longer than max_len");
            x.slice_mut(s![b * max_len..b * max_len + seq.nrows(), ..])
                .zip_mut_with(seq, |d, &v| *d = F::from(v).unwrap());
        }
        Self { x, lengths: seqs.iter().map(|s| s.nrows()).collect(), max_len }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn valid_rows(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Whether each row holds a real token.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.rows()];
        for (b, &len) in self.lengths.iter().enumerate() {
            m[b * self.max_len..b * self.max_len + len].fill(true);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
    batch_mean: Array1<F>,
    batch_var: Array1<F>,
}

#[derive(Debug, Clone)]
struct DirCache<F> {
    order: Vec<usize>,
    cols: Array2<F>,
    z: Array2<F>,
    f: Array2<F>,
    f_eff: Array2<F>,
    o: Array2<F>,
    c: Array2<F>,
    zoned: Option<Vec<bool>>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    mode: Mode,
    mask: Vec<bool>,
    lengths: Vec<usize>,
    max_len: usize,
    x: Array2<F>,
    mel_pre: Option<Array2<F>>,
    /// Projection input when it differs from `x`.
    proj_in: Option<Array2<F>>,
    proj_bn: BnCache<F>,
    hp: Array2<F>,
    fwd: DirCache<F>,
    bwd: DirCache<F>,
    hcat: Array2<F>,
    head_bn: BnCache<F>,
    bh: Array2<F>,
    pub probs: Array2<F>,
}

impl<F: Real> ForwardTrace<F> {
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Concatenated forward and backward QRNN states, `[rows, 2 * hidden]`.
    pub fn hidden(&self) -> &Array2<F> {
        &self.hcat
    }

    /// Moves running statistics towards this batch's statistics.
    pub fn update_running_stats(&self, params: &mut ModelParams<F>) {
        if self.mode != Mode::Train {
            return;
        }
        let n = self.mask.iter().filter(|&&m| m).count();
        let unbias = if n > 1 { real::<F>(n as f64 / (n - 1) as f64) } else { F::one() };
        let m = real::<F>(BN_MOMENTUM);
        for (bn, cache) in [(&mut params.proj_bn, &self.proj_bn), (&mut params.head_bn, &self.head_bn)] {
            bn.running_mean.zip_mut_with(&cache.batch_mean, |r, &b| *r = m * *r + (F::one() - m) * b);
            bn.running_var.zip_mut_with(&cache.batch_var, |r, &b| *r = m * *r + (F::one() - m) * b * unbias);
        }
    }
}

fn check_finite<F: Real>(a: &Array2<F>, layer: &'static str) -> Result<(), NnError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite { layer })
    }
}

fn batch_norm<F: Real>(x: &Array2<F>, mask: &[bool], bn: &BatchNorm<F>, mode: Mode) -> (Array2<F>, BnCache<F>) {
    let cols = x.ncols();
    let eps = real::<F>(BN_EPS);
    let (mean, var) = match mode {
        Mode::Train => {
            let n = real::<F>(mask.iter().filter(|&&m| m).count().max(1) as f64);
            let mut mean = Array1::zeros(cols);
            for (row, _) in x.outer_iter().zip(mask).filter(|(_, &m)| m) {
                mean += &row;
            }
            mean /= n;
            let mut var = Array1::zeros(cols);
            for (row, _) in x.outer_iter().zip(mask).filter(|(_, &m)| m) {
                var.zip_mut_with(&(&row - &mean), |v, &d| *v = *v + d * d);
            }
            var /= n;
            (mean, var)
        }
        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
    let mut xhat = x - &mean;
    xhat *= &inv_std;
    let mut y = &xhat * &bn.gamma + &bn.beta;
    for ((mut yr, mut xr), &m) in y.outer_iter_mut().zip(xhat.outer_iter_mut()).zip(mask) {
        if !m {
            yr.fill(F::zero());
            xr.fill(F::zero());
        }
    }
    (y, BnCache { xhat, inv_std, batch_mean: mean, batch_var: var })
}

/// Returns `dx`; accumulates `dgamma`, `dbeta`.
fn batch_norm_backward<F: Real>(
    dy: &Array2<F>,
    mask: &[bool],
    cache: &BnCache<F>,
    gamma: &Array1<F>,
    mode: Mode,
    dgamma: &mut Array1<F>,
    dbeta: &mut Array1<F>,
) -> Array2<F> {
    // Padded rows of xhat and dy are zero, so plain column sums are masked sums.
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let dxhat = dy * gamma;
    match mode {
        Mode::Eval => dxhat * &cache.inv_std,
        Mode::Train => {
            let n = real::<F>(mask.iter().filter(|&&m| m).count().max(1) as f64);
            let sum_d = dxhat.sum_axis(Axis(0));
            let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
            let mut dx = dxhat * n - &sum_d - &(&cache.xhat * &sum_dx);
            dx *= &(&cache.inv_std / n);
            for (mut r, &m) in dx.outer_iter_mut().zip(mask) {
                if !m {
                    r.fill(F::zero());
                }
            }
            dx
        }
    }
}

/// Row permutation for one direction: identity forwards; backwards, each
/// sequence's valid part is reversed in place and padding stays put.
/// The map is its own inverse.
fn direction_order(lengths: &[usize], max_len: usize, backward: bool) -> Vec<usize> {
    let mut order = Vec::with_capacity(lengths.len() * max_len);
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..max_len {
            let src = if backward && t < len { len - 1 - t } else { t };
            order.push(b * max_len + src);
        }
    }
    order
}

/// `[rows, K * P]` causal window matrix in the permuted frame; tap `k`
/// holds the input `K - 1 - k` steps back.
fn im2col<F: Real>(x: &Array2<F>, order: &[usize], max_len: usize, k: usize) -> Array2<F> {
    let (rows, p) = x.dim();
    let mut cols = Array2::zeros((rows, k * p));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for r in 0..rows {
        let t = r % max_len;
        let base = r - t;
        for tap in 0..k {
            let back = k - 1 - tap;
            if back > t {
                continue;
            }
            let src = order[base + t - back];
            cs[r * k * p + tap * p..r * k * p + (tap + 1) * p].copy_from_slice(&xs[src * p..(src + 1) * p]);
        }
    }
    cols
}

fn col2im<F: Real>(dcols: &Array2<F>, order: &[usize], max_len: usize, k: usize, dx: &mut Array2<F>) {
    let p = dx.ncols();
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    for r in 0..dcols.nrows() {
        let t = r % max_len;
        let base = r - t;
        for tap in 0..k {
            let back = k - 1 - tap;
            if back > t {
                continue;
            }
            let dst = order[base + t - back];
            let src = &ds[r * k * p + tap * p..r * k * p + (tap + 1) * p];
            for (d, &s) in xs[dst * p..(dst + 1) * p].iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// One QRNN direction. Returns hidden states in natural row order.
fn qrnn_direction<F: Real>(
    x: &Array2<F>,
    conv: &Dense<F>,
    cfg: &ModelConfig,
    lengths: &[usize],
    max_len: usize,
    backward: bool,
    mode: Mode,
    rng: Option<&mut SplitMix64>,
) -> (Array2<F>, DirCache<F>) {
    let h = cfg.qrnn_hidden;
    let rows = x.nrows();
    let order = direction_order(lengths, max_len, backward);
    let cols = im2col(x, &order, max_len, cfg.kernel_width);
    let gates = conv.apply(cols.view());
    let mut z = Array2::zeros((rows, h));
    let mut f = Array2::zeros((rows, h));
    let mut o = Array2::zeros((rows, h));
    let zs = z.as_slice_mut().expect("standard layout").chunks_exact_mut(h);
    let fs = f.as_slice_mut().expect("standard layout").chunks_exact_mut(h);
    let os = o.as_slice_mut().expect("standard layout").chunks_exact_mut(h);
    for (((g, zr), fr), or) in gates.as_slice().expect("standard layout").chunks_exact(3 * h).zip(zs).zip(fs).zip(os) {
        for u in 0..h {
            zr[u] = g[u].tanh();
            fr[u] = sigmoid(g[h + u]);
            or[u] = sigmoid(g[2 * h + u]);
        }
    }
    let p = real::<F>(cfg.zoneout_p);
    let (f_eff, zoned) = match mode {
        Mode::Train => {
            let mut f_eff = f.clone();
            let zoned = match rng {
                Some(rng) if cfg.zoneout_p > 0.0 => {
                    // One stream per sequence, drawn over valid steps only,
                    // so masks do not depend on how far a batch is padded.
                    let base = rng.next_u64();
                    let mut mask = vec![false; rows * h];
                    for (b, &len) in lengths.iter().enumerate() {
                        let mut seq_rng = SplitMix64::new(derive_seed(base, b as u64));
                        for m in &mut mask[b * max_len * h..(b * max_len + len) * h] {
                            *m = seq_rng.next_f64() < cfg.zoneout_p;
                        }
                    }
                    for (v, &m) in f_eff.iter_mut().zip(&mask) {
                        if m {
                            *v = F::one();
                        }
                    }
                    Some(mask)
                }
                _ => None,
            };
            (f_eff, zoned)
        }
        Mode::Eval => (f.mapv(|v| p + (F::one() - p) * v), None),
    };
    let mut c = Array2::zeros((rows, h));
    let mut hidden = Array2::zeros((rows, h));
    for r in 0..rows {
        let first = r % max_len == 0;
        for u in 0..h {
            let prev = if first { F::zero() } else { c[[r - 1, u]] };
            let fe = f_eff[[r, u]];
            let cv = fe * prev + (F::one() - fe) * z[[r, u]];
            c[[r, u]] = cv;
            hidden[[order[r], u]] = o[[r, u]] * cv;
        }
    }
    (hidden, DirCache { order, cols, z, f, f_eff, o, c, zoned })
}

fn qrnn_direction_backward<F: Real>(
    dh: &Array2<F>,
    cache: &DirCache<F>,
    conv: &Dense<F>,
    grad: &mut Dense<F>,
    cfg: &ModelConfig,
    max_len: usize,
    mode: Mode,
    dx: &mut Array2<F>,
) {
    let h = cfg.qrnn_hidden;
    let rows = dh.nrows();
    let p = real::<F>(cfg.zoneout_p);
    let mut dgates = Array2::zeros((rows, 3 * h));
    let mut dc_next = vec![F::zero(); h];
    for r in (0..rows).rev() {
        let t = r % max_len;
        if t == max_len - 1 {
            dc_next.fill(F::zero());
        }
        let dh_row = dh.row(cache.order[r]);
        for u in 0..h {
            let (z, f, fe, o, c) = (cache.z[[r, u]], cache.f[[r, u]], cache.f_eff[[r, u]], cache.o[[r, u]], cache.c[[r, u]]);
            let prev = if t == 0 { F::zero() } else { cache.c[[r - 1, u]] };
            let dcv = dh_row[u] * o + dc_next[u];
            let d_o = dh_row[u] * c;
            let d_fe = dcv * (prev - z);
            let d_z = dcv * (F::one() - fe);
            dc_next[u] = dcv * fe;
            let d_f = match (mode, &cache.zoned) {
                (Mode::Train, Some(zoned)) if zoned[r * h + u] => F::zero(),
                (Mode::Train, _) => d_fe,
                (Mode::Eval, _) => d_fe * (F::one() - p),
            };
            dgates[[r, u]] = d_z * (F::one() - z * z);
            dgates[[r, h + u]] = d_f * f * (F::one() - f);
            dgates[[r, 2 * h + u]] = d_o * o * (F::one() - o);
        }
    }
    grad.weight += &matmul(cache.cols.t(), dgates.view());
    grad.bias += &dgates.sum_axis(Axis(0));
    let dcols = matmul(dgates.view(), conv.weight.t());
    col2im(&dcols, &cache.order, max_len, cfg.kernel_width, dx);
}

/// Kernel-size-1 convolution over the log-mel axis: a per-token dense map
/// followed by ReLU.
pub fn logmel_conv<F: Real>(mel_mean: ArrayView2<'_, F>, map: &Dense<F>) -> Array2<F> {
    map.apply(mel_mean).mapv(|v| v.max(F::zero()))
}

fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().fold(F::zero(), |a, &v| a + v);
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Runs the model. In train mode batch statistics normalize the batch and
/// `rng` (when given and `zoneout_p > 0`) draws zoneout masks; in eval
/// mode running statistics and the expected zoneout gate are used.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    batch: &Batch<F>,
    mode: Mode,
    mut rng: Option<&mut SplitMix64>,
) -> Result<ForwardTrace<F>, NnError> {
    if batch.x.ncols() != cfg.input_dim {
        return Err(NnError::Dimension { what: "input width", expected: cfg.input_dim, got: batch.x.ncols() });
    }
    let mask = batch.mask();
    let (proj_in, mel_pre) = match (&params.mel, cfg.mel_channels) {
        (Some(map), Some(c)) => {
            let split = cfg.input_dim - MEL_BANDS;
            let pre = map.apply(batch.x.slice(s![.., split..]));
            check_finite(&pre, "logmel_conv")?;
            let mut joined = Array2::zeros((batch.rows(), split + c));
            joined.slice_mut(s![.., ..split]).assign(&batch.x.slice(s![.., ..split]));
            joined.slice_mut(s![.., split..]).assign(&pre.mapv(|v| v.max(F::zero())));
            (Some(joined), Some(pre))
        }
        _ => (None, None),
    };
    let a = params.proj.apply(proj_in.as_ref().map_or(batch.x.view(), |j| j.view()));
    let (bp, proj_bn) = batch_norm(&a, &mask, &params.proj_bn, mode);
    check_finite(&bp, "project")?;
    let hp = bp.mapv(|v| v.max(F::zero()));
    check_finite(&hp, "project")?;

    let (hf, fwd) = qrnn_direction(&hp, &params.qrnn_fwd, cfg, &batch.lengths, batch.max_len, false, mode, rng.as_deref_mut());
    let (hb, bwd) = qrnn_direction(&hp, &params.qrnn_bwd, cfg, &batch.lengths, batch.max_len, true, mode, rng.as_deref_mut());
    let h = cfg.qrnn_hidden;
    let mut hcat = Array2::zeros((batch.rows(), 2 * h));
    hcat.slice_mut(s![.., ..h]).assign(&hf);
    hcat.slice_mut(s![.., h..]).assign(&hb);
    check_finite(&hcat, "qrnn")?;

    let (bh, head_bn) = batch_norm(&hcat, &mask, &params.head_bn, mode);
    let logits = params.head.apply(bh.view());
    let probs = softmax_rows(&logits);
    check_finite(&probs, "softmax")?;

    Ok(ForwardTrace {
        mode,
        mask,
        lengths: batch.lengths.clone(),
        max_len: batch.max_len,
        x: batch.x.clone(),
        mel_pre,
        proj_in,
        proj_bn,
        hp,
        fwd,
        bwd,
        hcat,
        head_bn,
        bh,
        probs,
    })
}

/// Eval-mode class probabilities for one sequence.
pub fn predict<F: Real>(params: &ModelParams<F>, cfg: &ModelConfig, x: ArrayView2<'_, f32>) -> Result<Array2<F>, NnError> {
    let batch = Batch::from_sequences(&[x]);
    Ok(forward(params, cfg, &batch, Mode::Eval, None)?.probs)
}

/// Gradients of a scalar loss given its gradient with respect to the output
/// probabilities.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trace: &ForwardTrace<F>,
    dprobs: &Array2<F>,
) -> Result<ModelParams<F>, NnError> {
    if dprobs.dim() != trace.probs.dim() {
        return Err(NnError::TraceMismatch);
    }
    let mut dlogits = Array2::zeros(dprobs.dim());
    for ((mut out, p), g) in dlogits.outer_iter_mut().zip(trace.probs.outer_iter()).zip(dprobs.outer_iter()) {
        let dot = p.iter().zip(g.iter()).fold(F::zero(), |a, (&p, &g)| a + p * g);
        for ((o, &p), &g) in out.iter_mut().zip(p.iter()).zip(g.iter()) {
            *o = p * (g - dot);
        }
    }
    backward_logits(params, cfg, trace, dlogits)
}

/// Same as [`backward`] but starting from the gradient with respect to the
/// pre-softmax logits. Rows of padded tokens are ignored.
pub fn backward_logits<F: Real>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    trace: &ForwardTrace<F>,
    mut dlogits: Array2<F>,
) -> Result<ModelParams<F>, NnError> {
    if dlogits.dim() != trace.probs.dim() || trace.x.ncols() != cfg.input_dim {
        return Err(NnError::TraceMismatch);
    }
    for (mut r, &m) in dlogits.outer_iter_mut().zip(&trace.mask) {
        if !m {
            r.fill(F::zero());
        }
    }
    let mut g = ModelParams::zeros(cfg);
    let mode = trace.mode;
    let h = cfg.qrnn_hidden;

    g.head.weight = matmul(trace.bh.t(), dlogits.view());
    g.head.bias = dlogits.sum_axis(Axis(0));
    let dbh = matmul(dlogits.view(), params.head.weight.t());
    let dhcat = batch_norm_backward(
        &dbh,
        &trace.mask,
        &trace.head_bn,
        &params.head_bn.gamma,
        mode,
        &mut g.head_bn.gamma,
        &mut g.head_bn.beta,
    );

    let mut dhp = Array2::zeros(trace.hp.dim());
    let dh_f = dhcat.slice(s![.., ..h]).to_owned();
    let dh_b = dhcat.slice(s![.., h..]).to_owned();
    qrnn_direction_backward(&dh_f, &trace.fwd, &params.qrnn_fwd, &mut g.qrnn_fwd, cfg, trace.max_len, mode, &mut dhp);
    qrnn_direction_backward(&dh_b, &trace.bwd, &params.qrnn_bwd, &mut g.qrnn_bwd, cfg, trace.max_len, mode, &mut dhp);

    dhp.zip_mut_with(&trace.hp, |d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
    let da = batch_norm_backward(
        &dhp,
        &trace.mask,
        &trace.proj_bn,
        &params.proj_bn.gamma,
        mode,
        &mut g.proj_bn.gamma,
        &mut g.proj_bn.beta,
    );
    g.proj.weight = matmul(trace.proj_in.as_ref().unwrap_or(&trace.x).t(), da.view());
    g.proj.bias = da.sum_axis(Axis(0));

    if let (Some(map), Some(pre), Some(gmel)) = (&params.mel, &trace.mel_pre, g.mel.as_mut()) {
        let split = cfg.input_dim - MEL_BANDS;
        let dproj_in = matmul(da.view(), params.proj.weight.slice(s![split.., ..]).t());
        let mut dpre = dproj_in;
        dpre.zip_mut_with(pre, |d, &v| {
            if v <= F::zero() {
                *d = F::zero();
            }
        });
        gmel.weight = matmul(trace.x.slice(s![.., split..]).t(), dpre.view());
        gmel.bias = dpre.sum_axis(Axis(0));
        let _ = map;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { input_dim: 16, proj_dim: 8, qrnn_hidden: 4, kernel_width: 3, zoneout_p: 0.1, n_classes: 5, mel_channels: None }
    }

    #[test]
    fn matmul_matches_naive_product_for_any_layout() {
        let mut rng = SplitMix64::new(5);
        let a = Array2::from_shape_simple_fn((7, 5), || rng.uniform(-1.0, 1.0));
        let b = Array2::from_shape_simple_fn((7, 3), || rng.uniform(-1.0, 1.0));
        let got = matmul(a.t(), b.view());
        for i in 0..5 {
            for j in 0..3 {
                let want: f64 = (0..7).map(|r| a[[r, i]] * b[[r, j]]).sum();
                assert!((got[[i, j]] - want).abs() < 1e-12);
            }
        }
        let rev = a.slice(s![..;-1, ..]);
        assert_eq!(matmul(rev, Array2::<f64>::eye(5).view()), rev.to_owned());
        assert_eq!(matmul(Array2::<f64>::zeros((0, 4)).view(), Array2::zeros((4, 2)).view()).dim(), (0, 2));
    }

    fn random_batch(cfg: &ModelConfig, lengths: &[usize], seed: u64) -> Batch<f64> {
        let mut rng = SplitMix64::new(seed);
        let seqs: Vec<Array2<f32>> = lengths
            .iter()
            .map(|&t| Array2::from_shape_simple_fn((t, cfg.input_dim), || rng.uniform(-1.0, 1.0) as f32))
            .collect();
        let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
        Batch::from_sequences(&views)
    }

    #[test]
    fn full_size_counts() {
        let text = param_count(&ModelConfig::full(1024));
        let pitch = param_count(&ModelConfig::full(1029));
        assert_eq!(pitch - text, 1280);
        for p in [1usize, 7, 64, 256] {
            let a = ModelConfig { proj_dim: p, ..ModelConfig::full(1024) };
            let b = ModelConfig { proj_dim: p, ..ModelConfig::full(1029) };
            assert_eq!(param_count(&b) - param_count(&a), 5 * p);
        }
    }

    #[test]
    fn count_matches_closed_form_and_tensors() {
        let cfg = tiny();
        // 16*8 + 8 + 2*8 | 2*(3*8*12 + 12) | 2*8 + 8*5 + 5
        let closed = (16 * 8 + 8 + 16) + 2 * (3 * 8 * 12 + 12) + (16 + 40 + 5);
        assert_eq!(param_count(&cfg), closed);
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let counted: usize = params.tensors(&cfg).iter().filter(|t| t.trainable).map(|t| t.data.len()).sum();
        assert_eq!(counted, closed);
    }

    #[test]
    fn doubling_hidden_doubles_conv() {
        let a = ModelConfig::full(1029);
        let b = ModelConfig { qrnn_hidden: 160, ..a.clone() };
        let conv = |c: &ModelConfig| 2 * (c.kernel_width * c.proj_dim * 3 * c.qrnn_hidden + 3 * c.qrnn_hidden);
        assert_eq!(conv(&b), 2 * conv(&a));
        assert_eq!(param_count(&b) - param_count(&a), conv(&a) + 2 * 160 + 160 * 5);
    }

    #[test]
    fn mel_map_adds_linear_layer() {
        let base = ModelConfig::full(1024 + 32);
        let mel = ModelConfig { input_dim: 1152, mel_channels: Some(32), ..ModelConfig::full(1152) };
        assert_eq!(param_count(&mel) - param_count(&base), 128 * 32 + 32);
        assert_eq!(128 * 32 + 32, 4128);
    }

    #[test]
    fn logmel_conv_identity() {
        let map = Dense { weight: Array2::<f64>::eye(128), bias: Array1::zeros(128) };
        let x = Array2::from_shape_fn((4, 128), |(i, j)| (i * 128 + j) as f64 * 0.01);
        assert_eq!(logmel_conv(x.view(), &map), x);
    }

    #[test]
    fn projection_relu_gate() {
        let cfg = ModelConfig { input_dim: 2, proj_dim: 2, qrnn_hidden: 1, kernel_width: 1, zoneout_p: 0.0, n_classes: 5, mel_channels: None };
        let mut params = ModelParams::<f64>::init(&cfg, 0).unwrap();
        params.proj.weight = Array2::eye(2);
        let x = Array2::from_shape_vec((1, 2), vec![-1.0f32, 2.0]).unwrap();
        let batch = Batch::<f64>::from_sequences(&[x.view()]);
        let trace = forward(&params, &cfg, &batch, Mode::Eval, None).unwrap();
        let hp: Vec<f64> = trace.hp.iter().copied().collect();
        let expect = [0.0, 2.0 / (1.0 + BN_EPS).sqrt()];
        for (a, b) in hp.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_batch_norm_statistics() {
        let cfg = ModelConfig { proj_dim: 6, ..tiny() };
        let mut params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        params.proj_bn.gamma = Array1::from_vec(vec![0.5, 1.0, 2.0, 3.0, 1.5, 0.7]);
        params.proj_bn.beta = Array1::from_vec(vec![-1.0, 0.0, 1.0, 2.0, 0.5, -0.3]);
        let batch = random_batch(&cfg, &[7, 5, 3], 9);
        let mask = batch.mask();
        let a = params.proj.apply(batch.x.view()) * 10.0;
        let (y, _) = batch_norm(&a, &mask, &params.proj_bn, Mode::Train);
        let valid: Vec<_> = y.outer_iter().zip(&mask).filter(|(_, &m)| m).map(|(r, _)| r.to_owned()).collect();
        let n = valid.len() as f64;
        for c in 0..6 {
            let mean = valid.iter().map(|r| r[c]).sum::<f64>() / n;
            let std = (valid.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((mean - params.proj_bn.beta[c]).abs() < 1e-5);
            assert!((std - params.proj_bn.gamma[c]).abs() < 1e-5, "{std}");
        }
    }

    #[test]
    fn eval_batch_norm_is_affine() {
        let cfg = tiny();
        let mut params = ModelParams::<f64>::init(&cfg, 4).unwrap();
        params.proj_bn.running_mean.fill(0.3);
        params.proj_bn.running_var.fill(2.0);
        params.proj_bn.gamma.fill(1.7);
        let mask = vec![true; 3];
        let x1 = Array2::from_shape_fn((3, 8), |(i, j)| (i + j) as f64 * 0.1);
        let x2 = Array2::from_shape_fn((3, 8), |(i, j)| (i * j) as f64 * -0.2);
        let f = |x: &Array2<f64>| batch_norm(x, &mask, &params.proj_bn, Mode::Eval).0;
        let zero = f(&Array2::zeros((3, 8)));
        let lhs = f(&(&x1 * 2.0 + &x2 * 3.0));
        let rhs = (&f(&x1) - &zero) * 2.0 + (&f(&x2) - &zero) * 3.0 + &zero;
        assert!(lhs.iter().zip(rhs.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    fn gates_forced(value: f64) -> (ModelConfig, ModelParams<f64>) {
        let cfg = ModelConfig { zoneout_p: 0.0, ..tiny() };
        let mut params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let h = cfg.qrnn_hidden;
        for conv in [&mut params.qrnn_fwd, &mut params.qrnn_bwd] {
            conv.weight.slice_mut(s![.., h..2 * h]).fill(0.0);
            conv.bias.slice_mut(s![h..2 * h]).fill(value);
        }
        (cfg, params)
    }

    #[test]
    fn forget_gate_one_keeps_zero_state() {
        let (cfg, params) = gates_forced(1e6);
        let batch = random_batch(&cfg, &[6], 1);
        let trace = forward(&params, &cfg, &batch, Mode::Train, None).unwrap();
        assert!(trace.hcat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_gate_zero_is_memoryless() {
        let (cfg, params) = gates_forced(-1e6);
        let batch = random_batch(&cfg, &[6], 2);
        let trace = forward(&params, &cfg, &batch, Mode::Train, None).unwrap();
        assert!(trace.fwd.c.iter().zip(trace.fwd.z.iter()).all(|(c, z)| (c - z).abs() < 1e-12));
    }

    #[test]
    fn direction_causality() {
        let cfg = ModelConfig { zoneout_p: 0.0, ..tiny() };
        let params = ModelParams::<f64>::init(&cfg, 6).unwrap();
        let mut rng = SplitMix64::new(3);
        let hp = Array2::from_shape_simple_fn((10, cfg.proj_dim), || rng.next_f64());
        let run = |x: &Array2<f64>, conv: &Dense<f64>, backward: bool| {
            qrnn_direction(x, conv, &cfg, &[10], 10, backward, Mode::Eval, None).0
        };
        let base_f = run(&hp, &params.qrnn_fwd, false);
        let base_b = run(&hp, &params.qrnn_bwd, true);
        for t in 0..10 {
            let mut x = hp.clone();
            x.row_mut(t).mapv_inplace(|v| v + 0.5);
            let out_f = run(&x, &params.qrnn_fwd, false);
            let out_b = run(&x, &params.qrnn_bwd, true);
            for s in 0..10 {
                assert_eq!(out_f.row(s) != base_f.row(s), s >= t, "fwd t={t} s={s}");
                assert_eq!(out_b.row(s) != base_b.row(s), s <= t, "bwd t={t} s={s}");
            }
        }
    }

    #[test]
    fn softmax_rows_normalized_and_single_step() {
        let cfg = tiny();
        let params = ModelParams::<f32>::init(&cfg, 7).unwrap();
        for lengths in [vec![1], vec![5, 2, 9]] {
            let mut rng = SplitMix64::new(1);
            let seqs: Vec<Array2<f32>> = lengths.iter().map(|&t| Array2::from_shape_simple_fn((t, 16), || rng.next_f32())).collect();
            let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
            let batch = Batch::<f32>::from_sequences(&views);
            for mode in [Mode::Train, Mode::Eval] {
                let probs = forward(&params, &cfg, &batch, mode, Some(&mut SplitMix64::new(2))).unwrap().probs;
                for row in probs.outer_iter() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                    assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
                }
            }
        }
    }

    #[test]
    fn eval_outputs_ignore_batch_neighbours() {
        let cfg = tiny();
        let params = ModelParams::<f64>::init(&cfg, 8).unwrap();
        let mut rng = SplitMix64::new(3);
        let seqs: Vec<Array2<f32>> = [4, 7, 2].iter().map(|&t| Array2::from_shape_simple_fn((t, 16), || rng.next_f32())).collect();
        let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
        let a = forward(&params, &cfg, &Batch::from_sequences(&views), Mode::Eval, None).unwrap().probs;
        let rev: Vec<_> = views.iter().rev().cloned().collect();
        let b = forward(&params, &cfg, &Batch::from_sequences(&rev), Mode::Eval, None).unwrap().probs;
        for (i, j) in [(0, 2), (1, 1), (2, 0)] {
            for t in 0..seqs[i].nrows() {
                assert_eq!(a.row(i * 7 + t), b.row(j * 7 + t));
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny();
        let params = ModelParams::<f64>::init(&cfg, 9).unwrap();
        let batch = random_batch(&cfg, &[6, 4], 4);
        let trace = forward(&params, &cfg, &batch, Mode::Train, Some(&mut SplitMix64::new(1))).unwrap();
        let g = backward(&params, &cfg, &trace, &Array2::zeros(trace.probs.dim())).unwrap();
        assert!(g.tensors(&cfg).iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        assert_eq!(backward(&params, &cfg, &trace, &Array2::zeros((1, 5))).unwrap_err(), NnError::TraceMismatch);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let cfg = tiny();
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let x = Array2::<f32>::zeros((3, 15));
        let err = forward(&params, &cfg, &Batch::from_sequences(&[x.view()]), Mode::Eval, None).unwrap_err();
        assert_eq!(err, NnError::Dimension { what: "input width", expected: 16, got: 15 });
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let cfg = tiny();
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let mut x = Array2::<f32>::zeros((3, 16));
        x[[1, 2]] = f32::NAN;
        let err = forward(&params, &cfg, &Batch::from_sequences(&[x.view()]), Mode::Eval, None).unwrap_err();
        assert_eq!(err, NnError::NonFinite { layer: "project" });
    }
}
