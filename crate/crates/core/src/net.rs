//! Toy per-pixel depth predictor with frozen base layers and trainable
//! low-rank refiners.
//!
//! Every layer computes `h = act(W0 x + B (A x) + bias)`. The input of a pixel
//! is a 27-vector of intensities: a 3x3 stencil sampled on three box-filtered
//! scales. The last layer produces a scalar `o` per pixel, mapped to depth as
//! `1 / (softplus(o) + MIN_INVERSE_DEPTH)`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, Image};

pub const FEATURE_DIM: usize = 27;
pub const DEFAULT_RANK: usize = 8;
pub const REFINER_INIT_STD: f64 = 0.02;
/// Lower bound of predicted inverse depth; caps depth at 100 m.
pub const MIN_INVERSE_DEPTH: f64 = 0.01;

const SCALE_RADII: [usize; 3] = [0, 1, 3];
const SCALE_STEPS: [i64; 3] = [1, 2, 4];
const NET_MAGIC: &[u8; 4] = b"NET1";
const FLAG_BASE_FROZEN: u8 = 0x01;
const FLAG_REFINER_TRAINABLE: u8 = 0x02;
const FLAG_TANH: u8 = 0x04;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }
}

/// Trainable pair `(A, B)` adding `B A x` to a frozen layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankRefiner {
    /// `r x k`, Gaussian initialized.
    pub a: DMatrix<f64>,
    /// `d x r`, zero initialized.
    pub b: DMatrix<f64>,
}

impl LowRankRefiner {
    pub fn new(d: usize, k: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, REFINER_INIT_STD).expect("valid std");
        Self {
            a: DMatrix::from_fn(rank, k, |_, _| normal.sample(rng)),
            b: DMatrix::zeros(d, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    w0: DMatrix<f64>,
    bias: DVector<f64>,
    activation: Activation,
    frozen: bool,
    pub refiner: LowRankRefiner,
}

impl Layer {
    pub fn new(w0: DMatrix<f64>, bias: DVector<f64>, activation: Activation, refiner: LowRankRefiner) -> Result<Self> {
        let (d, k) = w0.shape();
        if bias.len() != d || refiner.a.ncols() != k || refiner.b.nrows() != d || refiner.b.ncols() != refiner.a.nrows() {
            return Err(Error::InvalidArgument("inconsistent layer shapes".into()));
        }
        Ok(Self {
            w0,
            bias,
            activation,
            frozen: true,
            refiner,
        })
    }

    pub fn w0(&self) -> &DMatrix<f64> {
        &self.w0
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.w0.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w0.nrows()
    }

    /// Forward on a batch of column vectors; returns `(A X, act(Z))`.
    fn forward_batch(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let ax = &self.refiner.a * x;
        let mut z = &self.w0 * x;
        z += &self.refiner.b * &ax;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        let act = self.activation;
        z.apply(|v| *v = act.apply(*v));
        (ax, z)
    }
}

/// Single-vector layer evaluation: `act(W0 x + B (A x) + bias)`.
pub fn layer_forward(x: &DVector<f64>, layer: &Layer) -> Result<DVector<f64>> {
    if x.len() != layer.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: (layer.input_dim(), 1),
            found: (x.len(), 1),
        });
    }
    let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    let (_, h) = layer.forward_batch(&xm);
    Ok(DVector::from_column_slice(h.as_slice()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    /// Two hidden layers of 64 with rank-1 refiners, keeping trainable
    /// parameters under 5% of the total.
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            rank: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDepthNet {
    layers: Vec<Layer>,
}

impl ToyDepthNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("network layers"));
        }
        if layers[0].input_dim() != FEATURE_DIM || layers.last().unwrap().output_dim() != 1 {
            return Err(Error::InvalidArgument(format!(
                "network must map {FEATURE_DIM} features to one output"
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::InvalidArgument("consecutive layer widths differ".into()));
            }
        }
        Ok(Self { layers })
    }

    /// Randomly initialized base (unfrozen, for pre-training) with fresh
    /// refiners.
    pub fn random(cfg: &NetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut dims = vec![FEATURE_DIM];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (k, d) = (dims[i], dims[i + 1]);
                let normal = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("valid std");
                let w0 = DMatrix::from_fn(d, k, |_, _| normal.sample(&mut rng));
                let last = i + 1 == n;
                let bias = if last { DVector::from_element(d, -1.5) } else { DVector::zeros(d) };
                let activation = if last { Activation::Identity } else { Activation::Tanh };
                let refiner = LowRankRefiner::new(d, k, cfg.rank, &mut rng);
                Layer {
                    w0,
                    bias,
                    activation,
                    frozen: false,
                    refiner,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.layers.iter().all(|l| l.frozen)
    }

    pub fn freeze(&mut self) {
        for l in &mut self.layers {
            l.frozen = true;
        }
    }

    /// Replaces every refiner with a fresh one (B = 0) of the given rank.
    pub fn reset_refiners(&mut self, rank: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut self.layers {
            l.refiner = LowRankRefiner::new(l.output_dim(), l.input_dim(), rank, &mut rng);
        }
    }

    /// The same base with all refiners removed (rank 0).
    pub fn without_refiners(&self) -> Self {
        let mut net = self.clone();
        for l in &mut net.layers {
            l.refiner = LowRankRefiner {
                a: DMatrix::zeros(0, l.input_dim()),
                b: DMatrix::zeros(l.output_dim(), 0),
            };
        }
        net
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.refiner.parameter_count()).sum()
    }

    pub fn frozen_parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w0.len() + l.bias.len()).sum()
    }

    /// Refiner parameters flattened layer by layer, `A` then `B`, each in
    /// column-major order.
    pub fn refiner_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.refiner.a.as_slice());
            out.extend_from_slice(l.refiner.b.as_slice());
        }
        out
    }

    pub fn set_refiner_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.trainable_parameter_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} refiner parameters, got {}",
                self.trainable_parameter_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let na = l.refiner.a.len();
            l.refiner.a.as_mut_slice().copy_from_slice(&params[off..off + na]);
            off += na;
            let nb = l.refiner.b.len();
            l.refiner.b.as_mut_slice().copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Base parameters (`W0` column-major, then bias) flattened per layer.
    pub fn base_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.frozen_parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.w0.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    /// Overwrites base weights; only allowed before the net is frozen.
    pub fn set_base_params(&mut self, params: &[f64]) -> Result<()> {
        if self.layers.iter().any(|l| l.frozen) {
            return Err(Error::InvalidArgument("base weights are frozen".into()));
        }
        if params.len() != self.frozen_parameter_count() {
            return Err(Error::InvalidArgument("base parameter count mismatch".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w0.len();
            l.w0.as_mut_slice().copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Forward pass over feature columns, recording the tape.
    pub fn forward_features(&self, features: DMatrix<f64>) -> (Vec<f64>, GradientTape) {
        let n = features.ncols();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut ax = Vec::with_capacity(self.layers.len());
        let mut x = features;
        for layer in &self.layers {
            let (a, h) = layer.forward_batch(&x);
            inputs.push(x);
            ax.push(a);
            x = h;
        }
        let out = x;
        let depth: Vec<f64> = out.iter().map(|&o| 1.0 / (softplus(o) + MIN_INVERSE_DEPTH)).collect();
        let tape = GradientTape {
            inputs,
            ax,
            output: out,
            depth: depth.clone(),
            n,
            consumed: false,
        };
        (depth, tape)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Box mean with the given radius, averaging only in-bounds pixels.
fn box_mean(img: &Image, radius: usize) -> Vec<f64> {
    let (w, h) = img.dims();
    if radius == 0 {
        return img.data().to_vec();
    }
    let r = radius as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = (x as i64 - r).max(0) as usize;
            let hi = (x as i64 + r).min(w as i64 - 1) as usize;
            let s: f64 = (lo..=hi).map(|xx| img.get(xx, y)).sum();
            tmp[y * w + x] = s / (hi - lo + 1) as f64;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = (y as i64 - r).max(0) as usize;
        let hi = (y as i64 + r).min(h as i64 - 1) as usize;
        for x in 0..w {
            let s: f64 = (lo..=hi).map(|yy| tmp[yy * w + x]).sum();
            out[y * w + x] = s / (hi - lo + 1) as f64;
        }
    }
    out
}

/// Per-pixel input features as a `27 x (w*h)` matrix, pixels in raster order.
pub fn patch_features(img: &Image) -> DMatrix<f64> {
    let (w, h) = img.dims();
    let levels: Vec<Vec<f64>> = SCALE_RADII.iter().map(|&r| box_mean(img, r)).collect();
    let mut feats = DMatrix::zeros(FEATURE_DIM, w * h);
    for y in 0..h {
        for x in 0..w {
            let col = y * w + x;
            let mut row = 0;
            for (level, &step) in levels.iter().zip(&SCALE_STEPS) {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let xx = (x as i64 + dx * step).clamp(0, w as i64 - 1) as usize;
                        let yy = (y as i64 + dy * step).clamp(0, h as i64 - 1) as usize;
                        feats[(row, col)] = level[yy * w + xx] - 0.5;
                        row += 1;
                    }
                }
            }
        }
    }
    feats
}

/// Recorded forward pass over a batch of pixels.
#[derive(Clone, Debug)]
pub struct GradientTape {
    inputs: Vec<DMatrix<f64>>,
    ax: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
    depth: Vec<f64>,
    n: usize,
    consumed: bool,
}

impl GradientTape {
    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

/// Gradient of one layer's refiner.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerGrad {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseGrad {
    pub w0: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Flattens refiner gradients in the order of [`ToyDepthNet::refiner_params`].
pub fn flatten_refiner_grads(grads: &[RefinerGrad]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(g.a.as_slice());
        out.extend_from_slice(g.b.as_slice());
    }
    out
}

pub fn flatten_base_grads(grads: &[BaseGrad]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(g.w0.as_slice());
        out.extend_from_slice(g.bias.as_slice());
    }
    out
}

struct Backward {
    refiners: Vec<RefinerGrad>,
    base: Vec<BaseGrad>,
}

fn backward(tape: &mut GradientTape, net: &ToyDepthNet, depth_seeds: &[f64], want_base: bool) -> Result<Backward> {
    if tape.consumed {
        return Err(Error::TapeConsumed);
    }
    if depth_seeds.len() != tape.n {
        return Err(Error::DimensionMismatch {
            expected: (tape.n, 1),
            found: (depth_seeds.len(), 1),
        });
    }
    if tape.inputs.len() != net.layers.len() {
        return Err(Error::InvalidArgument("tape was recorded on a different network".into()));
    }
    tape.consumed = true;

    // d depth / d o = -depth^2 * sigmoid(o)
    let mut delta = DMatrix::from_fn(1, tape.n, |_, j| {
        let o = tape.output[(0, j)];
        depth_seeds[j] * -(tape.depth[j] * tape.depth[j]) * sigmoid(o)
    });
    let mut refiners = Vec::with_capacity(net.layers.len());
    let mut base = Vec::with_capacity(if want_base { net.layers.len() } else { 0 });
    let mut layer_out = tape.output.clone();
    for (li, layer) in net.layers.iter().enumerate().rev() {
        let act = layer.activation;
        // delta currently holds dL/dh; convert to dL/dz.
        for (d, h) in delta.iter_mut().zip(layer_out.iter()) {
            *d *= act.derivative_from_output(*h);
        }
        let x = &tape.inputs[li];
        let bt_delta = layer.refiner.b.transpose() * &delta;
        let grad_b = &delta * tape.ax[li].transpose();
        let grad_a = &bt_delta * x.transpose();
        if want_base {
            let grad_w0 = &delta * x.transpose();
            let grad_bias = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.iter().sum::<f64>()));
            base.push(BaseGrad {
                w0: grad_w0,
                bias: grad_bias,
            });
        }
        refiners.push(RefinerGrad { a: grad_a, b: grad_b });
        if li > 0 {
            let mut next = layer.w0.transpose() * &delta;
            next += layer.refiner.a.transpose() * &bt_delta;
            delta = next;
            layer_out = tape.inputs[li].clone();
        }
    }
    refiners.reverse();
    base.reverse();
    Ok(Backward { refiners, base })
}

/// Reverse pass producing gradients for every refiner `(A, B)`; `depth_seeds`
/// holds dL/d(depth) per recorded pixel. The frozen base receives none.
pub fn backprop_refiners(tape: &mut GradientTape, net: &ToyDepthNet, depth_seeds: &[f64]) -> Result<Vec<RefinerGrad>> {
    Ok(backward(tape, net, depth_seeds, false)?.refiners)
}

/// Reverse pass for base weights, used only while pre-training.
pub fn backprop_base(tape: &mut GradientTape, net: &ToyDepthNet, depth_seeds: &[f64]) -> Result<Vec<BaseGrad>> {
    Ok(backward(tape, net, depth_seeds, true)?.base)
}

pub fn predict_depth(image: &Image, net: &ToyDepthNet) -> DepthMap {
    predict_with_tape(image, net).0
}

pub fn predict_with_tape(image: &Image, net: &ToyDepthNet) -> (DepthMap, GradientTape) {
    let (depth, tape) = net.forward_features(patch_features(image));
    let (w, h) = image.dims();
    let map = DepthMap::new(w, h, depth).expect("predicted depths are positive and finite");
    (map, tape)
}

fn write_matrix_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

/// Serializes to the `NET1` layout.
pub fn encode_net(net: &ToyDepthNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(NET_MAGIC);
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.refiner.rank() as u32).to_le_bytes());
        let mut flags = FLAG_REFINER_TRAINABLE;
        if l.frozen {
            flags |= FLAG_BASE_FROZEN;
        }
        if l.activation == Activation::Tanh {
            flags |= FLAG_TANH;
        }
        out.push(flags);
        write_matrix_row_major(&mut out, &l.w0);
        for b in l.bias.iter() {
            out.extend_from_slice(&b.to_le_bytes());
        }
        write_matrix_row_major(&mut out, &l.refiner.a);
        write_matrix_row_major(&mut out, &l.refiner.b);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("NET1", self.pos, format!("truncated: need {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format("NET1", at, "non-finite weight"));
        }
        Ok(v)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }
}

pub fn decode_net(buf: &[u8]) -> Result<ToyDepthNet> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != NET_MAGIC {
        return Err(Error::format("NET1", 0, "bad magic"));
    }
    let n = c.u32()?;
    if n == 0 || n > 64 {
        return Err(Error::format("NET1", 4, format!("implausible layer count {n}")));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let at = c.pos;
        let d = c.u32()?;
        let k = c.u32()?;
        let r = c.u32()?;
        if d == 0 || k == 0 || d > 1 << 16 || k > 1 << 16 || r > d.max(k) {
            return Err(Error::format("NET1", at, format!("implausible layer shape {d}x{k} rank {r}")));
        }
        let flags = c.take(1)?[0];
        if flags & !(FLAG_BASE_FROZEN | FLAG_REFINER_TRAINABLE | FLAG_TANH) != 0 {
            return Err(Error::format("NET1", c.pos - 1, format!("unknown flags {flags:#04x}")));
        }
        let w0 = c.matrix(d, k)?;
        let bias = DVector::from_column_slice(c.matrix(d, 1)?.as_slice());
        let a = c.matrix(r, k)?;
        let b = c.matrix(d, r)?;
        layers.push(Layer {
            w0,
            bias,
            activation: if flags & FLAG_TANH != 0 { Activation::Tanh } else { Activation::Identity },
            frozen: flags & FLAG_BASE_FROZEN != 0,
            refiner: LowRankRefiner { a, b },
        });
    }
    if c.pos != buf.len() {
        return Err(Error::format("NET1", c.pos, "trailing bytes"));
    }
    let net = ToyDepthNet::from_layers(layers.clone())
        .map_err(|e| Error::format("NET1", 8, e.to_string()))?;
    Ok(net)
}

pub fn write_net(net: &ToyDepthNet, mut w: impl Write) -> Result<()> {
    w.write_all(&encode_net(net))?;
    Ok(())
}

pub fn read_net(mut r: impl Read) -> Result<ToyDepthNet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_net(&buf)
}
