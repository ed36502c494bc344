//! Convolutional embedding network mapping an `M x C` CIR magnitude matrix
//! to a 2D chart location, with a hand-written reverse pass.
//!
//! Layers: two 3x3 same-padded convolutions (1 -> 32 -> 64 channels), then
//! dense 64·M·C -> 512 -> 128 -> 2. ReLU everywhere except the last layer.
//!
//! Activations are stored pixel-major, channel-last. Convolutions run as
//! im2col followed by a matrix product, so the whole minibatch goes through
//! a handful of GEMM calls.

pub mod checkpoint;
pub mod gradcheck;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input height (number of TRPs).
    pub m: usize,
    /// Input width (retained CIR samples).
    pub c: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub fc1_units: usize,
    pub fc2_units: usize,
}

impl ModelConfig {
    /// Layer widths of the reference architecture.
    pub fn standard(m: usize, c: usize) -> Self {
        Self {
            m,
            c,
            conv1_channels: 32,
            conv2_channels: 64,
            fc1_units: 512,
            fc2_units: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.c < 4 {
            return Err(Error::invalid(format!(
                "model input must be at least 1 x 4, got {} x {}",
                self.m, self.c
            )));
        }
        if [self.conv1_channels, self.conv2_channels, self.fc1_units, self.fc2_units].contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.m * self.c
    }

    pub fn flatten_width(&self) -> usize {
        self.conv2_channels * self.pixels()
    }

    /// `(rows, cols)` of every parameter tensor in declaration order.
    pub fn shapes(&self) -> [(usize, usize); 10] {
        let (c1, c2) = (self.conv1_channels, self.conv2_channels);
        [
            (9, c1),
            (1, c1),
            (9 * c1, c2),
            (1, c2),
            (self.flatten_width(), self.fc1_units),
            (1, self.fc1_units),
            (self.fc1_units, self.fc2_units),
            (1, self.fc2_units),
            (self.fc2_units, 2),
            (1, 2),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Conv1,
    Conv2,
    Fc1,
    Fc2,
    Fc3,
}

impl Layer {
    pub const ALL: [Layer; 5] = [Layer::Conv1, Layer::Conv2, Layer::Fc1, Layer::Fc2, Layer::Fc3];

    fn index(self) -> usize {
        self as usize
    }
}

/// One parameter tensor; weights are stored `[fan_in, fan_out]`, conv
/// weights in im2col order `(ky, kx, in_channel)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Weight(Layer),
    Bias(Layer),
}

impl Param {
    fn slot(self) -> usize {
        match self {
            Param::Weight(l) => 2 * l.index(),
            Param::Bias(l) => 2 * l.index() + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    offsets: [usize; 11],
    shapes: [(usize, usize); 10],
}

impl Layout {
    fn new(config: &ModelConfig) -> Self {
        let shapes = config.shapes();
        let mut offsets = [0; 11];
        for (i, (r, c)) in shapes.iter().enumerate() {
            offsets[i + 1] = offsets[i] + r * c;
        }
        Self { offsets, shapes }
    }

    fn view<'a, T>(&self, data: &'a [T], p: Param) -> ArrayView2<'a, T> {
        let i = p.slot();
        ArrayView2::from_shape(self.shapes[i], &data[self.offsets[i]..self.offsets[i + 1]])
            .expect("layout is consistent")
    }

    fn view_mut<'a, T>(&self, data: &'a mut [T], p: Param) -> ArrayViewMut2<'a, T> {
        let i = p.slot();
        ArrayViewMut2::from_shape(self.shapes[i], &mut data[self.offsets[i]..self.offsets[i + 1]])
            .expect("layout is consistent")
    }

    fn layer_range(&self, l: Layer) -> std::ops::Range<usize> {
        self.offsets[2 * l.index()]..self.offsets[2 * l.index() + 2]
    }
}

/// Affine map applied to the raw network output: `center + scale * out`.
/// Lets a small learning rate reach outputs spanning tens of meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputFrame {
    pub center: [f64; 2],
    pub scale: f64,
}

impl Default for OutputFrame {
    fn default() -> Self {
        Self { center: [0.0, 0.0], scale: 1.0 }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct ChartModel<T> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<T>,
    output: OutputFrame,
    frozen: [bool; 5],
    /// Changes on every parameter mutation; tapes record it.
    id: u64,
}

impl<T> PartialEq for ChartModel<T>
where
    T: PartialEq,
{
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params == other.params
            && self.output == other.output
            && self.frozen == other.frozen
    }
}

/// Parameter-shaped gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    layout: Layout,
    values: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &ChartModel<T>) -> Self {
        Self {
            layout: model.layout.clone(),
            values: vec![T::zero(); model.params.len()],
        }
    }

    pub fn get(&self, p: Param) -> ArrayView2<'_, T> {
        self.layout.view(&self.values, p)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn layer(&self, l: Layer) -> &[T] {
        &self.values[self.layout.layer_range(l)]
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.values {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Cached activations of one batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    model_id: u64,
    batch: usize,
    patches1: Array2<T>,
    a1: Array2<T>,
    patches2: Array2<T>,
    /// Conv2 activations, `[batch, pixels * channels]`.
    flat: Array2<T>,
    a3: Array2<T>,
    a4: Array2<T>,
}

impl<T: Real> Tape<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Which ReLU units were active, over all hidden layers of the batch.
    pub fn relu_pattern(&self) -> Vec<bool> {
        [&self.a1, &self.flat, &self.a3, &self.a4]
            .iter()
            .flat_map(|a| a.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

fn relu_inplace<T: Real>(a: &mut Array2<T>) {
    a.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

fn mask_relu_grad<T: Real>(grad: &mut Array2<T>, act: &Array2<T>) {
    ndarray::Zip::from(grad).and(act).for_each(|g, &a| {
        if a <= T::zero() {
            *g = T::zero();
        }
    });
}

fn dense<T: Real>(x: &ArrayView2<T>, w: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let mut out = Array2::zeros((x.nrows(), w.ncols()));
    out.assign(&b.broadcast((x.nrows(), w.ncols())).expect("bias row"));
    general_mat_mul(T::one(), x, &w, T::one(), &mut out);
    out
}

/// 3x3 same-padded patches of a `[batch * m * c, ch]` activation.
fn im2col<T: Real>(src: &ArrayView2<T>, batch: usize, m: usize, c: usize) -> Array2<T> {
    let ch = src.ncols();
    let mut out = Array2::zeros((batch * m * c, 9 * ch));
    for b in 0..batch {
        for i in 0..m {
            for j in 0..c {
                let row = b * m * c + i * c + j;
                let mut dst = out.row_mut(row);
                for di in 0..3 {
                    let y = i as isize + di as isize - 1;
                    if y < 0 || y >= m as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let x = j as isize + dj as isize - 1;
                        if x < 0 || x >= c as isize {
                            continue;
                        }
                        let k = (di * 3 + dj) * ch;
                        let from = b * m * c + y as usize * c + x as usize;
                        dst.slice_mut(s![k..k + ch]).assign(&src.row(from));
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto pixels.
fn col2im<T: Real>(patches: &Array2<T>, batch: usize, m: usize, c: usize, ch: usize) -> Array2<T> {
    let mut out = Array2::<T>::zeros((batch * m * c, ch));
    for b in 0..batch {
        for i in 0..m {
            for j in 0..c {
                let row = patches.row(b * m * c + i * c + j);
                for di in 0..3 {
                    let y = i as isize + di as isize - 1;
                    if y < 0 || y >= m as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let x = j as isize + dj as isize - 1;
                        if x < 0 || x >= c as isize {
                            continue;
                        }
                        let k = (di * 3 + dj) * ch;
                        let to = b * m * c + y as usize * c + x as usize;
                        let mut dst = out.row_mut(to);
                        dst += &row.slice(s![k..k + ch]);
                    }
                }
            }
        }
    }
    out
}

impl<T: Real> ChartModel<T> {
    /// Reference-width model for an `m x c` input.
    pub fn init(m: usize, c: usize, seed: u64) -> Result<Self> {
        Self::new(ModelConfig::standard(m, c), seed)
    }

    /// He-uniform weights for ReLU layers, LeCun-uniform for the linear
    /// output layer, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.offsets[10]];
        let base = derive_seed(seed, "model-init");
        for (li, layer) in Layer::ALL.iter().enumerate() {
            let (fan_in, _) = layout.shapes[2 * li];
            let gain = if *layer == Layer::Fc3 { 3.0 } else { 6.0 };
            let limit = (gain / fan_in as f64).sqrt();
            let mut rng = stream_rng(base, li as u64);
            let mut w = layout.view_mut(&mut params, Param::Weight(*layer));
            for v in w.iter_mut() {
                *v = T::of(rng.random_range(-limit..limit));
            }
        }
        Ok(Self {
            config,
            layout,
            params,
            output: OutputFrame::default(),
            frozen: [false; 5],
            id: fresh_id(),
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>, output: OutputFrame) -> Result<Self> {
        config.validate()?;
        if params.len() != config.num_params() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", config.num_params()),
                got: format!("{}", params.len()),
            });
        }
        Ok(Self {
            layout: Layout::new(&config),
            config,
            params,
            output,
            frozen: [false; 5],
            id: fresh_id(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable access to the flat parameter vector; invalidates tapes.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.id = fresh_id();
        &mut self.params
    }

    pub fn param(&self, p: Param) -> ArrayView2<'_, T> {
        self.layout.view(&self.params, p)
    }

    pub fn param_mut(&mut self, p: Param) -> ArrayViewMut2<'_, T> {
        self.id = fresh_id();
        self.layout.view_mut(&mut self.params, p)
    }

    pub fn output_frame(&self) -> OutputFrame {
        self.output
    }

    pub fn set_output_frame(&mut self, frame: OutputFrame) {
        self.id = fresh_id();
        self.output = frame;
    }

    pub fn freeze(&mut self, layer: Layer, frozen: bool) {
        self.frozen[layer.index()] = frozen;
    }

    pub fn is_frozen(&self, layer: Layer) -> bool {
        self.frozen[layer.index()]
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> ChartModel<U> {
        ChartModel {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::of(v.as_f64())).collect(),
            output: self.output,
            frozen: self.frozen,
            id: fresh_id(),
        }
    }

    fn pack_inputs(&self, inputs: &[ArrayView2<f64>]) -> Result<Array2<T>> {
        let (m, c) = (self.config.m, self.config.c);
        let mut x = Array2::zeros((inputs.len() * m * c, 1));
        for (b, h) in inputs.iter().enumerate() {
            if h.dim() != (m, c) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{m} x {c} input"),
                    got: format!("{} x {}", h.nrows(), h.ncols()),
                });
            }
            for ((i, j), v) in h.indexed_iter() {
                x[[b * m * c + i * c + j, 0]] = T::of(*v);
            }
        }
        Ok(x)
    }

    /// Embeds a minibatch; returns `[batch, 2]` outputs and the tape needed
    /// by [`ChartModel::backward`].
    pub fn forward_batch(&self, inputs: &[ArrayView2<f64>]) -> Result<(Array2<T>, Tape<T>)> {
        let cfg = &self.config;
        let batch = inputs.len();
        let x = self.pack_inputs(inputs)?;
        let p = |q| self.param(q);

        let patches1 = im2col(&x.view(), batch, cfg.m, cfg.c);
        let mut a1 = dense(&patches1.view(), p(Param::Weight(Layer::Conv1)), p(Param::Bias(Layer::Conv1)));
        relu_inplace(&mut a1);
        let patches2 = im2col(&a1.view(), batch, cfg.m, cfg.c);
        let mut a2 = dense(&patches2.view(), p(Param::Weight(Layer::Conv2)), p(Param::Bias(Layer::Conv2)));
        relu_inplace(&mut a2);
        let flat = a2
            .into_shape_with_order((batch, cfg.flatten_width()))
            .expect("contiguous conv output");
        let mut a3 = dense(&flat.view(), p(Param::Weight(Layer::Fc1)), p(Param::Bias(Layer::Fc1)));
        relu_inplace(&mut a3);
        let mut a4 = dense(&a3.view(), p(Param::Weight(Layer::Fc2)), p(Param::Bias(Layer::Fc2)));
        relu_inplace(&mut a4);
        let mut out = dense(&a4.view(), p(Param::Weight(Layer::Fc3)), p(Param::Bias(Layer::Fc3)));
        let scale = T::of(self.output.scale);
        for mut row in out.outer_iter_mut() {
            row[0] = T::of(self.output.center[0]) + scale * row[0];
            row[1] = T::of(self.output.center[1]) + scale * row[1];
        }
        Ok((
            out,
            Tape {
                model_id: self.id,
                batch,
                patches1,
                a1,
                patches2,
                flat,
                a3,
                a4,
            },
        ))
    }

    /// Embeddings only, processed in chunks to bound memory.
    pub fn embed(&self, inputs: &[ArrayView2<f64>]) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let (y, _) = self.forward_batch(chunk)?;
            out.extend(y.outer_iter().map(|r| [r[0].as_f64(), r[1].as_f64()]));
        }
        Ok(out)
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<[T; 2]> {
        let (y, _) = self.forward_batch(&[input])?;
        Ok([y[[0, 0]], y[[0, 1]]])
    }

    /// Parameter gradients of `sum_b upstream[b] . output[b]`.
    pub fn backward(&self, tape: &Tape<T>, upstream: ArrayView2<T>) -> Result<Gradients<T>> {
        if tape.model_id != self.id {
            return Err(Error::StaleTape { tape: tape.model_id, model: self.id });
        }
        if upstream.dim() != (tape.batch, 2) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} x 2 upstream gradient", tape.batch),
                got: format!("{} x {}", upstream.nrows(), upstream.ncols()),
            });
        }
        let cfg = &self.config;
        let mut grads = Gradients::zeros_like(self);
        let layout = self.layout.clone();
        let p = |q| self.param(q);
        let first_live = Layer::ALL.iter().position(|l| !self.is_frozen(*l));
        let Some(first_live) = first_live else {
            return Ok(grads);
        };

        let write = |grads: &mut Gradients<T>, layer: Layer, input: &ArrayView2<T>, dz: &Array2<T>| {
            if self.is_frozen(layer) {
                return;
            }
            let mut gw = layout.view_mut(&mut grads.values, Param::Weight(layer));
            general_mat_mul(T::one(), &input.t(), dz, T::zero(), &mut gw);
            let mut gb = layout.view_mut(&mut grads.values, Param::Bias(layer));
            gb.row_mut(0).assign(&dz.sum_axis(Axis(0)));
        };

        let dz5 = upstream.mapv(|v| v * T::of(self.output.scale));
        write(&mut grads, Layer::Fc3, &tape.a4.view(), &dz5);
        if first_live >= 4 {
            return Ok(grads);
        }
        let mut dz4 = dz5.dot(&p(Param::Weight(Layer::Fc3)).t());
        mask_relu_grad(&mut dz4, &tape.a4);
        write(&mut grads, Layer::Fc2, &tape.a3.view(), &dz4);
        if first_live >= 3 {
            return Ok(grads);
        }
        let mut dz3 = dz4.dot(&p(Param::Weight(Layer::Fc2)).t());
        mask_relu_grad(&mut dz3, &tape.a3);
        write(&mut grads, Layer::Fc1, &tape.flat.view(), &dz3);
        if first_live >= 2 {
            return Ok(grads);
        }
        let dflat = dz3.dot(&p(Param::Weight(Layer::Fc1)).t());
        let rows = tape.batch * cfg.pixels();
        let mut dz2 = dflat
            .into_shape_with_order((rows, cfg.conv2_channels))
            .expect("contiguous");
        let a2 = tape
            .flat
            .view()
            .into_shape_with_order((rows, cfg.conv2_channels))
            .expect("contiguous");
        ndarray::Zip::from(&mut dz2).and(&a2).for_each(|g, &a| {
            if a <= T::zero() {
                *g = T::zero();
            }
        });
        write(&mut grads, Layer::Conv2, &tape.patches2.view(), &dz2);
        if first_live >= 1 {
            return Ok(grads);
        }
        let dpatches2 = dz2.dot(&p(Param::Weight(Layer::Conv2)).t());
        let mut dz1 = col2im(&dpatches2, tape.batch, cfg.m, cfg.c, cfg.conv1_channels);
        mask_relu_grad(&mut dz1, &tape.a1);
        write(&mut grads, Layer::Conv1, &tape.patches1.view(), &dz1);
        Ok(grads)
    }
}
