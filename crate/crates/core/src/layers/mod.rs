//! Sublayer operations and the layer unit built from them.
//!
//! A layer is one parameterized operation (affine or convolution) followed by
//! any number of parameter-free operations. Each operation has a forward that
//! optionally records what its local backward needs into an
//! [`ActivationCache`], and a local backward that consumes those records in
//! reverse order.

pub mod conv;
pub mod loss;

use std::fmt;
use std::ops::AddAssign;

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::tensor::{Buffer, FillDistribution, Tensor};
use conv::Geometry;

pub use loss::{mse_loss_and_delta, softmax_ce_loss_and_delta, LossKind};

/// Matrix products issued during one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub forward_matmuls: u64,
    pub backward_matmuls: u64,
    pub feedback_projections: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.forward_matmuls + self.backward_matmuls + self.feedback_projections
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: Self) {
        self.forward_matmuls += o.forward_matmuls;
        self.backward_matmuls += o.backward_matmuls;
        self.feedback_projections += o.feedback_projections;
    }
}

pub(crate) fn activation_tag(layer: usize, what: &str) -> String {
    format!("activation:L{layer}.{what}")
}

/// Declarative description of one sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpSpec {
    Affine { out: usize },
    Conv2d { filters: usize, kernel_h: usize, kernel_w: usize, stride: usize },
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
}

impl OpSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, OpSpec::Affine { .. } | OpSpec::Conv2d { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| Error::invalid("layer shape", format!("{self} on {input:?}: {why}"));
        match *self {
            OpSpec::Affine { out } => match input {
                [_] if out > 0 => Ok(vec![out]),
                _ => Err(bad("affine expects a vector input and a positive width")),
            },
            OpSpec::Conv2d {
                filters,
                kernel_h,
                kernel_w,
                stride,
            } => {
                let g = image_geometry(input, kernel_h, kernel_w, stride).ok_or_else(|| bad("does not fit"))?;
                if filters == 0 {
                    return Err(bad("zero filters"));
                }
                Ok(vec![filters, g.out_h(), g.out_w()])
            }
            OpSpec::MaxPool { size, stride } | OpSpec::AvgPool { size, stride } => {
                let g = image_geometry(input, size, size, stride).ok_or_else(|| bad("does not fit"))?;
                Ok(vec![input[0], g.out_h(), g.out_w()])
            }
            OpSpec::Relu => Ok(input.to_vec()),
            OpSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn parse(s: &str) -> Option<OpSpec> {
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let nums = |sep: &[char]| -> Option<Vec<usize>> {
            arg.split(sep).map(|p| p.parse().ok()).collect()
        };
        match (name, arg.is_empty()) {
            ("relu", true) => Some(OpSpec::Relu),
            ("flatten", true) => Some(OpSpec::Flatten),
            ("affine", false) => Some(OpSpec::Affine { out: arg.parse().ok()? }),
            ("conv", false) => match nums(&['x', '/'])?.as_slice() {
                &[filters, kernel_h, kernel_w, stride] => Some(OpSpec::Conv2d {
                    filters,
                    kernel_h,
                    kernel_w,
                    stride,
                }),
                _ => None,
            },
            ("maxpool" | "avgpool", false) => match *nums(&['/'])?.as_slice() {
                [size, stride] if name == "maxpool" => Some(OpSpec::MaxPool { size, stride }),
                [size, stride] => Some(OpSpec::AvgPool { size, stride }),
                _ => None,
            },
            _ => None,
        }
    }
}

impl fmt::Display for OpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpSpec::Affine { out } => write!(f, "affine:{out}"),
            OpSpec::Conv2d {
                filters,
                kernel_h,
                kernel_w,
                stride,
            } => write!(f, "conv:{filters}x{kernel_h}x{kernel_w}/{stride}"),
            OpSpec::Relu => f.write_str("relu"),
            OpSpec::MaxPool { size, stride } => write!(f, "maxpool:{size}/{stride}"),
            OpSpec::AvgPool { size, stride } => write!(f, "avgpool:{size}/{stride}"),
            OpSpec::Flatten => f.write_str("flatten"),
        }
    }
}

fn image_geometry(input: &[usize], kh: usize, kw: usize, stride: usize) -> Option<Geometry> {
    let &[channels, height, width] = input else {
        return None;
    };
    let g = Geometry {
        channels,
        height,
        width,
        kernel_h: kh,
        kernel_w: kw,
        stride,
    };
    g.fits().then_some(g)
}

/// One entry recorded by a cached forward.
#[derive(Debug)]
pub enum CacheEntry<T: Scalar> {
    /// Input of an affine or convolution op.
    Input(Tensor<T>),
    /// Input of a ReLU.
    PreActivation(Tensor<T>),
    /// Flat input positions of the pooled maxima.
    ArgMax { indices: Buffer<u32>, input_shape: Vec<usize> },
    /// Input shape only (average pooling, flatten).
    Shape(Vec<usize>),
}

impl<T: Scalar> CacheEntry<T> {
    fn stored_bytes(&self) -> u64 {
        match self {
            CacheEntry::Input(t) | CacheEntry::PreActivation(t) => t.bytes(),
            CacheEntry::ArgMax { indices, .. } => indices.bytes(),
            CacheEntry::Shape(_) => 0,
        }
    }
}

/// Per-layer stack of forward records, consumed last-in first-out by the
/// local backward.
#[derive(Debug)]
pub struct ActivationCache<T: Scalar> {
    entries: Vec<CacheEntry<T>>,
}

impl<T: Scalar> Default for ActivationCache<T> {
    fn default() -> Self {
        ActivationCache { entries: Vec::new() }
    }
}

impl<T: Scalar> ActivationCache<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: CacheEntry<T>) {
        self.entries.push(entry);
    }

    pub fn pop(&mut self) -> Option<CacheEntry<T>> {
        self.entries.pop()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries that hold tensor data (shape-only records excluded).
    pub fn tensor_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !matches!(e, CacheEntry::Shape(_)))
            .count()
    }

    pub fn bytes(&self) -> u64 {
        self.entries.iter().map(CacheEntry::stored_bytes).sum()
    }
}

/// How a parameterized op produces the gradient for its input.
#[derive(Clone, Copy, Debug)]
pub enum InputRoute<'a, T: Scalar> {
    /// Not needed (first layer, or direct feedback supplies every layer).
    Skip,
    /// Through the transposed weights.
    Weights,
    /// Through a feedback matrix shaped like the transposed weights.
    Feedback(&'a Tensor<T>),
}

/// Result of one sublayer's local backward.
#[derive(Debug)]
pub struct LocalGrad<T: Scalar> {
    pub delta_in: Option<Tensor<T>>,
    pub weight_grad: Option<Tensor<T>>,
    pub bias_grad: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub enum SublayerOp<T: Scalar> {
    /// `z = W a + b`, `W: out × in`.
    Affine { weight: Tensor<T>, bias: Tensor<T> },
    /// Valid convolution; `weight: filters × (channels·kh·kw)`.
    Conv2d {
        weight: Tensor<T>,
        bias: Tensor<T>,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
    },
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
}

impl<T: Scalar> SublayerOp<T> {
    /// Instantiates `spec` for a per-sample `input` shape. Weights are drawn
    /// uniform(−1/√fan_in, 1/√fan_in) from layer `layer`'s weight stream; biases start at zero.
    pub fn init(spec: OpSpec, input: &[usize], layer: usize, seed: u64) -> Result<Self> {
        spec.output_shape(input)?;
        let mut rng = Rng::new(seed, streams::weight(layer));
        let params = |rows: usize, cols: usize, rng: &mut Rng| -> Result<(Tensor<T>, Tensor<T>)> {
            let bound = 1.0 / (cols as f64).sqrt();
            let dist = FillDistribution::Uniform {
                lo: -bound,
                hi: bound,
            };
            let w = Tensor::random(rng, &[rows, cols], dist, format!("weight:L{layer}"))?;
            let b = Tensor::zeros(&[rows], format!("bias:L{layer}"))?;
            Ok((w, b))
        };
        Ok(match spec {
            OpSpec::Affine { out } => {
                let (weight, bias) = params(out, input[0], &mut rng)?;
                SublayerOp::Affine { weight, bias }
            }
            OpSpec::Conv2d {
                filters,
                kernel_h,
                kernel_w,
                stride,
            } => {
                let (weight, bias) = params(filters, input[0] * kernel_h * kernel_w, &mut rng)?;
                SublayerOp::Conv2d {
                    weight,
                    bias,
                    kernel_h,
                    kernel_w,
                    stride,
                }
            }
            OpSpec::Relu => SublayerOp::Relu,
            OpSpec::MaxPool { size, stride } => SublayerOp::MaxPool { size, stride },
            OpSpec::AvgPool { size, stride } => SublayerOp::AvgPool { size, stride },
            OpSpec::Flatten => SublayerOp::Flatten,
        })
    }

    pub fn spec(&self) -> OpSpec {
        match self {
            SublayerOp::Affine { weight, .. } => OpSpec::Affine {
                out: weight.shape()[0],
            },
            SublayerOp::Conv2d {
                weight,
                kernel_h,
                kernel_w,
                stride,
                ..
            } => OpSpec::Conv2d {
                filters: weight.shape()[0],
                kernel_h: *kernel_h,
                kernel_w: *kernel_w,
                stride: *stride,
            },
            SublayerOp::Relu => OpSpec::Relu,
            SublayerOp::MaxPool { size, stride } => OpSpec::MaxPool {
                size: *size,
                stride: *stride,
            },
            SublayerOp::AvgPool { size, stride } => OpSpec::AvgPool {
                size: *size,
                stride: *stride,
            },
            SublayerOp::Flatten => OpSpec::Flatten,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SublayerOp::Affine { .. } => "affine",
            SublayerOp::Conv2d { .. } => "conv2d",
            SublayerOp::Relu => "relu",
            SublayerOp::MaxPool { .. } => "maxpool",
            SublayerOp::AvgPool { .. } => "avgpool",
            SublayerOp::Flatten => "flatten",
        }
    }

    pub fn params(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match self {
            SublayerOp::Affine { weight, bias } | SublayerOp::Conv2d { weight, bias, .. } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match self {
            SublayerOp::Affine { weight, bias } | SublayerOp::Conv2d { weight, bias, .. } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    fn image_geometry(&self, input: &[usize]) -> Result<Geometry> {
        let (kh, kw, stride) = match *self {
            SublayerOp::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                ..
            } => (kernel_h, kernel_w, stride),
            SublayerOp::MaxPool { size, stride } | SublayerOp::AvgPool { size, stride } => {
                (size, size, stride)
            }
            _ => unreachable!("geometry of a non-spatial op"),
        };
        let per_sample = input.get(1..).unwrap_or(&[]);
        let mut g = image_geometry(per_sample, kh, kw, stride)
            .ok_or_else(|| Error::invalid(self.name(), format!("input shape {input:?} does not fit")))?;
        if let SublayerOp::Conv2d { weight, .. } = self {
            if weight.shape()[1] != g.patch_len() {
                return Err(Error::shape(self.name(), input, weight.shape()));
            }
        }
        g.channels = per_sample[0];
        Ok(g)
    }

    /// Output of an affine or conv op, reading the input by reference.
    fn parameterized_forward(&self, input: &Tensor<T>, layer: usize, counts: &mut OpCounts) -> Result<Tensor<T>> {
        match self {
            SublayerOp::Affine { weight, bias } => {
                if input.rank() != 2 || input.shape()[1] != weight.shape()[1] {
                    return Err(Error::shape("affine", input.shape(), weight.shape()));
                }
                let mut z = input.matmul_transpose_right(weight, activation_tag(layer, "z"))?;
                counts.forward_matmuls += 1;
                add_row_bias(z.data_mut(), bias.data());
                Ok(z)
            }
            SublayerOp::Conv2d { weight, bias, .. } => {
                let g = self.image_geometry(input.shape())?;
                let batch = input.rows();
                let patches = patch_matrix(input, &g, layer)?;
                let mut zmat = patches.matmul_transpose_right(weight, activation_tag(layer, "zmat"))?;
                counts.forward_matmuls += 1;
                drop(patches);
                add_row_bias(zmat.data_mut(), bias.data());
                let filters = weight.shape()[0];
                let hw = g.out_h() * g.out_w();
                Tensor::from_vec(
                    &[batch, filters, g.out_h(), g.out_w()],
                    conv::channels_first(zmat.data(), batch, filters, hw),
                    activation_tag(layer, "z"),
                )
            }
            _ => Err(Error::invalid(self.name(), "not a parameterized op")),
        }
    }

    /// Runs the op on a batch. With `cache`, records exactly what
    /// [`local_backward`](Self::local_backward) needs; without, nothing but
    /// the returned output survives.
    pub fn forward(
        &self,
        input: Tensor<T>,
        cache: Option<&mut ActivationCache<T>>,
        layer: usize,
        counts: &mut OpCounts,
    ) -> Result<Tensor<T>> {
        match self {
            SublayerOp::Affine { .. } | SublayerOp::Conv2d { .. } => {
                let z = self.parameterized_forward(&input, layer, counts)?;
                if let Some(c) = cache {
                    c.push(CacheEntry::Input(input));
                }
                Ok(z)
            }
            SublayerOp::Relu => match cache {
                Some(c) => {
                    let a = input.map(relu, activation_tag(layer, "a"))?;
                    c.push(CacheEntry::PreActivation(input));
                    Ok(a)
                }
                None => {
                    let mut a = input;
                    a.map_in_place(relu);
                    Ok(a)
                }
            },
            SublayerOp::MaxPool { .. } => {
                let g = self.image_geometry(input.shape())?;
                if input.len() > u32::MAX as usize {
                    return Err(Error::invalid("maxpool", "input too large for 32-bit indices"));
                }
                let (batch, planes) = (input.rows(), input.rows() * g.channels);
                let (vals, idx) = conv::max_pool(input.data(), planes, &g);
                let out = Tensor::from_vec(
                    &[batch, g.channels, g.out_h(), g.out_w()],
                    vals,
                    activation_tag(layer, "pool"),
                )?;
                if let Some(c) = cache {
                    c.push(CacheEntry::ArgMax {
                        indices: Buffer::from_vec(idx, activation_tag(layer, "argmax")),
                        input_shape: input.shape().to_vec(),
                    });
                }
                Ok(out)
            }
            SublayerOp::AvgPool { size, .. } => {
                let g = self.image_geometry(input.shape())?;
                let (batch, planes) = (input.rows(), input.rows() * g.channels);
                let scale = T::from_f64(1.0 / (size * size) as f64);
                let out = Tensor::from_vec(
                    &[batch, g.channels, g.out_h(), g.out_w()],
                    conv::avg_pool(input.data(), planes, &g, scale),
                    activation_tag(layer, "pool"),
                )?;
                if let Some(c) = cache {
                    c.push(CacheEntry::Shape(input.shape().to_vec()));
                }
                Ok(out)
            }
            SublayerOp::Flatten => {
                let shape = input.shape().to_vec();
                let flat = input.reshape(&[shape[0], shape[1..].iter().product()])?;
                if let Some(c) = cache {
                    c.push(CacheEntry::Shape(shape));
                }
                Ok(flat)
            }
        }
    }

    /// Consumes this op's cache record and maps the gradient at its output to
    /// the gradient at its input (plus parameter gradients, averaged over the
    /// batch through the loss).
    pub fn local_backward(
        &self,
        cache: &mut ActivationCache<T>,
        delta_out: Tensor<T>,
        route: InputRoute<'_, T>,
        layer: usize,
        counts: &mut OpCounts,
    ) -> Result<LocalGrad<T>> {
        let entry = cache.pop().ok_or(Error::MissingCache(self.name()))?;
        let missing = || Error::MissingCache(self.name());
        let only_delta = |d: Tensor<T>| LocalGrad {
            delta_in: Some(d),
            weight_grad: None,
            bias_grad: None,
        };
        match (self, entry) {
            (SublayerOp::Relu, CacheEntry::PreActivation(z)) => {
                if z.shape() != delta_out.shape() {
                    return Err(Error::shape("relu backward", z.shape(), delta_out.shape()));
                }
                let mut d = delta_out;
                for (dv, &zv) in d.data_mut().iter_mut().zip(z.data()) {
                    if zv <= T::zero() {
                        *dv = T::zero();
                    }
                }
                Ok(only_delta(d))
            }
            (SublayerOp::MaxPool { .. }, CacheEntry::ArgMax { indices, input_shape }) => {
                if delta_out.len() != indices.len() {
                    return Err(Error::shape("maxpool backward", &[indices.len()], delta_out.shape()));
                }
                let mut d = Tensor::zeros(&input_shape, activation_tag(layer, "delta"))?;
                let out = d.data_mut();
                for (&i, &g) in indices.as_slice().iter().zip(delta_out.data()) {
                    out[i as usize] = out[i as usize] + g;
                }
                Ok(only_delta(d))
            }
            (SublayerOp::AvgPool { size, .. }, CacheEntry::Shape(input_shape)) => {
                let g = self.image_geometry(&input_shape)?;
                let planes = input_shape[0] * g.channels;
                if delta_out.len() != planes * g.out_h() * g.out_w() {
                    return Err(Error::shape("avgpool backward", &input_shape, delta_out.shape()));
                }
                let scale = T::from_f64(1.0 / (size * size) as f64);
                let mut d = Tensor::zeros(&input_shape, activation_tag(layer, "delta"))?;
                conv::avg_pool_backward(delta_out.data(), planes, &g, scale, d.data_mut());
                Ok(only_delta(d))
            }
            (SublayerOp::Flatten, CacheEntry::Shape(input_shape)) => {
                Ok(only_delta(delta_out.reshape(&input_shape)?))
            }
            (SublayerOp::Affine { weight, .. }, CacheEntry::Input(x)) => {
                if delta_out.rank() != 2 || delta_out.shape() != [x.rows(), weight.shape()[0]] {
                    return Err(Error::shape("affine backward", x.shape(), delta_out.shape()));
                }
                let wg = delta_out.matmul_transpose_left(&x, format!("grad:L{layer}.W"))?;
                counts.backward_matmuls += 1;
                drop(x);
                let bg = column_sums(&delta_out, format!("grad:L{layer}.b"))?;
                let delta_in = input_delta(&delta_out, weight, route, layer, counts)?;
                Ok(LocalGrad {
                    delta_in,
                    weight_grad: Some(wg),
                    bias_grad: Some(bg),
                })
            }
            (SublayerOp::Conv2d { weight, .. }, CacheEntry::Input(x)) => {
                let g = self.image_geometry(x.shape())?;
                let (batch, filters) = (x.rows(), weight.shape()[0]);
                let hw = g.out_h() * g.out_w();
                if delta_out.shape() != [batch, filters, g.out_h(), g.out_w()] {
                    return Err(Error::shape("conv2d backward", x.shape(), delta_out.shape()));
                }
                let dmat = Tensor::from_vec(
                    &[batch * hw, filters],
                    conv::channels_last(delta_out.data(), batch, filters, hw),
                    activation_tag(layer, "dmat"),
                )?;
                drop(delta_out);
                let patches = patch_matrix(&x, &g, layer)?;
                let wg = dmat.matmul_transpose_left(&patches, format!("grad:L{layer}.W"))?;
                counts.backward_matmuls += 1;
                drop(patches);
                let bg = column_sums(&dmat, format!("grad:L{layer}.b"))?;
                let delta_in = match input_delta(&dmat, weight, route, layer, counts)? {
                    None => None,
                    Some(dpatch) => {
                        let mut d = Tensor::zeros(x.shape(), activation_tag(layer, "delta"))?;
                        conv::col2im(dpatch.data(), batch, &g, d.data_mut());
                        Some(d)
                    }
                };
                Ok(LocalGrad {
                    delta_in,
                    weight_grad: Some(wg),
                    bias_grad: Some(bg),
                })
            }
            _ => Err(missing()),
        }
    }
}

#[inline]
fn relu<T: Scalar>(v: T) -> T {
    if v < T::zero() {
        T::zero()
    } else {
        v
    }
}

fn add_row_bias<T: Scalar>(rows: &mut [T], bias: &[T]) {
    for row in rows.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

fn column_sums<T: Scalar>(m: &Tensor<T>, tag: String) -> Result<Tensor<T>> {
    let cols = m.shape()[1];
    let mut out = vec![T::zero(); cols];
    for row in m.data().chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::from_vec(&[cols], out, tag)
}

fn patch_matrix<T: Scalar>(x: &Tensor<T>, g: &Geometry, layer: usize) -> Result<Tensor<T>> {
    let batch = x.rows();
    let mut buf = Vec::new();
    conv::im2col(x.data(), batch, g, &mut buf);
    Tensor::from_vec(
        &[batch * g.out_h() * g.out_w(), g.patch_len()],
        buf,
        activation_tag(layer, "patches"),
    )
}

/// `delta · W` (backpropagation) or `delta · Rᵀ` (feedback alignment, `R` shaped like `Wᵀ`).
fn input_delta<T: Scalar>(
    delta: &Tensor<T>,
    weight: &Tensor<T>,
    route: InputRoute<'_, T>,
    layer: usize,
    counts: &mut OpCounts,
) -> Result<Option<Tensor<T>>> {
    let tag = activation_tag(layer, "delta");
    match route {
        InputRoute::Skip => Ok(None),
        InputRoute::Weights => {
            counts.backward_matmuls += 1;
            Ok(Some(delta.matmul(weight, tag)?))
        }
        InputRoute::Feedback(r) => {
            let expected = [weight.shape()[1], weight.shape()[0]];
            if r.shape() != expected {
                return Err(Error::Feedback {
                    mode: "FA",
                    reason: format!("matrix shape {:?} differs from Wᵀ shape {expected:?}", r.shape()),
                });
            }
            counts.feedback_projections += 1;
            Ok(Some(delta.matmul_transpose_right(r, tag)?))
        }
    }
}

/// A parameterized op followed by zero or more parameter-free ops.
#[derive(Clone, Debug)]
pub struct Layer<T: Scalar> {
    ops: Vec<SublayerOp<T>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

/// Parameter gradients of a layer plus the gradient at its input, when requested.
#[derive(Debug)]
pub struct LayerGrad<T: Scalar> {
    pub delta_in: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(ops: Vec<SublayerOp<T>>, input_shape: &[usize]) -> Result<Self> {
        let specs: Vec<OpSpec> = ops.iter().map(SublayerOp::spec).collect();
        let output_shape = check_layer(&specs, input_shape)?;
        let (w, _) = ops[0].params().expect("checked parameterized");
        let fan_in = match specs[0] {
            OpSpec::Conv2d {
                kernel_h, kernel_w, ..
            } => input_shape[0] * kernel_h * kernel_w,
            _ => input_shape[0],
        };
        if w.shape()[1] != fan_in {
            return Err(Error::shape("layer", input_shape, w.shape()));
        }
        Ok(Layer {
            ops,
            input_shape: input_shape.to_vec(),
            output_shape,
        })
    }

    /// Instantiates `specs` with freshly initialized parameters.
    pub fn build(specs: &[OpSpec], input_shape: &[usize], index: usize, seed: u64) -> Result<Self> {
        check_layer(specs, input_shape)?;
        let mut shape = input_shape.to_vec();
        let mut ops = Vec::with_capacity(specs.len());
        for &spec in specs {
            ops.push(SublayerOp::init(spec, &shape, index, seed)?);
            shape = spec.output_shape(&shape)?;
        }
        Self::new(ops, input_shape)
    }

    pub fn ops(&self) -> &[SublayerOp<T>] {
        &self.ops
    }

    pub fn specs(&self) -> Vec<OpSpec> {
        self.ops.iter().map(SublayerOp::spec).collect()
    }

    /// Number of sublayers.
    pub fn k(&self) -> usize {
        self.ops.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn weight(&self) -> &Tensor<T> {
        self.ops[0].params().expect("layer starts with a parameterized op").0
    }

    pub fn bias(&self) -> &Tensor<T> {
        self.ops[0].params().expect("layer starts with a parameterized op").1
    }

    pub fn params_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        self.ops[0].params_mut().expect("layer starts with a parameterized op")
    }

    pub fn forward(
        &self,
        index: usize,
        input: Tensor<T>,
        mut cache: Option<&mut ActivationCache<T>>,
        counts: &mut OpCounts,
    ) -> Result<Tensor<T>> {
        if input.shape().get(1..) != Some(&self.input_shape[..]) {
            return Err(Error::shape("layer input", input.shape(), &self.input_shape));
        }
        let mut x = input;
        for op in &self.ops {
            x = op.forward(x, cache.as_deref_mut(), index, counts)?;
        }
        Ok(x)
    }

    /// Cacheless forward that leaves `input` untouched.
    pub fn forward_borrowed(&self, index: usize, input: &Tensor<T>, counts: &mut OpCounts) -> Result<Tensor<T>> {
        if input.shape().get(1..) != Some(&self.input_shape[..]) {
            return Err(Error::shape("layer input", input.shape(), &self.input_shape));
        }
        let mut x = self.ops[0].parameterized_forward(input, index, counts)?;
        for op in &self.ops[1..] {
            x = op.forward(x, None, index, counts)?;
        }
        Ok(x)
    }

    /// Local backward through every sublayer, last to first. `route` decides
    /// whether and how the gradient at the layer input is formed.
    pub fn backward(
        &self,
        index: usize,
        cache: &mut ActivationCache<T>,
        delta_out: Tensor<T>,
        route: InputRoute<'_, T>,
        counts: &mut OpCounts,
    ) -> Result<LayerGrad<T>> {
        let mut delta = delta_out;
        for op in self.ops[1..].iter().rev() {
            let g = op.local_backward(cache, delta, InputRoute::Weights, index, counts)?;
            delta = g.delta_in.ok_or(Error::MissingCache(op.name()))?;
        }
        let g = self.ops[0].local_backward(cache, delta, route, index, counts)?;
        let missing = || Error::MissingCache(self.ops[0].name());
        Ok(LayerGrad {
            delta_in: g.delta_in,
            weight: g.weight_grad.ok_or_else(missing)?,
            bias: g.bias_grad.ok_or_else(missing)?,
        })
    }
}

pub(crate) fn check_layer(specs: &[OpSpec], input_shape: &[usize]) -> Result<Vec<usize>> {
    match specs.split_first() {
        Some((first, rest)) if first.is_parameterized() && !rest.iter().any(OpSpec::is_parameterized) => {}
        _ => {
            return Err(Error::invalid(
                "layer",
                "a layer is exactly one affine/conv op followed by parameter-free ops",
            ))
        }
    }
    let mut shape = input_shape.to_vec();
    for spec in specs {
        shape = spec.output_shape(&shape)?;
    }
    Ok(shape)
}
