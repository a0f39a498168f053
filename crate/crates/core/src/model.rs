//! Sequential models: a list of layers plus an output loss.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layers::loss::LossKind;
use crate::layers::{check_layer, Layer, OpCounts, OpSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Declarative description of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Vec<OpSpec>>,
    pub loss: LossKind,
}

const CLASSES: usize = 10;

fn conv(filters: usize, k: usize) -> OpSpec {
    OpSpec::Conv2d {
        filters,
        kernel_h: k,
        kernel_w: k,
        stride: 1,
    }
}

const MAX2: OpSpec = OpSpec::MaxPool { size: 2, stride: 2 };
const AVG2: OpSpec = OpSpec::AvgPool { size: 2, stride: 2 };

impl ModelSpec {
    pub const NAMES: [&'static str; 5] = ["mnist-fc3", "mnist-cnn", "cifar-cnn2", "cifar-cnn3", "fc50"];

    /// Fully connected ReLU stack: one layer per hidden width, then a linear
    /// output layer, trained with softmax cross-entropy.
    pub fn fc(inputs: usize, hidden: &[usize], outputs: usize) -> Self {
        let mut layers: Vec<Vec<OpSpec>> = hidden
            .iter()
            .map(|&out| vec![OpSpec::Affine { out }, OpSpec::Relu])
            .collect();
        layers.push(vec![OpSpec::Affine { out: outputs }]);
        ModelSpec {
            input_shape: vec![inputs],
            layers,
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }

    /// 784 → 100 → 30 → 10.
    pub fn mnist_fc3() -> Self {
        Self::fc(784, &[100, 30], CLASSES)
    }

    /// `layers` affine layers of `width` units on MNIST-sized vectors, the
    /// last of which is the 10-way output.
    pub fn fc_deep(layers: usize, width: usize) -> Result<Self> {
        if layers == 0 || width == 0 {
            return Err(Error::invalid("fc50", "layers and width must be positive"));
        }
        Ok(Self::fc(784, &vec![width; layers - 1], CLASSES))
    }

    /// Two conv blocks (20 and 50 filters of 5×5, each followed by 2×2 max
    /// pooling) and two affine layers (500, 10).
    pub fn two_conv(input_shape: &[usize]) -> Self {
        ModelSpec {
            input_shape: input_shape.to_vec(),
            layers: vec![
                vec![conv(20, 5), OpSpec::Relu, MAX2],
                vec![conv(50, 5), OpSpec::Relu, MAX2, OpSpec::Flatten],
                vec![OpSpec::Affine { out: 500 }, OpSpec::Relu],
                vec![OpSpec::Affine { out: CLASSES }],
            ],
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }

    pub fn mnist_cnn() -> Self {
        Self::two_conv(&[1, 28, 28])
    }

    pub fn cifar_cnn2() -> Self {
        Self::two_conv(&[3, 32, 32])
    }

    /// Convs of 32 (5×5), 64 (5×5) and 64 (3×3) filters followed by max,
    /// average and average 2×2 pooling, then affine layers of 128 and 10.
    pub fn cifar_cnn3() -> Self {
        ModelSpec {
            input_shape: vec![3, 32, 32],
            layers: vec![
                vec![conv(32, 5), OpSpec::Relu, MAX2],
                vec![conv(64, 5), OpSpec::Relu, AVG2],
                vec![conv(64, 3), OpSpec::Relu, AVG2, OpSpec::Flatten],
                vec![OpSpec::Affine { out: 128 }, OpSpec::Relu],
                vec![OpSpec::Affine { out: CLASSES }],
            ],
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }

    /// Looks up a named architecture. `fc50` takes its depth and width from
    /// the arguments; the others ignore them.
    pub fn named(name: &str, layers: usize, width: usize) -> Result<Self> {
        match name {
            "mnist-fc3" => Ok(Self::mnist_fc3()),
            "mnist-cnn" => Ok(Self::mnist_cnn()),
            "cifar-cnn2" => Ok(Self::cifar_cnn2()),
            "cifar-cnn3" => Ok(Self::cifar_cnn3()),
            "fc50" => Self::fc_deep(layers, width),
            _ => Err(Error::invalid("model", format!("unknown model `{name}`"))),
        }
    }

    /// Per-sample output shape after every layer; fails if the layers do not chain.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = check_layer(layer, &shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_len(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        let last = shapes.last().ok_or_else(|| Error::invalid("model", "no layers"))?;
        Ok(last.iter().product())
    }

    /// Parses the plain-text model format:
    ///
    /// ```text
    /// # comment
    /// input 1x28x28
    /// loss softmax_ce
    /// layer conv:20x5x5/1 relu maxpool:2/2 flatten
    /// layer affine:10
    /// ```
    ///
    /// Each `layer` line lists one parameterized op and its trailing ops.
    pub fn parse(text: &str) -> Result<Self> {
        let mut input = None;
        let mut loss = LossKind::SoftmaxCrossEntropy;
        let mut layers = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse { line: n + 1, reason };
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match key {
                "input" => {
                    let dims: Option<Vec<usize>> = rest.split('x').map(|d| d.trim().parse().ok()).collect();
                    match dims {
                        Some(d) if !d.is_empty() && d.iter().all(|&v| v > 0) => input = Some(d),
                        _ => return Err(err(format!("bad input shape `{rest}`"))),
                    }
                }
                "loss" => loss = LossKind::parse(rest).ok_or_else(|| err(format!("unknown loss `{rest}`")))?,
                "layer" => {
                    let ops: Option<Vec<OpSpec>> = rest.split_whitespace().map(OpSpec::parse).collect();
                    match ops {
                        Some(ops) if !ops.is_empty() => layers.push(ops),
                        _ => return Err(err(format!("bad layer `{rest}`"))),
                    }
                }
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }
        let spec = ModelSpec {
            input_shape: input.ok_or(Error::Parse {
                line: 0,
                reason: "missing `input` line".into(),
            })?,
            layers,
            loss,
        };
        spec.layer_shapes()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.input_shape.iter().map(usize::to_string).collect();
        let mut s = format!("input {}\nloss {}\n", dims.join("x"), self.loss.name());
        for layer in &self.layers {
            let ops: Vec<String> = layer.iter().map(OpSpec::to_string).collect();
            let _ = writeln!(s, "layer {}", ops.join(" "));
        }
        s
    }
}

/// A built model with parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    spec: ModelSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    /// Layer `i` draws its parameters from its own stream of `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::invalid("model", "no layers"));
        }
        let mut shape = spec.input_shape.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ops) in spec.layers.iter().enumerate() {
            let layer = Layer::build(ops, &shape, i, seed)?;
            shape = layer.output_shape().to_vec();
            layers.push(layer);
        }
        Ok(Model {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Layer<T>>, loss: LossKind) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::invalid("model", "no layers"))?;
        let input_shape = first.input_shape().to_vec();
        for pair in layers.windows(2) {
            if pair[0].output_shape() != pair[1].input_shape() {
                return Err(Error::shape("model", pair[0].output_shape(), pair[1].input_shape()));
            }
        }
        Ok(Model {
            spec: ModelSpec {
                input_shape,
                layers: layers.iter().map(Layer::specs).collect(),
                loss,
            },
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn loss(&self) -> LossKind {
        self.spec.loss
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().expect("nonempty").output_len()
    }

    /// Cacheless forward pass. Only the running activation is ever live.
    pub fn forward(&self, x: &Tensor<T>, counts: &mut OpCounts) -> Result<Tensor<T>> {
        let mut a = self.layers[0].forward_borrowed(0, x, counts)?;
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            a = layer.forward(i, a, None, counts)?;
        }
        Ok(a)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight().len() + l.bias().len()).sum()
    }

    /// True when every parameter matches bit for bit.
    pub fn bit_eq(&self, other: &Model<T>) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight().bit_eq(b.weight()) && a.bias().bit_eq(b.bias()))
    }

    /// Largest elementwise `|a − b| / max(|a|, |b|)` over all parameters
    /// (0 where both are 0).
    pub fn max_relative_difference(&self, other: &Model<T>) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::invalid("compare", "models differ in depth"));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in [(a.weight(), b.weight()), (a.bias(), b.bias())] {
                if x.shape() != y.shape() {
                    return Err(Error::shape("compare", x.shape(), y.shape()));
                }
                for (&p, &q) in x.data().iter().zip(y.data()) {
                    let (p, q) = (p.as_f64(), q.as_f64());
                    let scale = p.abs().max(q.abs());
                    if scale > 0.0 {
                        worst = worst.max((p - q).abs() / scale);
                    } else if p != q {
                        worst = f64::INFINITY;
                    }
                }
            }
        }
        Ok(worst)
    }
}
