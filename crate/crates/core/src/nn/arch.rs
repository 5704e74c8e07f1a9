//! Layer specifications and shape inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Dense {
        input: usize,
        output: usize,
    },
    Relu,
    Dropout {
        p: f32,
    },
    Flatten,
}

impl Layer {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Layer::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn dense(input: usize, output: usize) -> Self {
        Layer::Dense { input, output }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Dense { .. })
    }
}

/// Activation shape of a single sample between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

/// A validated feed-forward architecture.
///
/// The last layer must be the output `Dense`. The penultimate layer is the
/// `Dense` immediately before it (if any); its weight matrix is the
/// representation compared by the similarity-based defenses.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    input: [usize; 3],
    layers: Vec<Layer>,
    /// Output shape of each layer.
    shapes: Vec<Shape>,
    /// Parameter-layer name for each layer (`None` for parameter-free layers).
    names: Vec<Option<String>>,
}

impl Architecture {
    pub fn new(input: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        if input.contains(&0) {
            return Err(Error::Shape(format!("zero-sized input shape {input:?}")));
        }
        let mut cur = Shape::Spatial {
            c: input[0],
            h: input[1],
            w: input[2],
        };
        let mut shapes = Vec::with_capacity(layers.len());
        let mut names = Vec::with_capacity(layers.len());
        let (mut n_conv, mut n_fc) = (0, 0);
        for (i, layer) in layers.iter().enumerate() {
            cur = match (*layer, cur) {
                (
                    Layer::Conv2d {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        pad,
                    },
                    Shape::Spatial { c, h, w },
                ) => {
                    if in_ch != c || out_ch == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv2d({in_ch}->{out_ch}, k={kernel}, s={stride}) on input with {c} channels"
                        )));
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(Error::Shape(format!(
                            "layer {i}: kernel {kernel} larger than padded input {h}x{w}"
                        )));
                    }
                    n_conv += 1;
                    names.push(Some(format!("conv2d_{n_conv}")));
                    Shape::Spatial {
                        c: out_ch,
                        h: (h + 2 * pad - kernel) / stride + 1,
                        w: (w + 2 * pad - kernel) / stride + 1,
                    }
                }
                (Layer::MaxPool2d { kernel, stride }, Shape::Spatial { c, h, w }) => {
                    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                        return Err(Error::Shape(format!(
                            "layer {i}: maxpool(k={kernel}, s={stride}) on {h}x{w}"
                        )));
                    }
                    names.push(None);
                    Shape::Spatial {
                        c,
                        h: (h - kernel) / stride + 1,
                        w: (w - kernel) / stride + 1,
                    }
                }
                (Layer::Dense { input, output }, Shape::Flat(n)) => {
                    if input != n || output == 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: dense({input}->{output}) on flat input of size {n}"
                        )));
                    }
                    n_fc += 1;
                    names.push(Some(format!("fc_{n_fc}")));
                    Shape::Flat(output)
                }
                (Layer::Flatten, s) => {
                    names.push(None);
                    Shape::Flat(s.size())
                }
                (Layer::Relu, s) => {
                    names.push(None);
                    s
                }
                (Layer::Dropout { p }, s) => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(Error::Shape(format!("layer {i}: dropout p={p} not in [0,1)")));
                    }
                    names.push(None);
                    s
                }
                (l, s) => {
                    return Err(Error::Shape(format!(
                        "layer {i}: {l:?} cannot consume activation {s:?}"
                    )));
                }
            };
            shapes.push(cur);
        }
        match layers.last() {
            Some(Layer::Dense { .. }) => {}
            _ => {
                return Err(Error::Shape(
                    "architecture must end with the output dense layer".into(),
                ))
            }
        }
        Ok(Self {
            input,
            layers,
            shapes,
            names,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn input_size(&self) -> usize {
        self.input.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn output_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub(crate) fn input_shape_of(&self, layer: usize) -> Shape {
        if layer == 0 {
            Shape::Spatial {
                c: self.input[0],
                h: self.input[1],
                w: self.input[2],
            }
        } else {
            self.shapes[layer - 1]
        }
    }

    pub fn n_classes(&self) -> usize {
        self.shapes.last().map(Shape::size).unwrap_or(0)
    }

    /// Names of parameterized layers in order (`conv2d_1`, ..., `fc_1`, ...).
    pub fn param_layer_names(&self) -> Vec<String> {
        self.names.iter().flatten().cloned().collect()
    }

    /// Parameter-layer index (position in `ModelParams::layers`) of the
    /// penultimate dense layer, or `None` when there are fewer than two.
    pub fn penultimate_index(&self) -> Option<usize> {
        let dense: Vec<usize> = self
            .layers
            .iter()
            .filter(|l| l.has_params())
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Dense { .. }))
            .map(|(pi, _)| pi)
            .collect();
        (dense.len() >= 2).then(|| dense[dense.len() - 2])
    }

    pub fn penultimate_name(&self) -> Option<String> {
        self.penultimate_index()
            .map(|pi| self.param_layer_names()[pi].clone())
    }

    /// Four-layer CNN for 28x28 grayscale input: two 5x5 convolutions, then
    /// `fc_1` (25600 -> 128) and `fc_2` (128 -> 10), with 0.25/0.5 dropout.
    pub fn fmnist_cnn() -> Self {
        Self::fmnist_cnn_with_width(64)
    }

    /// [`Architecture::fmnist_cnn`] with `channels` filters per convolution
    /// instead of 64. The dense head keeps 128 units.
    pub fn fmnist_cnn_with_width(channels: usize) -> Self {
        Self::new(
            [1, 28, 28],
            vec![
                Layer::conv(1, channels, 5, 1, 0),
                Layer::Relu,
                Layer::conv(channels, channels, 5, 1, 0),
                Layer::Relu,
                Layer::Dropout { p: 0.25 },
                Layer::Flatten,
                Layer::dense(channels * 20 * 20, 128),
                Layer::Dropout { p: 0.5 },
                Layer::dense(128, 10),
            ],
        )
        .expect("fmnist cnn composes")
    }

    /// Five-layer CNN for 32x32 RGB input (three conv + max-pool blocks).
    pub fn cifar10_cnn() -> Self {
        Self::new(
            [3, 32, 32],
            vec![
                Layer::conv(3, 64, 3, 1, 0),
                Layer::Relu,
                Layer::MaxPool2d { kernel: 2, stride: 2 },
                Layer::conv(64, 64, 3, 1, 0),
                Layer::Relu,
                Layer::MaxPool2d { kernel: 2, stride: 2 },
                Layer::conv(64, 64, 3, 1, 0),
                Layer::Relu,
                Layer::MaxPool2d { kernel: 2, stride: 2 },
                Layer::Flatten,
                Layer::Dropout { p: 0.5 },
                Layer::dense(256, 128),
                Layer::dense(128, 10),
            ],
        )
        .expect("cifar10 cnn composes")
    }

    /// LeNet for 32x32 RGB input with 100 classes. The flatten width is
    /// whatever the convolution stack produces (16x7x7).
    pub fn lenet_cifar100() -> Self {
        Self::new(
            [3, 32, 32],
            vec![
                Layer::conv(3, 6, 5, 1, 0),
                Layer::Relu,
                Layer::MaxPool2d { kernel: 2, stride: 2 },
                Layer::conv(6, 16, 5, 1, 2),
                Layer::Relu,
                Layer::MaxPool2d { kernel: 2, stride: 2 },
                Layer::Flatten,
                Layer::dense(16 * 7 * 7, 120),
                Layer::Relu,
                Layer::dense(120, 84),
                Layer::Relu,
                Layer::dense(84, 100),
            ],
        )
        .expect("lenet composes")
    }

    /// Flatten -> (Dense -> ReLU)* -> Dense.
    pub fn mlp(input: [usize; 3], hidden: &[usize], n_classes: usize) -> Result<Self> {
        let mut layers = vec![Layer::Flatten];
        let mut width = input.iter().product();
        for &h in hidden {
            layers.push(Layer::dense(width, h));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::dense(width, n_classes));
        Self::new(input, layers)
    }
}
