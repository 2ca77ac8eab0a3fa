//! Layer and network descriptions plus the shape arithmetic shared by the
//! forward pass, parameter counting and receptive-field analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    Floor,
    Ceil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Convolution,
    MaxPool,
    Dense,
    Dropout,
    Flatten,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Convolution {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        activation: Activation,
    },
    #[serde(rename = "maxpool")]
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
        rounding: Rounding,
    },
    Dense {
        units: usize,
        activation: Activation,
    },
    Dropout {
        rate: f32,
    },
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn conv(filters: usize, k: usize, padding: Padding, activation: Activation) -> Self {
        LayerSpec::Convolution {
            filters,
            kernel: (k, k),
            stride: (1, 1),
            padding,
            activation,
        }
    }

    pub fn maxpool(k: usize, s: usize, rounding: Rounding) -> Self {
        LayerSpec::MaxPool {
            kernel: (k, k),
            stride: (s, s),
            rounding,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Convolution { .. } => LayerKind::Convolution,
            LayerSpec::MaxPool { .. } => LayerKind::MaxPool,
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::Dropout { .. } => LayerKind::Dropout,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Softmax => LayerKind::Softmax,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Convolution {
                filters,
                kernel,
                stride,
                ..
            } => {
                if filters == 0 || kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0
                {
                    return Err(Error::Spec(
                        "convolution needs positive filters, kernel and stride".into(),
                    ));
                }
            }
            LayerSpec::MaxPool { kernel, stride, .. } => {
                if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                    return Err(Error::Spec("pooling needs positive kernel and stride".into()));
                }
            }
            LayerSpec::Dense { units, .. } => {
                if units == 0 {
                    return Err(Error::Spec("dense layer needs at least one unit".into()));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Spec(format!("dropout rate {rate} outside [0,1)")));
                }
            }
            LayerSpec::Flatten | LayerSpec::Softmax => {}
        }
        Ok(())
    }
}

/// Output extent and leading padding of a windowed op along one axis.
///
/// `Same`/`Ceil` follow the usual framework rule: `out = ceil(n / s)` with the
/// total padding split so the smaller half goes first.
pub fn window_geometry(n: usize, k: usize, s: usize, pad_to_cover: bool) -> Result<(usize, usize)> {
    if pad_to_cover {
        if n == 0 {
            return Err(Error::Dimension("empty input extent".into()));
        }
        let out = n.div_ceil(s);
        let total = ((out - 1) * s + k).saturating_sub(n);
        Ok((out, total / 2))
    } else {
        if k > n {
            return Err(Error::Dimension(format!(
                "window of {k} larger than input extent {n}"
            )));
        }
        Ok(((n - k) / s + 1, 0))
    }
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Image { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Image { h, w, c } => h * w * c,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Image { h, w, c } => vec![h, w, c],
            Shape::Flat(n) => vec![n],
        }
    }
}

/// Per-layer geometry resolved for a concrete input shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedLayer {
    pub input: Shape,
    pub output: Shape,
    /// Leading (top, left) padding for windowed layers.
    pub pad: (usize, usize),
}

pub fn resolve_layer(layer: &LayerSpec, input: Shape) -> Result<ResolvedLayer> {
    let (output, pad) = match (*layer, input) {
        (
            LayerSpec::Convolution {
                filters,
                kernel,
                stride,
                padding,
                ..
            },
            Shape::Image { h, w, .. },
        ) => {
            let same = padding == Padding::Same;
            let (oh, ph) = window_geometry(h, kernel.0, stride.0, same)?;
            let (ow, pw) = window_geometry(w, kernel.1, stride.1, same)?;
            (
                Shape::Image {
                    h: oh,
                    w: ow,
                    c: filters,
                },
                (ph, pw),
            )
        }
        (
            LayerSpec::MaxPool {
                kernel,
                stride,
                rounding,
            },
            Shape::Image { h, w, c },
        ) => {
            let ceil = rounding == Rounding::Ceil;
            let (oh, ph) = window_geometry(h, kernel.0, stride.0, ceil)?;
            let (ow, pw) = window_geometry(w, kernel.1, stride.1, ceil)?;
            if ph >= kernel.0 || pw >= kernel.1 {
                return Err(Error::Dimension("pooling window would be empty".into()));
            }
            (Shape::Image { h: oh, w: ow, c }, (ph, pw))
        }
        (LayerSpec::Dense { units, .. }, Shape::Flat(_)) => (Shape::Flat(units), (0, 0)),
        (LayerSpec::Dense { .. }, Shape::Image { .. }) => {
            return Err(Error::Spec("dense layer needs a flattened input".into()))
        }
        (LayerSpec::Flatten, s) => (Shape::Flat(s.len()), (0, 0)),
        (LayerSpec::Dropout { .. } | LayerSpec::Softmax, s) => (s, (0, 0)),
        (_, Shape::Flat(_)) => {
            return Err(Error::Spec("windowed layer applied to a flat input".into()))
        }
    };
    Ok(ResolvedLayer { input, output, pad })
}

/// Ordered layer stack with its input contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    /// Fixed input extent; `None` leaves height/width free (fully convolutional).
    pub input_size: Option<(usize, usize)>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_channels: usize, input_size: Option<(usize, usize)>, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            input_channels,
            input_size,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Spec("input channel count must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        let needs_size = self
            .layers
            .iter()
            .any(|l| matches!(l.kind(), LayerKind::Dense | LayerKind::Flatten));
        if needs_size && self.input_size.is_none() {
            return Err(Error::Spec(
                "networks with dense/flatten layers need a fixed input size".into(),
            ));
        }
        if let Some((h, w)) = self.input_size {
            self.resolve(h, w)?;
        }
        Ok(())
    }

    /// Resolve every layer's geometry for an `h×w` input.
    pub fn resolve(&self, h: usize, w: usize) -> Result<Vec<ResolvedLayer>> {
        if let Some(fixed) = self.input_size {
            if fixed != (h, w) {
                return Err(Error::Dimension(format!(
                    "network expects {}x{} input, got {h}x{w}",
                    fixed.0, fixed.1
                )));
            }
        }
        let mut shape = Shape::Image {
            h,
            w,
            c: self.input_channels,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let r = resolve_layer(layer, shape)?;
            shape = r.output;
            out.push(r);
        }
        Ok(out)
    }

    /// Shape-resolution input used for parameter shapes: the fixed size, or
    /// any extent large enough for the conv stack when the net is fully convolutional.
    fn reference_resolution(&self) -> Result<Vec<ResolvedLayer>> {
        match self.input_size {
            Some((h, w)) => self.resolve(h, w),
            None => {
                // Channel chaining does not depend on extent; grow until valid.
                let mut n = 1;
                loop {
                    match self.resolve(n, n) {
                        Ok(r) => return Ok(r),
                        Err(Error::Dimension(_)) if n < 1 << 16 => n *= 2,
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }

    /// Shapes of the trainable tensors of every layer (kernel then bias).
    pub fn param_shapes(&self) -> Result<Vec<Vec<Vec<usize>>>> {
        let resolved = self.reference_resolution()?;
        Ok(self
            .layers
            .iter()
            .zip(&resolved)
            .map(|(layer, r)| match *layer {
                LayerSpec::Convolution {
                    filters, kernel, ..
                } => {
                    let cin = match r.input {
                        Shape::Image { c, .. } => c,
                        Shape::Flat(_) => unreachable!("resolved conv has image input"),
                    };
                    vec![vec![kernel.0, kernel.1, cin, filters], vec![filters]]
                }
                LayerSpec::Dense { units, .. } => vec![vec![r.input.len(), units], vec![units]],
                _ => Vec::new(),
            })
            .collect())
    }

    pub fn layer_param_counts(&self) -> Result<Vec<usize>> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|ts| ts.iter().map(|s| s.iter().product::<usize>()).sum())
            .collect())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layer_param_counts()?.iter().sum())
    }

    pub fn output_shape(&self, h: usize, w: usize) -> Result<Shape> {
        Ok(self
            .resolve(h, w)?
            .last()
            .map(|r| r.output)
            .unwrap_or(Shape::Image {
                h,
                w,
                c: self.input_channels,
            }))
    }

    /// Whether the network output is a probability distribution.
    pub fn ends_in_softmax(&self) -> bool {
        match self.layers.last() {
            Some(LayerSpec::Softmax) => true,
            Some(LayerSpec::Convolution { activation, .. }) | Some(LayerSpec::Dense { activation, .. }) => {
                *activation == Activation::Softmax
            }
            _ => false,
        }
    }
}
