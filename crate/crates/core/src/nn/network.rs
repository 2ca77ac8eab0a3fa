use rand::{Rng, RngCore};

use super::ops::{self, ConvGeom, PoolGeom};
use super::spec::{Activation, LayerSpec, NetworkSpec, ResolvedLayer, Shape};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Trainable parameters, one tensor list per layer (kernel then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<T = f32> {
    pub layers: Vec<Vec<Tensor<T>>>,
    generation: u64,
}

impl<T: Scalar> WeightSet<T> {
    pub fn from_layers(layers: Vec<Vec<Tensor<T>>>) -> Self {
        WeightSet {
            layers,
            generation: 0,
        }
    }

    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let layers = spec
            .param_shapes()?
            .iter()
            .map(|ts| ts.iter().map(|s| Tensor::zeros(s)).collect())
            .collect();
        Ok(Self::from_layers(layers))
    }

    /// Glorot-uniform kernels, zero biases.
    pub fn glorot(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut ws = Self::zeros(spec)?;
        for tensors in ws.layers.iter_mut() {
            if let Some(kernel) = tensors.first_mut() {
                let shape = kernel.shape().to_vec();
                let (fan_in, fan_out) = match shape.len() {
                    4 => {
                        let rf = shape[0] * shape[1];
                        (rf * shape[2], rf * shape[3])
                    }
                    _ => (shape[0], shape[1]),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in kernel.data_mut() {
                    *v = T::from_f64(rng.random_range(-limit..limit));
                }
            }
        }
        Ok(ws)
    }

    pub fn check_matches(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "weights cover {} layers, spec has {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (i, (want, have)) in shapes.iter().zip(&self.layers).enumerate() {
            let have: Vec<&[usize]> = have.iter().map(|t| t.shape()).collect();
            if want.len() != have.len() || want.iter().zip(&have).any(|(a, b)| a.as_slice() != *b) {
                return Err(Error::Dimension(format!(
                    "layer {i}: expected parameter shapes {want:?}, found {have:?}"
                )));
            }
        }
        Ok(())
    }

    /// Incremented on every in-place update; traces remember the value they saw.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub(crate) fn bump_generation(&mut self) {
        self.generation += 1;
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flatten().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        WeightSet {
            layers: self
                .layers
                .iter()
                .map(|ts| ts.iter().map(|t| t.cast()).collect())
                .collect(),
            generation: self.generation,
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flatten()
    }
}

/// Parameter gradients, shaped like the [`WeightSet`] they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(weights: &WeightSet<T>) -> Self {
        Gradients {
            layers: weights
                .layers
                .iter()
                .map(|ts| ts.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    Argmax(Vec<u32>),
    Mask(Vec<T>),
}

/// Everything a forward pass keeps for the matching backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T = f32> {
    generation: u64,
    batch: usize,
    resolved: Vec<ResolvedLayer>,
    input: Tensor<T>,
    outputs: Vec<Vec<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Final activations, shaped `[batch, ...output dims]`.
    pub fn output(&self) -> Tensor<T> {
        let shape = self.output_shape();
        let data = self
            .outputs
            .last()
            .cloned()
            .unwrap_or_else(|| self.input.data().to_vec());
        Tensor::from_vec(&shape, data).expect("trace output shape")
    }

    pub fn output_data(&self) -> &[T] {
        self.outputs.last().map(|v| v.as_slice()).unwrap_or(self.input.data())
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.batch];
        match self.resolved.last() {
            Some(r) => shape.extend(r.output.dims()),
            None => shape.extend(&self.input.shape()[1..]),
        }
        shape
    }
}

fn conv_geom(layer: &LayerSpec, r: &ResolvedLayer) -> ConvGeom {
    let (LayerSpec::Convolution { kernel, stride, .. }, Shape::Image { h, w, c }, Shape::Image { h: oh, w: ow, c: cout }) =
        (*layer, r.input, r.output)
    else {
        unreachable!("conv geometry requested for non-conv layer")
    };
    ConvGeom {
        h,
        w,
        cin: c,
        oh,
        ow,
        cout,
        kh: kernel.0,
        kw: kernel.1,
        sh: stride.0,
        sw: stride.1,
        ph: r.pad.0,
        pw: r.pad.1,
    }
}

fn pool_geom(layer: &LayerSpec, r: &ResolvedLayer) -> PoolGeom {
    let (LayerSpec::MaxPool { kernel, stride, .. }, Shape::Image { h, w, c }, Shape::Image { h: oh, w: ow, .. }) =
        (*layer, r.input, r.output)
    else {
        unreachable!("pool geometry requested for non-pool layer")
    };
    PoolGeom {
        h,
        w,
        c,
        oh,
        ow,
        kh: kernel.0,
        kw: kernel.1,
        sh: stride.0,
        sw: stride.1,
        ph: r.pad.0,
        pw: r.pad.1,
    }
}

fn last_dim(shape: Shape) -> usize {
    match shape {
        Shape::Image { c, .. } => c,
        Shape::Flat(n) => n,
    }
}

fn input_extent<T: Scalar>(spec: &NetworkSpec, batch: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = batch.shape();
    if s.len() != 4 || s[3] != spec.input_channels {
        return Err(Error::Dimension(format!(
            "expected a [batch, h, w, {}] input, got {:?}",
            spec.input_channels, s
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// Run the network on a `[batch, h, w, c]` tensor.
///
/// Eval mode is deterministic and ignores `rng`. Train mode draws inverted
/// dropout masks from `rng`, so it is deterministic given the seed.
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    weights: &WeightSet<T>,
    batch: &Tensor<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Trace<T>> {
    let (n, h, w) = input_extent(spec, batch)?;
    let resolved = spec.resolve(h, w)?;
    weights.check_matches(spec)?;
    let mut outputs: Vec<Vec<T>> = Vec::with_capacity(spec.layers.len());
    let mut aux = Vec::with_capacity(spec.layers.len());
    for (i, (layer, r)) in spec.layers.iter().zip(&resolved).enumerate() {
        let x: &[T] = if i == 0 { batch.data() } else { &outputs[i - 1] };
        let params = &weights.layers[i];
        let (y, a) = match *layer {
            LayerSpec::Convolution { activation, .. } => {
                let g = conv_geom(layer, r);
                (
                    ops::conv_forward(x, n, &g, params[0].data(), params[1].data(), activation),
                    Aux::None,
                )
            }
            LayerSpec::MaxPool { .. } => {
                let g = pool_geom(layer, r);
                let (y, arg) = ops::maxpool_forward(x, n, &g);
                (y, Aux::Argmax(arg))
            }
            LayerSpec::Dense { activation, .. } => (
                ops::dense_forward(x, n, r.input.len(), params[0].data(), params[1].data(), activation),
                Aux::None,
            ),
            LayerSpec::Dropout { rate } => match mode {
                Mode::Eval => (x.to_vec(), Aux::None),
                Mode::Train => {
                    let keep = T::from_f64(1.0 / (1.0 - rate as f64));
                    let mask: Vec<T> = (0..x.len())
                        .map(|_| {
                            if rng.random::<f32>() < rate {
                                T::zero()
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let y = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                    (y, Aux::Mask(mask))
                }
            },
            LayerSpec::Flatten => (x.to_vec(), Aux::None),
            LayerSpec::Softmax => {
                let mut y = x.to_vec();
                ops::softmax(&mut y, last_dim(r.output));
                (y, Aux::None)
            }
        };
        outputs.push(y);
        aux.push(a);
    }
    Ok(Trace {
        generation: weights.generation(),
        batch: n,
        resolved,
        input: batch.clone(),
        outputs,
        aux,
    })
}

/// Loss and parameter gradients for a softmax-terminated network trained with
/// categorical cross-entropy. `targets` are one-hot, shaped like the output.
/// The logit gradient is the fused `(p - y) / groups`.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    weights: &WeightSet<T>,
    trace: &Trace<T>,
    targets: &Tensor<T>,
) -> Result<(T, Gradients<T>)> {
    if !spec.ends_in_softmax() {
        return Err(Error::Usage(
            "cross-entropy backward needs a softmax-terminated network".into(),
        ));
    }
    let pred = trace.output_data();
    if targets.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "targets hold {} values, output has {}",
            targets.len(),
            pred.len()
        )));
    }
    let classes = trace.resolved.last().map(|r| last_dim(r.output)).unwrap_or(1);
    let groups = pred.len() / classes;
    let loss = ops::cross_entropy(pred, targets.data(), classes);
    let scale = T::one() / T::from_f64(groups as f64);
    let dlogits: Vec<T> = pred
        .iter()
        .zip(targets.data())
        .map(|(&p, &y)| (p - y) * scale)
        .collect();
    let grads = propagate(spec, weights, trace, dlogits, true)?;
    Ok((loss, grads))
}

/// Parameter gradients given an arbitrary gradient w.r.t. the final output.
pub fn backward_from_output_grad<T: Scalar>(
    spec: &NetworkSpec,
    weights: &WeightSet<T>,
    trace: &Trace<T>,
    grad_output: &Tensor<T>,
) -> Result<Gradients<T>> {
    if grad_output.len() != trace.output_data().len() {
        return Err(Error::Dimension("output gradient does not match trace output".into()));
    }
    propagate(spec, weights, trace, grad_output.data().to_vec(), false)
}

fn propagate<T: Scalar>(
    spec: &NetworkSpec,
    weights: &WeightSet<T>,
    trace: &Trace<T>,
    mut grad: Vec<T>,
    fused_last_softmax: bool,
) -> Result<Gradients<T>> {
    if trace.generation != weights.generation() || trace.outputs.len() != spec.layers.len() {
        return Err(Error::Usage(
            "activation trace is stale: weights changed since the forward pass".into(),
        ));
    }
    let n = trace.batch;
    let mut grads = Gradients::zeros_like(weights);
    let last = spec.layers.len() - 1;
    for i in (0..spec.layers.len()).rev() {
        let layer = &spec.layers[i];
        let r = &trace.resolved[i];
        let x: &[T] = if i == 0 { trace.input.data() } else { &trace.outputs[i - 1] };
        let y = &trace.outputs[i];
        let skip_activation = fused_last_softmax && i == last;
        let need_dx = i > 0;
        grad = match *layer {
            LayerSpec::Convolution { activation, .. } => {
                let g = conv_geom(layer, r);
                if !skip_activation {
                    ops::activation_backward(&mut grad, y, activation, g.cout);
                }
                let params = &weights.layers[i];
                let (dk, rest) = grads.layers[i].split_at_mut(1);
                let dx = ops::conv_backward(
                    x,
                    n,
                    &g,
                    params[0].data(),
                    &grad,
                    dk[0].data_mut(),
                    rest[0].data_mut(),
                    need_dx,
                );
                dx.unwrap_or_default()
            }
            LayerSpec::MaxPool { .. } => {
                let g = pool_geom(layer, r);
                let Aux::Argmax(arg) = &trace.aux[i] else {
                    return Err(Error::Usage("pool trace lacks argmax map".into()));
                };
                ops::maxpool_backward(&grad, arg, n, &g)
            }
            LayerSpec::Dense { activation, units } => {
                if !skip_activation {
                    ops::activation_backward(&mut grad, y, activation, units);
                }
                let params = &weights.layers[i];
                let (dw, rest) = grads.layers[i].split_at_mut(1);
                let dx = ops::dense_backward(
                    x,
                    n,
                    r.input.len(),
                    params[0].data(),
                    &grad,
                    dw[0].data_mut(),
                    rest[0].data_mut(),
                    need_dx,
                );
                dx.unwrap_or_default()
            }
            LayerSpec::Dropout { .. } => match &trace.aux[i] {
                Aux::Mask(mask) => grad.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                _ => grad,
            },
            LayerSpec::Flatten => grad,
            LayerSpec::Softmax => {
                if !skip_activation {
                    ops::activation_backward(&mut grad, y, Activation::Softmax, last_dim(r.output));
                }
                grad
            }
        };
    }
    Ok(grads)
}

/// Eval-mode inference on a single `h×w×c` image with bounded memory.
///
/// A convolution feeding an unpadded max-pool is evaluated in row strips and
/// pooled immediately, so the full-resolution feature map never exists.
/// Results equal [`forward`] in eval mode.
pub fn predict<T: Scalar>(
    spec: &NetworkSpec,
    weights: &WeightSet<T>,
    image: &[T],
    h: usize,
    w: usize,
) -> Result<(Vec<T>, Shape)> {
    if image.len() != h * w * spec.input_channels {
        return Err(Error::Dimension(format!(
            "image buffer holds {} values, expected {}x{}x{}",
            image.len(),
            h,
            w,
            spec.input_channels
        )));
    }
    let resolved = spec.resolve(h, w)?;
    weights.check_matches(spec)?;
    let mut current: Vec<T> = image.to_vec();
    let mut scratch = Vec::new();
    let mut i = 0;
    while i < spec.layers.len() {
        let layer = &spec.layers[i];
        let r = &resolved[i];
        let params = &weights.layers[i];
        match *layer {
            LayerSpec::Convolution { activation, .. } => {
                let g = conv_geom(layer, r);
                let fuse = match spec.layers.get(i + 1) {
                    Some(LayerSpec::MaxPool { .. }) => resolved[i + 1].pad == (0, 0),
                    _ => false,
                };
                if fuse {
                    let pg = pool_geom(&spec.layers[i + 1], &resolved[i + 1]);
                    current = conv_pool_strips(&current, &g, &pg, params[0].data(), params[1].data(), activation, &mut scratch);
                    i += 2;
                    continue;
                }
                let mut out = vec![T::zero(); g.oh * g.ow * g.cout];
                ops::conv_forward_rows(&current, &g, params[0].data(), params[1].data(), activation, 0..g.oh, &mut out, &mut scratch);
                current = out;
            }
            LayerSpec::MaxPool { .. } => {
                let g = pool_geom(layer, r);
                let mut out = vec![T::zero(); g.oh * g.ow * g.c];
                ops::maxpool_rows(&current, &g, 0..g.oh, &mut out, None);
                current = out;
            }
            LayerSpec::Dense { activation, .. } => {
                current = ops::dense_forward(&current, 1, r.input.len(), params[0].data(), params[1].data(), activation);
            }
            LayerSpec::Dropout { .. } | LayerSpec::Flatten => {}
            LayerSpec::Softmax => ops::softmax(&mut current, last_dim(r.output)),
        }
        i += 1;
    }
    let shape = resolved.last().map(|r| r.output).unwrap_or(Shape::Image {
        h,
        w,
        c: spec.input_channels,
    });
    Ok((current, shape))
}

const STRIP_BUDGET: usize = 1 << 24;

fn conv_pool_strips<T: Scalar>(
    input: &[T],
    g: &ConvGeom,
    pg: &PoolGeom,
    kernel: &[T],
    bias: &[T],
    activation: Activation,
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let row_len = g.ow * g.cout;
    let conv_rows = (STRIP_BUDGET / row_len.max(1)).max(pg.kh);
    let pool_rows = ((conv_rows - pg.kh) / pg.sh + 1).max(1);
    let mut out = vec![T::zero(); pg.oh * pg.ow * pg.c];
    let mut strip = Vec::new();
    let mut q0 = 0;
    while q0 < pg.oh {
        let q1 = (q0 + pool_rows).min(pg.oh);
        let c0 = q0 * pg.sh;
        let c1 = (q1 - 1) * pg.sh + pg.kh;
        strip.resize((c1 - c0) * row_len, T::zero());
        ops::conv_forward_rows(input, g, kernel, bias, activation, c0..c1, &mut strip, scratch);
        let local = PoolGeom { h: c1 - c0, ..*pg };
        ops::maxpool_rows(&strip, &local, 0..q1 - q0, &mut out[q0 * pg.ow * pg.c..q1 * pg.ow * pg.c], None);
        q0 = q1;
    }
    out
}
