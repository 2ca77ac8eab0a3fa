//! The two published architectures and the output-grid arithmetic of the
//! fully convolutional discovery network.
//!
//! Discovery FCN (12-band input of any extent ≥ 201 px):
//!
//! | layer    | op                         | params  |
//! |----------|----------------------------|---------|
//! | conv2d_1 | 32 @ 3×3, same, relu       | 3 488   |
//! | pool_1   | max 3×3 / 3, floor         |         |
//! | conv2d_2 | 64 @ 3×3, same, relu       | 18 496  |
//! | pool_2   | max 3×3 / 3, floor         |         |
//! | conv2d_3 | 64 @ 3×3, same, relu       | 36 928  |
//! | pool_3   | max 3×3 / 3, floor         |         |
//! | conv2d_4 | 64 @ 7×7, valid, relu      | 200 768 |
//! | dropout  | 0.5                        |         |
//! | conv2d_5 | 2 @ 1×1, softmax           | 130     |
//!
//! One output cell per 27 input pixels; each cell sees a 215-px receptive
//! field centered 94 px + 27·i from the image origin.

use crate::error::{Error, Result};
use crate::nn::{
    self, Activation, LayerSpec, NetworkSpec, Padding, ResolvedLayer, Rounding, Scalar, Shape,
    WeightSet,
};

pub const BANDS: usize = 12;
pub const DISCOVERY_PATCH: usize = 201;
pub const IMPACT_PATCH: usize = 21;

/// Class order of the discovery output channels.
pub const DISCOVERY_CLASSES: [&str; 2] = ["mine", "not mine"];
/// Class order of the impact output.
pub const IMPACT_CLASSES: [&str; 3] = ["high", "low", "no-ore"];

pub fn build_discovery_fcn() -> NetworkSpec {
    let pool = || LayerSpec::maxpool(3, 3, Rounding::Floor);
    NetworkSpec::new(
        BANDS,
        None,
        vec![
            LayerSpec::conv(32, 3, Padding::Same, Activation::Relu),
            pool(),
            LayerSpec::conv(64, 3, Padding::Same, Activation::Relu),
            pool(),
            LayerSpec::conv(64, 3, Padding::Same, Activation::Relu),
            pool(),
            LayerSpec::conv(64, 7, Padding::Valid, Activation::Relu),
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::conv(2, 1, Padding::Valid, Activation::Softmax),
        ],
    )
}

pub fn build_impact_cnn() -> NetworkSpec {
    let pool = || LayerSpec::maxpool(2, 2, Rounding::Ceil);
    NetworkSpec::new(
        BANDS,
        Some((IMPACT_PATCH, IMPACT_PATCH)),
        vec![
            LayerSpec::conv(32, 2, Padding::Same, Activation::Relu),
            pool(),
            LayerSpec::conv(64, 2, Padding::Same, Activation::Relu),
            pool(),
            LayerSpec::Flatten,
            LayerSpec::Dense {
                units: 1024,
                activation: Activation::Relu,
            },
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Dense {
                units: 3,
                activation: Activation::Softmax,
            },
        ],
    )
}

/// Receptive-field summary of a windowed layer stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptiveField {
    /// Input pixels between neighbouring output cells.
    pub stride: usize,
    /// Side of the input window feeding one output cell.
    pub size: usize,
    /// Input coordinate of the first cell's window center.
    pub offset: f64,
}

/// Walk the layer stack with the usual recurrence
/// `size += (k-1)·jump; offset += ((k-1)/2 - pad)·jump; jump *= stride`.
pub fn receptive_field(spec: &NetworkSpec, resolved: &[ResolvedLayer]) -> Result<ReceptiveField> {
    let mut size = 1usize;
    let mut jump = 1usize;
    let mut offset = 0.0f64;
    for (layer, r) in spec.layers.iter().zip(resolved) {
        let (k, s) = match *layer {
            LayerSpec::Convolution { kernel, stride, .. } => (kernel.0, stride.0),
            LayerSpec::MaxPool { kernel, stride, .. } => (kernel.0, stride.0),
            LayerSpec::Dropout { .. } | LayerSpec::Softmax => continue,
            LayerSpec::Dense { .. } | LayerSpec::Flatten => {
                return Err(Error::Spec("receptive field undefined past a dense layer".into()))
            }
        };
        size += (k - 1) * jump;
        offset += ((k as f64 - 1.0) / 2.0 - r.pad.0 as f64) * jump as f64;
        jump *= s;
    }
    Ok(ReceptiveField {
        stride: jump,
        size,
        offset,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputGeometry {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub stride: usize,
    pub offset: f64,
    pub receptive_field: usize,
}

impl OutputGeometry {
    /// Input pixel (row, col) at the center of cell `(i, j)`'s receptive field.
    pub fn cell_center(&self, i: usize, j: usize) -> (usize, usize) {
        let o = self.offset.round() as usize;
        (o + self.stride * i, o + self.stride * j)
    }

    /// Top-left input pixel of cell `(i, j)`'s receptive window (may be negative).
    pub fn window_origin(&self, i: usize, j: usize) -> (i64, i64) {
        let (r, c) = self.cell_center(i, j);
        let half = (self.receptive_field / 2) as i64;
        (r as i64 - half, c as i64 - half)
    }

    pub fn cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

/// Output grid and anchor arithmetic for an `h×w` input to a fully convolutional spec.
///
/// The layer arithmetic alone admits inputs down to 189 px, but cells there
/// would see less context than a training patch, so anything below
/// [`DISCOVERY_PATCH`] is rejected.
pub fn output_geometry(spec: &NetworkSpec, h: usize, w: usize) -> Result<OutputGeometry> {
    if h.min(w) < DISCOVERY_PATCH {
        return Err(Error::Dimension(format!(
            "input {h}x{w} below the minimum valid extent of {DISCOVERY_PATCH}"
        )));
    }
    let resolved = spec.resolve(h, w).map_err(|e| match e {
        Error::Dimension(msg) => Error::Dimension(format!(
            "input {h}x{w} below the minimum valid extent: {msg}"
        )),
        other => other,
    })?;
    let rf = receptive_field(spec, &resolved)?;
    let Some(Shape::Image { h: gr, w: gc, .. }) = resolved.last().map(|r| r.output) else {
        return Err(Error::Spec("network output is not a spatial grid".into()));
    };
    Ok(OutputGeometry {
        grid_rows: gr,
        grid_cols: gc,
        stride: rf.stride,
        offset: rf.offset,
        receptive_field: rf.size,
    })
}

/// Grid cells per side of the discovery FCN for an `n`-pixel side.
pub fn discovery_grid_size(n: usize) -> Result<usize> {
    let spec = build_discovery_fcn();
    Ok(output_geometry(&spec, n, n)?.grid_rows)
}

/// Direct evaluation of one output cell from its receptive window.
///
/// Unlike [`nn::predict`], which sweeps whole feature maps through GEMM, this
/// walks the layer stack backwards to find the exact index range each layer
/// needs for cell `(i, j)`, then evaluates only those positions with plain
/// loops in `f64`. Positions are tracked in global coordinates so padding
/// and pooling alignment match the full-image pass. `window` is a
/// `side×side×c` buffer whose top-left pixel sits at `origin` in the image;
/// out-of-image pixels must be zero. Fails if the cell depends on any pixel
/// outside the window.
pub fn evaluate_cell_from_window(
    spec: &NetworkSpec,
    weights: &WeightSet<f32>,
    window: &[f32],
    side: usize,
    origin: (i64, i64),
    image_size: (usize, usize),
    cell: (usize, usize),
) -> Result<Vec<f64>> {
    let resolved = spec.resolve(image_size.0, image_size.1)?;
    let channels = spec.input_channels;
    if window.len() != side * side * channels {
        return Err(Error::Dimension("window buffer does not match its side".into()));
    }
    let extent = |s: Shape| match s {
        Shape::Image { h, w, c } => Ok((h, w, c)),
        Shape::Flat(_) => Err(Error::Spec("cell evaluation needs a fully convolutional spec".into())),
    };

    // Needed [lo, hi] ranges per layer boundary, from the output back to the input.
    let n = spec.layers.len();
    let mut ranges = vec![((0i64, 0i64), (0i64, 0i64)); n + 1];
    ranges[n] = ((cell.0 as i64, cell.0 as i64), (cell.1 as i64, cell.1 as i64));
    for l in (0..n).rev() {
        let (ih, iw, _) = extent(resolved[l].input)?;
        let ((rlo, rhi), (clo, chi)) = ranges[l + 1];
        ranges[l] = match spec.layers[l] {
            LayerSpec::Convolution { kernel, stride, .. } | LayerSpec::MaxPool { kernel, stride, .. } => {
                let (ph, pw) = (resolved[l].pad.0 as i64, resolved[l].pad.1 as i64);
                let (kh, kw) = (kernel.0 as i64, kernel.1 as i64);
                let (sh, sw) = (stride.0 as i64, stride.1 as i64);
                (
                    ((rlo * sh - ph).max(0), (rhi * sh - ph + kh - 1).min(ih as i64 - 1)),
                    ((clo * sw - pw).max(0), (chi * sw - pw + kw - 1).min(iw as i64 - 1)),
                )
            }
            LayerSpec::Dropout { .. } | LayerSpec::Softmax => ranges[l + 1],
            LayerSpec::Dense { .. } | LayerSpec::Flatten => {
                return Err(Error::Spec("cell evaluation needs a fully convolutional spec".into()))
            }
        };
    }
    let ((rlo, rhi), (clo, chi)) = ranges[0];
    let (or, oc) = origin;
    if rlo < or || clo < oc || rhi >= or + side as i64 || chi >= oc + side as i64 {
        return Err(Error::Dimension(format!(
            "cell {cell:?} depends on rows {rlo}..={rhi}, cols {clo}..={chi}, outside the window at {origin:?}"
        )));
    }

    // Values of the current layer over its needed range, row-major with channels last.
    let mut values: Vec<f64> = Vec::new();
    let (rows, cols) = ((rhi - rlo + 1) as usize, (chi - clo + 1) as usize);
    values.reserve(rows * cols * channels);
    for r in rlo..=rhi {
        for c in clo..=chi {
            let base = (((r - or) as usize) * side + (c - oc) as usize) * channels;
            values.extend(window[base..base + channels].iter().map(|&v| v as f64));
        }
    }

    for l in 0..n {
        let (ih, iw, cin) = extent(resolved[l].input)?;
        let (_, _, cout) = extent(resolved[l].output)?;
        let ((irlo, _), (iclo, ichi)) = ranges[l];
        let in_cols = (ichi - iclo + 1) as usize;
        let ((orlo, orhi), (oclo, ochi)) = ranges[l + 1];
        let at = |vals: &[f64], y: i64, x: i64, ch: usize| -> Option<f64> {
            if y < 0 || x < 0 || y >= ih as i64 || x >= iw as i64 {
                return None;
            }
            Some(vals[(((y - irlo) as usize) * in_cols + (x - iclo) as usize) * cin + ch])
        };
        let mut next = Vec::with_capacity(((orhi - orlo + 1) * (ochi - oclo + 1)) as usize * cout);
        match spec.layers[l] {
            LayerSpec::Convolution {
                kernel,
                stride,
                activation,
                ..
            } => {
                let kern: Vec<f64> = weights.layers[l][0].data().iter().map(|&v| v as f64).collect();
                let bias = weights.layers[l][1].data();
                let (ph, pw) = (resolved[l].pad.0 as i64, resolved[l].pad.1 as i64);
                let mut acc = vec![0.0f64; cout];
                for p in orlo..=orhi {
                    for q in oclo..=ochi {
                        for (a, &b) in acc.iter_mut().zip(bias) {
                            *a = b as f64;
                        }
                        for ky in 0..kernel.0 {
                            for kx in 0..kernel.1 {
                                let y = p * stride.0 as i64 - ph + ky as i64;
                                let x = q * stride.1 as i64 - pw + kx as i64;
                                for ci in 0..cin {
                                    let Some(v) = at(&values, y, x, ci) else { break };
                                    let wrow = &kern[((ky * kernel.1 + kx) * cin + ci) * cout..][..cout];
                                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                                        *a += v * wv;
                                    }
                                }
                            }
                        }
                        nn::ops::apply_activation(&mut acc, activation);
                        next.extend_from_slice(&acc);
                    }
                }
            }
            LayerSpec::MaxPool { kernel, stride, .. } => {
                let (ph, pw) = (resolved[l].pad.0 as i64, resolved[l].pad.1 as i64);
                for p in orlo..=orhi {
                    for q in oclo..=ochi {
                        for ch in 0..cin {
                            let mut best = f64::NEG_INFINITY;
                            for ky in 0..kernel.0 {
                                for kx in 0..kernel.1 {
                                    let y = p * stride.0 as i64 - ph + ky as i64;
                                    let x = q * stride.1 as i64 - pw + kx as i64;
                                    if let Some(v) = at(&values, y, x, ch) {
                                        best = best.max(v);
                                    }
                                }
                            }
                            next.push(best);
                        }
                    }
                }
            }
            LayerSpec::Dropout { .. } => next = values.clone(),
            LayerSpec::Softmax => {
                next = values.clone();
                nn::ops::softmax(&mut next, cout);
            }
            LayerSpec::Dense { .. } | LayerSpec::Flatten => unreachable!("rejected above"),
        }
        values = next;
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cells_checked: usize,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.max_abs_deviation < self.tolerance
    }
}

/// Copy the `side×side` window whose top-left pixel is `origin`, zero outside the image.
pub fn zero_padded_window<T: Scalar>(
    image: &[T],
    h: usize,
    w: usize,
    c: usize,
    origin: (i64, i64),
    side: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); side * side * c];
    for r in 0..side {
        let y = origin.0 + r as i64;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for col in 0..side {
            let x = origin.1 + col as i64;
            if x < 0 || x >= w as i64 {
                continue;
            }
            let src = (y as usize * w + x as usize) * c;
            out[(r * side + col) * c..(r * side + col + 1) * c].copy_from_slice(&image[src..src + c]);
        }
    }
    out
}

/// Compare every FCN grid cell on `image` against the direct evaluation of the
/// zero-padded receptive window centered on that cell's anchor.
pub fn patch_equivalence_check(
    spec: &NetworkSpec,
    weights: &WeightSet<f32>,
    image: &[f32],
    h: usize,
    w: usize,
    tolerance: f64,
) -> Result<EquivalenceReport> {
    let geom = output_geometry(spec, h, w)?;
    let (grid, shape) = nn::predict(spec, weights, image, h, w)?;
    let Shape::Image { c: classes, .. } = shape else {
        return Err(Error::Spec("network output is not a spatial grid".into()));
    };
    let side = geom.receptive_field;
    let mut max_dev = 0.0f64;
    for i in 0..geom.grid_rows {
        for j in 0..geom.grid_cols {
            let origin = geom.window_origin(i, j);
            let window = zero_padded_window(image, h, w, spec.input_channels, origin, side);
            let direct = evaluate_cell_from_window(spec, weights, &window, side, origin, (h, w), (i, j))?;
            let fcn = &grid[(i * geom.grid_cols + j) * classes..][..classes];
            for (a, &b) in direct.iter().zip(fcn) {
                max_dev = max_dev.max((a - b as f64).abs());
            }
        }
    }
    Ok(EquivalenceReport {
        grid_rows: geom.grid_rows,
        grid_cols: geom.grid_cols,
        cells_checked: geom.cells(),
        max_abs_deviation: max_dev,
        tolerance,
    })
}
