//! Binary weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ORSW"            magic
//! u16               version (1)
//! u16               layer count
//! u32 u32 u32       input channels, input height, input width (0 = free extent)
//! per layer:
//!   u8              kind: 1 conv, 2 maxpool, 3 dense, 4 dropout, 5 flatten, 6 softmax
//!   config          conv:    u32 filters, u32 kh, u32 kw, u32 sh, u32 sw, u8 padding, u8 activation
//!                   maxpool: u32 kh, u32 kw, u32 sh, u32 sw, u8 rounding
//!                   dense:   u32 units, u8 activation
//!                   dropout: f32 rate
//!   u8              tensor count
//!   per tensor:     u8 rank, u32 dims[rank], f32 data[product(dims)]
//! ```
//!
//! padding: 0 same, 1 valid. activation: 0 linear, 1 relu, 2 softmax.
//! rounding: 0 floor, 1 ceil.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::network::WeightSet;
use super::spec::{Activation, LayerSpec, NetworkSpec, Padding, Rounding};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ORSW";
const VERSION: u16 = 1;

pub fn encode_weights(spec: &NetworkSpec, weights: &WeightSet<f32>) -> Result<Vec<u8>> {
    spec.validate()?;
    weights.check_matches(spec)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u16::try_from(spec.layers.len()).map_err(|_| Error::Spec("too many layers".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    let (h, w) = spec.input_size.unwrap_or((0, 0));
    for v in [spec.input_channels, h, w] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let u32s = |buf: &mut Vec<u8>, vals: &[usize]| {
        for v in vals {
            buf.extend_from_slice(&(*v as u32).to_le_bytes());
        }
    };
    for (layer, tensors) in spec.layers.iter().zip(&weights.layers) {
        match *layer {
            LayerSpec::Convolution {
                filters,
                kernel,
                stride,
                padding,
                activation,
            } => {
                buf.push(1);
                u32s(&mut buf, &[filters, kernel.0, kernel.1, stride.0, stride.1]);
                buf.push(padding_code(padding));
                buf.push(activation_code(activation));
            }
            LayerSpec::MaxPool {
                kernel,
                stride,
                rounding,
            } => {
                buf.push(2);
                u32s(&mut buf, &[kernel.0, kernel.1, stride.0, stride.1]);
                buf.push(matches!(rounding, Rounding::Ceil) as u8);
            }
            LayerSpec::Dense { units, activation } => {
                buf.push(3);
                u32s(&mut buf, &[units]);
                buf.push(activation_code(activation));
            }
            LayerSpec::Dropout { rate } => {
                buf.push(4);
                buf.extend_from_slice(&rate.to_le_bytes());
            }
            LayerSpec::Flatten => buf.push(5),
            LayerSpec::Softmax => buf.push(6),
        }
        buf.push(tensors.len() as u8);
        for t in tensors {
            buf.push(t.shape().len() as u8);
            u32s(&mut buf, t.shape());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

fn padding_code(p: Padding) -> u8 {
    match p {
        Padding::Same => 0,
        Padding::Valid => 1,
    }
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Linear => 0,
        Activation::Relu => 1,
        Activation::Softmax => 2,
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated weight file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg)
    }
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<(NetworkSpec, WeightSet<f32>)> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != MAGIC {
        return Err(c.err("bad magic (not an ORSW weight file)"));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(c.err(format!("unsupported weight file version {version}")));
    }
    let n_layers = c.u16()? as usize;
    let channels = c.u32()?;
    let (h, w) = (c.u32()?, c.u32()?);
    let input_size = (h > 0 && w > 0).then_some((h, w));
    let mut layers = Vec::with_capacity(n_layers);
    let mut tensors = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = c.u8()?;
        let layer = match kind {
            1 => {
                let filters = c.u32()?;
                let kernel = (c.u32()?, c.u32()?);
                let stride = (c.u32()?, c.u32()?);
                let padding = match c.u8()? {
                    0 => Padding::Same,
                    1 => Padding::Valid,
                    p => return Err(c.err(format!("bad padding code {p}"))),
                };
                let activation = decode_activation(&mut c)?;
                LayerSpec::Convolution {
                    filters,
                    kernel,
                    stride,
                    padding,
                    activation,
                }
            }
            2 => {
                let kernel = (c.u32()?, c.u32()?);
                let stride = (c.u32()?, c.u32()?);
                let rounding = match c.u8()? {
                    0 => Rounding::Floor,
                    1 => Rounding::Ceil,
                    r => return Err(c.err(format!("bad rounding code {r}"))),
                };
                LayerSpec::MaxPool {
                    kernel,
                    stride,
                    rounding,
                }
            }
            3 => {
                let units = c.u32()?;
                LayerSpec::Dense {
                    units,
                    activation: decode_activation(&mut c)?,
                }
            }
            4 => LayerSpec::Dropout { rate: c.f32()? },
            5 => LayerSpec::Flatten,
            6 => LayerSpec::Softmax,
            k => return Err(c.err(format!("unknown layer kind {k}"))),
        };
        let count = c.u8()? as usize;
        let mut ts = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = c.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u32()?);
            }
            let len: usize = shape.iter().product();
            let raw = c.take(len.checked_mul(4).ok_or_else(|| c.err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            ts.push(Tensor::from_vec(&shape, data)?);
        }
        layers.push(layer);
        tensors.push(ts);
    }
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes after last layer"));
    }
    let spec = NetworkSpec::new(channels, input_size, layers);
    spec.validate().map_err(|e| c.err(e.to_string()))?;
    let weights = WeightSet::from_layers(tensors);
    weights
        .check_matches(&spec)
        .map_err(|e| c.err(format!("shape mismatch: {e}")))?;
    Ok((spec, weights))
}

fn decode_activation(c: &mut Cursor<'_>) -> Result<Activation> {
    match c.u8()? {
        0 => Ok(Activation::Linear),
        1 => Ok(Activation::Relu),
        2 => Ok(Activation::Softmax),
        a => Err(c.err(format!("bad activation code {a}"))),
    }
}

pub fn save_weights(spec: &NetworkSpec, weights: &WeightSet<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_weights(spec, weights)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(NetworkSpec, WeightSet<f32>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path)
}

/// Hex SHA-256 of a weight file's contents, used for provenance.
pub fn weights_digest(spec: &NetworkSpec, weights: &WeightSet<f32>) -> Result<String> {
    let bytes = encode_weights(spec, weights)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> NetworkSpec {
        NetworkSpec::new(
            2,
            Some((6, 6)),
            vec![
                LayerSpec::conv(3, 2, Padding::Same, Activation::Relu),
                LayerSpec::maxpool(2, 2, Rounding::Ceil),
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 4,
                    activation: Activation::Relu,
                },
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Softmax,
                },
            ],
        )
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let spec = small_spec();
        let w = WeightSet::glorot(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = encode_weights(&spec, &w).unwrap();
        let p = Path::new("mem");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad, p), Err(Error::Format { .. })));

        assert!(matches!(decode_weights(&bytes[..bytes.len() - 3], p), Err(Error::Format { .. })));

        // Change the first kernel's leading dimension.
        let mut bad = bytes.clone();
        let first_dim = 4 + 2 + 2 + 12 + 1 + 4 * 5 + 2 + 1 + 1;
        bad[first_dim] = 9;
        assert!(decode_weights(&bad, p).is_err());
    }
}
