//! Binary model file.
//!
//! All integers are little-endian `u32`, all reals little-endian IEEE-754
//! `f64`:
//!
//! ```text
//! magic      4 bytes  "CQNN"
//! version    u32      currently 1
//! rank       u32      number of input dimensions
//! dims       rank x u32
//! layers     u32      layer count
//! per layer:
//!   tag      u8       0 = conv2d, 1 = dense, 2 = relu, 3 = flatten
//!   conv2d:  in_channels, out_channels, kernel, stride, padding (u32 each)
//!            weight  out*in*kernel*kernel x f64, [out][in][ky][kx]
//!            bias    out x f64
//!   dense:   inputs, outputs (u32 each)
//!            weight  outputs*inputs x f64, [out][in]
//!            bias    outputs x f64
//! ```

use std::path::Path;

use super::layer::{Conv2d, Dense, Layer};
use super::network::Network;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MODEL_MAGIC: &[u8; 4] = b"CQNN";
pub const MODEL_VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_DENSE: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_FLATTEN: u8 = 3;

pub fn encode_model(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * net.parameter_count());
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, MODEL_VERSION);
    put_u32(&mut out, net.input_shape().len() as u32);
    for &d in net.input_shape() {
        put_u32(&mut out, d as u32);
    }
    put_u32(&mut out, net.layers().len() as u32);
    for layer in net.layers() {
        match layer {
            Layer::Conv2d(c) => {
                out.push(TAG_CONV);
                for v in [c.in_channels, c.out_channels, c.kernel, c.stride, c.padding] {
                    put_u32(&mut out, v as u32);
                }
                put_reals(&mut out, &c.weight);
                put_reals(&mut out, &c.bias);
            }
            Layer::Dense(d) => {
                out.push(TAG_DENSE);
                put_u32(&mut out, d.inputs as u32);
                put_u32(&mut out, d.outputs as u32);
                put_reals(&mut out, &d.weight);
                put_reals(&mut out, &d.bias);
            }
            Layer::Relu => out.push(TAG_RELU),
            Layer::Flatten => out.push(TAG_FLATTEN),
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let rank = r.u32()? as usize;
    let input_shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = match r.take(1)?[0] {
            TAG_CONV => {
                let [in_channels, out_channels, kernel, stride, padding] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
                let weight = r.reals(out_channels * in_channels * kernel * kernel)?;
                let bias = r.reals(out_channels)?;
                Layer::Conv2d(Conv2d { in_channels, out_channels, kernel, stride, padding, weight, bias })
            }
            TAG_DENSE => {
                let inputs = r.u32()? as usize;
                let outputs = r.u32()? as usize;
                let weight = r.reals(inputs * outputs)?;
                let bias = r.reals(outputs)?;
                Layer::Dense(Dense { inputs, outputs, weight, bias })
            }
            TAG_RELU => Layer::Relu,
            TAG_FLATTEN => Layer::Flatten,
            t => return Err(bad(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Network::from_layers(input_shape, layers)
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(net))
}

pub fn load_model(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    decode_model(&bytes)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format { what: "model file", msg: msg.into() }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_reals(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::parse_architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_decode_is_identity() {
        let specs = parse_architecture("conv:3:3:1:1,relu,conv:4:3:2:1,relu,flatten,dense:5,relu,dense:2").unwrap();
        let net = Network::init(&[1, 6, 6], &specs, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let bytes = encode_model(&net);
        assert_eq!(&bytes[..4], b"CQNN");
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn rejects_truncated_and_trailing() {
        let specs = parse_architecture("dense:2").unwrap();
        let net = Network::init(&[3], &specs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut bytes = encode_model(&net);
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(decode_model(&bytes).is_err());
        assert!(decode_model(b"XXXX").is_err());
    }
}
