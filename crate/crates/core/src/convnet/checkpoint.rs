//! Binary network checkpoints.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic      8 bytes   "WSEGNET\0"
//! version    u32       1
//! head       u8        0 = classifier, 1 = segmenter
//! classes    u32
//! taps       u32 count, then per tap: u32 name length, UTF-8 name, u32 layer
//! layers     u32 count, then per layer: u8 kind tag + payload
//!   0 conv     u32 in, out, kernel, stride, padding; f64 array weights; f64 array bias
//!   1 relu
//!   2 maxpool  u32 size, stride
//!   3 avgpool  u32 size, stride
//!   4 gap
//!   5 dense    u32 inputs, outputs; f64 array weights; f64 array bias
//!   6 softmax
//!   7 pixel softmax
//!   8 upsample u32 factor
//! f64 array  = u64 element count, then that many IEEE-754 binary64 values
//! ```

use std::path::Path;

use super::layer::{Conv2d, Dense, Layer};
use super::network::{Head, Network, Tap};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"WSEGNET\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match net.head() {
        Head::Classifier => 0,
        Head::Segmenter => 1,
    });
    put_u32(&mut out, net.class_count());
    put_u32(&mut out, net.taps().len());
    for t in net.taps() {
        put_u32(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.layer);
    }
    put_u32(&mut out, net.layers().len());
    for l in net.layers() {
        match l {
            Layer::Conv(c) => {
                out.push(0);
                for v in [c.in_channels, c.out_channels, c.kernel, c.stride, c.padding] {
                    put_u32(&mut out, v);
                }
                put_f64s(&mut out, &c.weights);
                put_f64s(&mut out, &c.bias);
            }
            Layer::Relu => out.push(1),
            Layer::MaxPool { size, stride } => {
                out.push(2);
                put_u32(&mut out, *size);
                put_u32(&mut out, *stride);
            }
            Layer::AvgPool { size, stride } => {
                out.push(3);
                put_u32(&mut out, *size);
                put_u32(&mut out, *stride);
            }
            Layer::GlobalAvgPool => out.push(4),
            Layer::Dense(d) => {
                out.push(5);
                put_u32(&mut out, d.inputs);
                put_u32(&mut out, d.outputs);
                put_f64s(&mut out, &d.weights);
                put_f64s(&mut out, &d.bias);
            }
            Layer::Softmax => out.push(6),
            Layer::PixelSoftmax => out.push(7),
            Layer::UpsampleToInput { factor } => {
                out.push(8);
                put_u32(&mut out, *factor);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse("checkpoint", self.pos, "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let at = self.pos;
        let n = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        let bytes = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(8))
            .filter(|&b| b <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::parse("checkpoint", at, "array length exceeds data"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<Network> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::parse("checkpoint", 0, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::parse("checkpoint", 8, format!("unsupported version {version}")));
    }
    let head = match r.u8()? {
        0 => Head::Classifier,
        1 => Head::Segmenter,
        t => return Err(Error::parse("checkpoint", r.pos - 1, format!("unknown head {t}"))),
    };
    let classes = r.u32()?;
    let ntaps = r.u32()?;
    let mut taps = Vec::new();
    for _ in 0..ntaps {
        let len = r.u32()?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse("checkpoint", at, "tap name is not UTF-8"))?
            .to_string();
        taps.push(Tap {
            name,
            layer: r.u32()?,
        });
    }
    let nlayers = r.u32()?;
    let mut layers = Vec::new();
    for _ in 0..nlayers {
        let at = r.pos;
        layers.push(match r.u8()? {
            0 => {
                let (in_channels, out_channels, kernel, stride, padding) =
                    (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                Layer::Conv(Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    weights: r.f64s()?,
                    bias: r.f64s()?,
                })
            }
            1 => Layer::Relu,
            2 => Layer::MaxPool {
                size: r.u32()?,
                stride: r.u32()?,
            },
            3 => Layer::AvgPool {
                size: r.u32()?,
                stride: r.u32()?,
            },
            4 => Layer::GlobalAvgPool,
            5 => {
                let (inputs, outputs) = (r.u32()?, r.u32()?);
                Layer::Dense(Dense {
                    inputs,
                    outputs,
                    weights: r.f64s()?,
                    bias: r.f64s()?,
                })
            }
            6 => Layer::Softmax,
            7 => Layer::PixelSoftmax,
            8 => Layer::UpsampleToInput { factor: r.u32()? },
            t => return Err(Error::parse("checkpoint", at, format!("unknown layer tag {t}"))),
        });
    }
    if r.pos != buf.len() {
        return Err(Error::parse("checkpoint", r.pos, "trailing bytes"));
    }
    Network::new(layers, head, classes, taps)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
