//! Versioned binary weight files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic   8 bytes  "QLABWTS\0"
//! version u32      currently 1
//! label   u32 length + UTF-8 bytes (architecture name, e.g. "GRU-8x3/1ch")
//! count   u32      number of tensors
//! count x {
//!     name  u32 length + UTF-8 bytes
//!     rows  u32
//!     cols  u32
//!     data  rows*cols little-endian f64, row-major
//! }
//! ```
//!
//! Trailing bytes are rejected.

use std::io::{Read, Write};

use super::network::Network;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"QLABWTS\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(net: &Network, label: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + net.count_params() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, label);
    put_u32(&mut out, net.params().len() as u32);
    for p in net.params().iter() {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.rows() as u32);
        put_u32(&mut out, p.value.cols() as u32);
        for v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_weights<W: Write>(net: &Network, label: &str, mut dest: W) -> std::io::Result<()> {
    dest.write_all(&encode(net, label))?;
    dest.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::WeightFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::WeightFormat("invalid UTF-8 string".into()))
    }
}

/// Decoded file contents: label plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub label: String,
    pub tensors: Vec<(String, Tensor2)>,
}

pub fn decode(bytes: &[u8]) -> Result<WeightFile> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::WeightFormat("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::WeightVersion {
            found: version,
            expected: VERSION,
        });
    }
    let label = c.string()?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = c.string()?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::WeightFormat("tensor size overflow".into()))?;
        if n > (bytes.len() - c.pos) / 8 {
            return Err(Error::WeightFormat(format!("truncated in tensor `{name}`")));
        }
        let data = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, Tensor2::new(rows, cols, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::WeightFormat(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(WeightFile { label, tensors })
}

/// Reads a weight file into `net`. On any error `net` is left unchanged.
pub fn load_weights<R: Read>(mut src: R, expected_label: &str, net: &mut Network) -> Result<()> {
    let mut bytes = Vec::new();
    src.read_to_end(&mut bytes)
        .map_err(|e| Error::WeightFormat(format!("read failed: {e}")))?;
    let file = decode(&bytes)?;
    if file.label != expected_label {
        return Err(Error::WeightSpecMismatch {
            found: file.label,
            expected: expected_label.to_string(),
        });
    }
    apply(&file, net)
}

/// Copies tensors into `net` after checking names and shapes.
pub fn apply(file: &WeightFile, net: &mut Network) -> Result<()> {
    if file.tensors.len() != net.params().len() {
        return Err(Error::shape(
            "weight file tensor count",
            net.params().len(),
            file.tensors.len(),
        ));
    }
    for ((name, t), p) in file.tensors.iter().zip(net.params().iter()) {
        if *name != p.name || t.shape() != p.value.shape() {
            return Err(Error::shape(
                format!("weight tensor `{}`", p.name),
                format!("{} {}x{}", p.name, p.value.rows(), p.value.cols()),
                format!("{name} {}x{}", t.rows(), t.cols()),
            ));
        }
    }
    for ((_, t), p) in file.tensors.iter().zip(net.params_mut().iter_mut()) {
        p.value = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{Activation, LayerKind};
    use rand::SeedableRng;

    fn net() -> Network {
        let mut n = Network::zeros(
            (4, 1),
            vec![
                LayerKind::Flatten,
                LayerKind::Dense {
                    inputs: 4,
                    units: 3,
                    activation: Activation::Linear,
                },
            ],
        )
        .unwrap();
        n.init_glorot(&mut rand_chacha::ChaCha8Rng::seed_from_u64(2));
        n
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = net();
        let bytes = encode(&a, "toy");
        let mut b = Network::zeros(a.input_shape(), a.layers().to_vec()).unwrap();
        load_weights(&bytes[..], "toy", &mut b).unwrap();
        let (va, vb) = (a.params().flat_values(), b.params().flat_values());
        assert!(va.iter().zip(&vb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_file_leaves_network_untouched() {
        let a = net();
        let bytes = encode(&a, "toy");
        let mut b = Network::zeros(a.input_shape(), a.layers().to_vec()).unwrap();
        for cut in [0, 5, 12, bytes.len() / 2, bytes.len() - 1] {
            let err = load_weights(&bytes[..cut], "toy", &mut b).unwrap_err();
            assert!(matches!(err, Error::WeightFormat(_)), "{err}");
        }
        assert!(b.params().flat_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn version_and_label_mismatch() {
        let a = net();
        let mut bytes = encode(&a, "toy");
        let mut b = a.clone();
        assert!(matches!(
            load_weights(&bytes[..], "other", &mut b),
            Err(Error::WeightSpecMismatch { .. })
        ));
        bytes[8] = 7;
        assert!(matches!(
            load_weights(&bytes[..], "toy", &mut b),
            Err(Error::WeightVersion { found: 7, .. })
        ));
    }
}
