//! Binary tensor container and named archives.
//!
//! A tensor blob is the magic `EPT1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dims, then the `f64` payload in little-endian order.
//! An archive is a `u32` entry count followed by, per entry, a `u32` name
//! length, the UTF-8 name and one tensor blob.

use std::fs;
use std::path::Path;

use crate::encoder::{init_params, EncoderConfig, EncoderParams, ImageTensor};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"EPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor",
                format!("dims {dims:?} hold {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::from_vec(r, c, self.data),
            _ => Err(Error::shape("Tensor::into_matrix", format!("rank {}", self.dims.len()))),
        }
    }

    pub fn from_image(img: &ImageTensor) -> Self {
        let (h, w, c) = img.shape();
        Self {
            dims: vec![h, w, c],
            data: img.pixels().to_vec(),
        }
    }

    pub fn into_image(self) -> Result<ImageTensor> {
        match self.dims[..] {
            [h, w, c] => ImageTensor::unclamped(h, w, c, self.data),
            _ => Err(Error::shape("Tensor::into_image", format!("rank {}", self.dims.len()))),
        }
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::arg(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(MAGIC);
    push_u32(out, t.dims.len())?;
    for &d in &t.dims {
        push_u32(out, d)?;
    }
    out.reserve(t.data.len() * 8);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Byte reader that reports absolute offsets in its errors.
struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        if self.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: at,
                detail: "bad magic, expected EPT1".into(),
            });
        }
        let rank = self.u32("rank")?;
        let dims = (0..rank)
            .map(|_| self.u32("dimension"))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format {
                offset: at + 8,
                detail: format!("dims {dims:?} overflow"),
            })?;
        let payload = self.take(count * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor { dims, data })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out)?;
    fs::write(path, out)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn encode_archive(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    push_u32(&mut out, entries.len())?;
    for (name, t) in entries {
        push_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out)?;
    }
    Ok(out)
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let n = r.u32("entry count")?;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32("name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                detail: "name is not UTF-8".into(),
            })?
            .to_string();
        out.push((name, r.tensor()?));
    }
    r.finish()?;
    Ok(out)
}

pub fn save_archive(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_archive(entries)?)?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode_archive(&fs::read(path)?)
}

pub fn params_to_archive(p: &EncoderParams) -> Vec<(String, Tensor)> {
    p.named_tensors()
        .into_iter()
        .map(|(n, m)| (n, Tensor::from_matrix(m)))
        .collect()
}

/// Rebuilds parameters for `config` from an archive holding exactly the
/// tensors [`EncoderParams::named_tensors`] lists, in any order.
pub fn params_from_archive(
    config: &EncoderConfig,
    entries: Vec<(String, Tensor)>,
) -> Result<EncoderParams> {
    let mut params = init_params(config, 0)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if entries.len() != names.len() {
        return Err(Error::arg(format!(
            "archive has {} tensors, model needs {}",
            entries.len(),
            names.len()
        )));
    }
    let mut by_name: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
    for (slot, name) in params.tensors_mut().into_iter().zip(&names) {
        let t = by_name
            .remove(name)
            .ok_or_else(|| Error::arg(format!("archive lacks tensor {name}")))?;
        let m = t.into_matrix()?;
        if m.shape() != slot.shape() {
            return Err(Error::shape(
                "params_from_archive",
                format!("{name}: {:?}, expected {:?}", m.shape(), slot.shape()),
            ));
        }
        *slot = m;
    }
    Ok(params)
}

pub fn save_params(path: impl AsRef<Path>, p: &EncoderParams) -> Result<()> {
    save_archive(path, &params_to_archive(p))
}

pub fn load_params(path: impl AsRef<Path>, config: &EncoderConfig) -> Result<EncoderParams> {
    params_from_archive(config, load_archive(path)?)
}
