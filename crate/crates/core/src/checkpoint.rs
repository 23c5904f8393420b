//! Versioned binary container for named parameter tensors plus a JSON echo
//! of the model configuration.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SEQOPCKP" | u32 version | u32 len, config JSON | u32 count
//! per tensor: u32 len, name | u8 dtype | u32 ndim | u64 dims[ndim] | payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SEQOPCKP";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// A tensor as stored on disk: raw little-endian payload tagged with its dtype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(bad(format!(
                "tensor {:?} is {}, expected {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let data = self
            .bytes
            .chunks_exact(T::DTYPE.size_of())
            .map(T::from_le_slice)
            .collect();
        Tensor::new(&self.shape, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<StoredTensor>,
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    r.take(n as u64).read_to_end(&mut out)?;
    if out.len() != n {
        return Err(bad("unexpected end of file"));
    }
    Ok(out)
}

fn write_len(w: &mut impl Write, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| bad("field too large"))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_len(w, self.config.len())?;
        w.write_all(self.config.as_bytes())?;
        write_len(w, self.tensors.len())?;
        for t in &self.tensors {
            write_len(w, t.name.len())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[dtype_tag(t.dtype)])?;
            write_len(w, t.shape.len())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&t.bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a seqop checkpoint"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let n = read_u32(r)? as usize;
        let config =
            String::from_utf8(read_bytes(r, n)?).map_err(|_| bad("config is not UTF-8"))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, n)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let dtype = match tag[0] {
                0 => DType::F32,
                1 => DType::F64,
                t => return Err(bad(format!("unknown dtype tag {t}"))),
            };
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim)
                .map(|_| {
                    read_u64(r)
                        .and_then(|d| usize::try_from(d).map_err(|_| bad("dimension overflow")))
                })
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("tensor size overflow"))?;
            let bytes = read_bytes(r, len)?;
            tensors.push(StoredTensor {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        Ok(Self { config, tensors })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl<T: Scalar> Model<T> {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: serde_json::to_string(&self.config)?,
            tensors: self
                .store
                .iter()
                .map(|(name, t)| StoredTensor::from_tensor(name, t))
                .collect(),
        })
    }

    /// Rebuilds the model from its config echo and overwrites every parameter
    /// with the stored values.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&ckpt.config)?;
        let mut model = Self::new(config, 0)?;
        if ckpt.tensors.len() != model.store.len() {
            return Err(bad(format!(
                "{} tensors stored, model has {}",
                ckpt.tensors.len(),
                model.store.len()
            )));
        }
        for stored in &ckpt.tensors {
            let id = model
                .store
                .find(&stored.name)
                .ok_or_else(|| bad(format!("unknown tensor {:?}", stored.name)))?;
            let t = stored.to_tensor::<T>()?;
            if t.shape() != model.store.get(id).shape() {
                return Err(bad(format!(
                    "tensor {:?} has shape {:?}",
                    stored.name,
                    t.shape()
                )));
            }
            *model.store.get_mut(id) = t;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stored_tensor_round_trip() {
        let t = Tensor::new(&[2, 2], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25]).unwrap();
        let s = StoredTensor::from_tensor("w", &t);
        assert_eq!(s.to_tensor::<f32>().unwrap(), t);
        assert!(s.to_tensor::<f64>().is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let ckpt = Checkpoint {
            config: "{\"a\":1}".into(),
            tensors: vec![
                StoredTensor::from_tensor("x", &Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap()),
                StoredTensor::from_tensor("s", &Tensor::scalar(7.0f32)),
            ],
        };
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let ckpt = Checkpoint {
            config: "{}".into(),
            tensors: vec![StoredTensor::from_tensor("x", &Tensor::<f32>::ones(&[4]))],
        };
        let bytes = ckpt.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bumped = bytes.clone();
        bumped[8] = 9;
        assert!(Checkpoint::from_bytes(&bumped).is_err());
    }
}
