//! Portable tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `VJDT` |
//! | 2 | format version (1) |
//! | 1 | dtype: 1 = f32, 2 = f64 |
//! | 1 | rank, at most 5 |
//! | 8·rank | shape as u64 |
//! | n·size | row-major payload |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use vjdd_core::Tensor;

use crate::error::{io_err, Error, Result};

pub const MAGIC: [u8; 4] = *b"VJDT";
pub const VERSION: u16 = 1;
pub const MAX_RANK: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
        }
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

/// An n-dimensional array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PortableTensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl PortableTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Format(format!(
                "rank {} exceeds {MAX_RANK}",
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self {
            shape: vec![s.c, s.h, s.w],
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(ts: &[Tensor]) -> Result<Self> {
        let first = ts
            .first()
            .ok_or_else(|| Error::Format("cannot stack zero tensors".into()))?;
        let s = first.shape();
        let mut data = Vec::with_capacity(ts.len() * first.len());
        for t in ts {
            if t.shape() != s {
                return Err(Error::Format(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape(),
                    s
                )));
            }
            data.extend_from_slice(t.data());
        }
        Self::new(vec![ts.len(), s.c, s.h, s.w], TensorData::F64(data))
    }

    /// View as one `(C, H, W)` tensor; lower ranks gain leading unit axes.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.shape.len() > 3 {
            return Err(Error::Format(format!(
                "expected rank at most 3, got shape {:?}",
                self.shape
            )));
        }
        let mut dims = [1usize; 3];
        dims[3 - self.shape.len()..].copy_from_slice(&self.shape);
        Ok(Tensor::from_vec(
            dims[0],
            dims[1],
            dims[2],
            self.data.to_f64(),
        )?)
    }

    /// Split a rank-4 `(N, C, H, W)` tensor into `N` tensors.
    pub fn unstack(&self) -> Result<Vec<Tensor>> {
        let [n, c, h, w] = self.shape[..] else {
            return Err(Error::Format(format!(
                "expected rank 4, got shape {:?}",
                self.shape
            )));
        };
        let all = self.data.to_f64();
        let step = c * h * w;
        (0..n)
            .map(|i| {
                Ok(Tensor::from_vec(
                    c,
                    h,
                    w,
                    all[i * step..(i + 1) * step].to_vec(),
                )?)
            })
            .collect()
    }

    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(&MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&[self.data.code(), self.shape.len() as u8])?;
        for &d in &self.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        out.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 8];
        read_exact(input, &mut head, "header")?;
        if head[..4] != MAGIC {
            return Err(Error::Format("not a tensor file (bad magic)".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(Error::Format(format!(
                "tensor format version {version}, expected {VERSION}"
            )));
        }
        let (dtype, rank) = (head[6], head[7] as usize);
        if rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 8];
            read_exact(input, &mut d, "shape")?;
            shape.push(
                usize::try_from(u64::from_le_bytes(d))
                    .map_err(|_| Error::Format("dimension does not fit in memory".into()))?,
            );
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        let data = match dtype {
            1 => {
                let mut buf = vec![0u8; n * 4];
                read_exact(input, &mut buf, "payload")?;
                TensorData::F32(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            2 => {
                let mut buf = vec![0u8; n * 8];
                read_exact(input, &mut buf, "payload")?;
                TensorData::F64(
                    buf.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        Self::new(shape, data)
    }
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Format(format!("reading {what}: {e}")),
    })
}

pub fn save_tensor(t: &PortableTensor, path: &Path) -> Result<()> {
    fs::write(path, t.to_bytes()).map_err(io_err(path))
}

/// Load a tensor file; trailing bytes are an error.
pub fn load_tensor(path: &Path) -> Result<PortableTensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut cursor = bytes.as_slice();
    let t = PortableTensor::read_from(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            cursor.len()
        )));
    }
    Ok(t)
}
