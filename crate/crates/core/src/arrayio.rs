//! Single-file container for named tensors.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic   b"MLAT"
//! version u32                       (currently 1)
//! count   u32
//! entry*  name_len u16, name utf-8,
//!         dtype u8 (1=f64, 2=f32, 3=u8, 4=i64),
//!         ndim u8, dims u64 * ndim,
//!         data (row-major)
//! digest  sha256 of everything above
//! ```
//!
//! The trailing digest is verified on read, so truncated or bit-flipped
//! files are reported instead of silently decoded.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"MLAT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArrayIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not an array container (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported container version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: checksum mismatch, file is corrupt")]
    Checksum { path: PathBuf },
    #[error("{path}: malformed entry: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: missing tensor {name:?}")]
    Missing { path: PathBuf, name: String },
    #[error("{path}: tensor {name:?} has dtype {found:?}, expected {expected:?}")]
    Dtype {
        path: PathBuf,
        name: String,
        found: Dtype,
        expected: Dtype,
    },
}

type Result<T> = std::result::Result<T, ArrayIoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64 = 1,
    F32 = 2,
    U8 = 3,
    I64 = 4,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F64),
            2 => Some(Dtype::F32),
            3 => Some(Dtype::U8),
            4 => Some(Dtype::I64),
            _ => None,
        }
    }

    fn elem_size(self) -> usize {
        match self {
            Dtype::F64 | Dtype::I64 => 8,
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// One decoded tensor.
#[derive(Debug, Clone)]
pub enum Tensor {
    F64(ArrayD<f64>),
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
    I64(ArrayD<i64>),
}

impl Tensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            Tensor::F64(_) => Dtype::F64,
            Tensor::F32(_) => Dtype::F32,
            Tensor::U8(_) => Dtype::U8,
            Tensor::I64(_) => Dtype::I64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F64(a) => a.shape(),
            Tensor::F32(a) => a.shape(),
            Tensor::U8(a) => a.shape(),
            Tensor::I64(a) => a.shape(),
        }
    }
}

/// An ordered set of named tensors, written and read as one file.
#[derive(Debug, Clone, Default)]
pub struct Container {
    entries: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_f64<D: ndarray::Dimension>(&mut self, name: &str, a: ndarray::Array<f64, D>) {
        self.entries
            .insert(name.to_string(), Tensor::F64(a.into_dyn()));
    }

    pub fn insert_u8<D: ndarray::Dimension>(&mut self, name: &str, a: ndarray::Array<u8, D>) {
        self.entries
            .insert(name.to_string(), Tensor::U8(a.into_dyn()));
    }

    pub fn insert_i64<D: ndarray::Dimension>(&mut self, name: &str, a: ndarray::Array<i64, D>) {
        self.entries
            .insert(name.to_string(), Tensor::I64(a.into_dyn()));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Fetches an f64 tensor by name; `path` only labels errors.
    pub fn f64(&self, path: &Path, name: &str) -> Result<&ArrayD<f64>> {
        match self.entries.get(name) {
            Some(Tensor::F64(a)) => Ok(a),
            Some(other) => Err(ArrayIoError::Dtype {
                path: path.to_path_buf(),
                name: name.to_string(),
                found: other.dtype(),
                expected: Dtype::F64,
            }),
            None => Err(ArrayIoError::Missing {
                path: path.to_path_buf(),
                name: name.to_string(),
            }),
        }
    }

    pub fn u8(&self, path: &Path, name: &str) -> Result<&ArrayD<u8>> {
        match self.entries.get(name) {
            Some(Tensor::U8(a)) => Ok(a),
            Some(other) => Err(ArrayIoError::Dtype {
                path: path.to_path_buf(),
                name: name.to_string(),
                found: other.dtype(),
                expected: Dtype::U8,
            }),
            None => Err(ArrayIoError::Missing {
                path: path.to_path_buf(),
                name: name.to_string(),
            }),
        }
    }

    pub fn i64(&self, path: &Path, name: &str) -> Result<&ArrayD<i64>> {
        match self.entries.get(name) {
            Some(Tensor::I64(a)) => Ok(a),
            Some(other) => Err(ArrayIoError::Dtype {
                path: path.to_path_buf(),
                name: name.to_string(),
                found: other.dtype(),
                expected: Dtype::I64,
            }),
            None => Err(ArrayIoError::Missing {
                path: path.to_path_buf(),
                name: name.to_string(),
            }),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut body: Vec<u8> = Vec::new();
        body.extend_from_slice(MAGIC);
        body.write_u32::<LittleEndian>(VERSION).unwrap();
        body.write_u32::<LittleEndian>(self.entries.len() as u32)
            .unwrap();
        for (name, tensor) in &self.entries {
            body.write_u16::<LittleEndian>(name.len() as u16).unwrap();
            body.extend_from_slice(name.as_bytes());
            body.push(tensor.dtype() as u8);
            let shape = tensor.shape();
            body.push(shape.len() as u8);
            for &d in shape {
                body.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            match tensor {
                Tensor::F64(a) => {
                    for &v in a.iter() {
                        body.write_f64::<LittleEndian>(v).unwrap();
                    }
                }
                Tensor::F32(a) => {
                    for &v in a.iter() {
                        body.write_f32::<LittleEndian>(v).unwrap();
                    }
                }
                Tensor::U8(a) => body.extend(a.iter().copied()),
                Tensor::I64(a) => {
                    for &v in a.iter() {
                        body.write_i64::<LittleEndian>(v).unwrap();
                    }
                }
            }
        }
        let digest = Sha256::digest(&body);

        let io_err = |source| ArrayIoError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut f = std::fs::File::create(path).map_err(io_err)?;
        f.write_all(&body).map_err(io_err)?;
        f.write_all(&digest).map_err(io_err)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let io_err = |source| ArrayIoError::Io {
            path: path.to_path_buf(),
            source,
        };
        let raw = std::fs::read(path).map_err(io_err)?;
        if raw.len() < 4 + 4 + 4 + 32 {
            return Err(ArrayIoError::Malformed {
                path: path.to_path_buf(),
                reason: "file too short".into(),
            });
        }
        let (body, digest) = raw.split_at(raw.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ArrayIoError::Checksum {
                path: path.to_path_buf(),
            });
        }

        let mut cur = std::io::Cursor::new(body);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(ArrayIoError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let version = cur.read_u32::<LittleEndian>().map_err(io_err)?;
        if version != VERSION {
            return Err(ArrayIoError::Version {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let count = cur.read_u32::<LittleEndian>().map_err(io_err)?;

        let malformed = |reason: &str| ArrayIoError::Malformed {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.read_u16::<LittleEndian>().map_err(io_err)? as usize;
            let mut name_buf = vec![0u8; name_len];
            cur.read_exact(&mut name_buf).map_err(io_err)?;
            let name =
                String::from_utf8(name_buf).map_err(|_| malformed("tensor name not utf-8"))?;
            let dtype = Dtype::from_code(cur.read_u8().map_err(io_err)?)
                .ok_or_else(|| malformed("unknown dtype code"))?;
            let ndim = cur.read_u8().map_err(io_err)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.read_u64::<LittleEndian>().map_err(io_err)? as usize);
            }
            let n: usize = dims.iter().product();
            // guard against dims that claim more data than the file holds
            let remaining = body.len() - cur.position() as usize;
            if n.checked_mul(dtype.elem_size()).map_or(true, |bytes| bytes > remaining) {
                return Err(malformed("tensor data extends past end of file"));
            }
            let tensor = match dtype {
                Dtype::F64 => {
                    let mut data = vec![0f64; n];
                    cur.read_f64_into::<LittleEndian>(&mut data).map_err(io_err)?;
                    Tensor::F64(ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap())
                }
                Dtype::F32 => {
                    let mut data = vec![0f32; n];
                    cur.read_f32_into::<LittleEndian>(&mut data).map_err(io_err)?;
                    Tensor::F32(ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap())
                }
                Dtype::U8 => {
                    let mut data = vec![0u8; n];
                    cur.read_exact(&mut data).map_err(io_err)?;
                    Tensor::U8(ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap())
                }
                Dtype::I64 => {
                    let mut data = vec![0i64; n];
                    cur.read_i64_into::<LittleEndian>(&mut data).map_err(io_err)?;
                    Tensor::I64(ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap())
                }
            };
            entries.insert(name, tensor);
        }
        Ok(Container { entries })
    }
}

/// Sha256 of a file, hex-encoded. Used for artifact checksums in manifests.
pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let data = std::fs::read(path)?;
    let digest = Sha256::digest(&data);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array1};

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut c = Container::new();
        c.insert_f64("a", arr2(&[[1.0f64, -0.0], [f64::MIN_POSITIVE, 3.5e300]]));
        c.insert_u8("mask", Array1::from(vec![0u8, 1, 1]));
        c.insert_i64("idx", Array1::from(vec![-5i64, 0, 7]));
        c.write(&path).unwrap();

        let back = Container::read(&path).unwrap();
        let a = back.f64(&path, "a").unwrap();
        let orig = c.f64(&path, "a").unwrap();
        for (x, y) in a.iter().zip(orig.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back.u8(&path, "mask").unwrap().as_slice().unwrap(), &[0, 1, 1]);
        assert_eq!(back.i64(&path, "idx").unwrap().as_slice().unwrap(), &[-5, 0, 7]);
    }

    #[test]
    fn corrupted_file_reports_checksum_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec_0007.bin");
        let mut c = Container::new();
        c.insert_f64("x", Array1::from(vec![1.0f64; 32]));
        c.write(&path).unwrap();

        let mut raw = std::fs::read(&path).unwrap();
        raw[20] ^= 0xff;
        std::fs::write(&path, &raw).unwrap();

        let err = Container::read(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rec_0007.bin"), "error should name the file: {msg}");
        assert!(matches!(err, ArrayIoError::Checksum { .. }));
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut c = Container::new();
        c.insert_f64("x", Array1::from(vec![1.0f64]));
        c.write(&path).unwrap();
        let back = Container::read(&path).unwrap();
        assert!(back.f64(&path, "y").is_err());
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        // valid checksum but wrong magic
        let mut body = b"XXXX".to_vec();
        body.extend_from_slice(&1u32.to_le_bytes());
        body.extend_from_slice(&0u32.to_le_bytes());
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        std::fs::write(&path, &body).unwrap();
        assert!(matches!(
            Container::read(&path).unwrap_err(),
            ArrayIoError::BadMagic { .. }
        ));
    }
}
