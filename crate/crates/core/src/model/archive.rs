//! `.rs3w` weight archives.
//!
//! Layout: `RS3W`, u32 version, u32 entry count, then per entry a u16 name
//! length, the UTF-8 name, u8 dtype, u8 ndim, ndim × u32 dims and the raw
//! little-endian values. All integers are little-endian.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use super::{ModelConfig, Rs3Mamba};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{decode_le, DType, Scalar, Tensor};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"RS3W";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian values exactly as stored.
    pub bytes: Vec<u8>,
}

impl ArchiveEntry {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        ArchiveEntry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), decode_le(&self.bytes, self.dtype))
    }
}

/// Ordered named tensors with unique names.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WeightArchive {
    pub entries: Vec<ArchiveEntry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("archive {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl WeightArchive {
    pub fn from_module<T: Scalar>(m: &impl Module<T>) -> Self {
        let mut entries = Vec::new();
        m.visit("", &mut |name, t, _| entries.push(ArchiveEntry::from_tensor(name, t)));
        WeightArchive { entries }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            let name_len = u16::try_from(e.name.len())
                .map_err(|_| Error::Format(format!("name too long: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype as u8);
            let ndim = u8::try_from(e.shape.len()).map_err(|_| Error::Format("too many axes".into()))?;
            out.push(ndim);
            for &d in &e.shape {
                let d = u32::try_from(d).map_err(|_| Error::Format("axis exceeds u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            if e.bytes.len() != e.shape.iter().product::<usize>() * e.dtype.size() {
                return Err(Error::Format(format!("entry `{}` payload size mismatch", e.name)));
            }
            out.extend_from_slice(&e.bytes);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != ARCHIVE_MAGIC {
            return Err(Error::Format("bad archive magic".into()));
        }
        let version = r.u32("version")?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("unknown dtype {code} for `{name}`")))?;
            let ndim = r.u8("ndim")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Format(format!("shape of `{name}` overflows")))?;
            let data = r.take(n, "payload")?.to_vec();
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            entries.push(ArchiveEntry {
                name,
                dtype,
                shape,
                bytes: data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after archive".into()));
        }
        Ok(WeightArchive { entries })
    }

    /// Overwrite every tensor of `m` from the archive. Every parameter must
    /// be present with a matching shape; entries that match nothing are an
    /// error unless `allow_unused`.
    pub fn apply<T: Scalar>(&self, m: &mut impl Module<T>, allow_unused: bool) -> Result<()> {
        let index: HashMap<&str, &ArchiveEntry> =
            self.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        if index.len() != self.entries.len() {
            let mut seen = HashSet::new();
            let dup = self.entries.iter().find(|e| !seen.insert(&e.name)).unwrap();
            return Err(Error::DuplicateName(dup.name.clone()));
        }
        let mut used = HashSet::new();
        let mut err = None;
        m.visit_mut("", &mut |name, t, _| {
            if err.is_some() {
                return;
            }
            match index.get(name) {
                None => err = Some(Error::MissingName(name.to_string())),
                Some(e) if e.shape != t.shape() => {
                    err = Some(Error::shape(
                        "load_weights",
                        format!("`{name}` stored as {:?}, model expects {:?}", e.shape, t.shape()),
                    ))
                }
                Some(e) => match e.to_tensor() {
                    Ok(v) => {
                        *t = v;
                        used.insert(name.to_string());
                    }
                    Err(e) => err = Some(e),
                },
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !allow_unused {
            if let Some(e) = self.entries.iter().find(|e| !used.contains(&e.name)) {
                return Err(Error::UnknownName(e.name.clone()));
            }
        }
        Ok(())
    }
}

pub fn save_weights<T: Scalar>(model: &Rs3Mamba<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, WeightArchive::from_module(model).encode()?)?;
    Ok(())
}

pub fn load_weights<T: Scalar>(
    config: &ModelConfig,
    path: impl AsRef<Path>,
    allow_unused: bool,
) -> Result<Rs3Mamba<T>> {
    let archive = WeightArchive::decode(&fs::read(path)?)?;
    let mut model = Rs3Mamba::zeros(config)?;
    archive.apply(&mut model, allow_unused)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_archive_round_trips() {
        let a = WeightArchive::default();
        let bytes = a.encode().unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(WeightArchive::decode(&bytes).unwrap(), a);
    }

    #[test]
    fn single_tensor_bit_identical() {
        let t = Tensor::<f32>::from_fn([3, 2], |i| (i as f32 * 0.37).cos() / 7.0);
        let a = WeightArchive {
            entries: vec![ArchiveEntry::from_tensor("x.weight", &t)],
        };
        let back = WeightArchive::decode(&a.encode().unwrap()).unwrap();
        let u: Tensor<f32> = back.entries[0].to_tensor().unwrap();
        assert!(u.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn faults_map_to_distinct_errors() {
        let t = Tensor::<f64>::ones([2]);
        let a = WeightArchive {
            entries: vec![ArchiveEntry::from_tensor("w", &t)],
        };
        let bytes = a.encode().unwrap();
        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        assert!(matches!(WeightArchive::decode(&bad), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(WeightArchive::decode(&ver), Err(Error::Format(_))));
        assert!(matches!(
            WeightArchive::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        let dup = WeightArchive {
            entries: vec![a.entries[0].clone(), a.entries[0].clone()],
        };
        assert!(matches!(
            WeightArchive::decode(&dup.encode().unwrap()),
            Err(Error::DuplicateName(_))
        ));
    }
}
