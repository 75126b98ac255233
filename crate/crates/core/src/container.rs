//! The GRTC tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GRTC"  version:u32  count:u32
//! count × { name_len:u32  name:utf8  dtype:u32  rank:u32  extents:u64×rank  payload }
//! crc32:u32   (over every preceding byte)
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64, 3 = u32. Payload is row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GRTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

/// Ordered named tensors. Entry order is preserved on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, entry: Entry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(Error::DuplicateName(entry.name));
        }
        let n: usize = entry.shape.iter().product();
        if n != entry.payload.len() {
            return Err(Error::shape(
                "Container::push",
                format!(
                    "`{}`: shape {:?} vs {} values",
                    entry.name,
                    entry.shape,
                    entry.payload.len()
                ),
            ));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.to_f32().unwrap()).collect()),
            _ => Payload::F64(t.data().iter().map(|v| v.to_f64c()).collect()),
        };
        self.push(Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload,
        })
    }

    pub fn push_u32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<u32>) -> Result<()> {
        self.push(Entry {
            name: name.into(),
            shape,
            payload: Payload::U32(data),
        })
    }

    pub fn push_labels(&mut self, name: impl Into<String>, labels: &[usize]) -> Result<()> {
        let data = labels
            .iter()
            .map(|&l| u32::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds u32"))))
            .collect::<Result<Vec<_>>>()?;
        self.push_u32(name, vec![labels.len()], data)
    }

    /// Stores a UTF-8 string as a `meta/<key>` u32 tensor, one byte per element.
    pub fn push_meta(&mut self, key: &str, value: &str) -> Result<()> {
        let bytes: Vec<u32> = value.bytes().map(u32::from).collect();
        self.push_u32(format!("meta/{key}"), vec![bytes.len()], bytes)
    }

    pub fn meta(&self, key: &str) -> Option<String> {
        match &self.get(&format!("meta/{key}"))?.payload {
            Payload::U32(v) => {
                let bytes: Option<Vec<u8>> = v.iter().map(|&b| u8::try_from(b).ok()).collect();
                String::from_utf8(bytes?).ok()
            }
            _ => None,
        }
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing entry `{name}`")))
    }

    /// A float entry converted to `T`; non-finite values are rejected.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.require(name)?;
        let data: Vec<T> = match &e.payload {
            Payload::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
            Payload::U32(_) => return Err(Error::Format(format!("entry `{name}` is not floating point"))),
        };
        Tensor::new(e.shape.clone(), data)
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match &self.require(name)?.payload {
            Payload::U32(v) => Ok(v),
            _ => Err(Error::Format(format!("entry `{name}` is not u32"))),
        }
    }

    pub fn labels(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.u32s(name)?.iter().map(|&v| v as usize).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.payload.dtype().code() as u32).to_le_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format(format!("truncated: {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let code = r.u32()?;
            let dtype = u8::try_from(code)
                .ok()
                .and_then(DType::from_code)
                .ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                let d = r.u64()?;
                shape.push(usize::try_from(d).map_err(|_| Error::Format("extent overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("shape overflow".into()))?;
            let len = n
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format("payload overflow".into()))?;
            let raw = r.take(len)?;
            let payload = match dtype {
                DType::F32 => Payload::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => Payload::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
                DType::U32 => Payload::U32(
                    raw.chunks_exact(4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
            };
            c.push(Entry { name, shape, payload })
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes rows to CSV with a header and writes the file atomically.
pub fn write_csv<S: serde::Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))?;
    atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_round_trip_and_duplicates() {
        let mut c = Container::new();
        c.push_meta("config_hash", "abc123").unwrap();
        assert!(c.push_meta("config_hash", "x").is_err());
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.meta("config_hash").as_deref(), Some("abc123"));
        assert_eq!(back.meta("missing"), None);
    }

    #[test]
    fn rejects_bad_magic_version_and_dtype() {
        let mut c = Container::new();
        c.push_u32("a", vec![1], vec![7]).unwrap();
        let good = c.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));

        let reseal = |mut body: Vec<u8>| {
            body.truncate(body.len() - 4);
            let crc = crc32fast::hash(&body);
            body.extend_from_slice(&crc.to_le_bytes());
            body
        };
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(Container::from_bytes(&reseal(v2)), Err(Error::Format(_))));

        // dtype field sits after magic, version, count, name_len and the 1-byte name
        let mut dt = good.clone();
        dt[4 + 4 + 4 + 4 + 1] = 9;
        assert!(matches!(Container::from_bytes(&reseal(dt)), Err(Error::Format(_))));

        assert!(Container::from_bytes(&good[..good.len() - 6]).is_err());
    }
}
