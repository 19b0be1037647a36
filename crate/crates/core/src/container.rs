//! Flat binary tensor container.
//!
//! Layout: magic `OWM1`, format version u16, record count u32, then per
//! record: name length u16, UTF-8 name, dtype u8 (0 = f32, 1 = u8, 2 = i64),
//! rank u8, extents as u32 each, then the payload little-endian in row-major
//! order. All integers little-endian. Record order is preserved, so a file
//! regenerated from identical state is byte-identical.
//!
//! Writes go to a temp file in the target directory and are renamed into
//! place, so readers never observe a partial file.

use crate::error::{OwmError, Result};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"OWM1";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl RecordData {
    pub fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::U8(v) => v.len(),
            RecordData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_tag(&self) -> u8 {
        match self {
            RecordData::F32(_) => 0,
            RecordData::U8(_) => 1,
            RecordData::I64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

/// In-memory container; records keep insertion order.
#[derive(Debug, Default, Clone)]
pub struct ContainerFile {
    records: Vec<Record>,
    index: HashMap<String, usize>,
}

impl ContainerFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: RecordData) -> Result<()> {
        let count: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || count != data.len() {
            return Err(OwmError::Format(format!(
                "record {name}: shape {shape:?} does not hold {} elements",
                data.len()
            )));
        }
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(OwmError::Format(format!("record name length {} out of range", name.len())));
        }
        if shape.len() > u8::MAX as usize || shape.iter().any(|&e| e > u32::MAX as usize) {
            return Err(OwmError::Format(format!("record {name}: shape {shape:?} exceeds format limits")));
        }
        if self.index.contains_key(name) {
            return Err(OwmError::Format(format!("duplicate record name {name}")));
        }
        self.index.insert(name.to_string(), self.records.len());
        self.records.push(Record { name: name.to_string(), shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.index.get(name).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn require_f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.get(name) {
            Some(Record { shape, data: RecordData::F32(v), .. }) => Ok((shape, v)),
            Some(_) => Err(OwmError::Format(format!("record {name} is not f32"))),
            None => Err(OwmError::Format(format!("missing record {name}"))),
        }
    }

    pub fn require_u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.get(name) {
            Some(Record { shape, data: RecordData::U8(v), .. }) => Ok((shape, v)),
            Some(_) => Err(OwmError::Format(format!("record {name} is not u8"))),
            None => Err(OwmError::Format(format!("missing record {name}"))),
        }
    }

    pub fn require_i64(&self, name: &str) -> Result<(&[usize], &[i64])> {
        match self.get(name) {
            Some(Record { shape, data: RecordData::I64(v), .. }) => Ok((shape, v)),
            Some(_) => Err(OwmError::Format(format!("record {name} is not i64"))),
            None => Err(OwmError::Format(format!("missing record {name}"))),
        }
    }

    /// Scalar convenience for one-element i64 records.
    pub fn require_i64_scalar(&self, name: &str) -> Result<i64> {
        let (_, v) = self.require_i64(name)?;
        if v.len() != 1 {
            return Err(OwmError::Format(format!("record {name} is not a scalar")));
        }
        Ok(v[0])
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(r.name.as_bytes());
            buf.push(r.data.dtype_tag());
            buf.push(r.shape.len() as u8);
            for &e in &r.shape {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            match &r.data {
                RecordData::F32(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                RecordData::U8(v) => buf.extend_from_slice(v),
                RecordData::I64(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp-{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("container"),
            std::process::id()
        ));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let magic = c.take(4)?;
        if magic != MAGIC {
            return Err(OwmError::Format(format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(c.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(OwmError::Format(format!("unsupported format version {version}")));
        }
        let count = u32::from_le_bytes(c.take(4)?.try_into().unwrap()) as usize;
        let mut out = ContainerFile::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| OwmError::Format("record name is not UTF-8".to_string()))?
                .to_string();
            let dtype = c.take(1)?[0];
            let rank = c.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(c.take(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => {
                    let raw = c.take(n * 4)?;
                    let mut v = Vec::with_capacity(n);
                    for ch in raw.chunks_exact(4) {
                        let x = f32::from_le_bytes(ch.try_into().unwrap());
                        if !x.is_finite() {
                            return Err(OwmError::Format(format!("record {name}: non-finite f32")));
                        }
                        v.push(x);
                    }
                    RecordData::F32(v)
                }
                1 => RecordData::U8(c.take(n)?.to_vec()),
                2 => {
                    let raw = c.take(n * 8)?;
                    RecordData::I64(raw.chunks_exact(8).map(|ch| i64::from_le_bytes(ch.try_into().unwrap())).collect())
                }
                t => return Err(OwmError::Format(format!("record {name}: unknown dtype {t}"))),
            };
            out.push(&name, &shape, data)?;
        }
        if c.pos != bytes.len() {
            return Err(OwmError::Format(format!("{} trailing bytes after last record", bytes.len() - c.pos)));
        }
        Ok(out)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(OwmError::Format(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
