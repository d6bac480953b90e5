//! Binary parameter blobs with a sidecar `key = value` text header.
//!
//! Blob layout (little endian): magic `SCPT`, `u32` format version, `u8`
//! element width in bytes, `u32` tensor count, then per tensor a `u32`-length
//! UTF-8 name, `u32` rank, `u64` dims and the raw elements.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Elem, Tensor};

const MAGIC: &[u8; 4] = b"SCPT";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered `key = value` metadata written next to every artifact.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Header {
    fields: BTreeMap<String, String>,
}

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.fields.insert(key.to_string(), value.to_string());
        self
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Format(format!("header is missing `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("header field `{key}` has unparsable value `{raw}`")))
    }

    /// Parses a whitespace-separated list field.
    pub fn get_list<V: FromStr>(&self, key: &str) -> Result<Vec<V>> {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Format(format!("header is missing `{key}`")))?;
        raw.split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Format(format!("header field `{key}` has unparsable item `{s}`")))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.fields.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("header line {}: expected `key = value`", lineno + 1)))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { fields })
    }
}

/// Path of the sidecar header for an artifact.
pub fn header_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".hdr");
    PathBuf::from(os)
}

pub fn write_header(path: &Path, header: &Header) -> Result<()> {
    fs::write(header_path(path), header.to_text())?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<Header> {
    Header::parse(&fs::read_to_string(header_path(path))?)
}

pub fn encode_params<T: Elem>(store: &ParamStore<T>) -> Vec<u8> {
    let width = std::mem::size_of::<T>() as u8;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(width);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.entries() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            if width == 4 {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated parameter blob".into()))?;
        let s = &self.bytes[self.pos..end];
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

pub fn decode_params<T: Elem>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a parameter blob (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported blob version {version}")));
    }
    let width = r.take(1)?[0];
    if width != 4 && width != 8 {
        return Err(Error::Format(format!("unsupported element width {width}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if width == 4 {
                f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(r.take(8)?.try_into().unwrap())
            };
            data.push(T::cast_from(v));
        }
        entries.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after parameter blob".into()));
    }
    Ok(ParamStore::from_entries(entries))
}

/// Writes the blob and its header.
pub fn save<T: Elem>(path: &Path, store: &ParamStore<T>, header: &Header) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_params(store))?;
    let mut header = header.clone();
    if header.raw("tool_version").is_none() {
        header.set("tool_version", crate::manifest::TOOL_VERSION);
    }
    write_header(path, &header)
}

pub fn load<T: Elem>(path: &Path) -> Result<(ParamStore<T>, Header)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok((decode_params(&bytes)?, read_header(path)?))
}
