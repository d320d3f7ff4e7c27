//! Flat binary container of named f64 arrays.
//!
//! Layout: the magic bytes `EBPARAMS`, a little-endian u64 header
//! length, a JSON header, then the concatenated array payloads as raw
//! little-endian f64. The header lists each array's name, shape, and
//! element offset into the payload, plus a free-form `meta` map for
//! scalar bookkeeping (iteration counters, rng state, config echoes).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EBPARAMS";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    meta: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Element (not byte) offset into the payload.
    offset: usize,
    len: usize,
}

/// In-memory form of a container: named tensors plus a metadata map.
/// Array order is preserved through save/load.
#[derive(Debug, Default)]
pub struct Container {
    names: Vec<String>,
    arrays: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, Value>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.arrays.contains_key(&name) {
            return Err(Error::Container(format!("duplicate array name {name:?}")));
        }
        self.names.push(name.clone());
        self.arrays.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing array {name:?}")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    /// Metadata convenience: stores any JSON-serializable value.
    pub fn set_meta<T: Serialize>(&mut self, key: impl Into<String>, value: &T) -> Result<()> {
        self.meta.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Container(format!("missing meta key {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.names.len());
        let mut offset = 0usize;
        for name in &self.names {
            let t = &self.arrays[name];
            entries.push(ArrayEntry {
                name: name.clone(),
                rows: t.rows,
                cols: t.cols,
                offset,
                len: t.data.len(),
            });
            offset += t.data.len();
        }
        let header = Header {
            version: VERSION,
            arrays: entries,
            meta: self.meta.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for name in &self.names {
            for v in &self.arrays[name].data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Container(format!("{}: file too short", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Container(format!(
                "{}: not a parameter container (bad magic)",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)
            .map_err(|_| Error::Container(format!("{}: truncated header", path.display())))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Container(format!("{}: bad header: {e}", path.display())))?;
        if header.version != VERSION {
            return Err(Error::Container(format!(
                "{}: unsupported container version {}",
                path.display(),
                header.version
            )));
        }

        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let total: usize = header.arrays.iter().map(|a| a.len).sum();
        if payload.len() != total * 8 {
            return Err(Error::Container(format!(
                "{}: payload is {} bytes, header expects {}",
                path.display(),
                payload.len(),
                total * 8
            )));
        }

        let mut c = Container::new();
        c.meta = header.meta;
        for a in &header.arrays {
            if a.rows * a.cols != a.len {
                return Err(Error::Container(format!(
                    "{}: array {:?} shape {}x{} does not match length {}",
                    path.display(),
                    a.name,
                    a.rows,
                    a.cols,
                    a.len
                )));
            }
            let start = a.offset * 8;
            let end = start + a.len * 8;
            if end > payload.len() {
                return Err(Error::Container(format!(
                    "{}: array {:?} extends past payload",
                    path.display(),
                    a.name
                )));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            c.insert(a.name.clone(), Tensor::new(a.rows, a.cols, data)?)?;
        }
        Ok(c)
    }
}
