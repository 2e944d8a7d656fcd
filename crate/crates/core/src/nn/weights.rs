//! `JNKW` weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "JNKW" | version: u32 | section_count: u32 | section*
//! section := name_len: u32 | name: utf-8 | dtype: u8 | ndim: u32 | dims: u64* | payload
//! ```
//!
//! `dtype` 0 is f64, 1 is f32, 2 is raw bytes. The section named `manifest`
//! holds a JSON document with at least a `kind` field.

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use super::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"JNKW";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    Bytes = 2,
}

impl DType {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            2 => Ok(DType::Bytes),
            other => Err(Error::Weights(format!("unknown dtype tag {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::Bytes => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub payload: Vec<u8>,
}

impl Section {
    pub fn f64(name: impl Into<String>, shape: &[usize], values: &[f64]) -> Self {
        let mut payload = Vec::with_capacity(values.len() * 8);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Section {
            name: name.into(),
            dtype: DType::F64,
            shape: shape.iter().map(|&d| d as u64).collect(),
            payload,
        }
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        match self.dtype {
            DType::F64 => Ok(self
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()),
            DType::F32 => Ok(self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()),
            DType::Bytes => Err(Error::Weights(format!("section {} is not numeric", self.name))),
        }
    }

    fn element_count(&self) -> u64 {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub sections: Vec<Section>,
}

impl WeightFile {
    pub fn new(manifest: &Value) -> Self {
        let bytes = serde_json::to_vec(manifest).expect("json values serialize");
        WeightFile {
            sections: vec![Section {
                name: MANIFEST.into(),
                dtype: DType::Bytes,
                shape: vec![bytes.len() as u64],
                payload: bytes,
            }],
        }
    }

    pub fn manifest(&self) -> Result<Value> {
        let s = self.section(MANIFEST)?;
        serde_json::from_slice(&s.payload).map_err(|e| Error::Weights(format!("manifest: {e}")))
    }

    /// Fails unless the manifest's `kind` equals `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<Value> {
        let m = self.manifest()?;
        match m.get("kind").and_then(Value::as_str) {
            Some(k) if k == kind => Ok(m),
            Some(k) => Err(Error::Weights(format!("expected model kind {kind}, found {k}"))),
            None => Err(Error::Weights("manifest has no kind".into())),
        }
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: &[usize], values: &[f64]) {
        self.sections.push(Section::f64(name, shape, values));
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.push_f64(name, &[m.rows(), m.cols()], m.as_slice());
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Weights(format!("missing section {name}")))
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let s = self.section(name)?;
        let v = s.values()?;
        if v.len() != len {
            return Err(Error::Weights(format!("section {name}: expected {len} values, found {}", v.len())));
        }
        Ok(v)
    }

    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let s = self.section(name)?;
        if s.shape != [rows as u64, cols as u64] {
            return Err(Error::Weights(format!("section {name}: expected shape [{rows}, {cols}], found {:?}", s.shape)));
        }
        Matrix::new(rows, cols, s.values()?)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for s in &self.sections {
            w.write_all(&(s.name.len() as u32).to_le_bytes())?;
            w.write_all(s.name.as_bytes())?;
            w.write_all(&[s.dtype as u8])?;
            w.write_all(&(s.shape.len() as u32).to_le_bytes())?;
            for d in &s.shape {
                w.write_all(&d.to_le_bytes())?;
            }
            w.write_all(&s.payload)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Weights("bad magic (not a JNKW file)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Weights(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::Weights("section name is not utf-8".into()))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(truncated)?;
            let dtype = DType::from_u8(tag[0])?;
            let ndim = read_u32(&mut r)?;
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(truncated)?;
                shape.push(u64::from_le_bytes(b));
            }
            let mut section = Section {
                name,
                dtype,
                shape,
                payload: Vec::new(),
            };
            let bytes = section
                .element_count()
                .checked_mul(dtype.width() as u64)
                .filter(|&b| b < (1 << 34))
                .ok_or_else(|| Error::Weights(format!("section {} is implausibly large", section.name)))?;
            section.payload = vec![0u8; bytes as usize];
            r.read_exact(&mut section.payload).map_err(truncated)?;
            sections.push(section);
        }
        Ok(WeightFile { sections })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        WeightFile::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Weights("truncated file".into())
    } else {
        Error::Io(e)
    }
}
