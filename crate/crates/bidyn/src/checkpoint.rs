//! Versioned binary checkpoint store.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  b"BDYN"
//! version u16      currently 1
//! count   u32      number of records
//! record:
//!   name_len u16
//!   name     UTF-8 bytes
//!   ndim     u8
//!   dims     ndim x u64
//!   payload  prod(dims) x f64 (IEEE 754, little-endian)
//! ```
//!
//! Records are written and read in insertion order; names must be unique.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"BDYN";
const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// An in-memory collection of named arrays with binary (de)serialization.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    records: Vec<Record>,
    index: BTreeMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid_input(format!(
                "record {name}: shape {shape:?} implies {expected} values, got {}",
                data.len()
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::invalid_input(format!("duplicate record name {name}")));
        }
        self.index.insert(name.clone(), self.records.len());
        self.records.push(Record {
            name,
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
        Ok(())
    }

    pub fn add_scalar(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        self.add(name, &[1], &[value])
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.index
            .get(name)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::Format(format!("missing checkpoint record {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let rec = self.get(name)?;
        if rec.data.len() != 1 {
            return Err(Error::Format(format!("record {name} is not a scalar")));
        }
        Ok(rec.data[0])
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for rec in &self.records {
            let name = rec.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::invalid_input("record name too long"));
            }
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[rec.shape.len() as u8])?;
            for &d in &rec.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &rec.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic header".into()));
        }
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let version = u16::from_le_bytes(buf2);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let count = u32::from_le_bytes(buf4) as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            r.read_exact(&mut buf2)?;
            let name_len = u16::from_le_bytes(buf2) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let mut buf1 = [0u8; 1];
            r.read_exact(&mut buf1)?;
            let ndim = buf1[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut buf8 = [0u8; 8];
            for _ in 0..ndim {
                r.read_exact(&mut buf8)?;
                shape.push(u64::from_le_bytes(buf8) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf8)?;
                data.push(f64::from_le_bytes(buf8));
            }
            ckpt.add(name, &shape, &data)?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}
