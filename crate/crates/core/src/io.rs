//! Manifest + flat binary storage shared by dataset snapshots and checkpoints.
//!
//! A store is a directory holding `manifest.txt` (one `key=value` per line,
//! `#` comments allowed) and `data.bin`, a flat little-endian `f64` array.
//! Complex values are interleaved `(re, im)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ComplexMatrix, C64};

pub const MANIFEST: &str = "manifest.txt";
pub const DATA: &str = "data.bin";

/// Ordered key/value manifest.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("manifest key `{key}` has bad value `{raw}`")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {} has no `=`", n + 1)))?;
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(Error::Format(format!("duplicate manifest key `{k}`")));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Self { entries })
    }
}

/// Growable buffer of doubles written in one go.
#[derive(Debug, Default)]
pub struct F64Writer {
    values: Vec<f64>,
}

impl F64Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, v: f64) {
        self.values.push(v);
    }

    pub fn push_complex(&mut self, z: C64) {
        self.values.push(z.re);
        self.values.push(z.im);
    }

    pub fn push_matrix(&mut self, m: &ComplexMatrix) {
        for &z in m.data() {
            self.push_complex(z);
        }
    }
}

/// Sequential reader over a decoded `f64` array.
#[derive(Debug)]
pub struct F64Reader {
    values: Vec<f64>,
    pos: usize,
}

impl F64Reader {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.values.len() - self.pos
    }

    pub fn next(&mut self) -> Result<f64> {
        let v = *self
            .values
            .get(self.pos)
            .ok_or_else(|| Error::Format("binary payload is truncated".into()))?;
        self.pos += 1;
        Ok(v)
    }

    pub fn next_complex(&mut self) -> Result<C64> {
        Ok(C64::new(self.next()?, self.next()?))
    }

    pub fn next_matrix(&mut self, rows: usize, cols: usize) -> Result<ComplexMatrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.next_complex()?);
        }
        ComplexMatrix::from_vec(rows, cols, data)
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing values in binary payload",
                self.remaining()
            )));
        }
        Ok(())
    }
}

pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "binary payload length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_store(dir: &Path, manifest: &Manifest, data: &F64Writer) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), manifest.to_text())?;
    let mut f = BufWriter::new(fs::File::create(dir.join(DATA))?);
    f.write_all(&encode_f64s(&data.values))?;
    f.flush()?;
    Ok(())
}

pub fn read_store(dir: &Path) -> Result<(Manifest, F64Reader)> {
    let manifest = Manifest::from_text(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let values = decode_f64s(&fs::read(dir.join(DATA))?)?;
    Ok((manifest, F64Reader::new(values)))
}
