//! On-disk formats: raw f32 arrays, `key = value` sidecars, portable weight
//! files, and small CSV helpers.
//!
//! All binary payloads are 32-bit IEEE-754 little-endian, row-major. Every
//! writer is deterministic — fixed key order, fixed float formatting — so
//! reruns with identical inputs produce byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

// ---------------------------------------------------------------- raw f32

/// Write a flat f32 slice as raw little-endian bytes.
pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a raw little-endian f32 file; `expect` is the required element count.
pub fn read_f32(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let meta_len = std::fs::metadata(path)?.len();
    if meta_len != (expect as u64) * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected {} f32 values ({} bytes), file has {} bytes", expect, expect * 4, meta_len),
        });
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut out = vec![0f32; expect];
    r.read_f32_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

// ------------------------------------------------------------- sidecars

/// An ordered `key = value` text file (scenario/gather/checkpoint sidecars).
///
/// Order is preserved on write so sidecars are byte-stable; lookups go
/// through an index. Values are free-form strings; numeric accessors parse
/// on demand and report the offending key on failure.
#[derive(Debug, Clone, Default)]
pub struct Meta {
    pairs: Vec<(String, String)>,
}

impl Meta {
    pub fn new() -> Self {
        Meta { pairs: Vec::new() }
    }

    pub fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.pairs.push((key.to_string(), value.to_string()));
    }

    /// Push an f64 in full round-trip precision.
    pub fn push_f64(&mut self, key: &str, value: f64) {
        self.pairs.push((key.to_string(), fmt_f64(value)));
    }

    /// Push a comma-separated list of f64 values.
    pub fn push_f64_list(&mut self, key: &str, values: &[f64]) {
        let s: Vec<String> = values.iter().map(|&v| fmt_f64(v)).collect();
        self.pairs.push((key.to_string(), s.join(",")));
    }

    /// Push a comma-separated list of integers.
    pub fn push_usize_list(&mut self, key: &str, values: &[usize]) {
        let s: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.pairs.push((key.to_string(), s.join(",")));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// All pairs in file order (for prefix scans over echo keys).
    pub fn entries(&self) -> &[(String, String)] {
        &self.pairs
    }

    fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: format!("missing key '{key}'"),
        })
    }

    pub fn get_f64(&self, key: &str, path: &Path) -> Result<f64> {
        parse_f64(self.require(key, path)?, key, path)
    }

    pub fn get_usize(&self, key: &str, path: &Path) -> Result<usize> {
        let raw = self.require(key, path)?;
        raw.trim().parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            detail: format!("key '{key}': '{raw}' is not an integer"),
        })
    }

    pub fn get_str(&self, key: &str, path: &Path) -> Result<String> {
        Ok(self.require(key, path)?.to_string())
    }

    pub fn get_f64_list(&self, key: &str, path: &Path) -> Result<Vec<f64>> {
        let raw = self.require(key, path)?;
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| parse_f64(s, key, path))
            .collect()
    }

    pub fn get_usize_list(&self, key: &str, path: &Path) -> Result<Vec<usize>> {
        let raw = self.require(key, path)?;
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("key '{key}': '{s}' is not an integer"),
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (k, v) in &self.pairs {
            writeln!(w, "{k} = {v}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t.split_once('=').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: expected 'key = value'", lineno + 1),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Meta { pairs })
    }
}

fn parse_f64(s: &str, key: &str, path: &Path) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        detail: format!("key '{key}': '{s}' is not a number"),
    })
}

/// Full round-trip f64 formatting (17 significant digits, scientific).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

// ----------------------------------------------------------- weight files

/// Magic line of the portable weight format.
const WEIGHTS_MAGIC: &str = "w32 1";

/// Write named tensors as a portable weight file: a text index
/// (`tensor <name> f32 <d0xd1x…> <offset> <bytes>` per line, offsets into
/// the payload), an `end` line, then the concatenated raw f32 LE payload.
pub fn save_weights(path: &Path, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{WEIGHTS_MAGIC}")?;
    let mut offset = 0u64;
    for (name, shape, data) in tensors {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let bytes = (data.len() * 4) as u64;
        writeln!(w, "tensor {name} f32 {} {offset} {bytes}", dims.join("x"))?;
        offset += bytes;
    }
    writeln!(w, "end")?;
    for (_, _, data) in tensors {
        for &v in data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A loaded weight file: tensors by name, shapes checked on access.
#[derive(Debug)]
pub struct WeightStore {
    path: PathBuf,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl WeightStore {
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != WEIGHTS_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("bad magic '{}'", line.trim_end()),
            });
        }
        // Index: (name, shape, offset, bytes) until the `end` line.
        let mut index = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: "index not terminated by 'end'".into(),
                });
            }
            let t = line.trim_end();
            if t == "end" {
                break;
            }
            let parts: Vec<&str> = t.split_whitespace().collect();
            if parts.len() != 6 || parts[0] != "tensor" || parts[2] != "f32" {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("bad index line '{t}'"),
                });
            }
            let shape: Vec<usize> = parts[3]
                .split('x')
                .map(|d| {
                    d.parse().map_err(|_| Error::Format {
                        path: path.to_path_buf(),
                        detail: format!("bad dimension '{d}'"),
                    })
                })
                .collect::<Result<_>>()?;
            let offset: u64 = parts[4].parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                detail: format!("bad offset '{}'", parts[4]),
            })?;
            let bytes: u64 = parts[5].parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                detail: format!("bad length '{}'", parts[5]),
            })?;
            index.push((parts[1].to_string(), shape, offset, bytes));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let have = payload.len() as u64;

        let mut tensors = BTreeMap::new();
        for (name, shape, offset, bytes) in index {
            let need = offset + bytes;
            if need > have {
                return Err(Error::TruncatedWeights {
                    path: path.to_path_buf(),
                    need,
                    have,
                });
            }
            let n = shape.iter().product::<usize>();
            if (n * 4) as u64 != bytes {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("tensor '{name}': shape {shape:?} disagrees with byte length {bytes}"),
                });
            }
            let raw = &payload[offset as usize..need as usize];
            let mut data = vec![0f32; n];
            let mut cur = std::io::Cursor::new(raw);
            cur.read_f32_into::<LittleEndian>(&mut data)?;
            tensors.insert(name, (shape, data));
        }
        Ok(WeightStore {
            path: path.to_path_buf(),
            tensors,
        })
    }

    /// Names present, sorted.
    pub fn names(&self) -> Vec<&str> {
        self.tensors.keys().map(|s| s.as_str()).collect()
    }

    /// Fetch a tensor, checking the expected shape.
    pub fn get(&self, name: &str, expected: &[usize]) -> Result<ArrayD<f32>> {
        let (shape, data) = self.tensors.get(name).ok_or_else(|| Error::MissingTensor {
            path: self.path.clone(),
            name: name.to_string(),
        })?;
        if shape != expected {
            return Err(Error::TensorShape {
                path: self.path.clone(),
                name: name.to_string(),
                expected: expected.to_vec(),
                found: shape.clone(),
            });
        }
        Ok(ArrayD::from_shape_vec(IxDyn(shape), data.clone()).expect("shape checked"))
    }
}

// ------------------------------------------------------------------ CSV

/// Write CSV rows (no quoting; all fields are plain numbers/identifiers).
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a CSV written by [`write_csv`]: returns (header fields, rows).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "empty CSV".into(),
            })
        }
    };
    let head: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        rows.push(line.split(',').map(|s| s.to_string()).collect());
    }
    Ok((head, rows))
}
