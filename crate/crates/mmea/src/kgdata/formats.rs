//! On-disk formats: TSV vocabularies/triples/pivots, the binary feature
//! matrix container, and flat `key = value` manifests.
//!
//! Binary feature container: magic bytes `MMEA`, then three little-endian
//! u32 (version = 1, rows, cols), then `rows * cols` little-endian f32
//! values row-major. An optional companion mask file holds `rows` bytes of
//! 0/1 (1 = feature observed). TSV matrices (one row per line,
//! tab-separated decimals) are accepted wherever the binary format is.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"MMEA";
pub const MATRIX_VERSION: u32 = 1;

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + m.data().len() * 4);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    if file.read_exact(&mut magic).is_err() || &magic != MATRIX_MAGIC {
        // Not the binary container; fall back to TSV.
        return read_matrix_tsv(path);
    }
    let mut header = [0u8; 12];
    file.read_exact(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(header[0..4].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported matrix version {version}"),
        ));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes of f32 data for {}x{}, found {}",
                rows * cols * 4,
                rows,
                cols,
                payload.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in payload.chunks_exact(4) {
        data.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
    }
    Matrix::from_vec(rows, cols, data)
}

fn read_matrix_tsv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split('\t').map(|t| t.trim().parse::<f64>()).collect();
        match row {
            Ok(r) => rows.push(r),
            Err(_) => {
                return Err(Error::format(
                    path,
                    format!("line {}: not a tab-separated row of decimals", lineno + 1),
                ))
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::format(path, "empty matrix file"));
    }
    Matrix::from_rows(&rows)
}

pub fn write_mask(path: &Path, mask: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&b| u8::from(b)).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path, expected_rows: usize) -> Result<Vec<bool>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_rows {
        return Err(Error::format(
            path,
            format!("mask has {} rows, expected {}", bytes.len(), expected_rows),
        ));
    }
    bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(path, format!("mask byte {other} not 0/1"))),
        })
        .collect()
}

/// `label<TAB>id` per line. Ids must form `0..n` exactly (any order).
pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs: Vec<(String, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let label = parts.next().unwrap_or("").to_string();
        let id: usize = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| {
                Error::format(path, format!("line {}: expected label<TAB>id", lineno + 1))
            })?;
        pairs.push((label, id));
    }
    let n = pairs.len();
    let mut labels = vec![None; n];
    for (label, id) in pairs {
        if id >= n {
            return Err(Error::format(path, format!("vocab id {id} out of range (n = {n})")));
        }
        if labels[id].is_some() {
            return Err(Error::format(path, format!("duplicate vocab id {id}")));
        }
        labels[id] = Some(label);
    }
    Ok(labels.into_iter().map(Option::unwrap).collect())
}

pub fn write_vocab(path: &Path, labels: &[String]) -> Result<()> {
    let mut out = String::new();
    for (id, label) in labels.iter().enumerate() {
        out.push_str(label);
        out.push('\t');
        out.push_str(&id.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `source_id<TAB>target_id` per line; an optional third column (scores
/// from pivot induction) is ignored on read.
pub fn read_pivots(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pivots = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let parse = |tok: Option<&str>| -> Option<usize> { tok.and_then(|s| s.trim().parse().ok()) };
        match (parse(parts.next()), parse(parts.next())) {
            (Some(s), Some(t)) => pivots.push((s, t)),
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: expected source_id<TAB>target_id", lineno + 1),
                ))
            }
        }
    }
    Ok(pivots)
}

pub fn write_pivots(path: &Path, pivots: &[(usize, usize)]) -> Result<()> {
    let mut out = String::new();
    for &(s, t) in pivots {
        out.push_str(&format!("{s}\t{t}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_scored_pivots(path: &Path, pivots: &[(usize, usize, f64)]) -> Result<()> {
    let mut out = String::new();
    for &(s, t, score) in pivots {
        out.push_str(&format!("{s}\t{t}\t{score}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Flat `key = value` configuration with `#` comments. Keys are unique;
/// later duplicates override earlier ones.
#[derive(Debug, Clone, Default)]
pub struct KeyValueFile {
    pub path: PathBuf,
    values: BTreeMap<String, String>,
}

impl KeyValueFile {
    pub fn parse(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::format(
                    path,
                    format!("line {}: expected key = value", lineno + 1),
                ));
            };
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(Error::format(path, format!("line {}: empty key", lineno + 1)));
            }
            values.insert(key, value);
        }
        Ok(KeyValueFile {
            path: path.to_path_buf(),
            values,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(&self.path, format!("missing key '{key}'")))
    }

    /// Path value resolved relative to the file's directory.
    pub fn path_value(&self, key: &str) -> Result<PathBuf> {
        let raw = self.require(key)?;
        Ok(self.resolve(raw))
    }

    pub fn opt_path_value(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|raw| self.resolve(raw))
    }

    fn resolve(&self, raw: &str) -> PathBuf {
        let p = Path::new(raw);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::format(&self.path, format!("key '{key}': cannot parse '{raw}'"))
            }),
        }
    }

    pub fn parsed_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

/// Write keys in sorted order so emitted configs are byte-stable.
pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (k, v) in pairs {
        writeln!(file, "{k} = {v}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
