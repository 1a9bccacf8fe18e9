//! PGM images and comma-separated numeric tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::error::{invalid, Error, Result};

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub values: DVector<f64>,
}

/// Encodes `values` (row-major) as a 16-bit PGM, mapping `[lo, hi]` onto
/// `0..=65535` and clamping outside it. `binary` selects P5 over P2.
pub fn encode_pgm(values: &DVector<f64>, rows: usize, cols: usize, lo: f64, hi: f64, binary: bool) -> Result<Vec<u8>> {
    if values.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            got: values.len(),
        });
    }
    if !(hi > lo) {
        return invalid("PGM range needs hi > lo");
    }
    let level = |v: f64| -> u16 {
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        if t.is_nan() {
            0
        } else {
            (t * 65535.0).round() as u16
        }
    };
    let mut out = format!("{}\n{cols} {rows}\n65535\n", if binary { "P5" } else { "P2" }).into_bytes();
    if binary {
        for &v in values.iter() {
            out.extend_from_slice(&level(v).to_be_bytes());
        }
    } else {
        for row in values.as_slice().chunks(cols) {
            let line: Vec<String> = row.iter().map(|&v| level(v).to_string()).collect();
            out.extend_from_slice(line.join(" ").as_bytes());
            out.push(b'\n');
        }
    }
    Ok(out)
}

/// Decodes a P2 or P5 image into values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Parse(format!("bad PGM header field '{s}'"))) };
    let (cols, rows, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval == 0 || maxval > 65535 || rows == 0 || cols == 0 {
        return Err(Error::Parse("unsupported PGM dimensions or maxval".into()));
    }
    let n = rows * cols;
    let scale = 1.0 / maxval as f64;
    let values: Vec<f64> = match header[0].as_str() {
        "P5" => {
            let data = &bytes[(pos + 1).min(bytes.len())..];
            let width = if maxval > 255 { 2 } else { 1 };
            if data.len() < n * width {
                return Err(Error::Parse("truncated PGM raster".into()));
            }
            (0..n)
                .map(|k| {
                    let v = if width == 2 {
                        u16::from_be_bytes([data[2 * k], data[2 * k + 1]]) as f64
                    } else {
                        data[k] as f64
                    };
                    v * scale
                })
                .collect()
        }
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals = text
                .split_whitespace()
                .take(n)
                .map(|t| t.parse::<f64>().map(|v| v * scale).map_err(|_| Error::Parse(format!("bad pixel '{t}'"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() < n {
                return Err(Error::Parse("truncated PGM raster".into()));
            }
            vals
        }
        other => return Err(Error::Parse(format!("not a PGM file (magic '{other}')"))),
    };
    Ok(Image {
        rows,
        cols,
        values: DVector::from_vec(values),
    })
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    decode_pgm(&fs::read(path)?)
}

/// Comma-separated table with a header row; every column must have the
/// same length. Numbers use the shortest round-trip formatting.
pub fn encode_csv(header: &[&str], columns: &[&[f64]]) -> Result<Vec<u8>> {
    if header.len() != columns.len() {
        return invalid("CSV header and column counts differ");
    }
    let rows = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != rows) {
        return invalid("CSV columns have different lengths");
    }
    let mut out = Vec::new();
    writeln!(out, "{}", header.join(","))?;
    for r in 0..rows {
        let line: Vec<String> = columns.iter().map(|c| c[r].to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(out)
}

/// Reads a numeric CSV with one header line into `(header, columns)`.
pub fn decode_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse("empty CSV".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Parse(format!("CSV row has {} fields, expected {}", fields.len(), header.len())));
        }
        for (c, f) in cols.iter_mut().zip(fields) {
            c.push(f.trim().parse().map_err(|_| Error::Parse(format!("bad number '{f}'")))?);
        }
    }
    Ok((header, cols))
}

/// Files written by one run, deleted again by [`OutputSet::discard`] when
/// the run fails.
#[derive(Debug)]
pub struct OutputSet {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        fs::write(&path, bytes)?;
        Ok(path)
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn discard(self) {
        for p in self.written {
            let _ = fs::remove_file(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let v = DVector::from_vec(vec![0.0, 0.25, 0.5, 1.0, 2.0, -1.0]);
        for binary in [false, true] {
            let bytes = encode_pgm(&v, 2, 3, 0.0, 1.0, binary).unwrap();
            let img = decode_pgm(&bytes).unwrap();
            assert_eq!((img.rows, img.cols), (2, 3));
            let expect = [0.0, 0.25, 0.5, 1.0, 1.0, 0.0];
            for (a, b) in img.values.iter().zip(expect) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn reads_8bit_with_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.values.as_slice(), &[0.0, 1.0]);
        assert!(decode_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let a = [1.0, 0.1 + 0.2];
        let b = [-3e-300, 7.0];
        let bytes = encode_csv(&["a", "b"], &[&a, &b]).unwrap();
        let (h, cols) = decode_csv(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(cols, vec![a.to_vec(), b.to_vec()]);
        assert!(encode_csv(&["a"], &[&a, &b]).is_err());
    }
}
