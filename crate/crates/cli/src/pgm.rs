//! Netpbm graymaps in, 8-bit binary graymaps out.

use harmonize_core::masking::BinaryMask;
use harmonize_core::Matrix;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("truncated image header")]
    Header,
    #[error("bad header field `{0}`")]
    Field(String),
    #[error("expected {expected} samples, found {found}")]
    Samples { expected: usize, found: usize },
    #[error("sample {value} exceeds maxval {maxval}")]
    Range { value: u32, maxval: u32 },
    #[error("grid row {row} has {found} values, expected {expected}")]
    Ragged { row: usize, found: usize, expected: usize },
    #[error("`{0}` is not a number")]
    Number(String),
    #[error("non-finite grid value")]
    NonFinite,
}

/// Reads a P5 or P2 graymap (samples scaled to `[0, 1]` by maxval) or a
/// plain grid of whitespace- or comma-separated numbers, one row per line.
pub fn read_image(bytes: &[u8]) -> Result<Matrix, PgmError> {
    match bytes.get(..2) {
        Some(b"P5") => read_netpbm(bytes, true),
        Some(b"P2") => read_netpbm(bytes, false),
        _ => read_grid(&String::from_utf8_lossy(bytes)),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn token(&mut self) -> Option<&str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.bytes.get(self.pos) == Some(&b'#') {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or(""))
    }

    fn number(&mut self) -> Result<u32, PgmError> {
        let t = self.token().ok_or(PgmError::Header)?;
        t.parse().map_err(|_| PgmError::Field(t.to_string()))
    }
}

fn read_netpbm(bytes: &[u8], binary: bool) -> Result<Matrix, PgmError> {
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number()? as usize;
    let height = c.number()? as usize;
    let maxval = c.number()?;
    if maxval == 0 || maxval > 65_535 {
        return Err(PgmError::Field(maxval.to_string()));
    }
    let n = width * height;
    let mut samples = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        let raster = bytes.get(c.pos + 1..).unwrap_or(&[]);
        let wide = maxval > 255;
        let size = if wide { 2 } else { 1 };
        if raster.len() < n * size {
            return Err(PgmError::Samples { expected: n, found: raster.len() / size });
        }
        for i in 0..n {
            let s = if wide {
                u32::from(u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]))
            } else {
                u32::from(raster[i])
            };
            samples.push(s);
        }
    } else {
        while let Some(t) = c.token() {
            samples.push(t.parse().map_err(|_| PgmError::Number(t.to_string()))?);
        }
        if samples.len() != n {
            return Err(PgmError::Samples { expected: n, found: samples.len() });
        }
    }
    if let Some(&value) = samples.iter().find(|&&s| s > maxval) {
        return Err(PgmError::Range { value, maxval });
    }
    let data = samples.into_iter().map(|s| f64::from(s) / f64::from(maxval)).collect();
    Ok(Matrix::new(height, width, data).expect("length and finiteness checked"))
}

fn read_grid(text: &str) -> Result<Matrix, PgmError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|ch: char| ch.is_whitespace() || ch == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|_| PgmError::Number(t.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(PgmError::Ragged { row: rows.len(), found: row.len(), expected: first.len() });
            }
        }
        rows.push(row);
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(PgmError::NonFinite);
    }
    Matrix::from_rows(&rows).map_err(|_| PgmError::Samples { expected: 0, found: 0 })
}

fn encode(width: usize, height: usize, raster: Vec<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(raster);
    out
}

/// 8-bit P5 of `m`, min-max normalized; a constant image maps to 0.
/// Returns the bytes and the `(min, max)` used.
pub fn encode_normalized(m: &Matrix) -> (Vec<u8>, f64, f64) {
    let min = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let raster = m
        .data()
        .iter()
        .map(|&x| if span > 0.0 { ((x - min) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    (encode(m.cols(), m.rows(), raster), min, max)
}

/// 8-bit P5 with 255 inside the mask and 0 outside.
pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let raster = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode(mask.width(), mask.height(), raster)
}
