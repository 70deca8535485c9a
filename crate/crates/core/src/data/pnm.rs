//! 8-bit binary portable pixmap I/O: P6 for color images, P5 for
//! grayscale images and masks.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {detail} at byte offset {offset}", path.display())]
    Malformed {
        path: PathBuf,
        offset: usize,
        detail: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sample '{id}': multimodal ROI is empty after erosion; rejected")]
    EmptyOmega { id: String },
    #[error("sample '{id}': {detail}")]
    InvalidSample { id: String, detail: String },
    #[error("{0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a (1,1,H,W) tensor as binary P5, values scaled to [0, 255].
pub fn write_pgm(path: &Path, img: &Tensor<f32>) -> Result<(), DataError> {
    let s = img.shape();
    assert_eq!((s.b, s.c), (1, 1), "P5 wants a single-channel image");
    let mut bytes = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    bytes.extend(img.data().iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(io_err(path))
}

/// Write a (1,3,H,W) tensor as binary P6 with interleaved RGB rows.
pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<(), DataError> {
    let s = img.shape();
    assert_eq!((s.b, s.c), (1, 3), "P6 wants a three-channel image");
    let plane = s.plane();
    let mut bytes = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(img.data()[c * plane + i]));
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Parser<'a> {
    fn fail<T>(&self, detail: impl Into<String>) -> Result<T, DataError> {
        Err(DataError::Malformed {
            path: self.path.to_path_buf(),
            offset: self.pos,
            detail: detail.into(),
        })
    }

    /// Skip whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize, DataError> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail("expected an ASCII decimal number");
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .or_else(|_| self.fail("number out of range"))
    }
}

fn read_pnm(path: &Path, magic: &[u8], channels: usize) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut p = Parser {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return p.fail(format!(
            "bad magic; expected {}",
            String::from_utf8_lossy(magic)
        ));
    }
    p.pos = 2;
    let w = p.number()?;
    let h = p.number()?;
    let maxval = p.number()?;
    if maxval != 255 {
        return p.fail(format!("unsupported maxval {maxval}; expected 255"));
    }
    // Exactly one separator byte between the header and the raster.
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return p.fail("expected a whitespace byte before the raster");
    }
    p.pos += 1;
    let expect = w * h * channels;
    let have = bytes.len() - p.pos;
    if have < expect {
        p.pos = bytes.len();
        return p.fail(format!("truncated raster: {have} of {expect} bytes"));
    }
    if have > expect {
        p.pos += expect;
        return p.fail(format!("{} trailing bytes after the raster", have - expect));
    }
    let raster = &bytes[p.pos..];
    let mut out = Tensor::zeros(Shape::new(1, channels, h, w));
    let plane = h * w;
    for i in 0..plane {
        for c in 0..channels {
            out.data_mut()[c * plane + i] = raster[i * channels + c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Read a binary P5 file into a (1,1,H,W) tensor in [0,1].
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>, DataError> {
    read_pnm(path, b"P5", 1)
}

/// Read a binary P6 file into a (1,3,H,W) tensor in [0,1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>, DataError> {
    read_pnm(path, b"P6", 3)
}
