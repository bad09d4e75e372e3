//! Binary PGM (P5) with maxval 255, the export surface for activation and
//! difference maps. Fixed-point and dependency-free; PNG is out of scope.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::PgmFormat {
                message: format!(
                    "pixel count {} does not match {}x{}",
                    pixels.len(),
                    width,
                    height
                ),
            });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    /// Next whitespace-delimited token, skipping `#` comment lines.
    fn next(&mut self) -> Result<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return Err(Error::PgmFormat {
                message: "unexpected end of header".into(),
            });
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn next_usize(&mut self, what: &str) -> Result<usize> {
        let tok = self.next()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::PgmFormat {
                message: format!("invalid {what}"),
            })
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut toks = Tokens { bytes, pos: 0 };
    let magic = toks.next()?;
    if magic != b"P5" {
        return Err(Error::PgmFormat {
            message: format!(
                "expected P5 magic, found {:?}",
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let width = toks.next_usize("width")?;
    let height = toks.next_usize("height")?;
    let maxval = toks.next_usize("maxval")?;
    if maxval != 255 {
        return Err(Error::PgmFormat {
            message: format!("maxval must be 255, found {maxval}"),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    if toks.pos >= bytes.len() || !bytes[toks.pos].is_ascii_whitespace() {
        return Err(Error::PgmFormat {
            message: "missing raster separator".into(),
        });
    }
    let start = toks.pos + 1;
    let need = width * height;
    if bytes.len() - start < need {
        return Err(Error::PgmFormat {
            message: format!(
                "raster truncated: need {need} bytes, have {}",
                bytes.len() - start
            ),
        });
    }
    GrayImage::new(width, height, bytes[start..start + need].to_vec())
}
