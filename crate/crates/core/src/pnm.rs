//! Binary PNM image I/O: 8-bit grayscale (P5/PGM) and RGB (P6/PPM).
//!
//! The reader accepts the full header grammar — arbitrary whitespace between
//! fields and `#` comments through end of line — and rejects 16-bit files
//! (maxval > 255). The writer emits a canonical minimal header.

use std::path::Path;

use crate::error::{Error, Result};

/// Decoded 8-bit image; `data` is row-major, interleaved when `channels == 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5 (grayscale), 3 for P6 (RGB).
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

fn is_pnm_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

struct HeaderScan<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScan<'a> {
    fn skip_space_and_comments(&mut self) {
        loop {
            while self.pos < self.buf.len() && is_pnm_space(self.buf[self.pos]) {
                self.pos += 1;
            }
            if self.pos < self.buf.len() && self.buf[self.pos] == b'#' {
                while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn integer(&mut self) -> Option<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.buf[start..self.pos]).ok()?.parse().ok()
    }
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&buf).map_err(|reason| Error::Pnm { path: path.to_path_buf(), reason })
}

fn parse_pnm(buf: &[u8]) -> std::result::Result<PnmImage, String> {
    if buf.len() < 2 {
        return Err("file too short for a PNM header".into());
    }
    let channels = match &buf[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(format!(
                "unsupported magic {:?}; only binary P5/P6 are handled",
                String::from_utf8_lossy(other)
            ));
        }
    };
    let mut scan = HeaderScan { buf, pos: 2 };
    let width = scan.integer().ok_or("missing or malformed width")? as usize;
    let height = scan.integer().ok_or("missing or malformed height")? as usize;
    let maxval = scan.integer().ok_or("missing or malformed maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("degenerate dimensions {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} out of range (need 1..=255; 16-bit files unsupported)"));
    }
    // Exactly one whitespace byte separates the header from raster data.
    if scan.pos >= buf.len() || !is_pnm_space(buf[scan.pos]) {
        return Err("missing whitespace between maxval and raster data".into());
    }
    let start = scan.pos + 1;
    let need = width * height * channels;
    let got = buf.len() - start;
    if got < need {
        return Err(format!("raster truncated: need {need} bytes, found {got}"));
    }
    if got > need {
        return Err(format!("{} trailing bytes after raster", got - need));
    }
    Ok(PnmImage { width, height, channels, maxval: maxval as u16, data: buf[start..].to_vec() })
}

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, channels: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), width * height * channels, "raster length does not match {width}x{height}x{channels}");
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write 8-bit grayscale (P5); `data` is row-major, `width * height` bytes.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_pnm(path, "P5", width, height, 1, data)
}

/// Write 8-bit RGB (P6); `data` is row-major interleaved, `3 * width * height` bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_pnm(path, "P6", width, height, 3, data)
}
