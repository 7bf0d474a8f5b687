//! Binary netpbm readers and writers: P6 (color) and P5 (gray), maxval
//! 255 only. Headers may carry `#` comments, which the writers use to
//! embed the run-config echo. Parse errors report the byte offset.

use std::fs;
use std::path::Path;

use evsev_core::labeling::RgbPatch;

use crate::error::AppError;

/// Gray raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> AppError {
        AppError::usage(format!("{}: {msg} at byte {}", self.path, self.pos))
    }

    fn skip_space_and_comments(&mut self) -> Result<(), AppError> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while !matches!(self.bytes.get(self.pos), None | Some(b'\n')) {
                        self.pos += 1;
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn int(&mut self) -> Result<usize, AppError> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        while matches!(self.bytes.get(self.pos), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an unsigned integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("integer out of range"))
    }

    /// Magic, width, height, maxval, then exactly one whitespace byte.
    fn header(&mut self, magic: &str) -> Result<(usize, usize), AppError> {
        if !self.bytes.starts_with(magic.as_bytes()) {
            return Err(self.err(&format!("expected {magic} magic")));
        }
        self.pos = magic.len();
        let width = self.int()?;
        let height = self.int()?;
        let maxval = self.int()?;
        if width == 0 || height == 0 {
            return Err(self.err("zero image dimension"));
        }
        if maxval != 255 {
            return Err(self.err(&format!("unsupported maxval {maxval}, expected 255")));
        }
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => self.pos += 1,
            _ => return Err(self.err("expected single whitespace after maxval")),
        }
        Ok((width, height))
    }

    fn raster(&mut self, expected: usize) -> Result<&'a [u8], AppError> {
        let avail = self.bytes.len() - self.pos;
        if avail < expected {
            return Err(self.err(&format!("raster truncated: {avail} of {expected} bytes")));
        }
        if avail > expected {
            self.pos = self.bytes.len() - (avail - expected);
            return Err(self.err(&format!("{} trailing bytes after raster", avail - expected)));
        }
        Ok(&self.bytes[self.pos..])
    }
}

pub fn read_ppm(path: &Path) -> Result<RgbPatch, AppError> {
    let bytes = fs::read(path).map_err(|e| AppError::usage(format!("{}: {e}", path.display())))?;
    let mut p = Parser { bytes: &bytes, pos: 0, path: path.display().to_string() };
    let (width, height) = p.header("P6")?;
    let raster = p.raster(3 * width * height)?;
    // interleaved bytes -> planar floats
    let n = width * height;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = raster[3 * i + c] as f64 / 255.0;
        }
    }
    RgbPatch::new(width, height, data).map_err(AppError::from)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, AppError> {
    let bytes = fs::read(path).map_err(|e| AppError::usage(format!("{}: {e}", path.display())))?;
    let mut p = Parser { bytes: &bytes, pos: 0, path: path.display().to_string() };
    let (width, height) = p.header("P5")?;
    let raster = p.raster(width * height)?;
    Ok(GrayImage {
        width,
        height,
        data: raster.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header_with_comments(magic: &str, width: usize, height: usize, comments: &[String]) -> Vec<u8> {
    let mut out = format!("{magic}\n").into_bytes();
    for c in comments {
        out.extend(format!("# {c}\n").bytes());
    }
    out.extend(format!("{width} {height}\n255\n").bytes());
    out
}

pub fn write_ppm(path: &Path, patch: &RgbPatch, comments: &[String]) -> Result<(), AppError> {
    let n = patch.width * patch.height;
    let mut out = header_with_comments("P6", patch.width, patch.height, comments);
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(patch.data[c * n + i]));
        }
    }
    fs::write(path, out).map_err(|e| AppError::usage(format!("{}: {e}", path.display())))
}

pub fn write_pgm(path: &Path, image: &GrayImage, comments: &[String]) -> Result<(), AppError> {
    let mut out = header_with_comments("P5", image.width, image.height, comments);
    out.extend(image.data.iter().map(|&v| quantize(v)));
    fs::write(path, out).map_err(|e| AppError::usage(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("evsev-ppm-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn ppm_round_trip() {
        let n = 4 * 3;
        let data: Vec<f64> = (0..3 * n).map(|i| (i % 256) as f64 / 255.0).collect();
        let patch = RgbPatch::new(4, 3, data).unwrap();
        let path = tmp("rt.ppm");
        write_ppm(&path, &patch, &["seed=7".into()]).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.width, 4);
        assert_eq!(back.height, 3);
        for (a, b) in patch.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_round_trip_exact_bytes() {
        let img = GrayImage {
            width: 3,
            height: 2,
            data: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        };
        let path = tmp("rt.pgm");
        write_pgm(&path, &img, &[]).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.width, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
        // idempotent re-encode
        let path2 = tmp("rt2.pgm");
        write_pgm(&path2, &back, &[]).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn header_rejections_carry_byte_offsets() {
        let path = tmp("bad.ppm");
        fs::write(&path, b"P6 0 0 255\n").unwrap();
        let err = read_ppm(&path).unwrap_err().to_string();
        assert!(err.contains("zero image dimension"), "{err}");
        assert!(err.contains("byte"), "{err}");

        fs::write(&path, b"P6 2 2 64\n").unwrap();
        let err = read_ppm(&path).unwrap_err().to_string();
        assert!(err.contains("maxval 64"), "{err}");

        fs::write(&path, b"P5 2 2 255\n").unwrap();
        assert!(read_ppm(&path).is_err()); // wrong magic

        fs::write(&path, b"P6 2 2 255\n0123456789ab").unwrap();
        assert!(read_ppm(&path).is_ok());
        fs::write(&path, b"P6 2 2 255\n0123456789").unwrap();
        let err = read_ppm(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        fs::write(&path, b"P6 2 2 255\n0123456789abXX").unwrap();
        let err = read_ppm(&path).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn comments_are_skipped() {
        let path = tmp("comment.pgm");
        fs::write(&path, b"P5\n# cfg seed=7\n2 1\n255\nAB").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.width, 2);
        assert_eq!(img.height, 1);
    }
}
