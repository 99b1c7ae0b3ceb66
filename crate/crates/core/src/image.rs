//! 8-bit image container and the on-disk formats the toolkit reads and writes.
//!
//! Supported inputs are binary and ASCII PPM/PGM (`P6`, `P3`, `P5`, `P2`) and
//! a raw interleaved RGB dump `name.rgb` whose dimensions live in a sidecar
//! `name.rgb.txt` holding `W H`.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read image {path}: {detail}")]
    Read { path: PathBuf, detail: String },
    #[error("cannot write image {path}: {detail}")]
    Write { path: PathBuf, detail: String },
}

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Luma `0.299 R + 0.587 G + 0.114 B` per pixel, on the 0..255 scale.
    pub fn luma(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
    }

    /// Luma per pixel on the `[0, 1]` scale.
    pub fn gray_unit(&self) -> Vec<f64> {
        self.luma().into_iter().map(|v| v / 255.0).collect()
    }
}

struct Tokens<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Tokens<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.buf[start..self.pos]).ok()?.parse().ok()
    }
}

fn scale_sample(v: usize, maxval: usize) -> u8 {
    if maxval == 255 {
        v.min(255) as u8
    } else {
        ((v.min(maxval) as f64 * 255.0 / maxval as f64).round()) as u8
    }
}

/// Decodes a PPM or PGM byte stream; gray images are expanded to RGB.
pub fn decode_pnm(bytes: &[u8]) -> Result<RgbImage, String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("not a PNM file".into());
    }
    let (channels, binary) = match bytes[1] {
        b'6' => (3, true),
        b'5' => (1, true),
        b'3' => (3, false),
        b'2' => (1, false),
        c => return Err(format!("unsupported PNM variant P{}", c as char)),
    };
    let mut t = Tokens { buf: bytes, pos: 2 };
    let width = t.number().ok_or("missing width")?;
    let height = t.number().ok_or("missing height")?;
    let maxval = t.number().ok_or("missing maxval")?;
    if width == 0 || height == 0 {
        return Err("image has a zero dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("invalid maxval {maxval}"));
    }
    let count = width * height * channels;
    let mut samples = Vec::with_capacity(count);
    if binary {
        let start = t.pos + 1;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let raw = bytes.get(start..start + need).ok_or("truncated pixel data")?;
        if wide {
            samples.extend(raw.chunks_exact(2).map(|c| scale_sample(u16::from_be_bytes([c[0], c[1]]) as usize, maxval)));
        } else {
            samples.extend(raw.iter().map(|&v| scale_sample(v as usize, maxval)));
        }
    } else {
        for _ in 0..count {
            samples.push(scale_sample(t.number().ok_or("truncated pixel data")?, maxval));
        }
    }
    let data = if channels == 3 { samples } else { samples.iter().flat_map(|&g| [g, g, g]).collect() };
    Ok(RgbImage { width, height, data })
}

fn read_err(path: &Path, detail: impl ToString) -> ImageError {
    ImageError::Read { path: path.to_path_buf(), detail: detail.to_string() }
}

/// Path of the dimensions sidecar of a raw RGB file.
pub fn raw_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm" | "pnm" | "rgb"))
}

pub fn read_image(path: &Path) -> Result<RgbImage, ImageError> {
    let bytes = fs::read(path).map_err(|e| read_err(path, e))?;
    if path.extension().and_then(|e| e.to_str()) == Some("rgb") {
        let side = raw_sidecar(path);
        let text = fs::read_to_string(&side).map_err(|e| read_err(path, format!("sidecar {}: {e}", side.display())))?;
        let dims: Vec<usize> = text.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|e| read_err(path, format!("sidecar: {e}")))?;
        let [width, height] = dims[..] else {
            return Err(read_err(path, "sidecar must hold `W H`"));
        };
        if width == 0 || height == 0 || bytes.len() != width * height * 3 {
            return Err(read_err(path, format!("{} bytes do not match {width}x{height} RGB", bytes.len())));
        }
        return Ok(RgbImage { width, height, data: bytes });
    }
    decode_pnm(&bytes).map_err(|e| read_err(path, e))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Renders values in `[0, 1]` as an 8-bit PGM (values are clamped).
pub fn encode_pgm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ImageError> {
    fs::write(path, bytes).map_err(|e| ImageError::Write { path: path.to_path_buf(), detail: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| [x as u8 * 40, y as u8 * 70, 9]);
        assert_eq!(decode_pnm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn ascii_and_gray_variants() {
        let img = decode_pnm(b"P3\n# c\n2 1\n255\n1 2 3  4 5 6\n").unwrap();
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
        let img = decode_pnm(b"P2 2 1 15 0 15").unwrap();
        assert_eq!(img.data, vec![0, 0, 0, 255, 255, 255]);
        let g = decode_pnm(&encode_pgm(2, 1, &[0.0, 1.0])).unwrap();
        assert_eq!(g.pixel(1, 0), [255; 3]);
        let wide = [b"P5 1 1 65535\n".as_slice(), &[0xff, 0xff]].concat();
        assert_eq!(decode_pnm(&wide).unwrap().data, vec![255; 3]);
    }

    #[test]
    fn malformed_inputs_are_errors() {
        assert!(decode_pnm(b"P6 2 2 255\n\x00").is_err());
        assert!(decode_pnm(b"P7 1 1 255\n").is_err());
        assert!(decode_pnm(b"P6 0 2 255\n").is_err());
        assert!(decode_pnm(b"JPEG").is_err());
    }

    #[test]
    fn raw_rgb_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rgb");
        fs::write(&path, [1u8, 2, 3, 4, 5, 6]).unwrap();
        fs::write(raw_sidecar(&path), "2 1\n").unwrap();
        assert_eq!(read_image(&path).unwrap().pixel(1, 0), [4, 5, 6]);
        fs::write(raw_sidecar(&path), "3 1\n").unwrap();
        let err = read_image(&path).unwrap_err().to_string();
        assert!(err.contains("a.rgb"), "{err}");
    }
}
