//! Binary netpbm images: P5 (8-bit gray) and P6 (8-bit RGB).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved `r, g, b` per pixel, row-major.
    pub data: Vec<u8>,
}

/// Either kind of image as read from disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Image {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl Image {
    pub fn width(&self) -> usize {
        match self {
            Image::Gray(g) => g.width,
            Image::Rgb(c) => c.width,
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Image::Gray(g) => g.height,
            Image::Rgb(c) => c.height,
        }
    }

    /// `[3, H, W]` in `[0, 1]`; gray images are replicated across channels.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width(), self.height());
        Tensor::from_fn([3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            let v = match self {
                Image::Gray(g) => g.data[p],
                Image::Rgb(rgb) => rgb.data[3 * p + c],
            };
            v as f64 / 255.0
        })
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let err = |m: &str| Error::Parse {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(err("missing netpbm magic number"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| err("header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err("header must end with whitespace"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err("only 8-bit images (maxval 255) are supported"));
    }
    if width == 0 || height == 0 {
        return Err(err("empty image"));
    }
    Ok(Header {
        magic,
        width,
        height,
        offset: pos + 1,
    })
}

/// Decode a P5 or P6 image from memory.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let h = parse_header(bytes, path)?;
    let channels = match &h.magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: "only binary P5/P6 images are supported".into(),
            })
        }
    };
    let len = h.width * h.height * channels;
    let Some(data) = bytes.get(h.offset..h.offset + len) else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("expected {len} pixel bytes, found {}", bytes.len() - h.offset),
        });
    };
    let data = data.to_vec();
    Ok(if channels == 1 {
        Image::Gray(GrayImage {
            width: h.width,
            height: h.height,
            data,
        })
    } else {
        Image::Rgb(RgbImage {
            width: h.width,
            height: h.height,
            data,
        })
    })
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Width and height from the header alone.
pub fn read_dimensions(path: &Path) -> Result<(usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes, path)?;
    Ok((h.width, h.height))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    match read_image(path)? {
        Image::Gray(g) => Ok(g),
        Image::Rgb(_) => Err(Error::Parse {
            path: path.to_path_buf(),
            message: "expected a P5 (grayscale) image".into(),
        }),
    }
}

fn encode(magic: &str, width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode("P5", img.width, img.height, &img.data)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode("P6", img.width, img.height, &img.data)).map_err(|e| Error::io(path, e))
}
