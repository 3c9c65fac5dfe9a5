//! Binary Netpbm images: P6 for RGB, P5 for single-channel maps.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ChangeMap;

/// Planar `C×H×W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape("image dimensions must be >= 1"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{channels}×{height}×{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone())
            .expect("image dims are positive")
    }

    pub fn from_change_map(map: &ChangeMap) -> Result<Self> {
        let [b, h, w] = map.shape();
        if b != 1 {
            return Err(Error::shape(format!("expected a single change map, got batch of {b}")));
        }
        Image::new(1, h, w, map.data().iter().map(|&v| f64::from(v)).collect())
    }

    /// Reads a single-channel image as a binary map (values >= 0.5 are 1).
    pub fn to_change_map(&self) -> Result<ChangeMap> {
        if self.channels != 1 {
            return Err(Error::shape(format!(
                "change maps are single-channel, image has {} channels",
                self.channels
            )));
        }
        ChangeMap::new(
            [1, self.height, self.width],
            self.data.iter().map(|&v| u8::from(v >= 0.5)).collect(),
        )
    }
}

/// `value · 255` rounded half up, clamped to a byte.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::shape(format!(
                "Netpbm output supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let n = img.height * img.width;
    out.reserve(n * img.channels);
    for p in 0..n {
        for c in 0..img.channels {
            out.push(quantize(img.data[c * n + p]));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(cur.err("expected magic P5 or P6")),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.err("image dimensions must be >= 1"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(cur.err(format!("unsupported maxval {maxval}; only 8-bit images are read")));
    }
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected a single whitespace byte after maxval"));
    }
    cur.pos += 1;
    let n = width * height;
    let need = n * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: expected {need} bytes, found {}", payload.len()),
        });
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; need];
    for p in 0..n {
        for c in 0..channels {
            data[c * n + p] = f64::from(payload[p * channels + c]) / scale;
        }
    }
    Image::new(channels, height, width, data)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
