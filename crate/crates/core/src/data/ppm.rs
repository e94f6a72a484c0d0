//! Binary PPM (`P6`, maxval 255) images.

use std::fs;
use std::path::Path;

use crate::error::{data_err, Error, Result};
use crate::nd::Tensor;

/// RGB image with interleaved channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl ImageSample {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(data_err!("image must be non-empty, got {width}x{height}"));
        }
        if pixels.len() != width * height * 3 {
            return Err(data_err!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                pixels.len()
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(data_err!("pixel value {v} outside [0, 1]"));
        }
        Ok(ImageSample {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Channel `c` of pixel `(x, y)`.
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Format(format!(
            "expected binary PPM magic \"P6\", found {magic:?}"
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (n, field) in fields.iter_mut().enumerate() {
        // Whitespace and `#` comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
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
            return Err(Error::Format(format!(
                "malformed PPM header: header field {n} missing at byte {start}"
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("PPM header field {n} out of range")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("PPM header must end with one whitespace byte".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty PPM image {width}x{height}")));
    }
    Ok(Header {
        width,
        height,
        data_offset: pos + 1,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageSample> {
    let h = parse_header(bytes)?;
    let needed = h.width * h.height * 3;
    let payload = &bytes[h.data_offset..];
    if payload.len() < needed {
        return Err(Error::Format(format!(
            "truncated PPM payload: {} of {needed} bytes",
            payload.len()
        )));
    }
    let pixels = payload[..needed].iter().map(|&b| b as f64 / 255.0).collect();
    ImageSample::new(h.width, h.height, pixels)
}

/// Quantizes to 8 bits with round-to-nearest.
pub fn encode_ppm(img: &ImageSample) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|v| (v * 255.0).round() as u8));
    out
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ImageSample> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageSample) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Channel-major `3×H×W` tensor with `(v − 0.5) / 0.5` applied, so values
/// land in `[−1, 1]`.
pub fn normalize_image(img: &ImageSample) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * w * h + y * w + x] = (img.get(x, y, c) - 0.5) / 0.5;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("shape matches buffer")
}
