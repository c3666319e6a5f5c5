use std::fs;
use std::path::Path;

use crate::error::{io_err, ImageError};

/// Row-major RGB raster with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Image { width, height, pixels: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in img.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb.map(|v| v.clamp(0.0, 1.0)));
        }
        img
    }

    /// Wraps interleaved RGB data, clamping every value into `[0, 1]`.
    pub fn from_raw(width: usize, height: usize, mut pixels: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(ImageError::Param(format!(
                "{} values do not form a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(ImageError::Param("non-finite pixel value".into()));
        }
        clamp_all(&mut pixels);
        Ok(Image { width, height, pixels })
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), width * height * 3);
        Image { width, height, pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect() }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0);
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Alpha-blends `color` over pixel `(x, y)`.
    pub fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            let v = (1.0 - alpha) * self.pixels[i + c] + alpha * color[c];
            self.pixels[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Applies `f` to every channel value and clamps the result.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        let mut pixels: Vec<f64> = self.pixels.iter().map(|&v| f(v)).collect();
        clamp_all(&mut pixels);
        Image { width: self.width, height: self.height, pixels }
    }

    /// 90 degree clockwise rotation.
    pub fn rotate90(&self) -> Image {
        let (w, h) = (self.width, self.height);
        let mut out = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = (h - 1 - y, x);
                for c in 0..3 {
                    out.pixels[(ny * h + nx) * 3 + c] = self.get(x, y, c);
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }
}

pub(crate) fn clamp_all(pixels: &mut [f64]) {
    for v in pixels {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Encodes as binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image, ImageError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(ImageError::Magic {
            path: path.into(),
            magic: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let header_err = |message: &str| ImageError::Header { path: path.into(), message: message.into() };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(header_err("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| header_err("expected a decimal number"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(header_err("zero image dimension"));
    }
    if maxval != 255 {
        return Err(header_err("only maxval 255 is supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(header_err("missing whitespace after maxval"));
    }
    pos += 1;
    let expected = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated { path: path.into(), expected, found: payload.len() });
    }
    Ok(Image::from_rgb8(width, height, &payload[..expected]))
}

pub fn write_image(img: &Image, path: &Path) -> Result<(), ImageError> {
    fs::write(path, encode_ppm(img)).map_err(io_err::<ImageError>(path))
}

pub fn read_image(path: &Path) -> Result<Image, ImageError> {
    let bytes = fs::read(path).map_err(io_err::<ImageError>(path))?;
    decode_ppm(&bytes, path)
}
