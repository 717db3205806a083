//! RGB images with unit-interval components and binary PPM (P6) I/O.

use std::fs;
use std::path::{Path, PathBuf};

use dehaze_tensor::Tensor;

use crate::error::{DehazeError, Result};

/// `height × width × 3` intensities in `[0, 1]`, stored row-major, channel last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DehazeError::invalid(format!("image extents must be positive, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(DehazeError::invalid(format!(
                "{height}x{width} image needs {} components, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DehazeError::invalid(format!("image component {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self { height, width, data: vec![value; height * width * 3] }
    }

    /// Builds an image from `f(y, x, c)`, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Sets a component, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0);
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(DehazeError::invalid(format!(
                "crop {height}x{width} at ({top}, {left}) outside {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(height, width, |y, x, c| self.get(top + y, left + x, c)))
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x, c| self.get(self.height - 1 - y, x, c))
    }

    /// Mirror-pads right and bottom so both extents become multiples of
    /// `multiple` and at least `min`.
    pub fn pad_to_multiple(&self, multiple: usize, min: usize) -> Image {
        let round = |n: usize| n.max(min).div_ceil(multiple) * multiple;
        let (h, w) = (round(self.height), round(self.width));
        let mirror = |i: usize, n: usize| {
            // reflect without repeating the edge, period 2n - 2
            if n == 1 {
                return 0;
            }
            let p = 2 * n - 2;
            let m = i % p;
            if m < n { m } else { p - m }
        };
        Image::from_fn(h, w, |y, x, c| self.get(mirror(y, self.height), mirror(x, self.width), c))
    }

    /// Stacks same-sized images into an `[N, 3, H, W]` tensor.
    pub fn to_batch(images: &[Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| DehazeError::invalid("empty image batch"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.dims() != (h, w) {
                return Err(DehazeError::invalid(format!("batch mixes {h}x{w} and {}x{} images", img.height, img.width)));
            }
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        data.push(img.get(y, x, c));
                    }
                }
            }
        }
        Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
    }

    /// Splits an `[N, 3, H, W]` tensor into images, clamping into `[0, 1]`.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Image>> {
        let [n, c, h, w] = t.dims4("from_batch")?;
        if c != 3 {
            return Err(DehazeError::invalid(format!("expected 3 channels, got {c}")));
        }
        let d = t.data();
        Ok((0..n)
            .map(|b| Image::from_fn(h, w, |y, x, ch| d[((b * 3 + ch) * h + y) * w + x]))
            .collect())
    }

    /// Quantises to 8 bits: `round(255·x)` with halves rounded up.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8).collect()
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
        let fail = |msg: &str| DehazeError::Format { path: path.to_path_buf(), msg: msg.to_string() };
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(fail("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
                pos += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("non-ASCII header"))?);
        }
        if fields[0] != "P6" {
            return Err(fail(&format!("unsupported magic {:?}, expected P6", fields[0])));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| fail(&format!("bad {what} {s:?}")));
        let width = num(fields[1], "width")?;
        let height = num(fields[2], "height")?;
        let maxval = num(fields[3], "maxval")?;
        if maxval != 255 {
            return Err(fail(&format!("maxval {maxval} unsupported, expected 255")));
        }
        if width == 0 || height == 0 {
            return Err(fail("zero image extent"));
        }
        // exactly one whitespace byte separates the header from the payload
        if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(fail("truncated header"));
        }
        pos += 1;
        let need = width * height * 3;
        let payload = &bytes[pos..];
        if payload.len() < need {
            return Err(fail(&format!("truncated payload: {} of {need} bytes", payload.len())));
        }
        let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Image { height, width, data })
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| DehazeError::io(path, e))?;
        Image::decode_ppm(&bytes, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()).map_err(|e| DehazeError::io(path, e))
    }
}

/// `.ppm` files directly inside `dir`, sorted by file name.
pub fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DehazeError::io(dir, e))? {
        let p = entry.map_err(|e| DehazeError::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
