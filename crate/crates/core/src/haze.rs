//! Atmospheric scattering: `I = J·t + A·(1 − t)` with `t = exp(−β·d)`.

use rand::Rng;

use crate::error::{DehazeError, Result};
use crate::image::Image;

/// Single-channel `height × width` map (depth, transmission).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(DehazeError::invalid(format!("{height}x{width} plane with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Grey image of `value / scale`, clamped; used to export depth maps.
    pub fn to_image(&self, scale: f64) -> Image {
        Image::from_fn(self.height, self.width, |y, x, _| self.get(y, x) / scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Airlight {
    Scalar(f64),
    PerChannel([f64; 3]),
}

impl Airlight {
    pub fn channel(&self, c: usize) -> f64 {
        match self {
            Airlight::Scalar(a) => *a,
            Airlight::PerChannel(a) => a[c],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = (0..3).all(|c| (0.0..=1.0).contains(&self.channel(c)));
        if !ok {
            return Err(DehazeError::invalid(format!("ambient light {self:?} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HazeParams {
    pub airlight: Airlight,
    pub beta: f64,
    pub depth: Plane,
}

pub const BETA_RANGE: (f64, f64) = (0.4, 1.6);
pub const AIRLIGHT_RANGE: (f64, f64) = (0.7, 1.0);
pub const DEPTH_MAX: f64 = 1.5;
pub const T_MIN: f64 = 0.05;
pub const BLOB_COUNT: usize = 3;

/// `exp(−β·depth)` elementwise.
pub fn transmission(depth: &Plane, beta: f64) -> Result<Plane> {
    if !(beta >= 0.0) {
        return Err(DehazeError::invalid(format!("scattering coefficient {beta} must be non-negative")));
    }
    if let Some(d) = depth.data.iter().find(|d| !(**d >= 0.0)) {
        return Err(DehazeError::invalid(format!("depth {d} must be non-negative")));
    }
    Ok(Plane {
        height: depth.height,
        width: depth.width,
        data: depth.data.iter().map(|d| (-beta * d).exp()).collect(),
    })
}

fn check_dims(img: &Image, p: &HazeParams) -> Result<()> {
    if img.dims() != (p.depth.height, p.depth.width) {
        return Err(DehazeError::invalid(format!(
            "image is {}x{} but depth map is {}x{}",
            img.height(),
            img.width(),
            p.depth.height,
            p.depth.width
        )));
    }
    p.airlight.validate()
}

pub fn apply_haze(clean: &Image, p: &HazeParams) -> Result<Image> {
    check_dims(clean, p)?;
    let t = transmission(&p.depth, p.beta)?;
    Ok(Image::from_fn(clean.height(), clean.width(), |y, x, c| {
        let tv = t.get(y, x);
        clean.get(y, x, c) * tv + p.airlight.channel(c) * (1.0 - tv)
    }))
}

/// Recovers `J = (I − A·(1 − t)) / t`, clamped to `[0, 1]`. Fails when any
/// transmission value is below `t_min`.
pub fn invert_haze(hazy: &Image, p: &HazeParams, t_min: f64) -> Result<Image> {
    check_dims(hazy, p)?;
    let t = transmission(&p.depth, p.beta)?;
    if let Some(bad) = t.data.iter().find(|&&v| v < t_min) {
        return Err(DehazeError::invalid(format!(
            "transmission {bad:.4} below t_min = {t_min}; inversion is ill-conditioned"
        )));
    }
    Ok(Image::from_fn(hazy.height(), hazy.width(), |y, x, c| {
        let tv = t.get(y, x);
        (hazy.get(y, x, c) - p.airlight.channel(c) * (1.0 - tv)) / tv
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthKind {
    /// Left-to-right linear ramp from 0 to `d_max`.
    Ramp,
    /// Sum of Gaussian bumps rescaled to peak at `d_max`.
    Blobs,
}

pub fn synth_depth<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R, kind: DepthKind, d_max: f64) -> Plane {
    match kind {
        DepthKind::Ramp => {
            let denom = (w.max(2) - 1) as f64;
            Plane {
                height: h,
                width: w,
                data: (0..h * w).map(|i| d_max * (i % w) as f64 / denom).collect(),
            }
        }
        DepthKind::Blobs => {
            // Width ≥ 16 px keeps the steepest slope of the sum below d_max/8.
            let extent = h.max(w) as f64;
            let bumps: Vec<(f64, f64, f64, f64)> = (0..BLOB_COUNT)
                .map(|_| {
                    let cy = rng.random_range(0.0..h as f64);
                    let cx = rng.random_range(0.0..w as f64);
                    let s = (rng.random_range(0.15..0.4) * extent).max(16.0);
                    let a = rng.random_range(0.2..1.0);
                    (cy, cx, s, a)
                })
                .collect();
            let raw: Vec<f64> = (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    bumps
                        .iter()
                        .map(|&(cy, cx, s, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
                        .sum()
                })
                .collect();
            let peak = raw.iter().cloned().fold(0.0, f64::max);
            Plane {
                height: h,
                width: w,
                data: raw.iter().map(|v| d_max * v / peak).collect(),
            }
        }
    }
}

/// Draws β, a scalar A and a depth map for synthesis.
pub fn sample_params<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> HazeParams {
    let beta = rng.random_range(BETA_RANGE.0..=BETA_RANGE.1);
    let a = rng.random_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1);
    let kind = if rng.random_bool(0.5) { DepthKind::Ramp } else { DepthKind::Blobs };
    let mut depth = synth_depth(h, w, rng, kind, DEPTH_MAX);
    if rng.random_bool(0.5) {
        // mirror the ramp/blobs so haze can thicken in either direction
        for row in depth.data.chunks_mut(w) {
            row.reverse();
        }
    }
    HazeParams { airlight: Airlight::Scalar(a), beta, depth }
}
