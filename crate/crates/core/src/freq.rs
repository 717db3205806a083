//! Low/high-frequency image components and the 6-channel prior inputs fed
//! to the discriminators.
//!
//! Both filters use mirror padding without edge repeat. The image-domain
//! functions and the tape versions in [`lf_input`] / [`hf_input`] compute the
//! same values; the tape versions let generator gradients flow through the
//! priors.

use dehaze_tensor::{Tape, Tensor, Var};

use crate::error::{DehazeError, Result};
use crate::image::Image;

pub const GAUSS_TAPS: usize = 7;
pub const GAUSS_SIGMA: f64 = 1.5;
pub const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

/// Normalised 1-D Gaussian of `taps` samples.
pub fn gaussian_1d(taps: usize, sigma: f64) -> Vec<f64> {
    let half = (taps / 2) as f64;
    let raw: Vec<f64> = (0..taps)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Outer product of [`gaussian_1d`] with itself, row-major.
pub fn gaussian_2d(taps: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_1d(taps, sigma);
    k.iter().flat_map(|a| k.iter().map(move |b| a * b)).collect()
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    r as usize
}

/// Separable 7-tap Gaussian blur of one `h × w` plane.
pub fn blur_plane(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_1d(GAUSS_TAPS, GAUSS_SIGMA);
    let r = (GAUSS_TAPS / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane[y * w + mirror(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[mirror(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// 3×3 Laplacian response of one plane (unnormalised).
pub fn laplacian_plane(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let kv = LAPLACIAN[dy * 3 + dx];
                    if kv != 0.0 {
                        let yy = mirror(y as isize + dy as isize - 1, h);
                        let xx = mirror(x as isize + dx as isize - 1, w);
                        s += kv * plane[yy * w + xx];
                    }
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn planes(img: &Image) -> [Vec<f64>; 3] {
    let (h, w) = img.dims();
    std::array::from_fn(|c| (0..h * w).map(|i| img.get(i / w, i % w, c)).collect())
}

fn require(img: &Image, min: usize, what: &str) -> Result<()> {
    if img.height() < min || img.width() < min {
        return Err(DehazeError::invalid(format!(
            "{what} needs an image of at least {min}x{min}, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

pub fn low_freq(img: &Image) -> Result<Image> {
    require(img, GAUSS_TAPS, "low_freq")?;
    let (h, w) = img.dims();
    let blurred = planes(img).map(|p| blur_plane(&p, h, w));
    Ok(Image::from_fn(h, w, |y, x, c| blurred[c][y * w + x]))
}

/// Raw Laplacian responses, channel-last.
pub fn laplacian_raw(img: &Image) -> Result<Vec<f64>> {
    require(img, 3, "high_freq")?;
    let (h, w) = img.dims();
    let resp = planes(img).map(|p| laplacian_plane(&p, h, w));
    Ok((0..h * w * 3).map(|i| resp[i % 3][i / 3]).collect())
}

/// Min-max rescales over the whole image (all channels); constant input maps
/// to zeros.
pub fn normalize_minmax(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

pub fn high_freq(img: &Image) -> Result<Image> {
    let raw = laplacian_raw(img)?;
    Image::new(img.height(), img.width(), normalize_minmax(&raw))
}

/// Image ⊕ LF and image ⊕ normalised HF, each `H × W × 6` channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPair {
    pub height: usize,
    pub width: usize,
    pub lf_input: Vec<f64>,
    pub hf_input: Vec<f64>,
}

impl PriorPair {
    pub const CHANNELS: usize = 6;

    pub fn lf(&self, y: usize, x: usize, c: usize) -> f64 {
        self.lf_input[(y * self.width + x) * 6 + c]
    }

    pub fn hf(&self, y: usize, x: usize, c: usize) -> f64 {
        self.hf_input[(y * self.width + x) * 6 + c]
    }
}

fn stack(a: &Image, b: &Image) -> Vec<f64> {
    let (h, w) = a.dims();
    let mut out = Vec::with_capacity(h * w * 6);
    for i in 0..h * w {
        out.extend_from_slice(&a.data()[i * 3..i * 3 + 3]);
        out.extend_from_slice(&b.data()[i * 3..i * 3 + 3]);
    }
    out
}

pub fn make_prior_pair(img: &Image) -> Result<PriorPair> {
    let lf = low_freq(img)?;
    let hf = high_freq(img)?;
    Ok(PriorPair {
        height: img.height(),
        width: img.width(),
        lf_input: stack(img, &lf),
        hf_input: stack(img, &hf),
    })
}

fn depthwise(tape: &mut Tape, x: Var, kernel: Vec<f64>, taps: usize) -> Result<Var> {
    let [n, c, h, w] = match tape.shape(x) {
        &[n, c, h, w] => [n, c, h, w],
        s => return Err(DehazeError::invalid(format!("prior filter expects [N, C, H, W], got {s:?}"))),
    };
    let planes = tape.reshape(x, &[n * c, 1, h, w])?;
    let padded = tape.reflect_pad(planes, taps / 2)?;
    let k = tape.constant(Tensor::new(&[1, 1, taps, taps], kernel)?)?;
    let y = tape.conv2d(padded, k, 1, 0)?;
    Ok(tape.reshape(y, &[n, c, h, w])?)
}

/// `[N, 3, H, W]` → `[N, 6, H, W]` = image ⊕ Gaussian low-pass.
pub fn lf_input(tape: &mut Tape, x: Var) -> Result<Var> {
    let lf = depthwise(tape, x, gaussian_2d(GAUSS_TAPS, GAUSS_SIGMA), GAUSS_TAPS)?;
    Ok(tape.concat(&[x, lf], 1)?)
}

/// `[N, 3, H, W]` → `[N, 6, H, W]` = image ⊕ per-image normalised Laplacian.
pub fn hf_input(tape: &mut Tape, x: Var) -> Result<Var> {
    let raw = depthwise(tape, x, LAPLACIAN.to_vec(), 3)?;
    let hf = tape.minmax_normalize(raw)?;
    Ok(tape.concat(&[x, hf], 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_kernel_properties() {
        let k = gaussian_1d(GAUSS_TAPS, GAUSS_SIGMA);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[6]);
        assert!(k.windows(2).take(3).all(|p| p[0] < p[1]));
    }

    #[test]
    fn constant_image_priors() {
        let img = Image::filled(9, 10, 0.37);
        let lf = low_freq(&img).unwrap();
        assert!(lf.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        assert!(high_freq(&img).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn undersized_images_rejected() {
        assert!(low_freq(&Image::filled(6, 10, 0.5)).is_err());
        assert!(high_freq(&Image::filled(2, 10, 0.5)).is_err());
        assert!(high_freq(&Image::filled(3, 3, 0.5)).is_ok());
    }

    #[test]
    fn impulse_reproduces_kernel() {
        let (h, w) = (15, 15);
        let mut plane = vec![0.0; h * w];
        plane[7 * w + 7] = 1.0;
        let out = blur_plane(&plane, h, w);
        let k1 = gaussian_1d(7, 1.5);
        for dy in 0..7 {
            for dx in 0..7 {
                let want = k1[dy] * k1[dx];
                assert!((out[(4 + dy) * w + 4 + dx] - want).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn ramp_has_zero_interior_laplacian() {
        let img = Image::from_fn(8, 9, |y, x, c| (0.05 * x as f64 + 0.03 * y as f64 + 0.01 * c as f64) / 1.2);
        let raw = laplacian_raw(&img).unwrap();
        for y in 1..7 {
            for x in 1..8 {
                for c in 0..3 {
                    assert!(raw[(y * 9 + x) * 3 + c].abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn checkerboard_interior_is_binary() {
        let img = Image::from_fn(8, 8, |y, x, _| ((y + x) % 2) as f64);
        let raw = laplacian_raw(&img).unwrap();
        let interior: Vec<f64> = (1..7).flat_map(|y| (1..7).map(move |x| (y, x))).map(|(y, x)| raw[(y * 8 + x) * 3]).collect();
        assert!(interior.iter().all(|v| v.abs() == 4.0));
        let hf = high_freq(&img).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                let v = hf.get(y, x, 0);
                assert!(v == 0.0 || v == 1.0);
            }
        }
    }

    #[test]
    fn prior_pair_layout() {
        let img = Image::from_fn(10, 12, |y, x, c| ((y * 5 + x * 3 + c * 7) % 11) as f64 / 10.0);
        let pair = make_prior_pair(&img).unwrap();
        assert_eq!(pair.lf_input.len(), 10 * 12 * 6);
        let lf = low_freq(&img).unwrap();
        for y in 0..10 {
            for x in 0..12 {
                for c in 0..3 {
                    assert_eq!(pair.lf(y, x, c).to_bits(), img.get(y, x, c).to_bits());
                    assert_eq!(pair.hf(y, x, c).to_bits(), img.get(y, x, c).to_bits());
                    assert_eq!(pair.lf(y, x, 3 + c), lf.get(y, x, c));
                }
            }
        }
        assert!(pair.hf_input.iter().chain(&pair.lf_input).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tape_priors_match_image_priors() {
        let imgs: Vec<Image> = (0..2)
            .map(|s| Image::from_fn(12, 16, |y, x, c| ((y * 7 + x * 13 + c * 5 + s * 3) % 17) as f64 / 16.0))
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(Image::to_batch(&imgs).unwrap()).unwrap();
        let lf = lf_input(&mut tape, x).unwrap();
        let hf = hf_input(&mut tape, x).unwrap();
        assert_eq!(tape.shape(lf), &[2, 6, 12, 16]);
        for (b, img) in imgs.iter().enumerate() {
            let pair = make_prior_pair(img).unwrap();
            for c in 0..6 {
                for y in 0..12 {
                    for xx in 0..16 {
                        let i = ((b * 6 + c) * 12 + y) * 16 + xx;
                        assert!((tape.value(lf).data()[i] - pair.lf(y, xx, c)).abs() < 1e-12);
                        assert!((tape.value(hf).data()[i] - pair.hf(y, xx, c)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
