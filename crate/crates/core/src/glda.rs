//! Localized haze augmentation: copy random rectangles of the hazy image
//! onto its clean partner, plus paired flips.

use rand::Rng;

use crate::error::{DehazeError, Result};
use crate::image::Image;

/// Smallest patch side.
pub const MIN_PATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchSpec {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GldaConfig {
    pub max_patch: usize,
    pub max_patches: usize,
}

impl Default for GldaConfig {
    fn default() -> Self {
        Self { max_patch: 50, max_patches: 8 }
    }
}

/// Union of pasted rectangles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// White where set, black elsewhere.
    pub fn to_image(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x, _| if self.get(y, x) { 1.0 } else { 0.0 })
    }
}

/// Draws `count` rectangles (or a uniform count in `[1, max_patches]`),
/// each side uniform in `[MIN_PATCH, min(max_patch, extent)]` and placed
/// fully inside the image.
pub fn sample_patches<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    cfg: &GldaConfig,
    count: Option<usize>,
    rng: &mut R,
) -> Result<Vec<PatchSpec>> {
    if height < MIN_PATCH || width < MIN_PATCH {
        return Err(DehazeError::invalid(format!(
            "image {height}x{width} is smaller than the minimum patch side {MIN_PATCH}"
        )));
    }
    let n = match count {
        Some(n) => n,
        None => rng.random_range(1..=cfg.max_patches.max(1)),
    };
    let max_h = cfg.max_patch.min(height).max(MIN_PATCH);
    let max_w = cfg.max_patch.min(width).max(MIN_PATCH);
    Ok((0..n)
        .map(|_| {
            let h = rng.random_range(MIN_PATCH..=max_h);
            let w = rng.random_range(MIN_PATCH..=max_w);
            PatchSpec {
                top: rng.random_range(0..=height - h),
                left: rng.random_range(0..=width - w),
                height: h,
                width: w,
            }
        })
        .collect())
}

/// Pastes `hazy` onto `clean` inside every patch.
pub fn paste_patches(clean: &Image, hazy: &Image, patches: &[PatchSpec]) -> Result<(Image, Mask)> {
    if clean.dims() != hazy.dims() {
        return Err(DehazeError::invalid(format!(
            "paired images differ in size: {:?} vs {:?}",
            clean.dims(),
            hazy.dims()
        )));
    }
    let (h, w) = clean.dims();
    let mut cells = vec![false; h * w];
    for p in patches {
        if p.top + p.height > h || p.left + p.width > w {
            return Err(DehazeError::invalid(format!("patch {p:?} outside {h}x{w} image")));
        }
        for y in p.top..p.top + p.height {
            cells[y * w + p.left..y * w + p.left + p.width].fill(true);
        }
    }
    let mask = Mask { height: h, width: w, cells };
    let out = Image::from_fn(h, w, |y, x, c| if mask.get(y, x) { hazy.get(y, x, c) } else { clean.get(y, x, c) });
    Ok((out, mask))
}

/// Samples patches and pastes them; returns the augmented image and mask.
pub fn glda<R: Rng + ?Sized>(clean: &Image, hazy: &Image, cfg: &GldaConfig, rng: &mut R) -> Result<(Image, Mask)> {
    let patches = sample_patches(clean.height(), clean.width(), cfg, None, rng)?;
    paste_patches(clean, hazy, &patches)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flip {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flip {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { horizontal: rng.random_bool(0.5), vertical: rng.random_bool(0.5) }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        if self.horizontal {
            out = out.flip_horizontal();
        }
        if self.vertical {
            out = out.flip_vertical();
        }
        out
    }
}

/// Applies one random flip decision to both images of a pair.
pub fn random_flips<R: Rng + ?Sized>(a: &Image, b: &Image, rng: &mut R) -> (Image, Image) {
    let f = Flip::sample(rng);
    (f.apply(a), f.apply(b))
}
