//! Inference on arbitrary-sized images and PSNR/SSIM tables.

use std::fmt::Write as _;

use crate::dataset::Pair;
use crate::error::{DehazeError, Result};
use crate::generator::{Generator, DIVISOR, MIN_SIZE};
use crate::image::Image;
use crate::metrics::{psnr, ssim};

/// Runs the generator in eval mode on one image of any size: mirror-pads
/// to a valid size, then crops the result back.
pub fn dehaze(generator: &Generator, img: &Image) -> Result<Image> {
    let (h, w) = img.dims();
    let padded = img.pad_to_multiple(DIVISOR, MIN_SIZE);
    let out = generator.infer(&Image::to_batch(std::slice::from_ref(&padded))?)?;
    let out = Image::from_batch(&out)?.pop().ok_or_else(|| DehazeError::invalid("empty generator output"))?;
    out.crop(0, 0, h, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    /// `(name, psnr, ssim)` per pair.
    pub rows: Vec<(String, f64, f64)>,
    pub mean: (f64, f64),
}

impl MetricTable {
    pub fn from_images<'a>(items: impl IntoIterator<Item = (&'a str, &'a Image, &'a Image)>) -> Result<Self> {
        let rows = items
            .into_iter()
            .map(|(name, a, b)| Ok((name.to_string(), psnr(a, b)?, ssim(a, b)?)))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(DehazeError::invalid("no image pairs to score"));
        }
        let n = rows.len() as f64;
        let mean = (rows.iter().map(|r| r.1).sum::<f64>() / n, rows.iter().map(|r| r.2).sum::<f64>() / n);
        Ok(MetricTable { rows, mean })
    }

    /// `name<TAB>psnr<TAB>ssim` per pair, then a `MEAN` line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, p, q) in &self.rows {
            let _ = writeln!(s, "{name}\t{p:.4}\t{q:.4}");
        }
        let _ = writeln!(s, "MEAN\t{:.4}\t{:.4}", self.mean.0, self.mean.1);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Dehazed output against clean.
    pub table: MetricTable,
    /// Hazy input against clean.
    pub baseline: MetricTable,
}

pub fn evaluate_report(generator: &Generator, pairs: &[Pair]) -> Result<EvalReport> {
    let outputs = pairs.iter().map(|p| dehaze(generator, &p.hazy)).collect::<Result<Vec<_>>>()?;
    let table = MetricTable::from_images(pairs.iter().zip(&outputs).map(|(p, o)| (p.name.as_str(), o, &p.clean)))?;
    let baseline = MetricTable::from_images(pairs.iter().map(|p| (p.name.as_str(), &p.hazy, &p.clean)))?;
    Ok(EvalReport { table, baseline })
}

pub fn evaluate(generator: &Generator, pairs: &[Pair]) -> Result<MetricTable> {
    Ok(evaluate_report(generator, pairs)?.table)
}
