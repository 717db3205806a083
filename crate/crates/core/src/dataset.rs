//! Directory layouts: a flat folder of clean `.ppm` images, or a pair
//! folder with `hazy/` and `clean/` subfolders matched by file stem.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{DehazeError, Result};
use crate::image::{file_stem, list_ppm, Image};

pub const HAZY_DIR: &str = "hazy";
pub const CLEAN_DIR: &str = "clean";

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub name: String,
    pub hazy: Image,
    pub clean: Image,
}

pub fn load_images(dir: &Path) -> Result<Vec<(String, Image)>> {
    list_ppm(dir)?.iter().map(|p| Ok((file_stem(p), Image::load(p)?))).collect()
}

pub fn is_pair_dir(dir: &Path) -> bool {
    dir.join(HAZY_DIR).is_dir() && dir.join(CLEAN_DIR).is_dir()
}

/// Loads `dir/hazy/*.ppm` against `dir/clean/*.ppm`, sorted by stem. Any
/// file without a partner is an error naming it.
pub fn load_pairs(dir: &Path) -> Result<Vec<Pair>> {
    let hazy: BTreeMap<String, _> = list_ppm(&dir.join(HAZY_DIR))?.into_iter().map(|p| (file_stem(&p), p)).collect();
    let clean: BTreeMap<String, _> = list_ppm(&dir.join(CLEAN_DIR))?.into_iter().map(|p| (file_stem(&p), p)).collect();
    let orphans: Vec<String> = hazy
        .iter()
        .filter(|(k, _)| !clean.contains_key(*k))
        .chain(clean.iter().filter(|(k, _)| !hazy.contains_key(*k)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(DehazeError::invalid(format!("unmatched pair files: {}", orphans.join(", "))));
    }
    let mut out = Vec::with_capacity(hazy.len());
    for (name, hp) in &hazy {
        let h = Image::load(hp)?;
        let c = Image::load(&clean[name])?;
        if h.dims() != c.dims() {
            return Err(DehazeError::invalid(format!(
                "pair {name}: hazy is {}x{}, clean is {}x{}",
                h.height(),
                h.width(),
                c.height(),
                c.width()
            )));
        }
        out.push(Pair { name: name.clone(), hazy: h, clean: c });
    }
    Ok(out)
}
