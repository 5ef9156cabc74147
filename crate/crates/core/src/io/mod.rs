//! File formats and image metrics.

pub mod checkpoint;
pub mod idx;
pub mod pnm;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Table value reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `20 log10(peak) - 10 log10(MSE)` in decibels; infinite for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::Param("psnr of empty images".into()));
    }
    let mse = a.zip_map(b, |x, y| (x - y) * (x - y))?.sum() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * peak.log10() - 10.0 * mse.log10())
}

/// PSNR capped for tables and reports.
pub fn psnr_capped(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    Ok(psnr(a, b, peak)?.min(PSNR_CAP))
}

/// Images from an IDX image file or a directory of PGM/PPM files (sorted by
/// name), each `(1, C, H, W)` and zero-padded to `height x width` when smaller.
pub fn load_images(path: &Path, height: usize, width: usize) -> Result<Vec<Tensor>> {
    let images = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm")))
            .collect();
        files.sort();
        files.iter().map(|f| pnm::read_pnm(f)).collect::<Result<Vec<_>>>()?
    } else {
        match idx::read_idx(path)? {
            idx::IdxData::Images(images) => images,
            idx::IdxData::Labels(_) => {
                return Err(Error::Format(format!("{} holds labels, not images", path.display())))
            }
        }
    };
    images
        .into_iter()
        .map(|img| {
            let (_, _, h, w) = img.nchw()?;
            if (h, w) == (height, width) {
                Ok(img)
            } else {
                img.pad_to(height, width)
            }
        })
        .collect()
}
