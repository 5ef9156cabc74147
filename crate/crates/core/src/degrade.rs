//! Synthetic degradations on 0-255 images: additive noise, missing blocks
//! and block-DCT quantization artifacts.
//!
//! Outputs are rounded and clamped to integer intensities. Every operator
//! also yields a validity mask (1 = observed), combined across a chain by
//! logical AND.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fraction of the image covered by masked blocks when no count is given.
pub const DEFAULT_MASK_COVERAGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// `N(0, sigma)` per pixel.
    Gaussian { sigma: f64 },
    /// `U(-a, a)` per pixel.
    Uniform { a: f64 },
    /// `count` square blocks of side `size` set to 0 and marked invalid;
    /// `None` covers about 10% of the image.
    BlockMask { count: Option<usize>, size: usize },
    /// 8x8 block DCT quantized with the luminance table at `quality` (1-100).
    Dct { quality: u32 },
}

impl FromStr for Degradation {
    type Err = Error;

    /// `gauss:S`, `uniform:A`, `mask:COUNTxSIZE` or `mask:SIZE`, `dct:Q` (alias `jpeg:Q`).
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Param(format!("invalid degradation '{s}': {why}"));
        let (kind, arg) = s.trim().split_once(':').ok_or_else(|| bad("expected kind:value"))?;
        let num = |v: &str| v.trim().parse::<f64>().ok().filter(|x| x.is_finite() && *x >= 0.0);
        let int = |v: &str| v.trim().parse::<usize>().ok();
        Ok(match kind.trim() {
            "gauss" | "gaussian" => Degradation::Gaussian {
                sigma: num(arg).ok_or_else(|| bad("sigma must be a non-negative number"))?,
            },
            "uniform" => Degradation::Uniform {
                a: num(arg).ok_or_else(|| bad("magnitude must be a non-negative number"))?,
            },
            "mask" => {
                let (count, size) = match arg.split_once('x') {
                    Some((c, z)) => (Some(int(c).ok_or_else(|| bad("count must be an integer"))?), z),
                    None => (None, arg),
                };
                let size = int(size)
                    .filter(|&z| z > 0)
                    .ok_or_else(|| bad("size must be a positive integer"))?;
                Degradation::BlockMask { count, size }
            }
            "dct" | "jpeg" => Degradation::Dct {
                quality: arg
                    .trim()
                    .parse()
                    .ok()
                    .filter(|q| (1..=100).contains(q))
                    .ok_or_else(|| bad("quality must be an integer in 1..=100"))?,
            },
            _ => return Err(bad("unknown kind (gauss, uniform, mask, dct)")),
        })
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degradation::Gaussian { sigma } => write!(f, "gauss:{sigma}"),
            Degradation::Uniform { a } => write!(f, "uniform:{a}"),
            Degradation::BlockMask { count: Some(c), size } => write!(f, "mask:{c}x{size}"),
            Degradation::BlockMask { count: None, size } => write!(f, "mask:{size}"),
            Degradation::Dct { quality } => write!(f, "dct:{quality}"),
        }
    }
}

/// `a+b+c`, applied left to right.
pub fn parse_chain(s: &str) -> Result<Vec<Degradation>> {
    let chain = s.split('+').map(str::parse).collect::<Result<Vec<_>>>()?;
    Ok(chain)
}

fn quantize_pixels(img: &mut Tensor) {
    for v in img.data_mut() {
        *v = v.round().clamp(0.0, 255.0);
    }
}

pub fn apply(d: &Degradation, img: &Tensor, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let (_, c, h, w) = img.nchw()?;
    let mut out = img.clone();
    let mut mask = Tensor::ones(img.shape().to_vec());
    match *d {
        Degradation::Gaussian { sigma } => {
            for v in out.data_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Degradation::Uniform { a } => {
            for v in out.data_mut() {
                *v += a * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        Degradation::BlockMask { count, size } => {
            if size > h || size > w {
                return Err(Error::Param(format!("mask block {size} exceeds image {h}x{w}")));
            }
            let count = count.unwrap_or_else(|| {
                ((DEFAULT_MASK_COVERAGE * (h * w) as f64 / (size * size) as f64).round() as usize).max(1)
            });
            for _ in 0..count {
                let y0 = rng.random_range(0..=h - size);
                let x0 = rng.random_range(0..=w - size);
                for n_c in 0..out.shape()[0] * c {
                    for y in y0..y0 + size {
                        let row = (n_c * h + y) * w;
                        out.data_mut()[row + x0..row + x0 + size].fill(0.0);
                        mask.data_mut()[row + x0..row + x0 + size].fill(0.0);
                    }
                }
            }
        }
        Degradation::Dct { quality } => out = dct_artifact(img, quality)?,
    }
    quantize_pixels(&mut out);
    Ok((out, mask))
}

pub fn compose(ds: &[Degradation], img: &Tensor, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    if ds.is_empty() {
        return Err(Error::Param("empty degradation chain".into()));
    }
    let mut cur = img.clone();
    let mut mask = Tensor::ones(img.shape().to_vec());
    for d in ds {
        let (next, m) = apply(d, &cur, rng)?;
        mask = mask.zip_map(&m, |a, b| if a > 0.0 && b > 0.0 { 1.0 } else { 0.0 })?;
        cur = next;
    }
    Ok((cur, mask))
}

/// Standard JPEG luminance quantization table, row-major.
pub const LUMINANCE_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Luminance table scaled with the IJG quality convention; quality 100 gives all ones.
pub fn quant_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Param(format!("quality {quality} outside 1..=100")));
    }
    let q = quality as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    Ok(LUMINANCE_TABLE.map(|b| ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0)))
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let alpha = if k == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (n, v) in row.iter_mut().enumerate() {
            *v = alpha * (PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

/// `out = A * b * A^T` (or `A^T * b * A` when `transpose`).
fn separable(a: &[[f64; 8]; 8], b: &[f64; 64], transpose: bool) -> [f64; 64] {
    let at = |i: usize, j: usize| if transpose { a[j][i] } else { a[i][j] };
    let mut tmp = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            tmp[i * 8 + j] = (0..8).map(|k| at(i, k) * b[k * 8 + j]).sum();
        }
    }
    let mut out = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            out[i * 8 + j] = (0..8).map(|k| tmp[i * 8 + k] * at(j, k)).sum();
        }
    }
    out
}

/// Quantize each channel's 8x8 block DCT with the scaled table. Partial
/// border blocks are filled by edge replication before transforming.
pub fn dct_artifact(img: &Tensor, quality: u32) -> Result<Tensor> {
    let table = quant_table(quality)?;
    let m = dct_matrix();
    let (n, c, h, w) = img.nchw()?;
    let mut out = img.clone();
    for plane in 0..n * c {
        let base = plane * h * w;
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for (i, v) in block.iter_mut().enumerate() {
                    let y = (by + i / 8).min(h - 1);
                    let x = (bx + i % 8).min(w - 1);
                    *v = img.data()[base + y * w + x] - 128.0;
                }
                let mut coef = separable(&m, &block, false);
                for (v, q) in coef.iter_mut().zip(&table) {
                    *v = (*v / q).round() * q;
                }
                let rec = separable(&m, &coef, true);
                for (i, v) in rec.iter().enumerate() {
                    let (y, x) = (by + i / 8, bx + i % 8);
                    if y < h && x < w {
                        out.data_mut()[base + y * w + x] = v + 128.0;
                    }
                }
            }
        }
    }
    quantize_pixels(&mut out);
    Ok(out)
}
