//! Patch-wise restoration with overlapping margins.
//!
//! Each axis is cut into source windows of the patch size. Interior windows
//! keep only their central core (margin cropped on both sides); the first
//! and last windows are flush with the border and keep the border side.
//! Cores partition the image exactly.

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::par::{self, Execution};
use crate::restoration::{restore, Init, RestorationProblem, Schedule};
use crate::tensor::Tensor;

pub const DEFAULT_PATCH: usize = 64;
pub const DEFAULT_MARGIN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    /// Window read from the image; smaller than the patch only when the image is.
    pub src: Rect,
    /// Region written back, contained in `src`.
    pub core: Rect,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub patch: usize,
    pub margin: usize,
    pub height: usize,
    pub width: usize,
    pub tiles: Vec<Tile>,
}

/// `(src_start, src_len, core_start, core_len)` along one axis.
fn plan_axis(n: usize, patch: usize, margin: usize) -> Vec<(usize, usize, usize, usize)> {
    if n <= patch {
        return vec![(0, n, 0, n)];
    }
    let mut out = vec![(0, patch, 0, patch - margin)];
    let mut end = patch - margin;
    while n - end > patch - margin {
        let len = patch - 2 * margin;
        out.push((end - margin, patch, end, len));
        end += len;
    }
    out.push((n - patch, patch, end, n - end));
    out
}

pub fn plan(height: usize, width: usize, patch: usize, margin: usize) -> Result<TileGrid> {
    if height == 0 || width == 0 {
        return Err(Error::Param(format!("cannot tile an empty {height}x{width} image")));
    }
    if patch == 0 || patch <= 2 * margin {
        return Err(Error::Param(format!(
            "patch {patch} must exceed twice the margin {margin}"
        )));
    }
    let rows = plan_axis(height, patch, margin);
    let cols = plan_axis(width, patch, margin);
    let mut tiles = Vec::with_capacity(rows.len() * cols.len());
    for &(sy, sh, cy, ch) in &rows {
        for &(sx, sw, cx, cw) in &cols {
            tiles.push(Tile {
                src: Rect {
                    y: sy,
                    x: sx,
                    h: sh,
                    w: sw,
                },
                core: Rect {
                    y: cy,
                    x: cx,
                    h: ch,
                    w: cw,
                },
            });
        }
    }
    Ok(TileGrid {
        patch,
        margin,
        height,
        width,
        tiles,
    })
}

/// Grow a `(1, C, h, w)` crop to `size x size` by repeating its last row and column.
fn pad_edge(t: &Tensor, size: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.nchw()?;
    Ok(Tensor::from_fn(vec![n, c, size, size], |i| {
        let x = (i % size).min(w - 1);
        let y = (i / size % size).min(h - 1);
        let plane = i / (size * size);
        t.data()[(plane * h + y) * w + x]
    }))
}

/// Image patch and mask for tile `t`, padded to the patch size. Padding is
/// marked invalid in the mask.
pub fn extract(grid: &TileGrid, t: &Tile, image: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let img = image.crop(t.src.y, t.src.x, t.src.h, t.src.w)?;
    let m = mask.crop(t.src.y, t.src.x, t.src.h, t.src.w)?;
    if t.src.h == grid.patch && t.src.w == grid.patch {
        return Ok((img, m));
    }
    let (n, c, _, _) = m.nchw()?;
    let mut padded_mask = Tensor::zeros(vec![n, c, grid.patch, grid.patch]);
    padded_mask.paste(&m, 0, 0)?;
    Ok((pad_edge(&img, grid.patch)?, padded_mask))
}

#[derive(Clone, Debug)]
pub struct TiledOutput {
    pub image: Tensor,
    /// `(tile index, error)` for tiles that fell back to the input.
    pub failures: Vec<(usize, String)>,
}

/// Run `f(tile_index, patch, patch_mask)` on every tile and paste the cores.
/// A failing tile keeps the input's pixels in its core.
pub fn restore_tiled_with<F>(
    grid: &TileGrid,
    image: &Tensor,
    mask: &Tensor,
    exec: Execution,
    f: F,
) -> Result<TiledOutput>
where
    F: Fn(usize, &Tensor, &Tensor) -> Result<Tensor> + Sync,
{
    let (n, _, h, w) = image.nchw()?;
    if n != 1 || h != grid.height || w != grid.width {
        return Err(Error::invalid(
            "tiled restore",
            format!(
                "grid is for (1, C, {}, {}), image is {:?}",
                grid.height,
                grid.width,
                image.shape()
            ),
        ));
    }
    if mask.shape() != image.shape() {
        return Err(Error::shape("tiled restore mask", image.shape(), mask.shape()));
    }
    let results = par::map_indexed(exec, grid.tiles.len(), |i| -> Result<Tensor> {
        let t = &grid.tiles[i];
        let (patch, pmask) = extract(grid, t, image, mask)?;
        let out = f(i, &patch, &pmask)?;
        if out.shape() != patch.shape() {
            return Err(Error::shape("tile result", patch.shape(), out.shape()));
        }
        out.crop(t.core.y - t.src.y, t.core.x - t.src.x, t.core.h, t.core.w)
    });
    let mut out = image.clone();
    let mut failures = Vec::new();
    for (i, (t, r)) in grid.tiles.iter().zip(results).enumerate() {
        match r {
            Ok(core) => out.paste(&core, t.core.y, t.core.x)?,
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    Ok(TiledOutput { image: out, failures })
}

/// MAP-restore each tile with `model` and merge the cores.
pub fn restore_tiled(
    model: &FlowModel,
    problem: &RestorationProblem,
    schedule: &Schedule,
    init: Init,
    grid: &TileGrid,
    exec: Execution,
) -> Result<TiledOutput> {
    let cfg = &model.config;
    if cfg.height != grid.patch || cfg.width != grid.patch {
        return Err(Error::Param(format!(
            "model takes {}x{} inputs, grid patch is {}",
            cfg.height, cfg.width, grid.patch
        )));
    }
    restore_tiled_with(grid, &problem.degraded, &problem.mask, exec, |_, patch, pmask| {
        let sub = RestorationProblem::new(patch.clone(), Some(pmask.clone()), problem.lambda)?;
        Ok(restore(model, &sub, schedule, init)?.restored)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn painted(grid: &TileGrid) -> Vec<usize> {
        let mut count = vec![0; grid.height * grid.width];
        for t in &grid.tiles {
            assert!(t.core.y >= t.src.y && t.core.y + t.core.h <= t.src.y + t.src.h);
            assert!(t.core.x >= t.src.x && t.core.x + t.core.w <= t.src.x + t.src.w);
            for y in t.core.y..t.core.y + t.core.h {
                for x in t.core.x..t.core.x + t.core.w {
                    count[y * grid.width + x] += 1;
                }
            }
        }
        count
    }

    #[test]
    fn single_tile_when_image_equals_patch() {
        let g = plan(64, 64, 64, 4).unwrap();
        assert_eq!(g.tiles.len(), 1);
        assert_eq!(
            g.tiles[0].core,
            Rect {
                y: 0,
                x: 0,
                h: 64,
                w: 64
            }
        );
    }

    #[test]
    fn cores_partition_120_columns() {
        let g = plan(64, 120, 64, 4).unwrap();
        let widths: usize = g.tiles.iter().map(|t| t.core.w).sum();
        assert_eq!(widths, 120);
        assert!(painted(&g).iter().all(|&c| c == 1));
        for t in &g.tiles {
            assert_eq!(t.src.w, 64);
            assert!(t.src.x + t.src.w <= 120);
        }
    }

    #[test]
    fn zero_margin_does_not_overlap_cores() {
        let g = plan(100, 100, 32, 0).unwrap();
        assert!(painted(&g).iter().all(|&c| c == 1));
    }

    #[test]
    fn degenerate_parameters() {
        assert!(plan(10, 10, 8, 4).is_err());
        assert!(plan(10, 10, 0, 0).is_err());
        assert!(plan(0, 10, 8, 1).is_err());
    }

    #[test]
    fn small_image_is_one_padded_tile() {
        let g = plan(20, 30, 32, 4).unwrap();
        assert_eq!(g.tiles.len(), 1);
        let img = Tensor::from_fn(vec![1, 1, 20, 30], |i| i as f64);
        let mask = Tensor::ones(vec![1, 1, 20, 30]);
        let (p, m) = extract(&g, &g.tiles[0], &img, &mask).unwrap();
        assert_eq!(p.shape(), &[1, 1, 32, 32]);
        assert_eq!(m.sum(), 600.0);
        assert_eq!(p.data()[31 * 32 + 31], img.data()[19 * 30 + 29]);
        let out = restore_tiled_with(&g, &img, &mask, Execution::Sequential, |_, p, _| Ok(p.clone())).unwrap();
        assert_eq!(out.image, img);
    }

    #[test]
    fn identity_pass_through_and_failures() {
        let img = Tensor::from_fn(vec![1, 2, 50, 70], |i| (i % 251) as f64);
        let mask = Tensor::ones(img.shape().to_vec());
        let g = plan(50, 70, 16, 3).unwrap();
        let out = restore_tiled_with(&g, &img, &mask, Execution::Parallel, |_, p, _| Ok(p.clone())).unwrap();
        assert_eq!(out.image, img);
        assert!(out.failures.is_empty());
        let out = restore_tiled_with(&g, &img, &mask, Execution::Parallel, |_, _, _| {
            Err(Error::Param("boom".into()))
        })
        .unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.failures.len(), g.tiles.len());
    }
}
