//! IDX files (the MNIST distribution format): big-endian dimensions after a
//! magic word whose low byte is the rank; only unsigned-byte payloads.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// One `(1, 1, rows, cols)` tensor per image, values in `[0, 255]`.
    Images(Vec<Tensor>),
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset,
            detail: format!("expected 4 header bytes, file has {}", bytes.len()),
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = be_u32(bytes, 0)?;
    let rank = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        _ => {
            return Err(Error::Parse {
                offset: 0,
                detail: format!("bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x} or 0x{LABELS_MAGIC:08x}"),
            })
        }
    };
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let expected: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(Error::Parse {
            offset: start + payload.len().min(expected),
            detail: format!("payload of {expected} bytes expected, found {}", payload.len()),
        });
    }
    Ok(match rank {
        3 => {
            let (rows, cols) = (dims[1], dims[2]);
            let plane = rows * cols;
            IdxData::Images(
                (0..dims[0])
                    .map(|i| {
                        let px = payload[i * plane..(i + 1) * plane].iter().map(|&b| b as f64).collect();
                        Tensor::new(vec![1, 1, rows, cols], px)
                    })
                    .collect::<Result<_>>()?,
            )
        }
        _ => IdxData::Labels(payload.to_vec()),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Images must share one `(1, 1, rows, cols)` shape and hold bytes.
pub fn encode_idx_images(images: &[Tensor], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for img in images {
        if img.shape() != [1, 1, rows, cols] {
            return Err(Error::shape("idx images", &[1, 1, rows, cols], img.shape()));
        }
        out.extend(img.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
