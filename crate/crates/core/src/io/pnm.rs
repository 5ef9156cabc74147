//! Binary portable pixmaps: P5 (grayscale) and P6 (RGB), maxval 255.
//!
//! Images are `(1, C, H, W)` tensors of 0-255 intensities; masks are P5 files
//! where 0 marks invalid pixels and anything else valid.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(0..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(Error::Parse {
                offset: 0,
                detail: "expected P5 or P6 magic".into(),
            })
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and comments may separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse {
                offset: pos,
                detail: "expected a decimal header field".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                detail: "header field out of range".into(),
            })?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: pos,
            detail: format!("maxval {maxval} unsupported, expected 255"),
        });
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Parse {
            offset: pos,
            detail: "expected whitespace after maxval".into(),
        });
    }
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: pos,
            detail: format!("empty image {width}x{height}"),
        });
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos + 1,
    })
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let plane = h.width * h.height;
    let expected = plane * h.channels;
    let payload = &bytes[h.data_start..];
    if payload.len() != expected {
        return Err(Error::Parse {
            offset: h.data_start + payload.len().min(expected),
            detail: format!(
                "{}x{} image needs {expected} payload bytes, found {}",
                h.width,
                h.height,
                payload.len()
            ),
        });
    }
    // Interleaved RGB to planar channels.
    Tensor::new(
        vec![1, h.channels, h.height, h.width],
        (0..expected)
            .map(|i| {
                let (c, p) = (i / plane, i % plane);
                payload[p * h.channels + c] as f64
            })
            .collect(),
    )
}

/// Values are rounded and clamped to bytes.
pub fn encode_pnm(img: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = img.nchw()?;
    let magic = match (n, c) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => {
            return Err(Error::invalid(
                "pnm",
                format!("need a single 1- or 3-channel image, got {:?}", img.shape()),
            ))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.extend((0..plane * c).map(|i| {
        let (p, ch) = (i / c, i % c);
        img.data()[ch * plane + p].round().clamp(0.0, 255.0) as u8
    }));
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes).map_err(|e| match e {
        Error::Parse { offset, detail } => Error::Parse {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        e => e,
    })
}

pub fn write_pnm(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pnm(img)?).map_err(|e| Error::io(path, e))
}

/// Read a P5 mask as 0/1 values.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let m = read_pnm(path)?;
    if m.shape()[1] != 1 {
        return Err(Error::Format(format!("{}: masks must be grayscale", path.display())));
    }
    Ok(m.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

/// Write a 0/1 mask as a P5 file with 0/255 intensities.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    write_pnm(path, &mask.map(|v| if v > 0.0 { 255.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_roundtrip_with_comment() {
        let bytes = b"P5\n# made by hand\n3 2\n255\n\x00\x01\x02\x03\x04\xff".to_vec();
        let img = parse_pnm(&bytes).unwrap();
        assert_eq!(img.shape(), &[1, 1, 2, 3]);
        assert_eq!(img.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 255.0]);
        assert_eq!(parse_pnm(&encode_pnm(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn color_is_planar() {
        let bytes = b"P6 2 1 255\n\x01\x02\x03\x04\x05\x06".to_vec();
        let img = parse_pnm(&bytes).unwrap();
        assert_eq!(img.shape(), &[1, 3, 1, 2]);
        assert_eq!(img.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = encode_pnm(&img).unwrap();
        assert_eq!(&back[back.len() - 6..], b"\x01\x02\x03\x04\x05\x06");
    }

    #[test]
    fn rejects_bad_files() {
        assert!(parse_pnm(b"P2 1 1 255\n\x00").is_err());
        assert!(parse_pnm(b"P5 2 2 65535\n\x00\x00\x00\x00").is_err());
        assert!(matches!(
            parse_pnm(b"P5 2 2 255\n\x00\x00\x00"),
            Err(Error::Parse { .. })
        ));
        assert!(parse_pnm(b"P5 2 2 255\n\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn mask_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_pnm(&path).unwrap().data(), &[255.0, 0.0, 255.0]);
        assert_eq!(read_mask(&path).unwrap(), mask);
    }
}
