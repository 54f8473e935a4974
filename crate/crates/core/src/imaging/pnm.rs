//! Binary PGM (P5) codec and a PNG fallback through the `image` crate.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::GrayImage;
use crate::error::{Error, Result};

fn decode_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parse a binary PGM. Samples are mapped to [0, 1] by `maxval`; 16-bit
/// samples (maxval > 255) are big-endian.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let mut fields = [0usize; 3];

    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("missing P5 magic".into());
    }
    pos += 2;
    for field in fields.iter_mut() {
        // Whitespace and comments may separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("expected a decimal header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| format!("bad header field: {e}"))?;
    }
    // Exactly one whitespace byte before the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    let n = width * height;
    let raster = &bytes[pos..];
    let scale = maxval as f64;
    let data: Vec<f64> = if maxval < 256 {
        if raster.len() < n {
            return Err(format!("raster has {} bytes, expected {n}", raster.len()));
        }
        raster[..n].iter().map(|&b| f64::from(b) / scale).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(format!("raster has {} bytes, expected {}", raster.len(), 2 * n));
        }
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / scale)
            .collect()
    };
    GrayImage::new(width, height, data).map_err(|e| e.to_string())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|r| decode_err(path, r))
}

/// Encode as 8-bit P5 with maxval 255.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(&img.to_u8());
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(img))?;
    Ok(())
}

/// Load a PGM or an 8/16-bit grayscale PNG, chosen by content.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        return parse_pgm(&bytes).map_err(|r| decode_err(path, r));
    }
    let dynimg = image::load_from_memory(&bytes).map_err(|e| decode_err(path, e.to_string()))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    match dynimg {
        image::DynamicImage::ImageLuma8(buf) => GrayImage::from_u8(w, h, buf.as_raw()),
        image::DynamicImage::ImageLuma16(buf) => GrayImage::from_u16(w, h, buf.as_raw()),
        other => Err(decode_err(
            path,
            format!("unsupported pixel format {:?}", other.color()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_header_with_comments() {
        let mut bytes = b"P5\n# made by hand\n5 6\n# max\n255\n".to_vec();
        bytes.extend((0..30u8).map(|v| v * 8));
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (5, 6));
        assert_eq!(img.get(1, 0), 8.0 / 255.0);
    }

    #[test]
    fn parses_16_bit_big_endian() {
        let mut bytes = b"P5 5 5 65535\n".to_vec();
        for i in 0..25u16 {
            bytes.extend_from_slice(&(i * 1000).to_be_bytes());
        }
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.get(2, 0), 2000.0 / 65535.0);
    }

    #[test]
    fn rejects_truncated_raster() {
        let bytes = b"P5\n5 5\n255\n\x00\x01".to_vec();
        assert!(parse_pgm(&bytes).is_err());
        assert!(parse_pgm(b"P2\n5 5\n255\n").is_err());
    }

    #[test]
    fn encode_is_bit_exact() {
        let px: Vec<u8> = (0..35).map(|i| (i * 7) as u8).collect();
        let img = GrayImage::from_u8(7, 5, &px).unwrap();
        let enc = encode_pgm(&img);
        assert_eq!(&enc[..11], b"P5\n7 5\n255\n");
        assert_eq!(&enc[11..], &px[..]);
        assert_eq!(parse_pgm(&enc).unwrap(), img);
    }

    #[test]
    fn loads_png_via_image_crate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let px: Vec<u8> = (0..64).map(|i| (i * 4) as u8).collect();
        image::GrayImage::from_raw(8, 8, px.clone())
            .unwrap()
            .save(&path)
            .unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.to_u8(), px);
    }
}
