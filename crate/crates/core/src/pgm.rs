//! Binary portable graymap (P5) reading and writing.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    /// Big-endian samples, maxval 65535.
    Sixteen,
}

impl BitDepth {
    pub fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Raw samples of a decoded graymap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub samples: Vec<u16>,
}

/// Intensity in `[0, 1]` to an integer level, rounding halves up.
pub fn quantize(v: f32, maxval: u32) -> u16 {
    let v = (v as f64).clamp(0.0, 1.0);
    (v * maxval as f64 + 0.5).floor() as u16
}

fn encode(width: usize, height: usize, depth: BitDepth, samples: impl Iterator<Item = u16>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{}\n", depth.maxval()).into_bytes();
    match depth {
        BitDepth::Eight => out.extend(samples.map(|s| s as u8)),
        BitDepth::Sixteen => {
            for s in samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        }
    }
    out
}

pub fn encode_image(img: &GrayImage, depth: BitDepth) -> Vec<u8> {
    let max = depth.maxval();
    encode(img.width, img.height, depth, img.data.iter().map(|&v| quantize(v, max)))
}

/// Masks are written as 0 and maxval.
pub fn encode_mask(mask: &BinaryMask, depth: BitDepth) -> Vec<u8> {
    let max = depth.maxval() as u16;
    encode(
        mask.width,
        mask.height,
        depth,
        mask.data.iter().map(|&v| if v != 0 { max } else { 0 }),
    )
}

pub fn write_image<W: Write>(img: &GrayImage, depth: BitDepth, mut w: W) -> Result<()> {
    w.write_all(&encode_image(img, depth))?;
    Ok(())
}

pub fn write_mask<W: Write>(mask: &BinaryMask, depth: BitDepth, mut w: W) -> Result<()> {
    w.write_all(&encode_mask(mask, depth))?;
    Ok(())
}

/// Header fields are separated by whitespace; `#` starts a comment running
/// to the end of the line. Exactly one whitespace byte follows maxval.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Pgm("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::Pgm(format!("bad {what} {tok:?}")))
}

pub fn decode(bytes: &[u8]) -> Result<Pgm> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != "P5" {
        return Err(Error::Pgm(format!("expected magic P5, found {magic:?}")));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Pgm(format!("empty raster {width}x{height}")));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(Error::Pgm(format!("maxval {maxval} outside 1..=65535")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Pgm("missing separator after maxval".into()));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Pgm("raster too large".into()))?;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Pgm(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        )));
    }
    let samples: Vec<u16> = if wide {
        payload[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        payload[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(s) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(Error::Pgm(format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u32,
        samples,
    })
}

pub fn read<R: Read>(mut r: R) -> Result<Pgm> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

impl Pgm {
    pub fn to_image(&self) -> GrayImage {
        let m = self.maxval as f64;
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.samples.iter().map(|&s| (s as f64 / m) as f32).collect(),
        }
    }

    /// Any non-zero sample is a positive pixel.
    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.samples.iter().map(|&s| u8::from(s != 0)).collect(),
        }
    }
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    Ok(decode(&fs::read(path)?)?.to_image())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(decode(&fs::read(path)?)?.to_mask())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_fixtures() {
        assert_eq!(quantize(1.0, 255), 255);
        assert_eq!(quantize(0.5, 255), 128);
        assert_eq!(quantize(0.0, 255), 0);
        assert_eq!(quantize(1.0, 65535), 65535);
    }

    #[test]
    fn round_trip_is_stable_after_first_quantization() {
        let img = GrayImage::from_data(3, 2, vec![0.0, 0.1, 0.5, 0.77, 0.999, 1.0]).unwrap();
        for depth in [BitDepth::Eight, BitDepth::Sixteen] {
            let first = encode_image(&img, depth);
            let back = decode(&first).unwrap().to_image();
            assert_eq!(encode_image(&back, depth), first);
        }
    }

    #[test]
    fn masks_use_full_scale() {
        let m = BinaryMask::from_data(2, 2, vec![0, 1, 1, 0]).unwrap();
        let bytes = encode_mask(&m, BitDepth::Eight);
        assert!(bytes.ends_with(&[0, 255, 255, 0]));
        assert_eq!(decode(&bytes).unwrap().to_mask(), m);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5 # made by hand\n2 1\n# levels\n255\n\x00\xff";
        let p = decode(bytes).unwrap();
        assert_eq!((p.width, p.height, p.maxval), (2, 1, 255));
        assert_eq!(p.samples, vec![0, 255]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(decode(b"P2\n1 1\n255\n0"), Err(Error::Pgm(_))));
        assert!(matches!(decode(b"P5\n2 2\n255\n\x00\x00"), Err(Error::Pgm(_))));
        assert!(matches!(decode(b"P5\n2"), Err(Error::Pgm(_))));
        assert!(matches!(decode(b"P5\n1 1\n100\n\xff"), Err(Error::Pgm(_))));
    }
}
