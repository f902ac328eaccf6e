//! Binary PPM (P6) / PGM (P5) images and `.rtn` tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{read_rtn, Tensor};

/// Decoded netpbm raster: `channels` interleaved 8-bit samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

/// Parse a binary netpbm file (`P5` grey or `P6` colour, maxval ≤ 255).
pub fn parse_netpbm(bytes: &[u8]) -> Result<Raster> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::Format("not a binary PPM/PGM (P6/P5) file".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
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
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(match bytes.get(pos) {
                None => Error::Truncated("netpbm header".into()),
                Some(_) => Error::Format("malformed netpbm header".into()),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("netpbm header value out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "unsupported netpbm geometry {width}x{height} maxval {maxval}"
        )));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        None => return Err(Error::Truncated("netpbm header".into())),
        Some(_) => return Err(Error::Format("malformed netpbm header".into())),
    }
    let need = width * height * channels;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(Error::Truncated(format!(
            "netpbm payload: need {need} bytes, have {}",
            body.len()
        )));
    }
    Ok(Raster {
        width,
        height,
        channels,
        maxval: maxval as u16,
        pixels: body[..need].to_vec(),
    })
}

pub fn encode_netpbm(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        3 => "P6",
        1 => "P5",
        _ => return Err(Error::invalid("encode_netpbm", "channels must be 1 or 3")),
    };
    if pixels.len() != width * height * channels {
        return Err(Error::invalid("encode_netpbm", "pixel count does not match geometry"));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// `[H, W, 3]` image with values in `[0, 1]` from a PPM or `.rtn` file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let t = if bytes.starts_with(b"RTN1") {
        read_rtn::<f32>(path)?
    } else {
        let r = parse_netpbm(&bytes)?;
        if r.channels != 3 {
            return Err(Error::Format("expected a colour (P6) image".into()));
        }
        let scale = 1.0 / r.maxval as f32;
        Tensor::new(
            [r.height, r.width, 3],
            r.pixels.iter().map(|&b| b as f32 * scale).collect(),
        )?
    };
    t.dims3("load_image")?;
    t.ensure_finite("load_image")
}

/// Quantise `[H, W, 3]` values in `[0, 1]` to 8-bit RGB.
pub fn to_rgb8(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (_, _, c) = img.dims3("to_rgb8")?;
    if c != 3 {
        return Err(Error::shape("to_rgb8", format!("expected 3 channels, got {c}")));
    }
    Ok(img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    fs::write(path, encode_netpbm(width, height, 3, rgb)?)?;
    Ok(())
}

pub fn write_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    fs::write(
        path,
        encode_netpbm(labels.width(), labels.height(), 1, labels.ids())?,
    )?;
    Ok(())
}

/// Id map stored as a P5 greymap (one id per byte).
pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let r = parse_netpbm(&fs::read(path)?)?;
    if r.channels != 1 {
        return Err(Error::Format("expected a greymap (P5) label file".into()));
    }
    LabelMap::new(r.height, r.width, r.pixels)
}
