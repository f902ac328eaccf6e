//! Sliding-window inference on images larger than one tile.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Rs3Mamba;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_TILE: usize = 512;
pub const DEFAULT_STRIDE: usize = 256;

/// Tile origins `(y, x)` covering an `h × w` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub h: usize,
    pub w: usize,
    pub tile: usize,
    pub stride: usize,
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let last = len - tile;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

/// Origins at multiples of `stride` per axis, plus a final tile clamped to
/// end at the image edge.
pub fn plan_tiles(h: usize, w: usize, tile: usize, stride: usize) -> Result<TilePlan> {
    if tile == 0 || !tile.is_multiple_of(32) {
        return Err(Error::invalid("plan_tiles", format!("tile {tile} must be a positive multiple of 32")));
    }
    if stride == 0 || stride > tile {
        return Err(Error::invalid("plan_tiles", format!("stride {stride} must be in 1..={tile}")));
    }
    if h < tile || w < tile {
        return Err(Error::shape("plan_tiles", format!("image {h}x{w} smaller than tile {tile}")));
    }
    let ys = axis_origins(h, tile, stride);
    let xs = axis_origins(w, tile, stride);
    let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    Ok(TilePlan {
        h,
        w,
        tile,
        stride,
        origins,
    })
}

/// Average overlapping `[T, T, K]` tiles into an `[H, W, K]` map.
/// Accumulation follows origin order, so the result does not depend on the
/// order of `tiles`.
pub fn stitch_logits<T: Scalar>(h: usize, w: usize, tiles: &[((usize, usize), Tensor<T>)]) -> Result<Tensor<T>> {
    let Some((_, first)) = tiles.first() else {
        return Err(Error::invalid("stitch_logits", "no tiles"));
    };
    let k = first.last_dim();
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.sort_by_key(|&i| tiles[i].0);
    let mut sum = vec![0.0f64; h * w * k];
    let mut count = vec![0u32; h * w];
    for i in order {
        let ((oy, ox), t) = &tiles[i];
        let (th, tw, tk) = t.dims3("stitch_logits")?;
        if tk != k || oy + th > h || ox + tw > w {
            return Err(Error::shape(
                "stitch_logits",
                format!("tile {:?} at ({oy}, {ox}) does not fit a {h}x{w}x{k} map", t.shape()),
            ));
        }
        let d = t.data();
        for y in 0..th {
            for x in 0..tw {
                let p = (oy + y) * w + ox + x;
                count[p] += 1;
                for (s, v) in sum[p * k..][..k].iter_mut().zip(&d[(y * tw + x) * k..][..k]) {
                    *s += v.as_f64();
                }
            }
        }
    }
    if let Some(p) = count.iter().position(|&c| c == 0) {
        return Err(Error::invalid(
            "stitch_logits",
            format!("pixel ({}, {}) not covered by any tile", p / w, p % w),
        ));
    }
    for (p, &c) in count.iter().enumerate() {
        for s in &mut sum[p * k..][..k] {
            *s /= c as f64;
        }
    }
    Tensor::from_f64([h, w, k], &sum)
}

pub fn crop<T: Scalar>(x: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (sh, sw, c) = x.dims3("crop")?;
    if y0 + h > sh || x0 + w > sw {
        return Err(Error::shape("crop", format!("{h}x{w} at ({y0}, {x0}) outside {sh}x{sw}")));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        out.extend_from_slice(&d[(y * sw + x0) * c..][..w * c]);
    }
    Tensor::new([h, w, c], out)
}

/// Zero-pad bottom and right up to at least `h × w`.
pub fn pad_to<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (sh, sw, c) = x.dims3("pad_to")?;
    let (h, w) = (h.max(sh), w.max(sw));
    let d = x.data();
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..sh {
        out[y * w * c..][..sw * c].copy_from_slice(&d[y * sw * c..][..sw * c]);
    }
    Tensor::new([h, w, c], out)
}

/// Logits for an image of any size at least 1×1: pad to the tile if
/// needed, run every tile of the plan in parallel, stitch and crop.
pub fn infer_tiled<T: Scalar>(model: &Rs3Mamba<T>, image: &Tensor<T>, tile: usize, stride: usize) -> Result<Tensor<T>> {
    let (h, w, _) = image.dims3("infer_tiled")?;
    let padded = pad_to(image, tile, tile)?;
    let (ph, pw, _) = padded.dims3("infer_tiled")?;
    let plan = plan_tiles(ph, pw, tile, stride)?;
    let tiles = plan
        .origins
        .par_iter()
        .map(|&(y, x)| Ok(((y, x), model.forward(&crop(&padded, y, x, tile, tile)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let full = stitch_logits(ph, pw, &tiles)?;
    if (ph, pw) == (h, w) {
        Ok(full)
    } else {
        crop(&full, 0, 0, h, w)
    }
}
