//! Per-pixel class id maps.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Id marking unlabeled pixels; excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != h * w {
            return Err(Error::shape(
                "label_map",
                format!("{} ids for a {h}x{w} map", ids.len()),
            ));
        }
        Ok(LabelMap { h, w, ids })
    }

    pub fn filled(h: usize, w: usize, id: u8) -> Self {
        LabelMap {
            h,
            w,
            ids: vec![id; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.w + x]
    }

    /// Reject ids outside `[0, classes)` other than [`IGNORE_LABEL`].
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .ids
            .iter()
            .find(|&&v| v != IGNORE_LABEL && v as usize >= classes)
        {
            Some(&v) => Err(Error::LabelOutOfRange {
                label: v as u32,
                classes,
            }),
            None => Ok(()),
        }
    }

    /// Per-pixel argmax over the last axis of `[H, W, K]` logits; ties go to
    /// the lowest id.
    pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Result<Self> {
        let (h, w, k) = logits.dims3("argmax")?;
        if k == 0 || k > IGNORE_LABEL as usize {
            return Err(Error::shape("argmax", format!("{k} classes unsupported")));
        }
        let ids = logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        Ok(LabelMap { h, w, ids })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::<f32>::new([1, 2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 3.0]).unwrap();
        assert_eq!(LabelMap::argmax(&t).unwrap().ids(), [0, 2]);
    }

    #[test]
    fn validate_allows_ignore() {
        let m = LabelMap::new(1, 3, vec![0, 255, 5]).unwrap();
        assert!(m.validate(6).is_ok());
        assert!(matches!(m.validate(5), Err(Error::LabelOutOfRange { label: 5, .. })));
    }
}
