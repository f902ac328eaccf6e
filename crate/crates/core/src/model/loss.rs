use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::tensor::ops::softmax_row_f64;
use crate::tensor::{Scalar, Tensor};

/// Mean pixel cross-entropy over non-ignored pixels and its gradient with
/// respect to the logits. With no valid pixel both are zero.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &LabelMap) -> Result<(f64, Tensor<T>)> {
    let (h, w, k) = logits.dims3("cross_entropy")?;
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::shape(
            "cross_entropy",
            format!(
                "labels {}x{} vs logits {:?}",
                labels.height(),
                labels.width(),
                logits.shape()
            ),
        ));
    }
    labels.validate(k)?;
    let n_valid = labels.ids().iter().filter(|&&v| v != IGNORE_LABEL).count();
    let mut grad = vec![0.0f64; logits.len()];
    if n_valid == 0 {
        return Ok((0.0, Tensor::zeros(logits.shape().to_vec())));
    }
    let inv = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    let mut p = vec![0.0f64; k];
    for ((row, g), &y) in logits
        .data()
        .chunks_exact(k)
        .zip(grad.chunks_exact_mut(k))
        .zip(labels.ids())
    {
        if y == IGNORE_LABEL {
            continue;
        }
        let y = y as usize;
        let vals = row.iter().map(|v| v.as_f64());
        let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + vals.clone().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y].as_f64();
        softmax_row_f64(vals, &mut p);
        for (c, (gc, pc)) in g.iter_mut().zip(&p).enumerate() {
            *gc = (pc - if c == y { 1.0 } else { 0.0 }) * inv;
        }
    }
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, Tensor::from_f64(logits.shape().to_vec(), &grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::full([2, 3, 5], 0.7);
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 255]).unwrap();
        let (loss, _) = cross_entropy(&logits, &labels).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn all_ignored_is_zero() {
        let logits = Tensor::<f32>::ones([2, 2, 3]);
        let (loss, g) = cross_entropy(&logits, &LabelMap::filled(2, 2, IGNORE_LABEL)).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::<f32>::ones([1, 1, 3]);
        assert!(cross_entropy(&logits, &LabelMap::filled(1, 1, 3)).is_err());
    }
}
