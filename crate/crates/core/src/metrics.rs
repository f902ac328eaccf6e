use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::shape("confusion_matrix", format!("{} counts for {k} classes", counts.len())));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel whose ground truth and prediction are both not
    /// [`IGNORE_LABEL`].
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape(
                "confusion_matrix",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        pred.validate(self.k)?;
        gt.validate(self.k)?;
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            if p != IGNORE_LABEL && g != IGNORE_LABEL {
                self.counts[g as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("confusion_matrix", format!("merge {} into {} classes", other.k, self.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn)` for one class.
    pub fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.k).map(|g| self.get(g, c)).sum();
        let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }

    /// Scores for every class; means over `evaluated` skip undefined
    /// classes.
    pub fn report(&self, evaluated: &[usize]) -> Result<MetricReport> {
        if let Some(&c) = evaluated.iter().find(|&&c| c >= self.k) {
            return Err(Error::Config(format!("evaluated class {c} out of range for {} classes", self.k)));
        }
        let per_class: Vec<Option<ClassScore>> = (0..self.k)
            .map(|c| {
                let (tp, fp, fn_) = self.tp_fp_fn(c);
                let denom = tp + fp + fn_;
                (denom > 0).then(|| ClassScore {
                    iou: tp as f64 / denom as f64,
                    f1: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
                })
            })
            .collect();
        let defined: Vec<ClassScore> = evaluated.iter().filter_map(|&c| per_class[c]).collect();
        let mean = |f: fn(&ClassScore) -> f64| {
            (!defined.is_empty()).then(|| defined.iter().map(f).sum::<f64>() / defined.len() as f64)
        };
        Ok(MetricReport {
            mf1: mean(|s| s.f1),
            miou: mean(|s| s.iou),
            per_class,
            evaluated: evaluated.to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// `None` marks a class absent from both prediction and ground truth.
    pub per_class: Vec<Option<ClassScore>>,
    pub evaluated: Vec<usize>,
    pub mf1: Option<f64>,
    pub miou: Option<f64>,
}

/// Tolerance of the `F1 = 2·IoU / (1 + IoU)` consistency check.
pub const F1_IOU_TOL: f64 = 1e-12;

impl MetricReport {
    /// Verify `F1 = 2·IoU/(1+IoU)` and `0 <= IoU <= F1 <= 1` per class.
    pub fn check_consistency(&self) -> Result<()> {
        for (c, s) in self.per_class.iter().enumerate() {
            if let Some(s) = s {
                let ok = (s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() <= F1_IOU_TOL
                    && (0.0..=1.0).contains(&s.iou)
                    && s.iou <= s.f1 + F1_IOU_TOL
                    && s.f1 <= 1.0;
                if !ok {
                    return Err(Error::invalid(
                        "metrics",
                        format!("class {c}: inconsistent F1 {} / IoU {}", s.f1, s.iou),
                    ));
                }
            }
        }
        Ok(())
    }

    fn label(names: &[String], c: usize) -> String {
        names.get(c).cloned().unwrap_or_else(|| format!("class{c}"))
    }

    /// Per-class F1/IoU rows of the evaluated classes, then the means.
    /// Values are percentages.
    pub fn table(&self, names: &[String]) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>8} {:>8}", "class", "F1", "IoU");
        for &c in &self.evaluated {
            let s = self.per_class[c];
            let _ = writeln!(
                out,
                "{:<20} {:>8} {:>8}",
                Self::label(names, c),
                pct(s.map(|s| s.f1)),
                pct(s.map(|s| s.iou))
            );
        }
        let _ = writeln!(out, "{:<20} {:>8} {:>8}", "mean", pct(self.mf1), pct(self.miou));
        out
    }

    /// `class,f1,iou` rows as fractions; undefined values are empty.
    pub fn csv(&self, names: &[String]) -> String {
        let v = |x: Option<f64>| x.map_or(String::new(), |x| format!("{x:.6}"));
        let mut out = String::from("class,f1,iou\n");
        for &c in &self.evaluated {
            let s = self.per_class[c];
            let _ = writeln!(out, "{},{},{}", Self::label(names, c), v(s.map(|s| s.f1)), v(s.map(|s| s.iou)));
        }
        let _ = writeln!(out, "mean,{},{}", v(self.mf1), v(self.miou));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap();
        let r = cm.report(&[0, 1]).unwrap();
        for s in r.per_class.iter().flatten() {
            assert!((s.iou - 0.5).abs() < 1e-15);
            assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!((r.miou.unwrap() - 0.5).abs() < 1e-15);
        r.check_consistency().unwrap();
    }

    #[test]
    fn ignored_pixels_leave_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(3);
        let gt = LabelMap::filled(2, 2, IGNORE_LABEL);
        cm.update(&LabelMap::filled(2, 2, 1), &gt).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn undefined_class_excluded_from_means() {
        let mut cm = ConfusionMatrix::new(3);
        let m = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        cm.update(&m, &m).unwrap();
        let r = cm.report(&[0, 1, 2]).unwrap();
        assert!(r.per_class[2].is_none());
        assert_eq!(r.mf1, Some(1.0));
        assert!(r.table(&[]).contains("class2"));
        assert!(r.csv(&[]).contains("class2,,\n"));
    }
}
