//! Wall-clock benchmark of the selective scan over sequence length.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::init::{rng_from_seed, uniform};
use crate::ssm::{s6_flops, s6_forward_scan, s6_forward_sequential, S6Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanVariant {
    Sequential,
    Scan,
}

impl ScanVariant {
    pub fn name(self) -> &'static str {
        match self {
            ScanVariant::Sequential => "sequential",
            ScanVariant::Scan => "scan",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub l: usize,
    pub variant: ScanVariant,
    /// Fastest of the repetitions.
    pub ns: u128,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub chunk: usize,
    pub d_inner: usize,
    pub n_state: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: (10..=16).map(|p| 1 << p).collect(),
            chunk: 64,
            d_inner: 16,
            n_state: 16,
            reps: 5,
            seed: 0,
        }
    }
}

/// Time both variants at every length. Each length gets its own input;
/// parameters are shared.
pub fn bench_scan(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.reps == 0 || cfg.chunk == 0 || cfg.lengths.contains(&0) {
        return Err(Error::invalid("bench_scan", "reps, chunk and lengths must be positive"));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let r = crate::ssm::default_dt_rank(cfg.d_inner);
    let params = S6Params::<f32>::init(cfg.d_inner, cfg.n_state, r, &mut rng);
    let mut rows = Vec::new();
    for &l in &cfg.lengths {
        let x: Tensor<f32> = uniform(&[l, cfg.d_inner], -1.0, 1.0, &mut rng);
        let flops = s6_flops(l, cfg.d_inner, cfg.n_state, r);
        for variant in [ScanVariant::Sequential, ScanVariant::Scan] {
            let mut best = u128::MAX;
            for _ in 0..cfg.reps {
                let t0 = Instant::now();
                let y = match variant {
                    ScanVariant::Sequential => s6_forward_sequential(&x, &params)?,
                    ScanVariant::Scan => s6_forward_scan(&x, &params, cfg.chunk)?,
                };
                best = best.min(t0.elapsed().as_nanos());
                std::hint::black_box(y);
            }
            rows.push(BenchRow { l, variant, ns: best, flops });
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln ns` against `ln L` for one variant.
pub fn fit_exponent(rows: &[BenchRow], variant: ScanVariant) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| ((r.l as f64).ln(), (r.ns.max(1) as f64).ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("L,variant,ns,flops\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.l, r.variant.name(), r.ns, r.flops));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_of_exact_power_law() {
        let rows: Vec<BenchRow> = [1usize, 2, 4, 8]
            .iter()
            .map(|&l| BenchRow {
                l,
                variant: ScanVariant::Scan,
                ns: (l * l * 10) as u128,
                flops: 0,
            })
            .collect();
        assert!((fit_exponent(&rows, ScanVariant::Scan).unwrap() - 2.0).abs() < 1e-9);
        assert!(fit_exponent(&rows, ScanVariant::Sequential).is_none());
    }
}
