//! Named invariant checks on seeded random fixtures.

use rand::Rng;

use crate::ccm::WindowAttention;
use crate::error::Result;
use crate::init::{rng_from_seed, uniform, ModelRng};
use crate::labels::LabelMap;
use crate::metrics::ConfusionMatrix;
use crate::model::{ModelConfig, Rs3Mamba, WeightArchive};
use crate::nn::Module;
use crate::ss2d::{scan_expand_all, scan_merge, ss2d_with};
use crate::ssm::{s6_forward_scan, s6_forward_sequential, S6Params, ScanElement};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_s6(rng: &mut ModelRng, d: usize, n: usize) -> S6Params<f64> {
    let r = 2;
    let mut p = S6Params::init(d, n, r, rng);
    p.x_proj = uniform(&[d, r + 2 * n], -0.5, 0.5, rng);
    p.d_skip = uniform(&[d], -1.0, 1.0, rng);
    p
}

fn scan_equivalence(rng: &mut ModelRng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..32 {
        let l = rng.random_range(1..=96);
        let (d, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let p = random_s6(rng, d, n);
        let x = uniform(&[l, d], -1.0, 1.0, rng);
        let reference = s6_forward_sequential(&x, &p)?;
        for chunk in [1, 2, 7, 16, l] {
            worst = worst.max(s6_forward_scan(&x, &p, chunk)?.rel_diff(&reference));
        }
    }
    Ok((worst <= 1e-10, format!("max relative difference {worst:.3e}")))
}

fn associativity(rng: &mut ModelRng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..64 {
        let mut el = || ScanElement::<f64> {
            a: (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
            b: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let (x, y, z) = (el(), el(), el());
        let l = x.combine(&y).combine(&z);
        let r = x.combine(&y.combine(&z));
        for (u, v) in l.a.iter().chain(&l.b).zip(r.a.iter().chain(&r.b)) {
            worst = worst.max((u - v).abs());
        }
    }
    Ok((worst <= 1e-14, format!("max difference {worst:.3e}")))
}

fn expand_merge(rng: &mut ModelRng) -> Result<(bool, String)> {
    let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
    let x: Tensor<f64> = uniform(&[h, w, 3], -1.0, 1.0, rng);
    let merged = scan_merge(&scan_expand_all(&x)?, h, w)?;
    let err = merged.max_abs_diff(&x.scale(4.0));
    Ok((err == 0.0, format!("{h}x{w}: max difference {err:.3e}")))
}

fn identity_seam(rng: &mut ModelRng) -> Result<(bool, String)> {
    let x: Tensor<f64> = uniform(&[5, 7, 4], -1.0, 1.0, rng);
    let y = ss2d_with(&x, |_, s| Ok(s.clone()))?;
    let err = y.max_abs_diff(&x.scale(4.0));
    Ok((err <= 1e-6, format!("max difference {err:.3e}")))
}

fn window_locality(rng: &mut ModelRng) -> Result<(bool, String)> {
    let (w, c) = (4, 8);
    let attn = WindowAttention::<f64>::init(c, w, 2, rng);
    let x: Tensor<f64> = uniform(&[10, 9, c], -1.0, 1.0, rng);
    let base = attn.forward(&x)?;
    let (py, px) = (rng.random_range(0..10), rng.random_range(0..9));
    let mut data = x.data().to_vec();
    data[(py * 9 + px) * c] += 1.0;
    let out = attn.forward(&Tensor::new(x.shape().to_vec(), data)?)?;
    let mut leak = 0.0f64;
    let mut moved = 0.0f64;
    for y in 0..10 {
        for xx in 0..9 {
            let d = (0..c)
                .map(|k| (out.get(&[y, xx, k]) - base.get(&[y, xx, k])).abs())
                .fold(0.0, f64::max);
            if (y / w, xx / w) == (py / w, px / w) {
                moved = moved.max(d);
            } else {
                leak = leak.max(d);
            }
        }
    }
    Ok((
        leak <= 1e-6 && moved > 0.0,
        format!("outside-window change {leak:.3e}, inside {moved:.3e}"),
    ))
}

fn metric_identities(rng: &mut ModelRng) -> Result<(bool, String)> {
    let k = 5;
    let mut cm = ConfusionMatrix::new(k);
    let ids = |rng: &mut ModelRng| (0..256).map(|_| rng.random_range(0..k as u8)).collect::<Vec<_>>();
    let gt = LabelMap::new(16, 16, ids(rng))?;
    let pred = LabelMap::new(16, 16, ids(rng))?;
    cm.update(&pred, &gt)?;
    let r = cm.report(&(0..k).collect::<Vec<_>>())?;
    r.check_consistency()?;
    let mut perfect = ConfusionMatrix::new(k);
    perfect.update(&gt, &gt)?;
    let p = perfect.report(&(0..k).collect::<Vec<_>>())?;
    let ok = p.mf1 == Some(1.0) && p.miou == Some(1.0);
    Ok((ok, format!("mIoU {:.4}, perfect {:?}", r.miou.unwrap_or(f64::NAN), p.miou)))
}

fn archive_round_trip(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::small();
    let model = Rs3Mamba::<f32>::init(&cfg, seed)?;
    let bytes = WeightArchive::from_module(&model).encode()?;
    let mut back = Rs3Mamba::<f32>::zeros(&cfg)?;
    WeightArchive::decode(&bytes)?.apply(&mut back, false)?;
    let mut same = true;
    let mut a = Vec::new();
    model.visit("", &mut |_, t, _| a.extend(t.data().iter().map(|v| v.to_bits())));
    let mut i = 0;
    back.visit("", &mut |_, t, _| {
        for v in t.data() {
            same &= a.get(i) == Some(&v.to_bits());
            i += 1;
        }
    });
    let mut corrupt = bytes.clone();
    corrupt[0] ^= 0x20;
    let rejected = WeightArchive::decode(&corrupt).is_err() && WeightArchive::decode(&bytes[..bytes.len() / 2]).is_err();
    Ok((
        same && i == a.len() && rejected,
        format!("{} bytes, bit-identical {same}, corruption rejected {rejected}", bytes.len()),
    ))
}

/// Run every check; each gets its own stream derived from `seed`.
pub fn run_selfcheck(seed: u64) -> Vec<CheckResult> {
    let rng = |k: u64| rng_from_seed(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k));
    vec![
        check("scan_matches_sequential", || scan_equivalence(&mut rng(1))),
        check("scan_associativity", || associativity(&mut rng(2))),
        check("expand_merge_inverse", || expand_merge(&mut rng(3))),
        check("ss2d_identity_seam", || identity_seam(&mut rng(4))),
        check("ccm_window_locality", || window_locality(&mut rng(5))),
        check("metrics_identities", || metric_identities(&mut rng(6))),
        check("archive_round_trip", || archive_round_trip(seed)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_selfcheck(7) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
