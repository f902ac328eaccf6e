//! Acceptance suite: one line per criterion, nonzero exit on any failure.
//! Every tolerance and runtime budget is pinned below.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rs3mamba::bench::{bench_scan, fit_exponent, BenchConfig, ScanVariant};
use rs3mamba::ccm::WindowAttention;
use rs3mamba::data::{plan_tiles, stitch_logits};
use rs3mamba::metrics::ConfusionMatrix;
use rs3mamba::model::{count_flops, count_params, cross_entropy, WeightArchive};
use rs3mamba::nn::{Linear, Module};
use rs3mamba::ss2d::{scan_expand, scan_merge, ss2d_forward, ss2d_with, Direction, ScanMode, SsmConfig, VssBlock};
use rs3mamba::ssm::{s6_flops, s6_forward_scan, s6_forward_sequential, S6Params};
use rs3mamba::{Ablation, Error, ErrorCategory, LabelMap, ModelConfig, Rs3Mamba, Tensor};

const PARAMS_FULL: f64 = 43.32e6;
const PARAMS_BASELINE: f64 = 11.69e6;
const PARAMS_TOL: f64 = 0.10;
const FLOPS_FULL: f64 = 31.65e9;
const FLOPS_TOL: f64 = 0.20;
const SCAN_CASES: usize = 1000;
const SCAN_TOL_F32: f64 = 1e-5;
const SCAN_TOL_F64: f64 = 1e-10;
const EXPONENT_RANGE: (f64, f64) = (0.9, 1.2);
const GRAD_CASES: usize = 100;
const GRAD_TOL: f64 = 1e-5;
const SEAM_TOL: f64 = 1e-6;
const TILE_SIZES: usize = 50;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

fn rel(value: f64, reference: f64) -> f64 {
    (value - reference) / reference
}

fn parameter_count() -> Outcome {
    let full = count_params(&ModelConfig::default()).map_err(e2s)?;
    println!("    dual_ccm breakdown: main {} aux {} fusion {} decoder {}", full.main, full.aux, full.fusion, full.decoder);
    let base = count_params(&ModelConfig::default().with_ablation(Ablation::MainOnly)).map_err(e2s)?;
    let (rf, rb) = (rel(full.total() as f64, PARAMS_FULL), rel(base.total() as f64, PARAMS_BASELINE));
    let detail = format!(
        "dual_ccm {:.3}M ({:+.1}%), main_only {:.3}M ({:+.1}%)",
        full.total() as f64 / 1e6,
        100.0 * rf,
        base.total() as f64 / 1e6,
        100.0 * rb
    );
    ensure(rf.abs() <= PARAMS_TOL && rb.abs() <= PARAMS_TOL, || detail.clone())?;
    Ok(detail)
}

fn flop_count() -> Outcome {
    let f = count_flops(&ModelConfig::default(), 256, 256, 2).map_err(e2s)?;
    let r = rel(f.total() as f64, FLOPS_FULL);
    let detail = format!("{:.3}G for 2 x 256x256 ({:+.1}%)", f.total() as f64 / 1e9, 100.0 * r);
    ensure(r.abs() <= FLOPS_TOL, || detail.clone())?;
    Ok(detail)
}

fn scan_correctness() -> Outcome {
    let mut g = rng(0xACC3);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for _ in 0..SCAN_CASES {
        let l = g.random_range(1..=256);
        let (d, n) = (g.random_range(1..=8), g.random_range(1..=8));
        let p = rand_s6(d, n, g.random_range(1..=2), &mut g);
        let x = rand_tensor(&[l, d], -1.0, 1.0, &mut g);
        let chunk = *[1, 2, 7, 16, l].choose(&mut g).unwrap();
        let seq = s6_forward_sequential(&x, &p).map_err(e2s)?;
        worst64 = worst64.max(s6_forward_scan(&x, &p, chunk).map_err(e2s)?.rel_diff(&seq));
        let (x32, p32): (Tensor<f32>, S6Params<f32>) = (x.cast(), p.cast());
        let seq32 = s6_forward_sequential(&x32, &p32).map_err(e2s)?;
        worst32 = worst32.max(s6_forward_scan(&x32, &p32, chunk).map_err(e2s)?.rel_diff(&seq32));
    }
    let detail = format!("{SCAN_CASES} cases, max rel diff f32 {worst32:.2e}, f64 {worst64:.2e}");
    ensure(worst32 <= SCAN_TOL_F32 && worst64 <= SCAN_TOL_F64, || detail.clone())?;
    Ok(detail)
}

fn linear_complexity() -> Outcome {
    let rows = bench_scan(&BenchConfig::default()).map_err(e2s)?;
    let k = fit_exponent(&rows, ScanVariant::Scan).ok_or("no scan rows")?;
    let ks = fit_exponent(&rows, ScanVariant::Sequential).ok_or("no sequential rows")?;
    let cfg = SsmConfig::default();
    let unit = VssBlock::<f32>::flops(96, &cfg, 1, 1);
    for (h, w) in [(1, 7), (8, 8), (64, 64), (3, 200), (128, 256)] {
        let f = VssBlock::<f32>::flops(96, &cfg, h, w);
        ensure(f == unit * (h * w) as u64, || format!("vss flops {f} at {h}x{w} not {} x {unit}", h * w))?;
        let s = s6_flops(h * w, 192, 16, 12);
        ensure(s == s6_flops(1, 192, 16, 12) * (h * w) as u64, || format!("s6 flops not linear at {h}x{w}"))?;
    }
    let detail = format!("fitted exponent scan {k:.3}, sequential {ks:.3}; flop counter linear");
    ensure((EXPONENT_RANGE.0..=EXPONENT_RANGE.1).contains(&k), || detail.clone())?;
    Ok(detail)
}

fn gradient_checks() -> Outcome {
    let mut g = rng(0xACC5);
    let mut worst_s6 = 0.0f64;
    for case in 0..GRAD_CASES {
        let (l, d, n, r) = (g.random_range(1..=8), g.random_range(1..=3), g.random_range(1..=3), g.random_range(1..=2));
        worst_s6 = worst_s6.max(s6_fd_error(l, d, n, r, 1000 + case as u64));
    }
    let mut worst_ce = 0.0f64;
    for _ in 0..GRAD_CASES {
        let (h, w, k) = (g.random_range(1..=4), g.random_range(1..=4), g.random_range(2..=6));
        let logits = rand_tensor(&[h, w, k], -3.0, 3.0, &mut g);
        let ids = (0..h * w)
            .map(|_| if g.random_bool(0.2) { rs3mamba::IGNORE_LABEL } else { g.random_range(0..k as u8) })
            .collect();
        let labels = LabelMap::new(h, w, ids).map_err(e2s)?;
        let (_, grad) = cross_entropy(&logits, &labels).map_err(e2s)?;
        let fd = central_diff(logits.data(), 1e-5, |v| {
            cross_entropy(&Tensor::new([h, w, k], v.to_vec()).unwrap(), &labels).unwrap().0
        });
        worst_ce = worst_ce.max(rel_err(grad.data(), &fd));
    }
    let detail = format!("{GRAD_CASES} cases each, max rel err s6 {worst_s6:.2e}, cross-entropy {worst_ce:.2e}");
    ensure(worst_s6 < GRAD_TOL && worst_ce < GRAD_TOL, || detail.clone())?;
    Ok(detail)
}

fn structural_identities() -> Outcome {
    let mut g = rng(0xACC6);
    for _ in 0..20 {
        let (h, w) = (g.random_range(1..=12), g.random_range(1..=12));
        let x = rand_tensor(&[h, w, 3], -1.0, 1.0, &mut g);
        for slot in 0..4 {
            let mut seqs = Direction::ALL.map(|_| Tensor::<f64>::zeros([h * w, 3]));
            seqs[slot] = scan_expand(&x, Direction::ALL[slot]).map_err(e2s)?;
            let back = scan_merge(&seqs, h, w).map_err(e2s)?;
            ensure(back == x, || format!("expand/merge not exact for direction {slot} at {h}x{w}"))?;
        }
    }

    let x = rand_tensor(&[6, 9, 4], -1.0, 1.0, &mut g);
    let mut identity = S6Params::<f64>::init(4, 3, 1, &mut g);
    identity.x_proj = Tensor::zeros([4, 1 + 6]);
    identity.d_skip = Tensor::ones([4]);
    let params: Vec<_> = (0..4).map(|_| identity.clone()).collect();
    let seam = ss2d_forward(&x, &params, ScanMode::Chunked(4)).map_err(e2s)?.max_abs_diff(&x.scale(4.0));
    let mixer = ss2d_with(&x, |_, s| Ok(s.clone())).map_err(e2s)?.max_abs_diff(&x.scale(4.0));
    ensure(seam <= SEAM_TOL && mixer <= SEAM_TOL, || format!("identity seam off by {seam:.2e} / {mixer:.2e}"))?;

    let attn = WindowAttention::<f64>::init(8, 4, 2, &mut g);
    let x = rand_tensor(&[11, 10, 8], -1.0, 1.0, &mut g);
    let base = attn.forward(&x).map_err(e2s)?;
    for _ in 0..10 {
        let (py, px) = (g.random_range(0..11), g.random_range(0..10));
        let mut data = x.data().to_vec();
        data[(py * 10 + px) * 8 + g.random_range(0..8)] += 1.0;
        let out = attn.forward(&Tensor::new([11, 10, 8], data).unwrap()).map_err(e2s)?;
        for y in 0..11 {
            for xx in 0..10 {
                if (y / 4, xx / 4) != (py / 4, px / 4) {
                    let same = (0..8).all(|c| out.get(&[y, xx, c]) == base.get(&[y, xx, c]));
                    ensure(same, || format!("perturbing ({py}, {px}) changed ({y}, {xx})"))?;
                }
            }
        }
    }

    let cfg = SsmConfig { n_state: 4, ..SsmConfig::default() };
    let mut block = VssBlock::<f64>::init(8, &cfg, &mut g);
    block.out_proj = Linear::zeros(16, 8, false);
    let x = rand_tensor(&[5, 7, 8], -2.0, 2.0, &mut g);
    ensure(block.forward(&x).map_err(e2s)? == x, || "zero out-projection block is not identity".into())?;
    Ok(format!("expand/merge exact, identity seam {seam:.1e}, window locality, vss identity"))
}

fn end_to_end() -> Outcome {
    let mut g = rng(0xACC7);
    let x: Tensor<f32> = rand_tensor(&[64, 64, 3], 0.0, 1.0, &mut g).cast();
    let mut shapes = Vec::new();
    for a in Ablation::ALL {
        let cfg = ModelConfig::default().with_ablation(a);
        let m = Rs3Mamba::<f32>::init(&cfg, 7).map_err(e2s)?;
        let y = m.forward(&x).map_err(e2s)?;
        ensure(y.shape() == [64, 64, cfg.n_classes], || format!("{a}: logits {:?}", y.shape()))?;
        if a == Ablation::DualCcm {
            let again = m.forward(&x).map_err(e2s)?;
            let same = y.data().iter().zip(again.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            ensure(same, || "repeated dual_ccm forward differs".into())?;
            let rebuilt = Rs3Mamba::<f32>::init(&cfg, 7).map_err(e2s)?.forward(&x).map_err(e2s)?;
            ensure(rebuilt.data() == y.data(), || "same seed gives different logits".into())?;
        }
        shapes.push(a.name());
    }
    Ok(format!("64x64x6 logits, bit-identical reruns; ran {}", shapes.join(", ")))
}

fn metrics() -> Outcome {
    let hand = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).map_err(e2s)?.report(&[0, 1]).map_err(e2s)?;
    hand.check_consistency().map_err(e2s)?;
    for s in hand.per_class.iter() {
        let s = s.ok_or("hand case class undefined")?;
        ensure((s.iou - 0.5).abs() < 1e-15 && (s.f1 - 2.0 / 3.0).abs() < 1e-15, || format!("hand case gave {s:?}"))?;
    }
    let mut g = rng(0xACC8);
    for _ in 0..200 {
        let k = g.random_range(1..8);
        let counts = (0..k * k).map(|_| g.random_range(0..100u64)).collect();
        let r = ConfusionMatrix::from_counts(k, counts).map_err(e2s)?.report(&(0..k).collect::<Vec<_>>()).map_err(e2s)?;
        r.check_consistency().map_err(e2s)?;
    }
    let gt = LabelMap::new(4, 4, (0..16).map(|i| (i % 5) as u8).collect()).map_err(e2s)?;
    let mut cm = ConfusionMatrix::new(5);
    cm.update(&gt, &gt).map_err(e2s)?;
    let perfect = cm.report(&[0, 1, 2, 3, 4]).map_err(e2s)?;
    let all_one = perfect.per_class.iter().flatten().all(|s| s.f1 == 1.0 && s.iou == 1.0);
    ensure(all_one && perfect.mf1 == Some(1.0) && perfect.miou == Some(1.0), || "perfect prediction below 1".into())?;
    Ok("F1/IoU identity on 201 reports, hand case 0.5 / 0.667, perfect 1.0".into())
}

fn expect_category(bytes: &[u8], cat: ErrorCategory, what: &str) -> Result<(), String> {
    match WeightArchive::decode(bytes) {
        Err(e) if e.category() == cat => Ok(()),
        Err(e) => Err(format!("{what}: wrong category {}", e.category())),
        Ok(_) => Err(format!("{what}: accepted")),
    }
}

fn pipeline() -> Outcome {
    let mut g = rng(0xACC9);
    for _ in 0..TILE_SIZES {
        let tile = 32 * g.random_range(1..=4);
        let (h, w) = (g.random_range(tile..tile + 300), g.random_range(tile..tile + 300));
        let stride = g.random_range(1..=tile);
        let plan = plan_tiles(h, w, tile, stride).map_err(e2s)?;
        let mut cover = vec![false; h * w];
        for &(y, x) in &plan.origins {
            ensure(y + tile <= h && x + tile <= w, || format!("tile at ({y}, {x}) leaves {h}x{w}"))?;
            for yy in y..y + tile {
                cover[yy * w + x..yy * w + x + tile].iter_mut().for_each(|c| *c = true);
            }
        }
        ensure(cover.iter().all(|&c| c), || format!("{h}x{w} tile {tile} stride {stride} leaves a gap"))?;
    }

    let plan = plan_tiles(100, 90, 64, 20).map_err(e2s)?;
    let mut tiles: Vec<_> = plan
        .origins
        .iter()
        .map(|&o| (o, rand_tensor(&[64, 64, 4], -1.0, 1.0, &mut g).cast::<f32>()))
        .collect();
    let reference = stitch_logits(100, 90, &tiles).map_err(e2s)?;
    for _ in 0..5 {
        tiles.shuffle(&mut g);
        ensure(stitch_logits(100, 90, &tiles).map_err(e2s)? == reference, || "stitch depends on tile order".into())?;
    }

    let cfg = ModelConfig::small();
    let model = Rs3Mamba::<f32>::init(&cfg, 3).map_err(e2s)?;
    let bytes = WeightArchive::from_module(&model).encode().map_err(e2s)?;
    let mut back = Rs3Mamba::<f32>::zeros(&cfg).map_err(e2s)?;
    WeightArchive::decode(&bytes).map_err(e2s)?.apply(&mut back, false).map_err(e2s)?;
    let bits = |m: &Rs3Mamba<f32>| {
        let mut v = Vec::new();
        m.visit("", &mut |n, t, _| v.push((n.to_string(), t.shape().to_vec(), t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())));
        v
    };
    ensure(bits(&model) == bits(&back), || "archive round trip not bit-identical".into())?;

    let mut bad_magic = bytes.clone();
    bad_magic[1] ^= 0xFF;
    expect_category(&bad_magic, ErrorCategory::Format, "bad magic")?;
    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    expect_category(&bad_version, ErrorCategory::Format, "bad version")?;
    expect_category(&bytes[..bytes.len() - 3], ErrorCategory::Format, "truncated")?;
    expect_category(&bytes[..10], ErrorCategory::Format, "truncated header")?;

    let mut archive = WeightArchive::decode(&bytes).map_err(e2s)?;
    let mut fresh = Rs3Mamba::<f32>::zeros(&cfg).map_err(e2s)?;
    let first = archive.entries[0].clone();
    archive.entries.push(first.clone());
    ensure(matches!(archive.apply(&mut fresh, false), Err(Error::DuplicateName(_))), || "duplicate accepted".into())?;
    archive.entries.pop();
    archive.entries[0].name.push_str("_renamed");
    ensure(matches!(archive.apply(&mut fresh, false), Err(Error::MissingName(_))), || "missing accepted".into())?;
    archive.entries[0] = first.clone();
    let mut stray = first.clone();
    stray.name = "stray.weight".into();
    archive.entries.push(stray);
    ensure(matches!(archive.apply(&mut fresh, false), Err(Error::UnknownName(_))), || "unknown accepted".into())?;
    archive.entries.pop();
    let mut reshaped = first;
    reshaped.shape = vec![reshaped.shape.iter().product()];
    archive.entries[0] = reshaped;
    match archive.apply(&mut fresh, false) {
        Err(e) if e.category() == ErrorCategory::Shape => {}
        other => return Err(format!("reshaped entry gave {other:?}")),
    }
    Ok(format!("{TILE_SIZES} plans cover, stitch order-free, {} byte archive exact, 8 corruptions rejected", bytes.len()))
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "parameter count", budget: Duration::from_secs(1), run: parameter_count },
        Criterion { id: 2, name: "flop count", budget: Duration::from_secs(1), run: flop_count },
        Criterion { id: 3, name: "scan correctness", budget: Duration::from_secs(60), run: scan_correctness },
        Criterion { id: 4, name: "linear complexity", budget: Duration::from_secs(300), run: linear_complexity },
        Criterion { id: 5, name: "gradient checks", budget: Duration::from_secs(60), run: gradient_checks },
        Criterion { id: 6, name: "structural identities", budget: Duration::from_secs(30), run: structural_identities },
        Criterion { id: 7, name: "end-to-end shape and determinism", budget: Duration::from_secs(60), run: end_to_end },
        Criterion { id: 8, name: "metrics", budget: Duration::from_secs(1), run: metrics },
        Criterion { id: 9, name: "pipeline", budget: Duration::from_secs(30), run: pipeline },
    ];
    let mut failed = 0;
    for c in &criteria {
        let t0 = Instant::now();
        let outcome = (c.run)();
        let dt = t0.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if dt <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget {:.1}s", c.budget.as_secs_f64())),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "[{}] criterion {}: {} ({:.2}s) {}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            dt.as_secs_f64(),
            detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
