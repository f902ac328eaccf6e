use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rs3mamba::bench::{self, BenchConfig, ScanVariant};
use rs3mamba::data::{self, Palette};
use rs3mamba::metrics::ConfusionMatrix;
use rs3mamba::model::{self, count_flops, count_params, format_config, Ablation, ModelConfig, Rs3Mamba};
use rs3mamba::selfcheck::run_selfcheck;
use rs3mamba::{LabelMap, Result};

use crate::report::{digest, RunReport, EXIT_CHECK};
use crate::{BenchArgs, CountArgs, EvalArgs, InferArgs, InitArgs, ModelArgs, SelfcheckArgs};

/// Reference totals the default configurations are compared against, with
/// relative tolerances.
const REF_PARAMS_FULL: (f64, f64) = (43.32e6, 0.10);
const REF_PARAMS_BASELINE: (f64, f64) = (11.69e6, 0.10);
const REF_FLOPS_FULL: (f64, f64) = (31.65e9, 0.20);

fn load_config(args: &ModelArgs, report: &mut RunReport) -> Result<ModelConfig> {
    let cfg = match &args.config {
        Some(p) => model::read_config(p)?,
        None => ModelConfig::default(),
    };
    report.config_digest = Some(digest(&format_config(&cfg)));
    Ok(cfg)
}

fn resolve_palette(spec: &str) -> Result<(Palette, Vec<usize>)> {
    match Palette::builtin(spec) {
        Some(p) => Ok(p),
        None => {
            let p = Palette::read(spec)?;
            let all = (0..p.len()).collect();
            Ok((p, all))
        }
    }
}

fn read_labels(path: &Path, palette: &Palette) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P6") {
        let img = data::image::parse_netpbm(&bytes)?;
        palette.labels_from_rgb(img.width, img.height, &img.pixels)
    } else {
        data::read_pgm(path)
    }
}

pub fn infer(a: &InferArgs) -> Result<RunReport> {
    let mut r = RunReport::new("infer");
    let cfg = load_config(&a.model, &mut r)?;
    let (palette, _) = resolve_palette(&a.palette)?;
    let model: Rs3Mamba<f32> = r.phase("load", || match &a.weights {
        Some(w) => model::load_weights(&cfg, w, false),
        None => Rs3Mamba::init(&cfg, a.seed),
    })?;
    let image = data::load_image(&a.image)?;
    let logits = r.phase("forward", || data::infer_tiled(&model, &image, a.tile, a.stride))?;
    let pred = LabelMap::argmax(&logits)?;
    data::write_pgm(&a.out_pred, &pred)?;
    r.outputs.push(a.out_pred.clone());
    if let Some(path) = &a.out_color {
        data::write_ppm(path, pred.width(), pred.height(), &palette.colors_from_labels(&pred))?;
        r.outputs.push(path.clone());
    }
    Ok(r)
}

pub fn eval(a: &EvalArgs) -> Result<RunReport> {
    let mut r = RunReport::new("eval");
    let (palette, default_eval) = resolve_palette(&a.palette)?;
    let evaluated = a.classes_eval.clone().unwrap_or(default_eval);
    let pred = data::read_pgm(&a.pred)?;
    let gt = read_labels(&a.gt, &palette)?;
    let mut cm = ConfusionMatrix::new(palette.len());
    r.phase("score", || cm.update(&pred, &gt))?;
    let report = cm.report(&evaluated)?;
    let names = palette.names();
    r.stdout = report.table(&names);
    if let Some(path) = &a.csv {
        fs::write(path, report.csv(&names))?;
        r.outputs.push(path.clone());
    }
    if let Err(e) = report.check_consistency() {
        r.failure = Some((EXIT_CHECK, e.to_string()));
    }
    Ok(r)
}

fn compare(out: &mut String, what: &str, value: f64, (reference, tol): (f64, f64)) -> bool {
    let rel = (value - reference) / reference;
    let ok = rel.abs() <= tol;
    let _ = writeln!(
        out,
        "{what}: {value:.4e} vs reference {reference:.4e} ({:+.2}%, tolerance ±{:.0}%) {}",
        100.0 * rel,
        100.0 * tol,
        if ok { "ok" } else { "OUT OF RANGE" }
    );
    ok
}

pub fn count(a: &CountArgs) -> Result<RunReport> {
    let mut r = RunReport::new("count");
    let cfg = load_config(&a.model, &mut r)?;
    let params = r.phase("params", || count_params(&cfg))?;
    let mut out = format!("ablation {}\nparameters\n{params}", cfg.ablation);
    let mut ok = true;
    let is_default = cfg == ModelConfig::default().with_ablation(cfg.ablation);
    let total = params.total() as f64;
    match cfg.ablation {
        Ablation::DualCcm if is_default => ok &= compare(&mut out, "parameters", total, REF_PARAMS_FULL),
        Ablation::MainOnly if is_default => ok &= compare(&mut out, "parameters", total, REF_PARAMS_BASELINE),
        _ => {}
    }
    if let Some(f) = &a.flops {
        let (h, w, b) = (f[0], f[1], f[2]);
        let flops = r.phase("flops", || count_flops(&cfg, h, w, b))?;
        let _ = write!(out, "flops ({b} x {h}x{w})\n{flops}");
        if is_default && cfg.ablation == Ablation::DualCcm && (h, w, b) == (256, 256, 2) {
            ok &= compare(&mut out, "flops", flops.total() as f64, REF_FLOPS_FULL);
        }
    }
    r.stdout = out;
    if !ok {
        r.failure = Some((EXIT_CHECK, "count outside reference tolerance".into()));
    }
    Ok(r)
}

pub fn bench_scan(a: &BenchArgs) -> Result<RunReport> {
    let mut r = RunReport::new("bench-scan");
    let cfg = BenchConfig {
        lengths: a.lengths.clone(),
        chunk: a.chunk,
        d_inner: a.d_inner,
        n_state: a.n_state,
        reps: a.reps,
        seed: a.seed,
    };
    let rows = r.phase("bench", || bench::bench_scan(&cfg))?;
    let csv = bench::to_csv(&rows);
    match &a.out {
        Some(p) => {
            fs::write(p, &csv)?;
            r.outputs.push(p.clone());
        }
        None => r.stdout = csv,
    }
    for v in [ScanVariant::Sequential, ScanVariant::Scan] {
        if let Some(k) = bench::fit_exponent(&rows, v) {
            eprintln!("fitted exponent {}: {k:.3}", v.name());
        }
    }
    Ok(r)
}

pub fn selfcheck(a: &SelfcheckArgs) -> Result<RunReport> {
    let mut r = RunReport::new("selfcheck");
    let results = r.phase("checks", || run_selfcheck(a.seed));
    let mut out = String::new();
    for c in &results {
        let _ = writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = results.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        r.failure = Some((EXIT_CHECK, format!("{failed} of {} checks failed", results.len())));
    }
    r.stdout = out;
    Ok(r)
}

pub fn init(a: &InitArgs) -> Result<RunReport> {
    let mut r = RunReport::new("init");
    let cfg = load_config(&a.model, &mut r)?;
    let m: Rs3Mamba<f32> = r.phase("init", || Rs3Mamba::init(&cfg, a.seed))?;
    model::save_weights(&m, &a.out)?;
    r.outputs.push(a.out.clone());
    Ok(r)
}
