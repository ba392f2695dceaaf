use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use tristream::block::Variant;
use tristream::cache::StaticCache;
use tristream::cost::{
    cumulative_overhead_svg, sweep, toy_grid, write_csv, write_json, CostDims, CostReport, Meter, Pathway,
    SWEEP_VARIANTS,
};
use tristream::denoise::{
    evaluate_consistency, instrumented_report, mask_consistency, read_dataset, sample as run_sampler,
    toy_cases, toy_dataset, CondInput, DropoutPolicy, ModelConfig, ModelParams, NullStyle, SamplerConfig,
    ToyExample, TrainConfig,
};
use tristream::linalg::{Matrix, Real};
use tristream::tokens::{read_token_ids, LabelGrid};

use crate::config::RunConfig;
use crate::CliError;

/// A seeded quadrant layout for a `side x side` grid.
fn random_labels(side: usize, seed: u64) -> LabelGrid {
    toy_cases(1, side, seed).remove(0).mask
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

fn format(cfg: &RunConfig) -> Result<Format, CliError> {
    match cfg.raw("format").unwrap_or("csv") {
        "csv" => Ok(Format::Csv),
        "json" => Ok(Format::Json),
        other => Err(CliError::Usage(format!("unknown format {other:?} (expected csv or json)"))),
    }
}

fn grid_side(n: usize) -> Result<usize, CliError> {
    let side = (n as f64).sqrt().round() as usize;
    if side == 0 || side * side != n {
        return Err(CliError::Usage(format!("--n {n} is not a positive square")));
    }
    Ok(side)
}

/// Applies the dimension flags to `base`.
fn model_config(cfg: &RunConfig, base: ModelConfig) -> Result<ModelConfig, CliError> {
    let n = cfg.get("n", base.n_tokens())?;
    let side = grid_side(n)?;
    let mc = ModelConfig {
        variant: cfg.get("variant", base.variant)?,
        d: cfg.get("d", base.d)?,
        depth: cfg.get("depth", base.depth)?,
        heads: cfg.get("heads", base.heads)?,
        max_text_len: cfg.get("l", base.max_text_len)?.max(1),
        grid: (side, side),
        ..base
    };
    mc.validate()?;
    Ok(mc)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("JSON values serialize") + "\n"
}

fn random_text(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    // ids cycle through the vocabulary from a seed-dependent offset
    (0..len).map(|i| ((seed as usize).wrapping_add(7 * i) % vocab) as u32).collect()
}

struct CacheCheck {
    diff: f64,
    hits: u64,
    misses: u64,
    corrupted: bool,
    output: Matrix<f64>,
}

fn cache_check<T: Real>(
    params: &ModelParams<f64>,
    raw: &CondInput,
    null: NullStyle,
    sampler: &SamplerConfig,
    corrupt: bool,
) -> Result<CacheCheck, CliError> {
    let p = params.cast::<T>();
    let cond = p.embed_conditions(raw, null)?;
    let cache = StaticCache::new();
    let mut on = run_sampler(&p, &cond, sampler, &cache, &Meter::off())?;
    let mut corrupted = false;
    if corrupt {
        corrupted = cache.corrupt(0);
        on = run_sampler(&p, &cond, sampler, &cache, &Meter::off())?;
    }
    let off_cfg = SamplerConfig {
        use_cache: false,
        ..sampler.clone()
    };
    let off = run_sampler(&p, &cond, &off_cfg, &StaticCache::new(), &Meter::off())?;
    let stats = cache.stats();
    Ok(CacheCheck {
        diff: on.max_abs_diff(&off).to_f64_lossy(),
        hits: stats.hits,
        misses: stats.misses,
        corrupted,
        output: on.cast(),
    })
}

pub fn verify_cache(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.get("seed", 42u64)?;
    let steps = cfg.get("t-steps", 28usize)?;
    let corrupt = cfg.flag("corrupt")?;
    let empty = cfg.flag("empty-mask")?;
    let precisions: &[&str] = match cfg.raw("precision").unwrap_or("both") {
        "both" => &["f64", "f32"],
        "f64" => &["f64"],
        "f32" => &["f32"],
        other => return Err(CliError::Usage(format!("unknown precision {other:?}"))),
    };
    let params = match cfg.raw("checkpoint") {
        Some(dir) => {
            let p = ModelParams::<f64>::load(Path::new(dir))?;
            let v = cfg.get("variant", p.cfg.variant)?;
            p.with_variant(v)
        }
        None => {
            let mut p = ModelParams::init(model_config(cfg, ModelConfig::default())?, seed)?;
            p.perturb(0.05, seed.wrapping_add(1));
            p
        }
    };
    let variant = params.cfg.variant;
    let l = cfg.get("l", params.cfg.max_text_len)?;
    let raw = CondInput {
        mask: (!empty).then(|| random_labels(params.cfg.grid.0, seed)),
        text: Some(random_text(l, params.cfg.vocab, seed)),
    };
    let null = if empty {
        NullStyle::Empty
    } else {
        params.null_style(&DropoutPolicy::default())
    };
    let sampler = SamplerConfig {
        steps,
        seed,
        variant,
        use_cache: true,
    };
    let tolerance = 1e-5;
    let mut pass = true;
    let mut results = Vec::new();
    let mut out64 = None;
    for &prec in precisions {
        let r = match prec {
            "f64" => cache_check::<f64>(&params, &raw, null, &sampler, corrupt)?,
            _ => cache_check::<f32>(&params, &raw, null, &sampler, corrupt)?,
        };
        pass &= r.diff <= tolerance;
        results.push(json!({
            "precision": prec,
            "max_abs_diff": r.diff,
            "cache_hits": r.hits,
            "static_computations": r.misses,
            "corrupted": r.corrupted,
        }));
        if prec == "f64" {
            out64 = Some(r.output);
        }
    }
    let mut report = json!({
        "command": "verify-cache",
        "variant": variant.code(),
        "n": params.cfg.n_tokens(),
        "l": l,
        "d": params.cfg.d,
        "depth": params.cfg.depth,
        "t_steps": steps,
        "seed": seed,
        "tolerance": tolerance,
        "results": results,
    });
    if empty {
        let baseline = params.with_variant(Variant::Vanilla);
        let cond = baseline.embed_conditions(&raw, null)?;
        let a = run_sampler(&baseline, &cond, &SamplerConfig { variant: Variant::Vanilla, ..sampler.clone() }, &StaticCache::new(), &Meter::off())?;
        let got = match out64 {
            Some(o) => o,
            None => {
                let cond = params.embed_conditions(&raw, null)?;
                run_sampler(&params, &cond, &sampler, &StaticCache::new(), &Meter::off())?
            }
        };
        let equivalent = got.bitwise_eq(&a);
        pass &= equivalent;
        report["degenerate"] = json!({
            "note": "degenerate: variant(a) equivalence",
            "bitwise_equal_to_a": equivalent,
            "max_abs_diff_vs_a": got.max_abs_diff(&a),
        });
    }
    report["pass"] = json!(pass);
    let body = pretty(&report);
    write(&out_dir(cfg)?.join("verify-cache.json"), &body)?;
    print!("{body}");
    if pass {
        Ok(())
    } else {
        Err(CliError::Verification("cache-on and cache-off outputs differ".into()))
    }
}

fn cost_grid(cfg: &RunConfig, base: CostDims) -> Result<Vec<CostDims>, CliError> {
    let ns = cfg.list("n", base.n)?;
    let ls = cfg.list("l", base.l)?;
    let ts = cfg.list("t-steps", base.t)?;
    let ds = cfg.list("d", base.d)?;
    let depths = cfg.list("depth", base.depth)?;
    let heads = cfg.get("heads", base.heads)?;
    let mut grid = Vec::new();
    for &n in &ns {
        for &l in &ls {
            for &t in &ts {
                for &d in &ds {
                    for &depth in &depths {
                        grid.push(CostDims { n, l, t, d, heads, depth });
                    }
                }
            }
        }
    }
    Ok(grid)
}

pub fn cost(cfg: &RunConfig) -> Result<(), CliError> {
    let fmt = format(cfg)?;
    let grid = cost_grid(cfg, CostDims::FLUX_LIKE)?;
    let variants: Vec<Variant> = match cfg.opt::<Variant>("variant")? {
        Some(v) => vec![v],
        None => SWEEP_VARIANTS.to_vec(),
    };
    let reports = sweep(&grid, &variants)?;
    let dir = out_dir(cfg)?;
    let mut buf = Vec::new();
    let name = match fmt {
        Format::Csv => {
            write_csv(&mut buf, &reports)?;
            "cost.csv"
        }
        Format::Json => {
            write_json(&mut buf, &reports)?;
            "cost.json"
        }
    };
    let body = String::from_utf8(buf).expect("reports are UTF-8");
    write(&dir.join(name), &body)?;
    print!("{body}");
    if cfg.flag("plot")? {
        for (i, dims) in grid.iter().enumerate() {
            let group: Vec<CostReport> = reports.iter().filter(|r| r.dims == *dims).cloned().collect();
            let file = if grid.len() == 1 {
                "cost.svg".to_string()
            } else {
                format!("cost-{i}.svg")
            };
            write(&dir.join(file), &cumulative_overhead_svg(&group))?;
        }
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.get("seed", 42u64)?;
    let mc = model_config(cfg, ModelConfig::toy_train())?;
    let side = mc.grid.0;
    let synthetic = cfg.raw("data").is_none();
    let data = match cfg.raw("data") {
        Some(dir) => {
            let data = read_dataset(Path::new(dir))?;
            if let Some(bad) = data.iter().find(|e| e.mask.height() != side || e.mask.width() != side) {
                return Err(CliError::Usage(format!(
                    "dataset grid {}x{} does not match --n {}",
                    bad.mask.height(),
                    bad.mask.width(),
                    side * side
                )));
            }
            data
        }
        None => toy_dataset(256, side, seed),
    };
    let null = match cfg.raw("null").unwrap_or("zero") {
        "zero" => NullStyle::ZeroToken,
        "empty" => NullStyle::Empty,
        other => return Err(CliError::Usage(format!("unknown null style {other:?} (expected zero or empty)"))),
    };
    let clip = match cfg.raw("clip") {
        Some("none") => None,
        _ => Some(cfg.get("clip", 1.0f64)?),
    };
    let defaults = TrainConfig::default();
    let dir = out_dir(cfg)?;
    let tc = TrainConfig {
        steps: cfg.get("steps", defaults.steps)?,
        batch: cfg.get("batch", defaults.batch)?,
        lr: cfg.get("lr", defaults.lr)?,
        seed,
        policy: DropoutPolicy {
            null,
            ..DropoutPolicy::new(cfg.get("dropout", defaults.policy.p)?)?
        },
        checkpoint_dir: Some(dir.join("checkpoints")),
        checkpoint_every: cfg.get("checkpoint-every", defaults.checkpoint_every)?,
        clip_norm: clip,
        ..defaults
    };
    let mut params = ModelParams::init(mc, seed)?;
    let start = Instant::now();
    let report = tristream::denoise::train_toy(&mut params, &data, &tc)?;
    let secs = start.elapsed().as_secs_f64();
    params.save(&dir.join("checkpoint"))?;
    let mut jsonl = Vec::new();
    report.write_jsonl(&mut jsonl)?;
    write(&dir.join("train.jsonl"), &String::from_utf8(jsonl).expect("UTF-8"))?;
    let cases = if synthetic {
        toy_cases(16, side, seed)
    } else {
        data.iter().take(16).cloned().collect()
    };
    let consistency = evaluate_consistency(&params, &cases, 28, seed)?;
    let summary = json!({
        "command": "train",
        "variant": params.cfg.variant.code(),
        "steps": tc.steps,
        "dropout": tc.policy.p,
        "initial_smoothed_loss": report.initial_smoothed,
        "final_smoothed_loss": report.final_smoothed,
        "mask_consistency": consistency,
        "checkpoint": dir.join("checkpoint"),
        "seconds": secs,
    });
    let body = pretty(&summary);
    write(&dir.join("train_summary.json"), &body)?;
    print!("{body}");
    Ok(())
}

fn render_sample(x: &Matrix<f64>, side: usize, fmt: Format) -> String {
    match fmt {
        Format::Csv => {
            let mut s = String::from("row,col");
            for c in 0..x.cols() {
                s.push_str(&format!(",ch{c}"));
            }
            s.push('\n');
            for (i, row) in x.iter_rows().enumerate() {
                s.push_str(&format!("{},{}", i / side, i % side));
                for v in row {
                    s.push_str(&format!(",{v}"));
                }
                s.push('\n');
            }
            s
        }
        Format::Json => {
            let rows: Vec<Value> = x.iter_rows().map(|r| json!(r)).collect();
            pretty(&json!({ "grid": [side, side], "channels": x.cols(), "tokens": rows }))
        }
    }
}

pub fn sample(cfg: &RunConfig) -> Result<(), CliError> {
    let dir_in = cfg
        .raw("checkpoint")
        .ok_or_else(|| CliError::Usage("sample needs --checkpoint".into()))?;
    let loaded = ModelParams::<f64>::load(Path::new(dir_in))?;
    let variant = cfg.get("variant", loaded.cfg.variant)?;
    let params = loaded.with_variant(variant);
    let seed = cfg.get("seed", 42u64)?;
    let steps = cfg.get("t-steps", 28usize)?;
    let fmt = format(cfg)?;
    let side = params.cfg.grid.0;
    let (mut raw, source) = match (cfg.raw("mask"), cfg.raw("text")) {
        (None, None) => (toy_cases(1, side, seed).remove(0).cond(), "synthetic"),
        (m, t) => (
            CondInput {
                mask: m.map(|p| LabelGrid::read_csv(Path::new(p))).transpose()?,
                text: t.map(|p| read_token_ids(Path::new(p))).transpose()?,
            },
            "files",
        ),
    };
    if cfg.flag("no-mask")? {
        raw.mask = None;
    }
    if cfg.flag("no-text")? {
        raw.text = None;
    }
    let null = params.null_style(&DropoutPolicy::default());
    let sampler = SamplerConfig {
        steps,
        seed,
        variant,
        use_cache: true,
    };
    let x: Matrix<f64> = match cfg.raw("precision").unwrap_or("f64") {
        "f64" => {
            let cond = params.embed_conditions(&raw, null)?;
            run_sampler(&params, &cond, &sampler, &StaticCache::new(), &Meter::off())?
        }
        "f32" => {
            let p = params.cast::<f32>();
            let cond = p.embed_conditions(&raw, null)?;
            run_sampler(&p, &cond, &sampler, &StaticCache::new(), &Meter::off())?.cast()
        }
        other => return Err(CliError::Usage(format!("unknown precision {other:?}"))),
    };
    let dir = out_dir(cfg)?;
    let name = match fmt {
        Format::Csv => "sample.csv",
        Format::Json => "sample.json",
    };
    write(&dir.join(name), &render_sample(&x, side, fmt))?;
    let consistency = match (&raw.mask, &raw.text) {
        (Some(mask), Some(text)) => Some(mask_consistency(
            &x,
            &ToyExample {
                mask: mask.clone(),
                text: text.clone(),
            },
        )),
        _ => None,
    };
    let summary = json!({
        "command": "sample",
        "variant": variant.code(),
        "seed": seed,
        "t_steps": steps,
        "conditions": source,
        "mask": raw.mask.is_some(),
        "text": raw.text.clone(),
        "mask_consistency": consistency,
        "output": dir.join(name),
    });
    let body = pretty(&summary);
    write(&dir.join("sample_summary.json"), &body)?;
    print!("{body}");
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let fmt = format(cfg)?;
    let seed = cfg.get("seed", 42u64)?;
    let custom = ["n", "l", "t-steps", "d", "depth", "heads"].iter().any(|k| cfg.raw(k).is_some());
    let grid = if custom {
        cost_grid(cfg, CostDims::TOY)?
    } else {
        toy_grid()
    };
    let variants: Vec<Variant> = match cfg.opt::<Variant>("variant")? {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    let mut pass = true;
    for dims in &grid {
        grid_side(dims.n as usize)?;
        for &v in &variants {
            let start = Instant::now();
            let (report, on) = instrumented_report(v, *dims, true, seed)?;
            let secs = start.elapsed().as_secs_f64();
            let (_, off) = instrumented_report(v, *dims, false, seed)?;
            let rel = report.measured_vs_analytic_rel_err.unwrap_or(f64::INFINITY);
            let statik = on.path_total(Pathway::Static);
            let saved = off.block_total() - on.block_total();
            let identity = saved == dims.t.saturating_sub(1) * statik;
            pass &= rel <= 0.01 && identity;
            rows.push(json!({
                "variant": v.code(),
                "N": dims.n,
                "L": dims.l,
                "T": dims.t,
                "d": dims.d,
                "depth": dims.depth,
                "heads": dims.heads,
                "measured_block_macs": on.block_total(),
                "analytic_block_macs": report.total_macs.to_string(),
                "rel_err": rel,
                "static_macs": statik,
                "cache_savings_macs": saved,
                "savings_identity": identity,
                "seconds": secs,
            }));
        }
    }
    let body = match fmt {
        Format::Json => pretty(&Value::Array(rows)),
        Format::Csv => {
            let cols = [
                "variant",
                "N",
                "L",
                "T",
                "d",
                "depth",
                "heads",
                "measured_block_macs",
                "analytic_block_macs",
                "rel_err",
                "static_macs",
                "cache_savings_macs",
                "savings_identity",
                "seconds",
            ];
            let mut s = cols.join(",") + "\n";
            for r in &rows {
                let cells: Vec<String> = cols
                    .iter()
                    .map(|c| match &r[*c] {
                        Value::String(v) => v.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                s.push_str(&cells.join(","));
                s.push('\n');
            }
            s
        }
    };
    let name = if fmt == Format::Json { "bench.json" } else { "bench.csv" };
    write(&out_dir(cfg)?.join(name), &body)?;
    print!("{body}");
    if pass {
        Ok(())
    } else {
        Err(CliError::Verification("instrumented counts disagree with the analytic model".into()))
    }
}
