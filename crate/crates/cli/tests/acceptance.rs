//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Positional arguments select criteria by id.
//!
//! A6 to A8 need the trained desk checkpoint at `artifacts/desk.ckpt`
//! (override with `FUNEDIT_CKPT`).

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use common::{ok, s, tree, write_tiny_config};
use funedit_cli::commands::held_out_samples;
use funedit_core::composer::{compose_move, run_composite, run_sequential, scaled_dilation_kernel, CompositeEdit, EdgeMode, EditOp};
use funedit_core::diffusion::{
    ddim_step, draw_batch, load_checkpoint, make_schedule, q_sample, training_loss, SamplerConfig, ScheduleSpec, TrainConfig,
};
use funedit_core::eval::{evaluate_dataset, move_cases, EvalOptions};
use funedit_core::metrics::{Aggregate, EvalReport};
use funedit_core::model::{apply_ca_mask, DenoiseInput, Denoiser, NoisePredictor, UNetConfig};
use funedit_core::synthgen::{AtomicSample, SampleMeta};
use funedit_core::taskvocab::TaskId;
use funedit_core::{EditModel, Image, Mask};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn rect(side: usize, x0: usize, y0: usize, w: usize, h: usize) -> Mask {
    Mask::from_fn(side, side, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)
}

fn a1_ca_mask_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dev = Device::Cpu;
    for case in 0..1000 {
        let b = rng.random_range(1..=2);
        let heads = rng.random_range(1..=4);
        let q = rng.random_range(1..=8) * rng.random_range(1..=8);
        let k = rng.random_range(1..=4);
        let gb = if rng.random_bool(0.5) { 1 } else { b };
        let scores: Vec<f32> = (0..b * heads * q * k).map(|_| rng.sample::<f32, _>(StandardNormal) * 4.0).collect();
        let grid: Vec<u8> = (0..gb * q * k).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let st = Tensor::from_vec(scores.clone(), (b, heads, q, k), &dev).map_err(err)?;
        let gt = Tensor::from_vec(grid.clone(), (gb, 1, q, k), &dev).map_err(err)?;
        let out: Vec<f32> = apply_ca_mask(&st, &gt).map_err(err)?.flatten_all().map_err(err)?.to_vec1().map_err(err)?;
        for bi in 0..b {
            for h in 0..heads {
                let base = (bi * heads + h) * q * k;
                let min = scores[base..base + q * k].iter().copied().fold(f32::INFINITY, f32::min);
                for j in 0..q * k {
                    let inside = grid[(if gb == 1 { 0 } else { bi }) * q * k + j] == 1;
                    let want = if inside { scores[base + j] } else { min };
                    check(out[base + j].to_bits() == want.to_bits(), || {
                        format!("case {case} b{bi} h{h} entry {j}: {} vs {want}", out[base + j])
                    })?;
                }
            }
        }
    }
    Ok("1000 tensors, bit-exact".into())
}

fn a2_permutation_invariance() -> Outcome {
    let model = EditModel::init(&UNetConfig::default(), &TaskId::ALL, ScheduleSpec::default(), 2, DType::F32, &Device::Cpu).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let source = Image::from_fn(64, 64, |_, _| [rng.random(), rng.random(), rng.random()]);
    let ops = vec![
        EditOp { task: TaskId::Removal, mask: rect(64, 4, 6, 20, 18) },
        EditOp { task: TaskId::EdgeEnhance, mask: rect(64, 30, 30, 16, 24) },
        EditOp { task: TaskId::Harmonize, mask: rect(64, 10, 40, 30, 12) },
    ];
    let sampler = SamplerConfig { steps: 4, seed: 3, ..SamplerConfig::default() };
    let run = |ops: Vec<EditOp>| -> Result<Vec<f32>, String> {
        let edit = CompositeEdit { input_image: source.clone(), ops };
        let (out, _) = run_composite(&model.denoiser, &model.conditioner(), &edit, &sampler, &model.schedule).map_err(err)?;
        Ok(out.data().to_vec())
    };
    let base = run(ops.clone())?;
    let mut worst = 0f32;
    for i in 0..20 {
        let mut p = ops.clone();
        p.shuffle(&mut rng);
        let out = run(p)?;
        let diff = out.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        check(diff < 1e-6, || format!("permutation {i}: max-abs {diff:e}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("20 permutations, worst max-abs {worst:.1e}"))
}

fn a3_gradient_check() -> Outcome {
    let cfg = UNetConfig {
        image_size: 8,
        base_channels: 8,
        channel_multipliers: vec![1],
        res_blocks_per_level: 1,
        attention_resolutions: vec![8, 4],
        heads: 1,
        token_dim: 8,
        time_embed_dim: 8,
        norm_groups: 2,
    };
    let model = EditModel::init(&cfg, &TaskId::ALL, ScheduleSpec::default(), 3, DType::F64, &Device::Cpu).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<AtomicSample> = (0..6)
        .map(|i| {
            let mut img = || Image::from_fn(8, 8, |_, _| [rng.random(), rng.random(), rng.random()]);
            let (source, target) = (img(), img());
            AtomicSample { source, task: TaskId::ALL[i % 3], mask: rect(8, i % 3, 1, 4, 5), target, meta: SampleMeta { seed: i as u64, scene: None, affine: None } }
        })
        .collect();
    let config = TrainConfig { batch_size: 6, p_drop_text: 0.0, p_drop_image: 0.0, ..TrainConfig::default() };
    let cond = model.conditioner();
    // First batch that exercises every task embedding.
    let items = (0..100)
        .map(|step| draw_batch(&data, &cond, &config, &model.schedule, step).unwrap())
        .find(|items| TaskId::ALL.iter().all(|t| items.iter().any(|it| it.sample.task == *t)))
        .ok_or("no batch covers all tasks")?;
    let loss = || training_loss(&model.denoiser, &model.conditioner(), &items, &model.schedule).unwrap().to_scalar::<f64>().unwrap();
    let grads = training_loss(&model.denoiser, &cond, &items, &model.schedule).map_err(err)?.backward().map_err(err)?;

    let h = 1e-4;
    let probe = |var: &candle_core::Var, idx: usize, analytic: f64| -> Result<Option<f64>, String> {
        let orig = to_vec(var.as_tensor());
        let at = |dx: f64| {
            let mut v = orig.clone();
            v[idx] += dx;
            var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
            loss()
        };
        let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        var.set(&Tensor::from_vec(orig, var.shape(), &Device::Cpu).unwrap()).map_err(err)?;
        let scale = analytic.abs() + numeric.abs();
        if scale < 1e-9 {
            return Ok(None);
        }
        let rel = (analytic - numeric).abs() / scale;
        check(rel < 1e-4, || format!("analytic {analytic} vs numeric {numeric}"))?;
        Ok(Some(rel))
    };
    let (mut checked, mut worst) = (0usize, 0f64);
    for (name, var) in model.trainable_vars() {
        let g = to_vec(grads.get(var.as_tensor()).ok_or_else(|| format!("no gradient for {name}"))?);
        let picks: Vec<usize> = if name.starts_with("unet.") {
            (0..3).map(|_| rng.random_range(0..g.len())).collect()
        } else {
            // Every row of the embedding table, two entries each.
            let d = model.table.dim();
            (0..g.len() / d).flat_map(|r| [r * d, r * d + d - 1]).collect()
        };
        for idx in picks {
            if let Some(rel) = probe(&var, idx, g[idx]).map_err(|e| format!("{name}[{idx}]: {e}"))? {
                worst = worst.max(rel);
                checked += 1;
            } else if !name.starts_with("unet.") {
                return Err(format!("{name}[{idx}] has no measurable gradient"));
            }
        }
    }
    check(checked > 40, || format!("only {checked} entries measurable"))?;
    Ok(format!("{checked} entries incl. every v_i, worst relative error {worst:.1e}"))
}

/// Wraps a predictor and counts its evaluations.
struct Counting<'a> {
    inner: &'a Denoiser,
    calls: std::cell::Cell<usize>,
}

impl NoisePredictor for Counting<'_> {
    fn predict(&self, input: &DenoiseInput<'_>) -> funedit_core::Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(input)
    }
}

fn a4_nfe_accounting() -> Outcome {
    let model = EditModel::init(&UNetConfig::default(), &TaskId::ALL, ScheduleSpec::default(), 4, DType::F32, &Device::Cpu).map_err(err)?;
    let case = &move_cases(1, 4, 64)[0];
    let edit = compose_move(&case.request(), scaled_dilation_kernel(64), EdgeMode::Band).map_err(err)?;
    check(edit.ops.len() == 2, || format!("{} ops", edit.ops.len()))?;
    let sampler = SamplerConfig { steps: 4, ..SamplerConfig::default() };
    let counter = Counting { inner: &model.denoiser, calls: Default::default() };
    let (_, nfe) = run_composite(&counter, &model.conditioner(), &edit, &sampler, &model.schedule).map_err(err)?;
    check(nfe == 4 && counter.calls.get() == 4, || format!("composite nfe {nfe}, calls {}", counter.calls.get()))?;
    counter.calls.set(0);
    let (_, seq) = run_sequential(&counter, &model.conditioner(), &edit, &sampler, &model.schedule).map_err(err)?;
    check(seq == 8 && counter.calls.get() == 8, || format!("sequential nfe {seq}, calls {}", counter.calls.get()))?;
    Ok("composite 4, sequential 8".into())
}

fn a5_schedule_algebra() -> Outcome {
    for t_max in 2..=1000 {
        let s = make_schedule(t_max, "linear").map_err(err)?;
        for t in 1..=t_max {
            check(s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0, || format!("T={t_max} t={t}"))?;
        }
    }
    let s = make_schedule(1000, "linear").map_err(err)?;
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut normals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let x0v: Vec<f64> = normals(192).iter().map(|v| (v * 0.4).clamp(-1.0, 1.0)).collect();
    let x0 = Tensor::from_vec(x0v, (1, 3, 8, 8), &dev).map_err(err)?;
    let eps = Tensor::from_vec(normals(192), (1, 3, 8, 8), &dev).map_err(err)?;
    let mut worst = 0f64;
    for t in 1..=1000 {
        let z = q_sample(&x0, &[t], &eps, &s).map_err(err)?;
        let back = ddim_step(&z, &eps, t, 0, &s).map_err(err)?;
        let e = to_vec(&(back - &x0).map_err(err)?).iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        check(e < 1e-5, || format!("DDIM inversion at t={t}: {e:e}"))?;
        worst = worst.max(e);
    }
    let n = 10_000;
    for t in [1usize, 10, 100, 500, 999, 1000] {
        let zeros = Tensor::zeros((n, 1, 1, 1), DType::F64, &dev).map_err(err)?;
        let eps = Tensor::from_vec(normals(n), (n, 1, 1, 1), &dev).map_err(err)?;
        let z = to_vec(&q_sample(&zeros, &vec![t; n], &eps, &s).map_err(err)?);
        let m2 = z.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let want = 1.0 - s.alpha_bar(t);
        let sigma = (2.0 / n as f64).sqrt() * want;
        check((m2 - want).abs() < 3.0 * sigma, || format!("q_sample variance at t={t}: {m2} vs {want}"))?;
    }
    Ok(format!("monotone for T in 2..=1000, DDIM inversion worst {worst:.1e}, variance within 3σ"))
}

fn desk_checkpoint() -> PathBuf {
    std::env::var_os("FUNEDIT_CKPT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../artifacts/desk.ckpt"))
}

/// Held-out evaluation of the desk checkpoint, shared by A6 to A8.
fn desk_report() -> Result<EvalReport, String> {
    let path = desk_checkpoint();
    let model = load_checkpoint(&path, DType::F32, &Device::Cpu).map_err(|e| format!("{}: {e}", path.display()))?.model;
    let atomic = held_out_samples(model.vocab.tasks(), 100, 1_000_001);
    let moves = move_cases(50, 2_000_003, model.image_size());
    let report = evaluate_dataset(&model, &atomic, &moves, &EvalOptions::default(), serde_json::Value::Null).map_err(err)?;
    if let Ok(out) = std::env::var("FUNEDIT_ACCEPTANCE_REPORT") {
        fs::write(out, serde_json::to_vec_pretty(&report).map_err(err)?).map_err(err)?;
    }
    Ok(report)
}

fn mean(report: &EvalReport, kind: &str, metric: &str) -> Result<Aggregate, String> {
    report.aggregate_for(kind, metric).ok_or_else(|| format!("no {metric} for {kind}"))
}

fn a6_atomic_learning(report: &EvalReport) -> Outcome {
    let mut parts = Vec::new();
    let mut failed = false;
    for (task, min_gain) in [("OR", 6.0), ("EE", 3.0), ("HR", 6.0)] {
        let g = mean(report, &format!("atomic:{task}"), "psnr_gain")?;
        failed |= g.mean < min_gain;
        parts.push(format!("{task} gain {:.2} dB (need {min_gain})", g.mean));
    }
    if failed {
        Err(parts.join(", "))
    } else {
        Ok(parts.join(", "))
    }
}

fn a7_localization(report: &EvalReport) -> Outcome {
    let v: Vec<f64> = ["OR", "EE", "HR"]
        .iter()
        .filter_map(|t| report.aggregate_for(&format!("atomic:{t}"), "psnr_bg").map(|a| a.mean))
        .collect();
    check(v.len() == 3, || "missing psnr_bg".into())?;
    let all = Aggregate::of(
        report.records.iter().filter(|r| r.kind.starts_with("atomic:") && !r.failed()).filter_map(|r| r.metrics.get("psnr_bg").copied()),
    )
    .ok_or("no atomic records")?;
    let msg = format!("background PSNR {:.2} dB (need 35; OR {:.2}, EE {:.2}, HR {:.2})", all.mean, v[0], v[1], v[2]);
    if all.mean >= 35.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn a8_composition(report: &EvalReport) -> Outcome {
    let bg = mean(report, "move", "psnr_bg")?;
    let obj = mean(report, "move", "psnr_obj")?;
    let removed = mean(report, "move", "removed")?;
    let msg = format!(
        "bg {:.2} dB (need 30), object {:.2} dB (need 28), vacated closer to background in {:.0}% (need 90) over {} cases",
        bg.mean,
        obj.mean,
        removed.mean * 100.0,
        removed.count
    );
    if bg.mean >= 30.0 && obj.mean >= 28.0 && removed.mean >= 0.9 && removed.count == 50 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn a9_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    let cfg = write_tiny_config(d);
    let case = &move_cases(1, 9, 64)[0];
    let (img, mask) = (d.join("img.png"), d.join("mask.png"));
    fs::write(&img, case.source.to_png_bytes().map_err(err)?).map_err(err)?;
    fs::write(&mask, case.src_mask.to_png_bytes().map_err(err)?).map_err(err)?;
    let (dx, dy) = (case.dx.to_string(), case.dy.to_string());
    for run in ["a", "b"] {
        let r = d.join(run);
        let data = r.join("data");
        ok(&["gen-data", "--task", "all", "--n", "6", "--seed", "7", "--out", s(&data)]);
        let ckpt = r.join("model.ckpt");
        ok(&["train", "--data", s(&data), "--config", s(&cfg), "--steps", "6", "--seed", "1", "--out", s(&ckpt), "--log", s(&d.join(format!("{run}.log")))]);
        ok(&[
            "edit", "--ckpt", s(&ckpt), "--image", s(&img), "--op", "move", "--src-mask", s(&mask), "--dx", &dx, "--dy", &dy, "--seed", "3",
            "--out", s(&r.join("edit.png")),
        ]);
    }
    let (a, b) = (tree(&d.join("a")), tree(&d.join("b")));
    check(a.len() == 6 * 3 + 2 + 3, || format!("{} files", a.len()))?;
    for (path, bytes) in &a {
        if path.as_os_str() == "edit.json" {
            continue; // sidecar carries wall-clock latency
        }
        check(b.get(path) == Some(bytes), || format!("{} differs", path.display()))?;
    }
    Ok(format!("{} files byte-identical across two runs", a.len() - 1))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| f == id);
    let mut report: Option<Result<EvalReport, String>> = None;
    let mut failed = Vec::new();
    let criteria: [(&str, &str); 9] = [
        ("A1", "cross-attention mask exactness"),
        ("A2", "permutation invariance"),
        ("A3", "gradient check"),
        ("A4", "NFE accounting"),
        ("A5", "schedule and sampler algebra"),
        ("A6", "atomic-task learning"),
        ("A7", "localization"),
        ("A8", "composition end-to-end"),
        ("A9", "reproducibility"),
    ];
    for (id, title) in criteria {
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| -> Outcome {
            let shared = |f: fn(&EvalReport) -> Outcome, report: &mut Option<Result<EvalReport, String>>| {
                let r = report.get_or_insert_with(desk_report);
                match r {
                    Ok(r) => f(r),
                    Err(e) => Err(format!("evaluation unavailable: {e}")),
                }
            };
            match id {
                "A1" => a1_ca_mask_exactness(),
                "A2" => a2_permutation_invariance(),
                "A3" => a3_gradient_check(),
                "A4" => a4_nfe_accounting(),
                "A5" => a5_schedule_algebra(),
                "A6" => shared(a6_atomic_learning, &mut report),
                "A7" => shared(a7_localization, &mut report),
                "A8" => shared(a8_composition, &mut report),
                _ => a9_reproducibility(),
            }
        }))
        .unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(m) => println!("{id} PASS {title}: {m} [{secs:.1}s]"),
            Err(m) => {
                println!("{id} FAIL {title}: {m} [{secs:.1}s]");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failed ({})", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
    println!("acceptance: all passed");
}
