//! Reference metrics (PSNR, SSIM), region-restricted consistency scores and
//! the evaluation report container.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ensure_same_dims, Image, Mask};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const EVAL_FORMAT_VERSION: &str = "funedit-eval-v1";

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Seam/edit margin used by both consistency regions.
const REGION_KERNEL: usize = 3;

/// `10·log10(1/MSE)` over `region` (every pixel when `None`), capped at 100 dB.
pub fn psnr(a: &Image, b: &Image, region: Option<&Mask>) -> Result<f64> {
    ensure_same_dims(a.dims(), b.dims(), "psnr inputs")?;
    if let Some(m) = region {
        ensure_same_dims(a.dims(), m.dims(), "psnr region")?;
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (i, (pa, pb)) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)).enumerate() {
        if region.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        for c in 0..3 {
            let d = pa[c] as f64 - pb[c] as f64;
            sum += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Err(Error::EmptyRegion("psnr region has no pixels".into()));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for dy in -r..=r {
        for dx in -r..=r {
            w.push((-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// SSIM map over every fully contained 7×7 window, indexed by window center.
fn ssim_map(a: &Image, b: &Image) -> Result<(Vec<f64>, usize, usize)> {
    ensure_same_dims(a.dims(), b.dims(), "ssim inputs")?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let (ga, gb) = (a.to_gray(), b.to_gray());
    let win = gaussian_window();
    let (mw, mh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut map = Vec::with_capacity(mw * mh);
    for y0 in 0..mh {
        for x0 in 0..mw {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = win[dy * SSIM_WINDOW + dx];
                    let i = (y0 + dy) * w + x0 + dx;
                    let (va, vb) = (ga[i] as f64, gb[i] as f64);
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            map.push(s);
        }
    }
    Ok((map, mw, mh))
}

/// Mean structural similarity of the luma channels, 7×7 Gaussian window
/// (σ = 1.5), unit dynamic range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (map, _, _) = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// SSIM averaged over windows whose center lies inside `region`.
pub fn ssim_masked(a: &Image, b: &Image, region: &Mask) -> Result<f64> {
    ensure_same_dims(a.dims(), region.dims(), "ssim region")?;
    let (map, mw, mh) = ssim_map(a, b)?;
    let r = SSIM_WINDOW / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..mh {
        for x in 0..mw {
            if region.get(x + r, y + r) {
                sum += map[y * mw + x];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion("no ssim window centered inside the region".into()));
    }
    Ok(sum / n as f64)
}

/// Pixels outside `dilate(∪ masks, 3)`.
pub fn background_region(width: usize, height: usize, edit_masks: &[Mask]) -> Result<Mask> {
    let union = Mask::union_all(width, height, edit_masks)?;
    Ok(union.dilate(REGION_KERNEL)?.not())
}

/// Similarity of the untouched background between `edited` and `source`.
pub fn background_consistency(edited: &Image, source: &Image, edit_masks: &[Mask]) -> Result<(f64, f64)> {
    let region = background_region(source.width(), source.height(), edit_masks)?;
    if region.is_empty() {
        return Err(Error::EmptyRegion("background region is empty".into()));
    }
    Ok((psnr(edited, source, Some(&region))?, ssim_masked(edited, source, &region)?))
}

/// Object interior: `erode(M_trg, 3)`, which drops the seam that edge
/// enhancement is allowed to modify.
pub fn object_interior(target_mask: &Mask) -> Result<Mask> {
    let interior = target_mask.erode(REGION_KERNEL)?;
    if interior.is_empty() {
        return Err(Error::EmptyRegion("object too thin to evaluate after erosion".into()));
    }
    Ok(interior)
}

pub fn object_consistency(edited: &Image, expected: &Image, target_mask: &Mask) -> Result<(f64, f64)> {
    let interior = object_interior(target_mask)?;
    let p = psnr(edited, expected, Some(&interior))?;
    // Thin interiors may have no window center far enough from the border.
    let s = match ssim_masked(edited, expected, &interior) {
        Ok(s) => s,
        Err(Error::EmptyRegion(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok((p, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    /// Population statistics over the finite values.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Aggregate> {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Aggregate { mean, std: var.sqrt(), count: v.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub kind: String,
    pub tasks: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    pub nfe: Option<usize>,
    pub latency_ms: Option<f64>,
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: String,
    pub config: serde_json::Value,
    pub records: Vec<EvalRecord>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub failures: usize,
}

impl EvalReport {
    pub fn new(config: serde_json::Value, records: Vec<EvalRecord>) -> Self {
        let aggregates = aggregate_records(&records);
        let failures = records.iter().filter(|r| r.failed()).count();
        Self { format_version: EVAL_FORMAT_VERSION.to_string(), config, records, aggregates, failures }
    }

    pub fn failure_rate(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.failures as f64 / self.records.len() as f64
        }
    }

    /// Aggregate restricted to records of one kind (e.g. `"atomic:OR"`).
    pub fn aggregate_for(&self, kind: &str, metric: &str) -> Option<Aggregate> {
        Aggregate::of(
            self.records.iter().filter(|r| r.kind == kind && !r.failed()).filter_map(|r| r.metrics.get(metric).copied()),
        )
    }
}

/// Per-metric mean/std over successful records; `nfe` and `latency_ms` are
/// aggregated alongside the named metrics.
pub fn aggregate_records(records: &[EvalRecord]) -> BTreeMap<String, Aggregate> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.failed()) {
        for (k, v) in &r.metrics {
            columns.entry(k.clone()).or_default().push(*v);
        }
        if let Some(n) = r.nfe {
            columns.entry("nfe".into()).or_default().push(n as f64);
        }
        if let Some(l) = r.latency_ms {
            columns.entry("latency_ms".into()).or_default().push(l);
        }
    }
    columns.into_iter().filter_map(|(k, v)| Aggregate::of(v).map(|a| (k, a))).collect()
}
