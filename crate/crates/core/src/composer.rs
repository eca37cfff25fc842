//! Composite edits: pixel-space preprocessing plus several task tokens
//! activated in a single sampling pass.

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, Conditioner, Guidance, NoiseSchedule, SamplerConfig, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::model::NoisePredictor;
use crate::taskvocab::{make_inference_prompt, TaskId};

/// Dilation kernel used for removal masks at the 512-pixel reference size.
pub const REFERENCE_DILATION_KERNEL: usize = 20;
pub const REFERENCE_SIDE: usize = 512;

pub fn dilate_mask(mask: &Mask, kernel: usize) -> Result<Mask> {
    mask.dilate(kernel)
}

pub fn erode_mask(mask: &Mask, kernel: usize) -> Result<Mask> {
    mask.erode(kernel)
}

/// Boundary seam `dilate(m, 3) ∧ ¬erode(m, 3)`.
pub fn edge_band(mask: &Mask) -> Mask {
    crate::synthgen::edge_band(mask)
}

/// Movement dilation kernel for an image side: the reference kernel read as
/// a radius-per-side ratio, `2·⌊20·side/512⌋ + 1` (5 at 64 pixels).
pub fn scaled_dilation_kernel(side: usize) -> usize {
    2 * (REFERENCE_DILATION_KERNEL * side / REFERENCE_SIDE) + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOp {
    pub task: TaskId,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeEdit {
    pub input_image: Image,
    pub ops: Vec<EditOp>,
}

impl CompositeEdit {
    pub fn validate(&self, max_ops: usize) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::Compose("a composite edit needs at least one op".into()));
        }
        if self.ops.len() > max_ops {
            return Err(Error::TooManyTasks { requested: self.ops.len(), capacity: max_ops });
        }
        for (i, op) in self.ops.iter().enumerate() {
            if self.ops[..i].iter().any(|o| o.task == op.task) {
                return Err(Error::DuplicateTask(op.task));
            }
            if op.mask.dims() != self.input_image.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "{} mask is {}x{}, image is {}x{}",
                    op.task,
                    op.mask.width(),
                    op.mask.height(),
                    self.input_image.width(),
                    self.input_image.height()
                )));
            }
            if op.mask.is_empty() {
                return Err(Error::Compose(format!("{} mask is empty", op.task)));
            }
        }
        Ok(())
    }
}

/// One op of the JSON form; the mask is a base64 PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditOpWire {
    pub task: TaskId,
    pub mask: String,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

/// JSON form of a composite edit shared by the CLI and the HTTP service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeEditWire {
    /// Base64 PNG.
    pub image: String,
    pub ops: Vec<EditOpWire>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub guidance: Guidance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompositeEditWire {
    pub fn encode(edit: &CompositeEdit, sampler: &SamplerConfig) -> Result<Self> {
        Ok(Self {
            image: edit.input_image.to_base64_png()?,
            ops: edit
                .ops
                .iter()
                .map(|op| Ok(EditOpWire { task: op.task, mask: op.mask.to_base64_png()? }))
                .collect::<Result<_>>()?,
            steps: sampler.steps,
            guidance: sampler.guidance,
            seed: Some(sampler.seed),
        })
    }

    /// Decodes the payloads; errors name the offending field.
    pub fn decode(&self) -> Result<CompositeEdit> {
        let field = |what: String, e: Error| Error::Malformed { what, reason: e.to_string() };
        let image = Image::from_base64_png(&self.image).map_err(|e| field("image".into(), e))?;
        let mut ops = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let name = format!("ops[{i}].mask");
            let mask = Mask::from_base64_png(&op.mask).map_err(|e| field(name.clone(), e))?;
            if mask.dims() != image.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {}x{}, image is {}x{}",
                    mask.width(),
                    mask.height(),
                    image.width(),
                    image.height()
                )));
            }
            ops.push(EditOp { task: op.task, mask });
        }
        Ok(CompositeEdit { input_image: image, ops })
    }

    /// Sampler settings carried by the request; `seed` falls back to
    /// `default_seed`.
    pub fn sampler(&self, default_seed: u64) -> SamplerConfig {
        SamplerConfig { steps: self.steps, guidance: self.guidance, seed: self.seed.unwrap_or(default_seed) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoveRequest {
    pub image: Image,
    pub src_mask: Mask,
    pub dx: i64,
    pub dy: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PasteRequest {
    pub target: Image,
    pub reference: Image,
    pub ref_mask: Mask,
    /// Top-left corner of the (scaled) reference mask's bounding box.
    pub offset: (i64, i64),
    pub scale: f64,
}

/// Copies the masked pixels to `(x+dx, y+dy)`. Destinations outside the image
/// are dropped; the source region is left as is.
pub fn translate_object(image: &Image, mask: &Mask, dx: i64, dy: i64) -> Result<(Image, Mask)> {
    if image.dims() != mask.dims() {
        return Err(Error::ShapeMismatch("mask and image sizes differ".into()));
    }
    if mask.is_empty() {
        return Err(Error::Compose("source mask is empty".into()));
    }
    let (w, h) = image.dims();
    let mut out = image.clone();
    let mut m_trg = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let (tx, ty) = (x as i64 + dx, y as i64 + dy);
            if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                out.set_pixel(tx as usize, ty as usize, image.pixel(x, y));
                m_trg.set(tx as usize, ty as usize, true);
            }
        }
    }
    if m_trg.is_empty() {
        return Err(Error::Compose(format!("translation by ({dx}, {dy}) moves the object fully out of bounds")));
    }
    Ok((out, m_trg))
}

/// Nearest-neighbour resampling of the reference object's bounding box,
/// hard-composited onto the target.
pub fn paste_object(target: &Image, reference: &Image, ref_mask: &Mask, offset: (i64, i64), scale: f64) -> Result<(Image, Mask)> {
    if reference.dims() != ref_mask.dims() {
        return Err(Error::ShapeMismatch("reference mask and image sizes differ".into()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Compose(format!("paste scale must be positive, got {scale}")));
    }
    let (x0, y0, x1, y1) = ref_mask.bbox().ok_or_else(|| Error::Compose("reference mask is empty".into()))?;
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let (sw, sh) = ((bw as f64 * scale).round() as usize, (bh as f64 * scale).round() as usize);
    let (w, h) = target.dims();
    let (ox, oy) = offset;
    if sw == 0 || sh == 0 {
        return Err(Error::Compose("reference mask is empty after scaling".into()));
    }
    if ox < 0 || oy < 0 || ox as usize + sw > w || oy as usize + sh > h {
        return Err(Error::Compose(format!("scaled object {sw}x{sh} at ({ox}, {oy}) does not fit in {w}x{h}")));
    }
    let mut out = target.clone();
    let mut m_trg = Mask::new(w, h);
    for v in 0..sh {
        for u in 0..sw {
            let sx = x0 + (((u as f64 + 0.5) / scale).floor() as usize).min(bw - 1);
            let sy = y0 + (((v as f64 + 0.5) / scale).floor() as usize).min(bh - 1);
            if ref_mask.get(sx, sy) {
                let (tx, ty) = (ox as usize + u, oy as usize + v);
                out.set_pixel(tx, ty, reference.pixel(sx, sy));
                m_trg.set(tx, ty, true);
            }
        }
    }
    if m_trg.is_empty() {
        return Err(Error::Compose("reference mask is empty after scaling".into()));
    }
    Ok((out, m_trg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    /// EE on the seam around the new object.
    #[default]
    Band,
    /// EE on the whole destination mask (ablation).
    Full,
}

fn edge_mask(m_trg: &Mask, mode: EdgeMode) -> Mask {
    match mode {
        EdgeMode::Band => edge_band(m_trg),
        EdgeMode::Full => m_trg.clone(),
    }
}

/// Object movement: removal on the dilated source region (minus the new
/// object) and edge enhancement around the destination.
pub fn compose_move(req: &MoveRequest, dilation_kernel: usize, edge: EdgeMode) -> Result<CompositeEdit> {
    let (moved, m_trg) = translate_object(&req.image, &req.src_mask, req.dx, req.dy)?;
    let or_mask = req.src_mask.dilate(dilation_kernel)?.and_not(&m_trg)?;
    let mut ops = Vec::with_capacity(2);
    if !or_mask.is_empty() {
        ops.push(EditOp { task: TaskId::Removal, mask: or_mask });
    }
    ops.push(EditOp { task: TaskId::EdgeEnhance, mask: edge_mask(&m_trg, edge) });
    Ok(CompositeEdit { input_image: moved, ops })
}

/// Object pasting: harmonization of the pasted object plus edge enhancement.
pub fn compose_paste(req: &PasteRequest, edge: EdgeMode) -> Result<CompositeEdit> {
    let (composite, m_trg) = paste_object(&req.target, &req.reference, &req.ref_mask, req.offset, req.scale)?;
    let ops = vec![
        EditOp { task: TaskId::Harmonize, mask: m_trg.clone() },
        EditOp { task: TaskId::EdgeEnhance, mask: edge_mask(&m_trg, edge) },
    ];
    Ok(CompositeEdit { input_image: composite, ops })
}

/// All ops in one sampling pass.
pub fn run_composite<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: &Conditioner<'_>,
    edit: &CompositeEdit,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<(Image, usize)> {
    edit.validate(cond.vocab.k())?;
    let requests: Vec<(TaskId, usize)> = edit.ops.iter().enumerate().map(|(i, op)| (op.task, i)).collect();
    let prompt = make_inference_prompt(cond.vocab, &requests)?;
    let masks: Vec<Mask> = edit.ops.iter().map(|op| op.mask.clone()).collect();
    sample(model, cond, &edit.input_image, &prompt, &masks, config, schedule)
}

/// Baseline: one pass per op, each on the previous output.
pub fn run_sequential<P: NoisePredictor + ?Sized>(
    model: &P,
    cond: &Conditioner<'_>,
    edit: &CompositeEdit,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<(Image, usize)> {
    edit.validate(cond.vocab.k())?;
    let mut image = edit.input_image.clone();
    let mut nfe = 0;
    for op in &edit.ops {
        let prompt = make_inference_prompt(cond.vocab, &[(op.task, 0)])?;
        let (out, n) = sample(model, cond, &image, &prompt, std::slice::from_ref(&op.mask), config, schedule)?;
        image = out;
        nfe += n;
    }
    Ok((image, nfe))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(size: usize, cx: f64, cy: f64, r: f64) -> Mask {
        Mask::from_fn(size, size, |x, y| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
    }

    #[test]
    fn wire_round_trip_and_field_errors() {
        let img = Image::from_fn(8, 8, |x, y| [x as f32 / 7.0, y as f32 / 7.0, 0.5]).quantized();
        let edit = CompositeEdit {
            input_image: img,
            ops: vec![EditOp { task: TaskId::Harmonize, mask: disc(8, 3.0, 3.0, 2.0) }],
        };
        let cfg = SamplerConfig { steps: 6, ..SamplerConfig::default() };
        let wire = CompositeEditWire::encode(&edit, &cfg).unwrap();
        let json = serde_json::to_string(&wire).unwrap();
        let back: CompositeEditWire = serde_json::from_str(&json).unwrap();
        assert_eq!(back.decode().unwrap(), edit);
        assert_eq!(back.sampler(9), cfg);

        let minimal: CompositeEditWire =
            serde_json::from_str(&format!(r#"{{"image":"{}","ops":[]}}"#, wire.image)).unwrap();
        assert_eq!(minimal.steps, DEFAULT_STEPS);
        assert_eq!(minimal.guidance, Guidance::Off);

        let mut bad = wire.clone();
        bad.ops[0].mask = Mask::new(4, 4).to_base64_png().unwrap();
        assert!(bad.decode().unwrap_err().to_string().contains("ops[0].mask"));
        bad.ops[0].mask = "!!".into();
        assert!(bad.decode().unwrap_err().to_string().contains("ops[0].mask"));
    }

    #[test]
    fn kernel_scaling() {
        assert_eq!(scaled_dilation_kernel(64), 5);
        assert_eq!(scaled_dilation_kernel(512), 41);
        assert_eq!(scaled_dilation_kernel(8), 1);
        assert!(dilate_mask(&Mask::new(4, 4), 4).is_err());
        assert!(erode_mask(&Mask::new(4, 4), 2).is_err());
    }

    #[test]
    fn translate_identity_and_copy() {
        let img = Image::from_fn(64, 64, |x, y| [x as f32 / 63.0, y as f32 / 63.0, 0.2]);
        let m = disc(64, 16.0, 16.0, 5.0);
        let (same, mt) = translate_object(&img, &m, 0, 0).unwrap();
        assert_eq!(same, img);
        assert_eq!(mt, m);
        let (moved, mt) = translate_object(&img, &m, 20, 0).unwrap();
        assert_eq!(mt.count(), m.count());
        for y in 0..64 {
            for x in 0..44 {
                if m.get(x, y) {
                    assert!(mt.get(x + 20, y));
                    assert_eq!(moved.pixel(x + 20, y), img.pixel(x, y));
                }
            }
        }
        assert!(translate_object(&img, &m, 100, 0).is_err());
    }

    #[test]
    fn half_out_of_bounds() {
        // Disc of radius 5 (81 px) at column 32 moved by 32: the centre column
        // and everything right of it leaves the image, 35 px remain.
        let img = Image::filled(64, 64, [0.5; 3]);
        let m = disc(64, 32.0, 32.0, 5.0);
        let (_, mt) = translate_object(&img, &m, 32, 0).unwrap();
        let kept = m.data().iter().enumerate().filter(|(i, &v)| v && (i % 64) + 32 < 64).count();
        assert_eq!(mt.count(), kept);
        assert_eq!(kept, 35);
        assert_eq!(m.count(), 81);
    }

    #[test]
    fn move_ops() {
        let img = Image::filled(64, 64, [0.5; 3]);
        let m = disc(64, 16.0, 32.0, 5.0);
        let far = compose_move(&MoveRequest { image: img.clone(), src_mask: m.clone(), dx: 30, dy: 0 }, 5, EdgeMode::Band).unwrap();
        assert_eq!(far.ops[0].task, TaskId::Removal);
        assert_eq!(far.ops[0].mask, m.dilate(5).unwrap());
        assert_eq!(far.ops[1].task, TaskId::EdgeEnhance);
        let near = compose_move(&MoveRequest { image: img, src_mask: m.clone(), dx: 4, dy: 0 }, 5, EdgeMode::Band).unwrap();
        let (_, mt) = translate_object(&near.input_image, &m, 4, 0).unwrap();
        assert!(near.ops[0].mask.is_disjoint(&mt));
    }

    #[test]
    fn paste_contracts() {
        let target = Image::filled(64, 64, [0.2, 0.3, 0.4]);
        let reference = Image::filled(64, 64, [0.9, 0.1, 0.1]);
        let ref_mask = Mask::from_fn(64, 64, |x, y| (10..20).contains(&x) && (10..20).contains(&y));
        let (comp, mt) = paste_object(&target, &reference, &ref_mask, (27, 27), 1.0).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if !mt.get(x, y) {
                    assert_eq!(comp.pixel(x, y), target.pixel(x, y));
                }
            }
        }
        let (_, half) = paste_object(&target, &reference, &ref_mask, (0, 0), 0.5).unwrap();
        let (x0, y0, x1, y1) = half.bbox().unwrap();
        assert_eq!((x1 - x0 + 1, y1 - y0 + 1), (5, 5));
        let (same, _) = paste_object(&target, &target, &ref_mask, (5, 5), 1.0).unwrap();
        assert_eq!(same, target);
        assert!(paste_object(&target, &reference, &Mask::new(64, 64), (0, 0), 1.0).is_err());
        assert!(paste_object(&target, &reference, &ref_mask, (60, 60), 1.0).is_err());

        let edit = compose_paste(&PasteRequest { target, reference, ref_mask, offset: (27, 27), scale: 1.0 }, EdgeMode::Band).unwrap();
        assert_eq!(edit.ops[0].task, TaskId::Harmonize);
        assert_eq!(edit.ops[0].mask, mt);
        assert!(edit.ops[1].mask.is_subset_of(&mt.dilate(3).unwrap()));
    }

    #[test]
    fn validation() {
        let img = Image::filled(8, 8, [0.5; 3]);
        let m = Mask::full(8, 8);
        let dup = CompositeEdit {
            input_image: img.clone(),
            ops: vec![EditOp { task: TaskId::Removal, mask: m.clone() }, EditOp { task: TaskId::Removal, mask: m.clone() }],
        };
        assert!(matches!(dup.validate(3), Err(Error::DuplicateTask(TaskId::Removal))));
        let many = CompositeEdit {
            input_image: img.clone(),
            ops: TaskId::ALL.iter().map(|&task| EditOp { task, mask: m.clone() }).collect(),
        };
        assert!(matches!(many.validate(2), Err(Error::TooManyTasks { .. })));
        let empty = CompositeEdit { input_image: img, ops: vec![EditOp { task: TaskId::Removal, mask: Mask::new(8, 8) }] };
        assert!(empty.validate(3).is_err());
    }
}
