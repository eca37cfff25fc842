//! Procedural scenes and the three atomic-edit oracles.
//!
//! A scene is a smooth sinusoidal background with one flat-colored,
//! anti-aliased shape. The shape color is the complement of the background
//! at the shape center, so the "harmonious" appearance of an object is a
//! function of its surroundings and can be recovered from context.

use std::f32::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::taskvocab::TaskId;

pub const DEFAULT_SIZE: usize = 64;
pub const DATA_FORMAT_VERSION: &str = "funedit-data-v1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Shape clearance from the image border, in pixels.
const SHAPE_MARGIN: f32 = 4.0;
/// Removal and harmonization masks extend this many pixels past the shape.
pub const TASK_MASK_GROWTH: usize = 3;
pub const EDGE_BLUR_SIGMA: f32 = 1.5;
const MIN_COLOR_CONTRAST: f32 = 0.2;
const PERTURBATION_FLOOR: f32 = 0.1;
const MIN_OBJECT_SHIFT: f32 = 0.05;
const SUPERSAMPLE: usize = 4;

const STREAM_BACKGROUND: u64 = 0;
const STREAM_SHAPE: u64 = 1;
const STREAM_PERTURB: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// Direction of the gradient, radians.
    pub direction: f32,
    /// Cycles per image side.
    pub frequency: f32,
    pub phase: f32,
    pub amplitude: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundParams {
    pub base: [f32; 3],
    pub waves: Vec<Wave>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    pub center: (f32, f32),
    /// Circle radius, rectangle half-width, triangle circumradius.
    pub size: f32,
    /// Rectangle height/width ratio; unused for other kinds.
    pub aspect: f32,
    pub rotation: f32,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub background: BackgroundParams,
    pub shape: ShapeParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub scene: Option<SceneSpec>,
    /// Per-channel `(gain, bias)` of the harmonization perturbation.
    pub affine: Option<[(f32, f32); 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomicSample {
    pub source: Image,
    pub task: TaskId,
    pub mask: Mask,
    pub target: Image,
    pub meta: SampleMeta,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn background_params(seed: u64, width: usize, height: usize) -> BackgroundParams {
    let _ = (width, height);
    let mut rng = stream_rng(seed, STREAM_BACKGROUND);
    let base = [0, 1, 2].map(|_| rng.random_range(0.25f32..0.75));
    let waves = (0..4)
        .map(|_| Wave {
            direction: rng.random_range(0.0..2.0 * PI),
            frequency: rng.random_range(0.3f32..1.2),
            phase: rng.random_range(0.0..2.0 * PI),
            amplitude: [0, 1, 2].map(|_| rng.random_range(-0.12f32..0.12)),
        })
        .collect();
    BackgroundParams { base, waves }
}

fn render_background(params: &BackgroundParams, width: usize, height: usize) -> Image {
    let side = width.max(height) as f32;
    Image::from_fn(width, height, |x, y| {
        let mut rgb = params.base;
        for w in &params.waves {
            let s = (x as f32 * w.direction.cos() + y as f32 * w.direction.sin()) / side;
            let v = (2.0 * PI * w.frequency * s + w.phase).sin();
            for (c, a) in rgb.iter_mut().zip(w.amplitude) {
                *c += a * v;
            }
        }
        rgb.map(|c| c.clamp(0.1, 0.9))
    })
}

/// Smooth random field: four low-frequency sinusoidal gradients over a
/// constant base, clamped to `[0.1, 0.9]` per channel.
pub fn gen_background(seed: u64, width: usize, height: usize) -> Result<Image> {
    if width < 16 || height < 16 {
        return Err(Error::InvalidConfig(format!("background needs at least 16x16, got {width}x{height}")));
    }
    Ok(render_background(&background_params(seed, width, height), width, height))
}

impl ShapeParams {
    fn bounding_radius(&self) -> f32 {
        match self.kind {
            ShapeKind::Circle | ShapeKind::Triangle => self.size,
            ShapeKind::Rectangle => self.size * (1.0 + self.aspect * self.aspect).sqrt(),
        }
    }

    fn contains(&self, px: f32, py: f32) -> bool {
        let (dx, dy) = (px - self.center.0, py - self.center.1);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.size * self.size,
            ShapeKind::Rectangle => {
                let (s, c) = self.rotation.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                u.abs() <= self.size && v.abs() <= self.size * self.aspect
            }
            ShapeKind::Triangle => {
                let v: Vec<(f32, f32)> = (0..3)
                    .map(|i| {
                        let a = self.rotation + 2.0 * PI * i as f32 / 3.0;
                        (self.size * a.cos(), self.size * a.sin())
                    })
                    .collect();
                let cross = |a: (f32, f32), b: (f32, f32)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let d0 = cross(v[0], v[1]);
                let d1 = cross(v[1], v[2]);
                let d2 = cross(v[2], v[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }

    /// Fractional pixel coverage from a 4×4 supersampling grid.
    pub fn coverage(&self, width: usize, height: usize) -> Vec<f32> {
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
        let mut out = vec![0.0; width * height];
        for y in 0..height {
            for x in 0..width {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                        let py = y as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                        if self.contains(px, py) {
                            hits += 1;
                        }
                    }
                }
                out[y * width + x] = hits as f32 / n;
            }
        }
        out
    }
}

impl SceneSpec {
    pub fn generate(seed: u64, width: usize, height: usize) -> Result<SceneSpec> {
        if width < 16 || height < 16 {
            return Err(Error::InvalidConfig(format!("scene needs at least 16x16, got {width}x{height}")));
        }
        let background = background_params(seed, width, height);
        let bg = render_background(&background, width, height);
        let mut rng = stream_rng(seed, STREAM_SHAPE);
        let scale = width.min(height) as f32 / DEFAULT_SIZE as f32;

        let mut fallback = None;
        for _ in 0..64 {
            let kind = match rng.random_range(0..3) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Triangle,
            };
            let mut shape = ShapeParams {
                kind,
                center: (0.0, 0.0),
                size: rng.random_range(7.0f32..12.0) * scale,
                aspect: rng.random_range(0.65f32..1.0),
                rotation: rng.random_range(0.0..2.0 * PI),
                color: [0.0; 3],
            };
            let br = shape.bounding_radius() + SHAPE_MARGIN;
            shape.center = (
                rng.random_range(br..(width as f32 - br)),
                rng.random_range(br..(height as f32 - br)),
            );
            let local = bg.pixel(shape.center.0 as usize, shape.center.1 as usize);
            shape.color = local.map(|c| 1.0 - c);
            let contrast = (shape.color.iter().zip(local).map(|(c, b)| (c - b).powi(2)).sum::<f32>() / 3.0).sqrt();
            if contrast >= MIN_COLOR_CONTRAST {
                return Ok(SceneSpec { seed, width, height, background, shape });
            }
            if fallback.is_none() {
                shape.color = local.map(|b| if b < 0.5 { b + 0.4 } else { b - 0.4 });
                fallback = Some(shape);
            }
        }
        let shape = fallback.expect("at least one attempt");
        Ok(SceneSpec { seed, width, height, background, shape })
    }

    pub fn background(&self) -> Image {
        render_background(&self.background, self.width, self.height)
    }

    pub fn coverage(&self) -> Vec<f32> {
        self.shape.coverage(self.width, self.height)
    }

    /// Pixels touched by the shape at all.
    pub fn shape_mask(&self) -> Mask {
        let cov = self.coverage();
        Mask::from_raw(self.width, self.height, cov.iter().map(|&a| a > 0.0).collect()).expect("sized")
    }

    pub fn composite(&self) -> Image {
        composite_flat(&self.background(), &self.coverage(), self.shape.color)
    }
}

fn composite_flat(bg: &Image, coverage: &[f32], color: [f32; 3]) -> Image {
    let mut out = bg.clone();
    for y in 0..bg.height() {
        for x in 0..bg.width() {
            let a = coverage[y * bg.width() + x];
            if a > 0.0 {
                let b = bg.pixel(x, y);
                out.set_pixel(x, y, [0, 1, 2].map(|c| a * color[c] + (1.0 - a) * b[c]));
            }
        }
    }
    out
}

/// `dilate(m, 3) AND NOT erode(m, 3)`: a two-pixel seam straddling the boundary.
pub fn edge_band(mask: &Mask) -> Mask {
    mask.dilate_radius(1).and_not(&mask.erode_radius(1)).expect("same dims")
}

/// Separable Gaussian blur, edge-clamped, kernel radius `ceil(3σ)`.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (w, h) = img.dims();
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(w, h, |x, y| {
            let mut acc = [0.0f32; 3];
            for (j, kv) in k.iter().enumerate() {
                let d = j as isize - r;
                let (sx, sy) = if horizontal {
                    ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                } else {
                    (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                };
                let p = src.pixel(sx, sy);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            acc
        })
    };
    pass(&pass(img, true), false)
}

fn scene(seed: u64) -> SceneSpec {
    SceneSpec::generate(seed, DEFAULT_SIZE, DEFAULT_SIZE).expect("default size is valid")
}

pub fn make_removal_sample(seed: u64) -> AtomicSample {
    removal_sample_from(scene(seed))
}

pub fn removal_sample_from(scene: SceneSpec) -> AtomicSample {
    let target = scene.background();
    let source = scene.composite();
    let mask = scene.shape_mask().dilate_radius(TASK_MASK_GROWTH);
    AtomicSample {
        source,
        task: TaskId::Removal,
        mask,
        target,
        meta: SampleMeta { seed: scene.seed, scene: Some(scene), affine: None },
    }
}

pub fn make_edge_sample(seed: u64) -> AtomicSample {
    let scene = scene(seed);
    let target = scene.composite();
    let band = edge_band(&scene.shape_mask());
    let source = target.blend_masked(&gaussian_blur(&target, EDGE_BLUR_SIGMA), &band).expect("same dims");
    AtomicSample {
        source,
        task: TaskId::EdgeEnhance,
        mask: band,
        target,
        meta: SampleMeta { seed, scene: Some(scene), affine: None },
    }
}

pub fn make_harmonization_sample(seed: u64) -> AtomicSample {
    let scene = scene(seed);
    let target = scene.composite();
    let coverage = scene.coverage();
    let support: Vec<usize> = (0..coverage.len()).filter(|&i| coverage[i] > 0.0).collect();
    let object_mean = |img: &Image| {
        let mut m = [0.0f32; 3];
        for &i in &support {
            for c in 0..3 {
                m[c] += img.data()[i * 3 + c];
            }
        }
        m.map(|v| v / support.len() as f32)
    };
    let target_mean = object_mean(&target);

    let mut rng = stream_rng(seed, STREAM_PERTURB);
    let (mut source, mut affine);
    loop {
        affine = [0, 1, 2].map(|_| loop {
            let g = rng.random_range(0.5f32..1.5);
            let b = rng.random_range(-0.3f32..0.3);
            if (g - 1.0).abs() + b.abs() >= PERTURBATION_FLOOR {
                break (g, b);
            }
        });
        source = apply_affine(&target, &support, &affine);
        let shift = object_mean(&source).iter().zip(target_mean).map(|(s, t)| (s - t).abs()).fold(0.0f32, f32::max);
        if shift >= MIN_OBJECT_SHIFT {
            break;
        }
    }
    let mask = scene.shape_mask().dilate_radius(TASK_MASK_GROWTH);
    AtomicSample {
        source,
        task: TaskId::Harmonize,
        mask,
        target,
        meta: SampleMeta { seed, scene: Some(scene), affine: Some(affine) },
    }
}

fn apply_affine(img: &Image, support: &[usize], affine: &[(f32, f32); 3]) -> Image {
    let mut data = img.data().to_vec();
    for &i in support {
        for (c, &(g, b)) in affine.iter().enumerate() {
            let v = &mut data[i * 3 + c];
            *v = (g * *v + b).clamp(0.0, 1.0);
        }
    }
    Image::from_raw(img.width(), img.height(), data).expect("same size")
}

pub fn make_sample(task: TaskId, seed: u64) -> AtomicSample {
    match task {
        TaskId::Removal => make_removal_sample(seed),
        TaskId::EdgeEnhance => make_edge_sample(seed),
        TaskId::Harmonize => make_harmonization_sample(seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSelection {
    One(TaskId),
    /// Round-robin over OR, EE, HR.
    All,
}

impl FromStr for TaskSelection {
    type Err = Error;

    /// `all` or a task code.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            Ok(TaskSelection::All)
        } else {
            Ok(TaskSelection::One(s.parse()?))
        }
    }
}

impl fmt::Display for TaskSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSelection::One(t) => write!(f, "{t}"),
            TaskSelection::All => f.write_str("all"),
        }
    }
}

pub fn sample_seed(base_seed: u64, index: u64) -> u64 {
    base_seed.wrapping_mul(1_000_003).wrapping_add(index)
}

pub fn generate_dataset(selection: TaskSelection, n: usize, base_seed: u64) -> Vec<AtomicSample> {
    (0..n)
        .map(|i| {
            let task = match selection {
                TaskSelection::One(t) => t,
                TaskSelection::All => TaskId::ALL[i % 3],
            };
            make_sample(task, sample_seed(base_seed, i as u64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub source: String,
    pub target: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub task: TaskId,
    pub seed: u64,
    pub paths: SamplePaths,
    pub format_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub format_version: String,
}

pub fn write_dataset(samples: &[AtomicSample], dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("images"))?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut manifest = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:06}");
        let paths = SamplePaths {
            source: format!("images/{id}_src.png"),
            target: format!("images/{id}_trg.png"),
            mask: format!("images/{id}_mask.png"),
        };
        fs::write(dir.join(&paths.source), s.source.to_png_bytes()?)?;
        fs::write(dir.join(&paths.target), s.target.to_png_bytes()?)?;
        fs::write(dir.join(&paths.mask), s.mask.to_png_bytes()?)?;
        let entry = ManifestEntry {
            id,
            task: s.task,
            seed: s.meta.seed,
            paths,
            format_version: DATA_FORMAT_VERSION.to_string(),
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.push(b'\n');
        entries.push(entry);
    }
    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    f.write_all(&manifest)?;
    Ok(DatasetManifest { entries, format_version: DATA_FORMAT_VERSION.to_string() })
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let reader = BufReader::new(fs::File::open(&path)?);
    let mut entries = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            what: format!("{} line {}", path.display(), lineno + 1),
            reason: e.to_string(),
        })?;
        if entry.format_version != DATA_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: entry.format_version,
                expected: DATA_FORMAT_VERSION.to_string(),
            });
        }
        entries.push(entry);
    }
    Ok(DatasetManifest { entries, format_version: DATA_FORMAT_VERSION.to_string() })
}

fn read_png(dir: &Path, rel: &str) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(rel);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let bytes = fs::read(&path)?;
    Ok((path, bytes))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<AtomicSample>> {
    let manifest = read_manifest(dir)?;
    let corrupt = |path: PathBuf, e: Error| Error::CorruptImage { path, reason: e.to_string() };
    manifest
        .entries
        .iter()
        .map(|e| {
            let (p, b) = read_png(dir, &e.paths.source)?;
            let source = Image::from_png_bytes(&b).map_err(|err| corrupt(p, err))?;
            let (p, b) = read_png(dir, &e.paths.target)?;
            let target = Image::from_png_bytes(&b).map_err(|err| corrupt(p, err))?;
            let (p, b) = read_png(dir, &e.paths.mask)?;
            let mask = Mask::from_png_bytes(&b).map_err(|err| corrupt(p.clone(), err))?;
            if source.dims() != target.dims() || source.dims() != mask.dims() {
                return Err(Error::ShapeMismatch(format!("sample {} has inconsistent image sizes", e.id)));
            }
            Ok(AtomicSample {
                source,
                task: e.task,
                mask,
                target,
                meta: SampleMeta { seed: e.seed, scene: None, affine: None },
            })
        })
        .collect()
}
