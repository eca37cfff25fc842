//! JSON bodies of the HTTP API.

use funedit_core::composer::{
    compose_move, compose_paste, scaled_dilation_kernel, CompositeEdit, CompositeEditWire, EdgeMode, MoveRequest, PasteRequest,
};
use funedit_core::diffusion::{Guidance, SamplerConfig, DEFAULT_STEPS};
use funedit_core::taskvocab::TaskId;
use funedit_core::{Image, Mask};
use serde::{Deserialize, Serialize};

/// Largest accepted sampler step count.
pub const MAX_STEPS: usize = 64;

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveWire {
    pub image: String,
    pub src_mask: String,
    pub dx: i64,
    pub dy: i64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub guidance: Guidance,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dilation_kernel: Option<usize>,
    #[serde(default)]
    pub edge: EdgeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PasteWire {
    /// Target image.
    pub image: String,
    pub ref_image: String,
    pub ref_mask: String,
    pub x: i64,
    pub y: i64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub guidance: Guidance,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub edge: EdgeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HighLevelWire {
    Move(MoveWire),
    Paste(PasteWire),
}

/// Body of `POST /edit`: a high-level request tagged by `kind`, or the raw
/// composite edit form.
#[derive(Debug, Clone, PartialEq)]
pub enum EditRequestWire {
    HighLevel(HighLevelWire),
    Raw(CompositeEditWire),
}

/// A request rejected before inference.
#[derive(Debug, Clone, PartialEq)]
pub enum RequestError {
    /// Malformed payload; maps to 400.
    BadRequest { field: Option<String>, message: String },
    /// Well-formed but not composable; maps to 422.
    Unprocessable(String),
}

fn bad(field: &str, message: impl Into<String>) -> RequestError {
    RequestError::BadRequest { field: Some(field.to_string()), message: message.into() }
}

impl EditRequestWire {
    pub fn parse(body: &[u8]) -> Result<Self, RequestError> {
        let value: serde_json::Value = serde_json::from_slice(body)
            .map_err(|e| RequestError::BadRequest { field: None, message: format!("invalid JSON: {e}") })?;
        let Some(kind) = value.get("kind") else {
            return Ok(EditRequestWire::Raw(from_value(value)?));
        };
        let high = match kind.as_str() {
            Some("move") => HighLevelWire::Move(from_value(without_kind(value))?),
            Some("paste") => HighLevelWire::Paste(from_value(without_kind(value))?),
            _ => return Err(bad("kind", format!("kind must be \"move\" or \"paste\", got {kind}"))),
        };
        Ok(EditRequestWire::HighLevel(high))
    }

    fn sampler_parts(&self) -> (usize, Guidance, Option<u64>) {
        match self {
            EditRequestWire::HighLevel(HighLevelWire::Move(m)) => (m.steps, m.guidance, m.seed),
            EditRequestWire::HighLevel(HighLevelWire::Paste(p)) => (p.steps, p.guidance, p.seed),
            EditRequestWire::Raw(r) => (r.steps, r.guidance, r.seed),
        }
    }

    pub fn sampler(&self, default_seed: u64) -> Result<SamplerConfig, RequestError> {
        let (steps, guidance, seed) = self.sampler_parts();
        if !(1..=MAX_STEPS).contains(&steps) {
            return Err(bad("steps", format!("steps must be in [1, {MAX_STEPS}], got {steps}")));
        }
        let config = SamplerConfig { steps, guidance, seed: seed.unwrap_or(default_seed) };
        config.validate().map_err(|e| bad("guidance", e.to_string()))?;
        Ok(config)
    }

    /// Decodes payloads and runs the pixel-space preprocessing. `side` is
    /// the model resolution every image must match.
    pub fn into_edit(self, side: usize) -> Result<CompositeEdit, RequestError> {
        let composer = |e: funedit_core::Error| RequestError::Unprocessable(e.to_string());
        let edit = match self {
            EditRequestWire::HighLevel(HighLevelWire::Move(m)) => {
                let image = decode_image("image", &m.image, side)?;
                let src_mask = decode_mask("src_mask", &m.src_mask, &image)?;
                let kernel = m.dilation_kernel.unwrap_or_else(|| scaled_dilation_kernel(side));
                compose_move(&MoveRequest { image, src_mask, dx: m.dx, dy: m.dy }, kernel, m.edge).map_err(composer)?
            }
            EditRequestWire::HighLevel(HighLevelWire::Paste(p)) => {
                let target = decode_image("image", &p.image, side)?;
                let reference = Image::from_base64_png(&p.ref_image).map_err(|e| bad("ref_image", e.to_string()))?;
                let ref_mask = decode_mask("ref_mask", &p.ref_mask, &reference)?;
                let req = PasteRequest { target, reference, ref_mask, offset: (p.x, p.y), scale: p.scale };
                compose_paste(&req, p.edge).map_err(composer)?
            }
            EditRequestWire::Raw(r) => {
                let edit = r.decode().map_err(|e| match e {
                    funedit_core::Error::Malformed { what, reason } => bad(&what, reason),
                    funedit_core::Error::ShapeMismatch(m) => {
                        let field = m.split_whitespace().next().unwrap_or("ops").to_string();
                        RequestError::BadRequest { field: Some(field), message: m }
                    }
                    other => RequestError::BadRequest { field: None, message: other.to_string() },
                })?;
                if edit.input_image.dims() != (side, side) {
                    return Err(bad("image", format!("image must be {side}x{side}")));
                }
                edit
            }
        };
        Ok(edit)
    }
}

fn without_kind(mut value: serde_json::Value) -> serde_json::Value {
    if let Some(obj) = value.as_object_mut() {
        obj.remove("kind");
    }
    value
}

/// Deserializes with the offending field's path in the error, e.g.
/// `ops[1].task` or `dx`.
fn from_value<T: serde::de::DeserializeOwned>(value: serde_json::Value) -> Result<T, RequestError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let message = e.into_inner().to_string();
        let named = ["missing field `", "unknown field `"]
            .iter()
            .find_map(|p| message.strip_prefix(p))
            .and_then(|rest| rest.split('`').next());
        let field = match (path.as_str(), named) {
            (".", Some(n)) => n.to_string(),
            (p, Some(n)) if !p.ends_with(n) => format!("{p}.{n}"),
            (p, _) => p.to_string(),
        };
        RequestError::BadRequest { field: Some(field), message }
    })
}

fn decode_image(field: &str, b64: &str, side: usize) -> Result<Image, RequestError> {
    let img = Image::from_base64_png(b64).map_err(|e| bad(field, e.to_string()))?;
    if img.dims() != (side, side) {
        return Err(bad(field, format!("image must be {side}x{side}, got {}x{}", img.width(), img.height())));
    }
    Ok(img)
}

fn decode_mask(field: &str, b64: &str, image: &Image) -> Result<Mask, RequestError> {
    let mask = Mask::from_base64_png(b64).map_err(|e| bad(field, e.to_string()))?;
    if mask.dims() != image.dims() {
        return Err(bad(
            field,
            format!("{field} is {}x{}, image is {}x{}", mask.width(), mask.height(), image.width(), image.height()),
        ));
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpEcho {
    pub task: TaskId,
    /// Base64 PNG of the mask actually used.
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponseWire {
    pub image: String,
    pub nfe: usize,
    pub latency_ms: f64,
    pub ops_echo: Vec<OpEcho>,
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorWire {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthWire {
    pub status: String,
    pub checkpoint_version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TasksWire {
    pub tasks: Vec<TaskId>,
    pub max_simultaneous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWire {
    pub id: String,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesWire {
    pub samples: Vec<SampleWire>,
}
