//! Score-distillation guidance behind a provider-agnostic contract.
//!
//! A provider receives rendered frames plus prompt context and a diffusion
//! timestep, and answers with per-pixel gradients on those frames. The
//! optimizers never look past this contract, so a remote diffusion service,
//! a deterministic mock, and image-matching targets are interchangeable.

mod providers;
mod remote;
mod schedule;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::ViewKind;
use crate::rasterizer::RasterImage;

pub use providers::{MockProvider, TargetImageProvider, TargetVideoProvider};
pub use remote::{decode_image, encode_image, HealthStatus, RemoteProvider, WireImage};
pub use schedule::{sample_timestep, TimestepSchedule};

/// Classifier-free guidance scale for image guidance.
pub const DEFAULT_IMAGE_CFG: f64 = 7.5;
/// Classifier-free guidance scale for video guidance.
pub const DEFAULT_VIDEO_CFG: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub base_prompt: String,
    pub view_tag: Option<ViewKind>,
    pub motion_prompt: Option<String>,
    pub cfg_scale: f64,
}

impl PromptContext {
    pub fn new(base_prompt: impl Into<String>, cfg_scale: f64) -> Self {
        Self {
            base_prompt: base_prompt.into(),
            view_tag: None,
            motion_prompt: None,
            cfg_scale,
        }
    }

    pub fn for_view(&self, view: ViewKind) -> Self {
        Self {
            view_tag: Some(view),
            ..self.clone()
        }
    }

    /// Text sent with image requests: `"A {view} view of {prompt}"` when a
    /// canonical view tag is present, the bare prompt otherwise.
    pub fn image_text(&self) -> String {
        match self.view_tag {
            Some(ViewKind::Custom) | None => self.base_prompt.clone(),
            Some(v) => format!("A {v} view of {}", self.base_prompt),
        }
    }

    /// Text sent with video requests: the motion prompt, else the base prompt.
    pub fn video_text(&self) -> String {
        self.motion_prompt.clone().unwrap_or_else(|| self.base_prompt.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cfg_scale > 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::config("cfg_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Time-dependent weighting `w(t)` applied to score-distillation residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum SdsWeighting {
    Constant(f64),
    OneMinusT,
}

impl Default for SdsWeighting {
    fn default() -> Self {
        SdsWeighting::Constant(1.0)
    }
}

impl SdsWeighting {
    pub fn weight(&self, t: f64) -> f64 {
        match *self {
            SdsWeighting::Constant(c) => c,
            SdsWeighting::OneMinusT => 1.0 - t,
        }
    }
}

/// Default weighting `w(t) = 1`.
pub fn sds_weight(t: f64) -> f64 {
    SdsWeighting::default().weight(t)
}

/// Per-pixel gradient on one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GradField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GradField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean squared value, logged as the per-view guidance magnitude.
    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct GuidanceRequest {
    pub frames: Vec<RasterImage>,
    pub prompt: PromptContext,
    pub timestep: f64,
    pub seed: u64,
}

impl GuidanceRequest {
    fn validate(&self, video: bool) -> Result<()> {
        let min = if video { 2 } else { 1 };
        if self.frames.len() < min || (!video && self.frames.len() != 1) {
            return Err(Error::Protocol(format!(
                "{} guidance got {} frames",
                if video { "video" } else { "image" },
                self.frames.len()
            )));
        }
        let first = &self.frames[0];
        if self.frames.iter().any(|f| !f.same_shape(first)) {
            return Err(Error::Protocol("frames differ in size".into()));
        }
        if !(self.timestep > 0.0 && self.timestep < 1.0) {
            return Err(Error::Protocol(format!("timestep {} outside (0, 1)", self.timestep)));
        }
        self.prompt.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceResponse {
    pub grads: Vec<GradField>,
    /// The `w(t)` factor, already folded into `grads`.
    pub weight: f64,
}

impl GuidanceResponse {
    fn validate_against(&self, req: &GuidanceRequest) -> Result<()> {
        if self.grads.len() != req.frames.len() {
            return Err(Error::Protocol(format!(
                "{} gradient frames for {} request frames",
                self.grads.len(),
                req.frames.len()
            )));
        }
        for (g, f) in self.grads.iter().zip(&req.frames) {
            if g.width != f.width || g.height != f.height || g.data.len() != f.data.len() {
                return Err(Error::Protocol(format!(
                    "gradient {}x{} for a {}x{} frame",
                    g.width, g.height, f.width, f.height
                )));
            }
            if !g.is_finite() {
                return Err(Error::Protocol("non-finite gradient values".into()));
            }
        }
        Ok(())
    }
}

/// Source of score-distillation gradients.
pub trait GuidanceProvider: Send + Sync {
    fn image_guidance(&self, req: &GuidanceRequest) -> Result<GuidanceResponse>;
    fn video_guidance(&self, req: &GuidanceRequest) -> Result<GuidanceResponse>;
}

/// Single-frame guidance with request and response checked against the contract.
pub fn image_guidance(provider: &dyn GuidanceProvider, req: &GuidanceRequest) -> Result<GuidanceResponse> {
    req.validate(false)?;
    let resp = provider.image_guidance(req)?;
    resp.validate_against(req)?;
    Ok(resp)
}

/// Multi-frame guidance with request and response checked against the contract.
pub fn video_guidance(provider: &dyn GuidanceProvider, req: &GuidanceRequest) -> Result<GuidanceResponse> {
    req.validate(true)?;
    let resp = provider.video_guidance(req)?;
    resp.validate_against(req)?;
    Ok(resp)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a run seed with stream identifiers, so per-request seeds depend on
/// what a request is, never on the order requests are issued in.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Deterministic RNG for one `(seed, stream…)` tuple.
pub fn stream_rng(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

pub(crate) fn uniform_field(rng: &mut impl Rng, width: usize, height: usize, amplitude: f64) -> GradField {
    let data = (0..width * height)
        .map(|_| amplitude * rng.random_range(-1.0..1.0))
        .collect();
    GradField { width, height, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn view_prompts_are_verbatim() {
        let ctx = PromptContext::new("a cat", DEFAULT_IMAGE_CFG);
        assert_eq!(ctx.for_view(ViewKind::Front).image_text(), "A front view of a cat");
        assert_eq!(ctx.for_view(ViewKind::Back).image_text(), "A back view of a cat");
        assert_eq!(ctx.for_view(ViewKind::Left).image_text(), "A left view of a cat");
        assert_eq!(ctx.for_view(ViewKind::Right).image_text(), "A right view of a cat");
        assert_eq!(ctx.for_view(ViewKind::Top).image_text(), "A top view of a cat");
        assert_eq!(ctx.image_text(), "a cat");
    }

    #[test]
    fn weighting() {
        assert_eq!(sds_weight(0.3), 1.0);
        for t in [0.01, 0.2, 0.5, 0.99] {
            assert!(sds_weight(t) > 0.0);
            assert!(SdsWeighting::OneMinusT.weight(t) > 0.0);
        }
        assert!((SdsWeighting::OneMinusT.weight(0.6) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn derived_seeds_separate_streams() {
        let a = derive_seed(1, &[0, 2]);
        assert_eq!(a, derive_seed(1, &[0, 2]));
        assert_ne!(a, derive_seed(1, &[2, 0]));
        assert_ne!(a, derive_seed(2, &[0, 2]));
    }

    #[test]
    fn request_validation() {
        let frame = RasterImage::white(4, 4);
        let provider = MockProvider::new(1.0);
        let mut req = GuidanceRequest {
            frames: vec![frame.clone(), frame.clone()],
            prompt: PromptContext::new("x", 7.5),
            timestep: 0.5,
            seed: 0,
        };
        assert!(matches!(image_guidance(&provider, &req), Err(Error::Protocol(_))));
        assert!(video_guidance(&provider, &req).is_ok());
        req.frames[1] = RasterImage::white(5, 4);
        assert!(matches!(video_guidance(&provider, &req), Err(Error::Protocol(_))));
        req.frames.truncate(1);
        req.timestep = 1.0;
        assert!(matches!(image_guidance(&provider, &req), Err(Error::Protocol(_))));
    }
}
