use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::projection::ViewKind;
use crate::rasterizer::RasterImage;

use super::{stream_rng, uniform_field, GradField, GuidanceProvider, GuidanceRequest, GuidanceResponse, SdsWeighting};

/// Seeded pseudo-random gradients, uniform in `[-amplitude, amplitude)`.
/// An amplitude of zero answers every request with exact zeros.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockProvider {
    pub amplitude: f64,
}

impl MockProvider {
    pub fn new(amplitude: f64) -> Self {
        Self { amplitude }
    }

    pub fn zero() -> Self {
        Self { amplitude: 0.0 }
    }

    fn respond(&self, req: &GuidanceRequest) -> GuidanceResponse {
        let grads = req
            .frames
            .iter()
            .enumerate()
            .map(|(k, f)| {
                if self.amplitude == 0.0 {
                    GradField::zeros(f.width, f.height)
                } else {
                    let mut rng = stream_rng(req.seed, &[k as u64]);
                    uniform_field(&mut rng, f.width, f.height, self.amplitude)
                }
            })
            .collect();
        GuidanceResponse { grads, weight: 1.0 }
    }
}

impl GuidanceProvider for MockProvider {
    fn image_guidance(&self, req: &GuidanceRequest) -> Result<GuidanceResponse> {
        Ok(self.respond(req))
    }

    fn video_guidance(&self, req: &GuidanceRequest) -> Result<GuidanceResponse> {
        Ok(self.respond(req))
    }
}

fn residual(frame: &RasterImage, target: &RasterImage, weight: f64) -> Result<GradField> {
    if !frame.same_shape(target) {
        return Err(Error::Protocol(format!(
            "frame {}x{} does not match target {}x{}",
            frame.width, frame.height, target.width, target.height
        )));
    }
    Ok(GradField {
        width: frame.width,
        height: frame.height,
        data: frame
            .data
            .iter()
            .zip(&target.data)
            .map(|(f, t)| weight * (f - t))
            .collect(),
    })
}

/// Answers image requests with `w(t) (frame − target)`, the gradient of
/// `½ w(t) ‖frame − target‖²`, using the target registered for the request's
/// view tag.
#[derive(Debug, Clone, Default)]
pub struct TargetImageProvider {
    targets: BTreeMap<ViewKind, RasterImage>,
    fallback: Option<RasterImage>,
    pub weighting: SdsWeighting,
}

impl TargetImageProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uses `target` for every view.
    pub fn uniform(target: RasterImage) -> Self {
        Self {
            fallback: Some(target),
            ..Self::default()
        }
    }

    pub fn with_target(mut self, view: ViewKind, target: RasterImage) -> Self {
        self.targets.insert(view, target);
        self
    }

    pub fn with_weighting(mut self, weighting: SdsWeighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn target_for(&self, view: Option<ViewKind>) -> Option<&RasterImage> {
        view.and_then(|v| self.targets.get(&v)).or(self.fallback.as_ref())
    }
}

impl GuidanceProvider for TargetImageProvider {
    fn image_guidance(&self, req: &GuidanceRequest) -> Result<GuidanceResponse> {
        let target = self
            .target_for(req.prompt.view_tag)
            .ok_or_else(|| Error::Protocol(format!("no target for view {:?}", req.prompt.view_tag)))?;
        let weight = self.weighting.weight(req.timestep);
        let grads = req
            .frames
            .iter()
            .map(|f| residual(f, target, weight))
            .collect::<Result<_>>()?;
        Ok(GuidanceResponse { grads, weight })
    }

    fn video_guidance(&self, _req: &GuidanceRequest) -> Result<GuidanceResponse> {
        Err(Error::Protocol("target image provider has no video targets".into()))
    }
}

/// Answers video requests with frame-wise `w(t) (frame_k − target_k)`.
#[derive(Debug, Clone, Default)]
pub struct TargetVideoProvider {
    targets: BTreeMap<ViewKind, Vec<RasterImage>>,
    pub weighting: SdsWeighting,
}

impl TargetVideoProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_targets(mut self, view: ViewKind, frames: Vec<RasterImage>) -> Self {
        self.targets.insert(view, frames);
        self
    }

    pub fn with_weighting(mut self, weighting: SdsWeighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn targets_for(&self, view: Option<ViewKind>) -> Option<&[RasterImage]> {
        view.and_then(|v| self.targets.get(&v)).map(Vec::as_slice)
    }
}

impl GuidanceProvider for TargetVideoProvider {
    fn image_guidance(&self, req: &GuidanceRequest) -> Result<GuidanceResponse> {
        let targets = self
            .targets_for(req.prompt.view_tag)
            .ok_or_else(|| Error::Protocol(format!("no targets for view {:?}", req.prompt.view_tag)))?;
        let weight = self.weighting.weight(req.timestep);
        Ok(GuidanceResponse {
            grads: vec![residual(&req.frames[0], &targets[0], weight)?],
            weight,
        })
    }

    fn video_guidance(&self, req: &GuidanceRequest) -> Result<GuidanceResponse> {
        let targets = self
            .targets_for(req.prompt.view_tag)
            .ok_or_else(|| Error::Protocol(format!("no targets for view {:?}", req.prompt.view_tag)))?;
        if targets.len() != req.frames.len() {
            return Err(Error::Protocol(format!(
                "{} target frames for {} request frames",
                targets.len(),
                req.frames.len()
            )));
        }
        let weight = self.weighting.weight(req.timestep);
        let grads = req
            .frames
            .iter()
            .zip(targets)
            .map(|(f, t)| residual(f, t, weight))
            .collect::<Result<_>>()?;
        Ok(GuidanceResponse { grads, weight })
    }
}
