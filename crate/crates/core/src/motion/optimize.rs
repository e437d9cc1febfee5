use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{Point3, Sketch3D};
use crate::error::{Error, Result};
use crate::guidance::{
    derive_seed, sample_timestep, stream_rng, video_guidance, GuidanceProvider, GuidanceRequest, PromptContext,
    TimestepSchedule, DEFAULT_VIDEO_CFG,
};
use crate::optim::AdamState;
use crate::projection::{OrthoCamera, OrthoPlane};
use crate::rasterizer::{backward, render_view, RasterImage, RasterParams, ViewTape};
use crate::stage1::DEFAULT_CHECKPOINT_EVERY;
use crate::trace::{LossTrace, TraceRow};

use super::field::{
    flatten_view, motion_amplitude, reconstruct_3d, reconstruct_backward, smoothness_loss, DisplacementField,
    FlatViewVector,
};
use super::model::{ForwardCache, MotionModel, DEFAULT_HIDDEN};

pub const DEFAULT_ITERS: usize = 1000;
pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_FRAMES: usize = 16;
pub const DEFAULT_LAMBDA_S: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 5.0;
pub const DEFAULT_FRAME_SIZE: usize = 256;

const MODEL_FILE: &str = "stage2_model.bin";
const ADAM_FILE: &str = "stage2_adam.bin";
const RNG_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub iters: usize,
    pub lr: f64,
    /// Frame count `K`.
    pub frames: usize,
    pub lambda_s: f64,
    /// Rate of the motion amplitude ramp.
    pub beta: f64,
    pub cfg_scale: f64,
    pub image_size: usize,
    pub hidden: usize,
    pub raster: RasterParams,
    pub prompt: String,
    pub motion_prompt: String,
    pub seed: u64,
    pub schedule: TimestepSchedule,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self::with_iters(DEFAULT_ITERS)
    }
}

impl Stage2Config {
    pub fn with_iters(iters: usize) -> Self {
        Self {
            iters,
            lr: DEFAULT_LR,
            frames: DEFAULT_FRAMES,
            lambda_s: DEFAULT_LAMBDA_S,
            beta: DEFAULT_BETA,
            cfg_scale: DEFAULT_VIDEO_CFG,
            image_size: DEFAULT_FRAME_SIZE,
            hidden: DEFAULT_HIDDEN,
            raster: RasterParams::default(),
            prompt: String::new(),
            motion_prompt: String::new(),
            seed: 0,
            schedule: TimestepSchedule::new(iters),
            checkpoint_dir: None,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::config("iters", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.frames < 2 {
            return Err(Error::config("frames", "need at least two frames"));
        }
        if !(self.lambda_s >= 0.0 && self.lambda_s.is_finite()) {
            return Err(Error::config("lambda_s", "must be non-negative"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be positive"));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size", "must be positive"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        if self.schedule.total_iters != self.iters {
            return Err(Error::config("iters", "timestep schedule must span iters"));
        }
        self.raster.validate()?;
        self.schedule.validate()?;
        self.prompt_context().validate()
    }

    fn prompt_context(&self) -> PromptContext {
        let mut ctx = PromptContext::new(&self.prompt, self.cfg_scale);
        if !self.motion_prompt.is_empty() {
            ctx.motion_prompt = Some(self.motion_prompt.clone());
        }
        ctx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2State {
    pub model: MotionModel,
    pub adam: AdamState,
}

impl Stage2State {
    pub fn fresh(model: MotionModel) -> Self {
        let adam = AdamState::new(model.param_count());
        Self { model, adam }
    }

    pub fn next_iter(&self) -> usize {
        self.adam.step as usize
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        self.model.write_to(&mut buf)?;
        fs::write(dir.join(MODEL_FILE), &buf)?;
        buf.clear();
        self.adam.write_to(&mut buf)?;
        fs::write(dir.join(ADAM_FILE), &buf)?;
        Ok(dir.to_path_buf())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = MotionModel::read_from(fs::read(dir.join(MODEL_FILE))?.as_slice())?;
        let adam = AdamState::read_from(fs::read(dir.join(ADAM_FILE))?.as_slice())?;
        if adam.len() != model.param_count() {
            return Err(Error::Format("checkpoint moments do not match the model".into()));
        }
        Ok(Self { model, adam })
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub field: DisplacementField,
    pub model: MotionModel,
    pub adam: AdamState,
    pub trace: LossTrace,
}

/// Model predictions for every frame of both planes, scaled by `alpha`.
/// Frame 0 is pinned to zero and never reaches the model.
fn predict(
    model: &MotionModel,
    base: &[FlatViewVector; 2],
    frames: usize,
    alpha: f64,
) -> Result<(DisplacementField, Vec<Option<ForwardCache>>)> {
    let jobs: Vec<(usize, usize)> = (0..2).flat_map(|p| (0..frames).map(move |k| (p, k))).collect();
    let outputs: Vec<(FlatViewVector, Option<ForwardCache>)> = jobs
        .par_iter()
        .map(|&(p, k)| {
            if k == 0 {
                return Ok((FlatViewVector::zeros(base[p].plane, model.n_curves()), None));
            }
            let (mut out, cache) = model.forward(&base[p], k, frames)?;
            out.values.iter_mut().for_each(|v| *v *= alpha);
            Ok((out, Some(cache)))
        })
        .collect::<Result<_>>()?;
    let (vectors, caches): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
    let field = reconstruct_3d(&vectors[..frames], &vectors[frames..])?;
    Ok((field, caches))
}

/// The displacement field a model produces at amplitude `alpha`.
pub fn predict_field(model: &MotionModel, base: &Sketch3D, frames: usize, alpha: f64) -> Result<DisplacementField> {
    if model.n_curves() != base.len() {
        return Err(Error::Shape(format!(
            "model for {} curves, sketch with {}",
            model.n_curves(),
            base.len()
        )));
    }
    let flat = [
        flatten_view(base, OrthoPlane::Frontal),
        flatten_view(base, OrthoPlane::Sagittal),
    ];
    Ok(predict(model, &flat, frames, alpha)?.0)
}

/// Renders every frame of an animation onto one orthographic plane.
pub fn render_frames(
    base: &Sketch3D,
    field: &DisplacementField,
    plane: OrthoPlane,
    image_size: usize,
    params: &RasterParams,
) -> Result<Vec<(RasterImage, ViewTape)>> {
    let camera = OrthoCamera::new(plane, image_size);
    (0..field.frame_count())
        .into_par_iter()
        .map(|k| render_view(&field.apply(base, k)?, &camera, params))
        .collect()
}

/// Runs Stage II on a frozen `base` sketch.
pub fn optimize_motion(
    base: &Sketch3D,
    model: MotionModel,
    provider: &dyn GuidanceProvider,
    cfg: &Stage2Config,
) -> Result<Stage2Output> {
    optimize_motion_from(base, Stage2State::fresh(model), provider, cfg)
}

/// Continues Stage II from a saved state up to `cfg.iters`.
pub fn optimize_motion_from(
    base: &Sketch3D,
    state: Stage2State,
    provider: &dyn GuidanceProvider,
    cfg: &Stage2Config,
) -> Result<Stage2Output> {
    cfg.validate()?;
    if !base.is_finite() || base.is_empty() {
        return Err(Error::Domain("base sketch must be non-empty and finite".into()));
    }
    let Stage2State { mut model, mut adam } = state;
    if model.n_curves() != base.len() {
        return Err(Error::Shape(format!(
            "model for {} curves, sketch with {}",
            model.n_curves(),
            base.len()
        )));
    }
    if adam.len() != model.param_count() {
        return Err(Error::Shape("adam state does not match the model".into()));
    }
    let flat = [
        flatten_view(base, OrthoPlane::Frontal),
        flatten_view(base, OrthoPlane::Sagittal),
    ];
    let ctx = cfg.prompt_context();
    let k_frames = cfg.frames;
    let mut trace = LossTrace::new(
        OrthoPlane::BOTH.iter().map(|p| p.as_str().to_string()).collect(),
        "smoothness",
    );

    for iter in adam.step as usize..cfg.iters {
        let mut rng = stream_rng(cfg.seed, &[RNG_STREAM, iter as u64]);
        let t = sample_timestep(&cfg.schedule, iter, &mut rng)?;
        let alpha = motion_amplitude(iter, cfg.iters, cfg.beta);
        let (field, caches) = predict(&model, &flat, k_frames, alpha)?;

        let per_plane: Result<Vec<(Vec<Vec<[Point3; 4]>>, f64)>> = OrthoPlane::BOTH
            .par_iter()
            .enumerate()
            .map(|(p, &plane)| {
                let rendered = render_frames(base, &field, plane, cfg.image_size, &cfg.raster)?;
                let (frames, tapes): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
                let req = GuidanceRequest {
                    frames,
                    prompt: ctx.for_view(plane.view_tag()),
                    timestep: t,
                    seed: derive_seed(cfg.seed, &[RNG_STREAM, iter as u64, p as u64]),
                };
                let resp = video_guidance(provider, &req)?;
                let grads = tapes
                    .par_iter()
                    .zip(&resp.grads)
                    .map(|(tape, g)| backward(tape, &g.data))
                    .collect::<Result<Vec<_>>>()?;
                let magnitude = resp.grads.iter().map(|g| g.mean_square()).sum::<f64>() / k_frames as f64;
                Ok((grads, magnitude))
            })
            .collect();
        let per_plane = match per_plane {
            Ok(r) => r,
            Err(e) => {
                let checkpoint = match &cfg.checkpoint_dir {
                    Some(dir) => Some(
                        Stage2State {
                            model: model.clone(),
                            adam: adam.clone(),
                        }
                        .save(dir)?,
                    ),
                    None => None,
                };
                return Err(Error::ProviderFailed {
                    iteration: iter,
                    checkpoint,
                    source: Box::new(e),
                });
            }
        };

        let (smooth, smooth_grad) = smoothness_loss(&field)?;
        let mut grad_field = DisplacementField::zeros(k_frames, base.len());
        for k in 1..k_frames {
            let frame = grad_field.frame_mut(k);
            for (i, ctrl) in frame.iter_mut().enumerate() {
                for (j, g) in ctrl.iter_mut().enumerate() {
                    for (grads, _) in &per_plane {
                        *g += grads[k][i][j];
                    }
                    *g += smooth_grad.frame(k)[i][j] * cfg.lambda_s;
                }
            }
        }

        let (g_front, g_side) = reconstruct_backward(&grad_field);
        let mut grads = vec![0.0; model.param_count()];
        for (p, g_plane) in [g_front, g_side].iter().enumerate() {
            for k in 1..k_frames {
                let cache = caches[p * k_frames + k].as_ref().expect("non-pinned frames are cached");
                let scaled: Vec<f64> = g_plane[k].values.iter().map(|v| v * alpha).collect();
                model.backward(cache, &scaled, &mut grads)?;
            }
        }
        adam.update(model.params_mut(), &grads, cfg.lr)?;

        let row = TraceRow {
            iter,
            t,
            view_magnitudes: OrthoPlane::BOTH
                .iter()
                .zip(&per_plane)
                .map(|(plane, (_, m))| (plane.as_str().to_string(), *m))
                .collect(),
            regularizer: smooth,
        };
        if !row.is_finite() || model.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite state at iteration {iter}")));
        }
        trace.push(row);

        if let Some(dir) = &cfg.checkpoint_dir {
            if (iter + 1) % cfg.checkpoint_every == 0 {
                Stage2State {
                    model: model.clone(),
                    adam: adam.clone(),
                }
                .save(dir)?;
            }
        }
    }

    let alpha = motion_amplitude(cfg.iters, cfg.iters, cfg.beta);
    let field = predict(&model, &flat, k_frames, alpha)?.0;
    field.validate()?;
    Ok(Stage2Output {
        field,
        model,
        adam,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::init_sketch;
    use crate::guidance::{MockProvider, TargetVideoProvider};

    fn cfg(iters: usize) -> Stage2Config {
        let mut c = Stage2Config::with_iters(iters);
        c.frames = 4;
        c.image_size = 32;
        c.hidden = 16;
        c.seed = 3;
        c
    }

    #[test]
    fn fresh_model_predicts_a_static_animation() {
        let base = init_sketch(3, 1, 0.2, 0.001, 0.01).unwrap();
        let model = MotionModel::new(3, 16, 0);
        let field = predict_field(&model, &base, 5, 1.0).unwrap();
        assert_eq!(field, DisplacementField::zeros(5, 3));
    }

    #[test]
    fn base_and_first_frame_are_preserved() {
        let base = init_sketch(3, 2, 0.3, 0.01, 0.05).unwrap();
        let before = base.clone();
        let mut c = cfg(5);
        c.lr = 1e-2;
        let out = optimize_motion(&base, MotionModel::new(3, 16, 1), &MockProvider::new(0.5), &c).unwrap();
        assert_eq!(base, before);
        assert!(out.field.is_anchored());
        assert_eq!(out.field.apply(&base, 0).unwrap(), base);
        assert_eq!(out.trace.len(), 5);
        assert!(!out.model.output_layer_is_zero());
    }

    #[test]
    fn deterministic() {
        let base = init_sketch(2, 4, 0.3, 0.01, 0.05).unwrap();
        let run = || optimize_motion(&base, MotionModel::new(2, 16, 1), &MockProvider::new(0.5), &cfg(3)).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.model, b.model);
        assert_eq!(a.field, b.field);
    }

    #[test]
    fn provider_failure_leaves_a_checkpoint() {
        let base = init_sketch(2, 4, 0.3, 0.01, 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(3);
        c.checkpoint_dir = Some(dir.path().to_path_buf());
        // no video targets registered, so every request fails
        let err = optimize_motion(&base, MotionModel::new(2, 16, 1), &TargetVideoProvider::new(), &c).unwrap_err();
        assert!(matches!(
            err,
            Error::ProviderFailed {
                iteration: 0,
                checkpoint: Some(_),
                ..
            }
        ));
        let state = Stage2State::load(dir.path()).unwrap();
        assert_eq!(state.next_iter(), 0);
        assert_eq!(state.model, MotionModel::new(2, 16, 1));
    }

    #[test]
    fn rejects_mismatched_model() {
        let base = init_sketch(2, 4, 0.3, 0.01, 0.05).unwrap();
        assert!(optimize_motion(&base, MotionModel::new(3, 16, 1), &MockProvider::zero(), &cfg(1)).is_err());
    }
}
