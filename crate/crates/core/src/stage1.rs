//! Stage I: multi-view static structure optimization.
//!
//! Each iteration renders the sketch from every configured view, asks the
//! guidance provider for per-pixel gradients under a view-tagged prompt,
//! pulls those back to the control points and adds a geometric consistency
//! term before one Adam step. Per-view work runs in parallel; gradients are
//! summed in a canonical view order so results do not depend on either
//! thread scheduling or the order views are listed in.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{Point3, Sketch3D, CURVE_STRIDE};
use crate::error::{Error, Result};
use crate::guidance::{
    derive_seed, image_guidance, sample_timestep, stream_rng, GuidanceProvider, GuidanceRequest, PromptContext,
    TimestepSchedule, DEFAULT_IMAGE_CFG,
};
use crate::io::{load_sketch, save_sketch};
use crate::optim::AdamState;
use crate::projection::{ViewKind, Viewpoint, DEFAULT_IMAGE_SIZE};
use crate::rasterizer::{backward, render_view, RasterParams};
use crate::trace::{LossTrace, TraceRow};

pub const DEFAULT_ITERS: usize = 4000;
pub const DEFAULT_LR: f64 = 1.5e-3;
pub const DEFAULT_LAMBDA_G: f64 = 0.05;
pub const DEFAULT_TOP_VIEW_PROB: f64 = 0.1;
pub const DEFAULT_CHECKPOINT_EVERY: usize = 500;

const SKETCH_FILE: &str = "stage1_sketch.json";
const ADAM_FILE: &str = "stage1_adam.bin";
const RNG_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub iters: usize,
    pub lr: f64,
    pub lambda_g: f64,
    pub views: Vec<Viewpoint>,
    pub top_view_prob: f64,
    pub raster: RasterParams,
    pub image_size: usize,
    pub cfg_scale: f64,
    pub prompt: String,
    pub seed: u64,
    pub schedule: TimestepSchedule,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self::with_image_size(DEFAULT_IMAGE_SIZE, DEFAULT_ITERS)
    }
}

impl Stage1Config {
    /// Defaults with the four cardinal views at `image_size` and a schedule
    /// spanning `iters`.
    pub fn with_image_size(image_size: usize, iters: usize) -> Self {
        Self {
            iters,
            lr: DEFAULT_LR,
            lambda_g: DEFAULT_LAMBDA_G,
            views: cardinal_views(image_size),
            top_view_prob: DEFAULT_TOP_VIEW_PROB,
            raster: RasterParams::default(),
            image_size,
            cfg_scale: DEFAULT_IMAGE_CFG,
            prompt: String::new(),
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
        if !(self.lambda_g >= 0.0 && self.lambda_g.is_finite()) {
            return Err(Error::config("lambda_g", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.top_view_prob) {
            return Err(Error::config("top_view_prob", "must lie in [0, 1]"));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size", "must be positive"));
        }
        if self.views.is_empty() {
            return Err(Error::config("views", "need at least one view"));
        }
        for v in &self.views {
            v.validated()?;
            if v.image_size != self.image_size {
                return Err(Error::config("views", "every view must use image_size"));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        if self.schedule.total_iters != self.iters {
            return Err(Error::config("iters", "timestep schedule must span iters"));
        }
        self.raster.validate()?;
        self.schedule.validate()?;
        PromptContext::new(&self.prompt, self.cfg_scale).validate()
    }
}

pub fn cardinal_views(image_size: usize) -> Vec<Viewpoint> {
    ViewKind::CARDINAL
        .iter()
        .map(|&k| Viewpoint::canonical(k, image_size).expect("cardinal views are valid"))
        .collect()
}

/// Order-free identity of a viewpoint, used both for its request seed and
/// as the canonical summation key.
fn view_key(v: &Viewpoint) -> u64 {
    derive_seed(
        v.kind as u64,
        &[
            v.azimuth.to_bits(),
            v.elevation.to_bits(),
            v.distance.to_bits(),
            v.fov.to_bits(),
            v.image_size as u64,
        ],
    )
}

/// Unit direction of `d` and its length, `None` when too short to normalize.
fn unit(d: Point3) -> Option<(Point3, f64)> {
    let n = d.norm();
    (n > 1e-12).then(|| (d / n, n))
}

/// Pulls `g` (gradient w.r.t. a unit vector) back through the normalization.
fn normalize_backward(u: &Point3, len: f64, g: &Point3) -> Point3 {
    (g - u * u.dot(g)) / len
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricLoss {
    pub value: f64,
    pub grads: Vec<[Point3; 4]>,
    /// Joint terms skipped because adjacent control points coincided.
    pub degenerate: usize,
}

/// Mean over curves of `Σ_{j∈{1,2}} ‖u_{j+1} − u_j‖²`, where `u_j` is the
/// unit direction from control point `j−1` to `j`.
pub fn geometric_loss(sketch: &Sketch3D) -> Result<GeometricLoss> {
    if sketch.is_empty() {
        return Err(Error::Shape("geometric loss of an empty sketch".into()));
    }
    let inv_n = 1.0 / sketch.len() as f64;
    let mut value = 0.0;
    let mut degenerate = 0;
    let mut grads = vec![[Point3::zeros(); 4]; sketch.len()];
    for (curve, g) in sketch.curves.iter().zip(&mut grads) {
        let p = &curve.control;
        let dirs: [Option<(Point3, f64)>; 3] = [unit(p[1] - p[0]), unit(p[2] - p[1]), unit(p[3] - p[2])];
        // dirs[m] is u_{m+1}; joint j pairs dirs[j-1] with dirs[j]
        for j in 1..3 {
            let (Some((ua, la)), Some((ub, lb))) = (dirs[j - 1], dirs[j]) else {
                degenerate += 1;
                continue;
            };
            let diff = ub - ua;
            value += inv_n * diff.norm_squared();
            let gu = diff * (2.0 * inv_n);
            let gb = normalize_backward(&ub, lb, &gu);
            let ga = normalize_backward(&ua, la, &-gu);
            // u_b runs from p[j] to p[j+1], u_a from p[j-1] to p[j]
            g[j + 1] += gb;
            g[j] -= gb;
            g[j] += ga;
            g[j - 1] -= ga;
        }
    }
    Ok(GeometricLoss {
        value,
        grads,
        degenerate,
    })
}

/// Optimizer state that a checkpoint captures.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1State {
    pub sketch: Sketch3D,
    pub adam: AdamState,
}

impl Stage1State {
    pub fn fresh(sketch: Sketch3D) -> Self {
        let n = sketch.len() * CURVE_STRIDE;
        Self {
            sketch,
            adam: AdamState::new(n),
        }
    }

    /// Iterations already applied.
    pub fn next_iter(&self) -> usize {
        self.adam.step as usize
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        save_sketch(dir.join(SKETCH_FILE), &self.sketch)?;
        let mut buf = Vec::new();
        self.adam.write_to(&mut buf)?;
        fs::write(dir.join(ADAM_FILE), buf)?;
        Ok(dir.to_path_buf())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sketch = load_sketch(dir.join(SKETCH_FILE))?;
        let adam = AdamState::read_from(fs::read(dir.join(ADAM_FILE))?.as_slice())?;
        if adam.len() != sketch.len() * CURVE_STRIDE {
            return Err(Error::Format("checkpoint moments do not match the sketch".into()));
        }
        Ok(Self { sketch, adam })
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub sketch: Sketch3D,
    pub trace: LossTrace,
    pub adam: AdamState,
}

pub fn trace_columns(cfg: &Stage1Config) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    let top = (cfg.top_view_prob > 0.0).then_some(ViewKind::Top.as_str());
    for v in cfg.views.iter().map(|v| v.kind.as_str()).chain(top) {
        if !cols.iter().any(|c| c == v) {
            cols.push(v.to_string());
        }
    }
    cols
}

/// Runs Stage I from `init`.
pub fn optimize_structure(
    init: &Sketch3D,
    provider: &dyn GuidanceProvider,
    cfg: &Stage1Config,
) -> Result<Stage1Output> {
    optimize_structure_from(Stage1State::fresh(init.clone()), provider, cfg)
}

/// Continues Stage I from a saved state up to `cfg.iters`.
pub fn optimize_structure_from(
    state: Stage1State,
    provider: &dyn GuidanceProvider,
    cfg: &Stage1Config,
) -> Result<Stage1Output> {
    cfg.validate()?;
    if state.sketch.is_empty() {
        return Err(Error::Shape("sketch has no curves".into()));
    }
    if !state.sketch.is_finite() {
        return Err(Error::Domain("initial sketch has non-finite control points".into()));
    }
    let Stage1State { mut sketch, mut adam } = state;
    if adam.len() != sketch.len() * CURVE_STRIDE {
        return Err(Error::Shape("adam state does not match the sketch".into()));
    }
    sketch.prompt = cfg.prompt.clone();
    sketch.seed = cfg.seed;
    let prompt = PromptContext::new(&cfg.prompt, cfg.cfg_scale);
    let top = Viewpoint::canonical(ViewKind::Top, cfg.image_size)?;
    let mut trace = LossTrace::new(trace_columns(cfg), "geometric");
    let mut params = sketch.to_flat();

    for iter in adam.step as usize..cfg.iters {
        let mut rng = stream_rng(cfg.seed, &[RNG_STREAM, iter as u64]);
        let t = sample_timestep(&cfg.schedule, iter, &mut rng)?;
        let mut views = cfg.views.clone();
        if rng.random::<f64>() < cfg.top_view_prob {
            views.push(top);
        }

        let results: Result<Vec<(u64, ViewKind, Vec<[Point3; 4]>, f64)>> = views
            .par_iter()
            .map(|vp| {
                let (image, tape) = render_view(&sketch, vp, &cfg.raster)?;
                let key = view_key(vp);
                let req = GuidanceRequest {
                    frames: vec![image],
                    prompt: prompt.for_view(vp.kind),
                    timestep: t,
                    seed: derive_seed(cfg.seed, &[RNG_STREAM, iter as u64, key]),
                };
                let resp = image_guidance(provider, &req)?;
                let g = backward(&tape, &resp.grads[0].data)?;
                Ok((key, vp.kind, g, resp.grads[0].mean_square()))
            })
            .collect();
        let mut results = match results {
            Ok(r) => r,
            Err(e) => {
                let checkpoint = match &cfg.checkpoint_dir {
                    Some(dir) => Some(
                        Stage1State {
                            sketch: sketch.clone(),
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
        results.sort_by_key(|r| r.0);

        let mut grad = vec![0.0; params.len()];
        for (_, _, g, _) in &results {
            accumulate(&mut grad, g, 1.0);
        }
        let geo = geometric_loss(&sketch)?;
        if cfg.lambda_g > 0.0 {
            accumulate(&mut grad, &geo.grads, cfg.lambda_g);
        }

        adam.update(&mut params, &grad, cfg.lr)?;
        sketch = sketch.with_flat(&params)?;

        let mut view_magnitudes: Vec<(String, f64)> = Vec::new();
        for (_, kind, _, ms) in &results {
            let name = kind.as_str();
            match view_magnitudes.iter_mut().find(|(k, _)| k == name) {
                Some((_, v)) => *v += ms,
                None => view_magnitudes.push((name.to_string(), *ms)),
            }
        }
        let row = TraceRow {
            iter,
            t,
            view_magnitudes,
            regularizer: geo.value,
        };
        if !row.is_finite() || !sketch.is_finite() {
            return Err(Error::Domain(format!("non-finite state at iteration {iter}")));
        }
        trace.push(row);

        if let Some(dir) = &cfg.checkpoint_dir {
            if (iter + 1) % cfg.checkpoint_every == 0 {
                Stage1State {
                    sketch: sketch.clone(),
                    adam: adam.clone(),
                }
                .save(dir)?;
            }
        }
    }
    Ok(Stage1Output { sketch, trace, adam })
}

fn accumulate(flat: &mut [f64], grads: &[[Point3; 4]], scale: f64) {
    for (i, curve) in grads.iter().enumerate() {
        for (j, p) in curve.iter().enumerate() {
            for c in 0..3 {
                flat[CURVE_STRIDE * i + 3 * j + c] += scale * p[c];
            }
        }
    }
}
