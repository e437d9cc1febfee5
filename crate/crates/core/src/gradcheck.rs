//! Central finite-difference checks for every hand-written backward pass.
//!
//! Each check compares an analytic gradient vector against central
//! differences and reports the worst relative error
//! `‖g_analytic − g_fd‖₂ / max(‖g_analytic‖₂, ‖g_fd‖₂)` over its cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::curves::{BezierCurve, Point3, Sketch3D, CURVE_STRIDE};
use crate::error::Result;
use crate::guidance::derive_seed;
use crate::motion::{
    reconstruct_3d, reconstruct_backward, smoothness_loss, DisplacementField, FlatViewVector, MotionModel,
};
use crate::projection::{OrthoPlane, ViewKind, Viewpoint};
use crate::rasterizer::{backward, render_view, RasterParams, ViewTape};
use crate::stage1::geometric_loss;

pub const RASTER_TOLERANCE: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const SMOOTHNESS_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_CASES: usize = 50;
/// Finite-difference step for rasterizer checks, in world units.
pub const RASTER_STEP: f64 = 1e-3;
/// Image size for rasterizer checks. At this size the step moves projected
/// points by about 0.02 px, well inside the excluded kink bands.
pub const RASTER_IMAGE_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = scale(analytic).max(scale(numeric));
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let dn = f(&probe)?;
        probe[i] = x[i];
        out.push((up - dn) / (2.0 * h));
    }
    Ok(out)
}

fn finish(name: &str, errors: Vec<f64>, tolerance: f64) -> CheckResult {
    let max_rel_err = errors.iter().copied().fold(0.0, f64::max);
    CheckResult {
        name: name.to_string(),
        cases: errors.len(),
        max_rel_err,
        tolerance,
        passed: !errors.is_empty() && max_rel_err < tolerance,
    }
}

fn random_point(rng: &mut impl Rng, r: f64) -> Point3 {
    Point3::new(
        rng.random_range(-r..r),
        rng.random_range(-r..r),
        rng.random_range(-r..r),
    )
}

fn random_sketch(rng: &mut impl Rng, curves: usize, extent: f64) -> Sketch3D {
    Sketch3D::new(
        (0..curves)
            .map(|_| {
                let a = random_point(rng, extent);
                BezierCurve::new([
                    a,
                    a + random_point(rng, 0.4),
                    a + random_point(rng, 0.4),
                    a + random_point(rng, 0.4),
                ])
            })
            .collect(),
    )
}

fn flatten_grads(grads: &[[Point3; 4]]) -> Vec<f64> {
    let mut out = vec![0.0; grads.len() * CURVE_STRIDE];
    for (i, c) in grads.iter().enumerate() {
        for (j, p) in c.iter().enumerate() {
            for k in 0..3 {
                out[CURVE_STRIDE * i + 3 * j + k] = p[k];
            }
        }
    }
    out
}

/// Upstream gradient that is zero near the two kinks of the renderer: where
/// a sample sits within `0.05σ` of the kernel edge, and where the field is
/// within 0.05 of the clamp at 1.
fn masked_upstream(rng: &mut impl Rng, tape: &ViewTape, params: &RasterParams) -> Vec<f64> {
    let size = tape.raster.width();
    let sigma = params.sigma;
    let band = 0.05 * sigma;
    let mut mask = vec![true; size * size];
    for (p, f) in tape.raster.field().iter().enumerate() {
        if (f - 1.0).abs() < 0.05 {
            mask[p] = false;
        }
    }
    let reach = sigma + band;
    for curve in &tape.curves2d {
        for s in 0..params.samples {
            let q = curve.point_at(params.sample_t(s));
            let x0 = (q.x - reach).floor().max(0.0) as usize;
            let y0 = (q.y - reach).floor().max(0.0) as usize;
            let x1 = ((q.x + reach).ceil().max(0.0) as usize).min(size);
            let y1 = ((q.y + reach).ceil().max(0.0) as usize).min(size);
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = ((x as f64 + 0.5 - q.x).powi(2) + (y as f64 + 0.5 - q.y).powi(2)).sqrt();
                    if (d - sigma).abs() < band {
                        mask[y * size + x] = false;
                    }
                }
            }
        }
    }
    mask.iter()
        .map(|&keep| if keep { rng.random_range(-1.0..1.0) } else { 0.0 })
        .collect()
}

/// Rasterizer check with an injectable backward pass, so tests can confirm
/// that a broken gradient is caught.
pub fn check_rasterizer_with(
    seed: u64,
    cases: usize,
    backward_fn: impl Fn(&ViewTape, &[f64]) -> Result<Vec<[Point3; 4]>>,
) -> Result<CheckResult> {
    let params = RasterParams::default();
    let mut errors = Vec::with_capacity(cases);
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[10, case as u64]));
        let sketch = random_sketch(&mut rng, 2, 0.5);
        let view = match case % 3 {
            0 => Viewpoint::canonical(ViewKind::CARDINAL[case / 3 % 4], RASTER_IMAGE_SIZE)?,
            1 => Viewpoint::custom(
                rng.random_range(0.0..360.0),
                rng.random_range(-60.0..60.0),
                4.0,
                40.0,
                RASTER_IMAGE_SIZE,
            )?,
            _ => Viewpoint::canonical(ViewKind::Top, RASTER_IMAGE_SIZE)?,
        };
        let (_, tape) = render_view(&sketch, &view, &params)?;
        let upstream = masked_upstream(&mut rng, &tape, &params);
        let analytic = flatten_grads(&backward_fn(&tape, &upstream)?);
        let numeric = central_diff(&sketch.to_flat(), RASTER_STEP, |x| {
            let (img, _) = render_view(&sketch.with_flat(x)?, &view, &params)?;
            Ok(img.data.iter().zip(&upstream).map(|(a, b)| a * b).sum())
        })?;
        errors.push(rel_err(&analytic, &numeric));
    }
    Ok(finish("rasterizer", errors, RASTER_TOLERANCE))
}

pub fn check_rasterizer(seed: u64, cases: usize) -> Result<CheckResult> {
    check_rasterizer_with(seed, cases, backward)
}

pub fn check_geometric_loss(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut errors = Vec::with_capacity(cases);
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[11, case as u64]));
        let sketch = random_sketch(&mut rng, 3, 0.5);
        let analytic = flatten_grads(&geometric_loss(&sketch)?.grads);
        let numeric = central_diff(&sketch.to_flat(), 1e-6, |x| {
            Ok(geometric_loss(&sketch.with_flat(x)?)?.value)
        })?;
        errors.push(rel_err(&analytic, &numeric));
    }
    Ok(finish("geometric_loss", errors, LOSS_TOLERANCE))
}

fn field_to_flat(field: &DisplacementField) -> Vec<f64> {
    field
        .frames()
        .iter()
        .flatten()
        .flatten()
        .flat_map(|p| [p.x, p.y, p.z])
        .collect()
}

fn field_from_flat(flat: &[f64], frames: usize, curves: usize) -> Result<DisplacementField> {
    let mut it = flat.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2]));
    let data = (0..frames)
        .map(|_| {
            (0..curves)
                .map(|_| [(); 4].map(|_| it.next().expect("flat field length")))
                .collect()
        })
        .collect();
    DisplacementField::from_frames(data)
}

pub fn check_smoothness(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut errors = Vec::with_capacity(cases);
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[12, case as u64]));
        let (k, n) = (rng.random_range(2..6), rng.random_range(1..4));
        let flat: Vec<f64> = (0..k * n * 12).map(|_| rng.random_range(-0.5..0.5)).collect();
        let field = field_from_flat(&flat, k, n)?;
        let analytic = field_to_flat(&smoothness_loss(&field)?.1);
        let numeric = central_diff(&flat, 1e-5, |x| Ok(smoothness_loss(&field_from_flat(x, k, n)?)?.0))?;
        errors.push(rel_err(&analytic, &numeric));
    }
    Ok(finish("smoothness_loss", errors, SMOOTHNESS_TOLERANCE))
}

pub fn check_motion_model(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut errors = Vec::with_capacity(cases);
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[13, case as u64]));
        let n = 1 + case % 2;
        let mut model = MotionModel::new(n, 8, rng.random());
        // give the zero-initialized output layer weights so every path is exercised
        for w in model.params_mut().iter_mut() {
            if *w == 0.0 {
                *w = rng.random_range(-0.3..0.3);
            }
        }
        let plane = OrthoPlane::BOTH[case % 2];
        let base = FlatViewVector {
            plane,
            values: (0..8 * n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let frames = 4;
        let k = 1 + case % 3;
        let upstream: Vec<f64> = (0..8 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = model.forward(&base, k, frames)?;
        let mut analytic = vec![0.0; model.param_count()];
        model.backward(&cache, &upstream, &mut analytic)?;
        let params = model.params().to_vec();
        let mut probe = model.clone();
        let numeric = central_diff(&params, 1e-6, |x| {
            probe.params_mut().copy_from_slice(x);
            let (out, _) = probe.forward(&base, k, frames)?;
            Ok(out.values.iter().zip(&upstream).map(|(a, b)| a * b).sum())
        })?;
        errors.push(rel_err(&analytic, &numeric));
    }
    Ok(finish("motion_model", errors, LOSS_TOLERANCE))
}

/// Half-weighted `y` paths through reconstruction, on one-curve fields
/// under a squared-error loss.
pub fn check_reconstruction(seed: u64, cases: usize) -> Result<CheckResult> {
    let mut errors = Vec::with_capacity(cases);
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[14, case as u64]));
        let frames = 2;
        let len = 8;
        let inputs: Vec<f64> = (0..2 * frames * len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..frames * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let split = |x: &[f64]| -> (Vec<FlatViewVector>, Vec<FlatViewVector>) {
            let vecs = |plane: OrthoPlane, off: usize| -> Vec<FlatViewVector> {
                (0..frames)
                    .map(|k| FlatViewVector {
                        plane,
                        values: x[off + k * len..off + (k + 1) * len].to_vec(),
                    })
                    .collect()
            };
            (vecs(OrthoPlane::Frontal, 0), vecs(OrthoPlane::Sagittal, frames * len))
        };
        let loss = |x: &[f64]| -> Result<(f64, DisplacementField)> {
            let (f, s) = split(x);
            let field = reconstruct_3d(&f, &s)?;
            let flat = field_to_flat(&field);
            let resid: Vec<f64> = flat.iter().zip(&target).map(|(a, b)| a - b).collect();
            let value = 0.5 * resid.iter().map(|r| r * r).sum::<f64>();
            Ok((value, field_from_flat(&resid, frames, 1)?))
        };
        let (_, grad_field) = loss(&inputs)?;
        let (gf, gs) = reconstruct_backward(&grad_field);
        let analytic: Vec<f64> = gf.iter().chain(&gs).flat_map(|v| v.values.clone()).collect();
        let numeric = central_diff(&inputs, 1e-6, |x| Ok(loss(x)?.0))?;
        errors.push(rel_err(&analytic, &numeric));
    }
    Ok(finish("reconstruction", errors, LOSS_TOLERANCE))
}

/// Runs every check with `cases` cases each.
pub fn run_all(seed: u64, cases: usize) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        seed,
        checks: vec![
            check_rasterizer(seed, cases)?,
            check_geometric_loss(seed, cases)?,
            check_smoothness(seed, cases)?,
            check_motion_model(seed, cases)?,
            check_reconstruction(seed, cases)?,
        ],
    })
}
