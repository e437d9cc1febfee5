//! 3D cubic Bézier sketches: representation, seeded initialization, and the
//! flat parameter layout shared by the optimizers.
//!
//! The flat layout is curve-major, then control-point index, then `(x, y, z)`,
//! so coordinate `c` of control point `j` on curve `i` lives at `12 i + 3 j + c`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Default number of curves in a fresh sketch.
pub const DEFAULT_CURVES: usize = 16;
/// Radius of the ball the first control point of every curve is drawn from.
pub const DEFAULT_INIT_RADIUS: f64 = 0.2;
pub const DEFAULT_MIN_STEP: f64 = 0.001;
pub const DEFAULT_MAX_STEP: f64 = 0.01;

/// Scalars per curve in the flat parameter vector.
pub const CURVE_STRIDE: usize = 12;

/// Cubic Bernstein basis at `t`.
#[inline]
pub fn bernstein(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BezierCurve {
    pub control: [Point3; 4],
}

impl BezierCurve {
    pub fn new(control: [Point3; 4]) -> Self {
        Self { control }
    }

    pub fn is_finite(&self) -> bool {
        self.control.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    /// Evaluates the curve without the domain check; `t` is used as given.
    #[inline]
    pub fn point_at(&self, t: f64) -> Point3 {
        let b = bernstein(t);
        self.control[0] * b[0] + self.control[1] * b[1] + self.control[2] * b[2] + self.control[3] * b[3]
    }

    pub fn map_points(&self, mut f: impl FnMut(&Point3) -> Point3) -> Self {
        Self {
            control: [
                f(&self.control[0]),
                f(&self.control[1]),
                f(&self.control[2]),
                f(&self.control[3]),
            ],
        }
    }
}

/// Point on `curve` at parameter `t ∈ [0, 1]`.
pub fn evaluate(curve: &BezierCurve, t: f64) -> Result<Point3> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("curve parameter {t} outside [0, 1]")));
    }
    Ok(curve.point_at(t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sketch3D {
    pub curves: Vec<BezierCurve>,
    pub prompt: String,
    pub seed: u64,
}

impl Sketch3D {
    pub fn new(curves: Vec<BezierCurve>) -> Self {
        Self {
            curves,
            prompt: String::new(),
            seed: 0,
        }
    }

    pub fn with_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.prompt = prompt.into();
        self
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.curves.iter().all(BezierCurve::is_finite)
    }

    /// Flat parameter vector in curve-major, point, coordinate order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.curves.len() * CURVE_STRIDE);
        for curve in &self.curves {
            for p in &curve.control {
                out.extend_from_slice(&[p.x, p.y, p.z]);
            }
        }
        out
    }

    /// Rebuilds the curves from a flat vector, keeping this sketch's metadata.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut out = from_flat_parameters(flat)?;
        out.prompt = self.prompt.clone();
        out.seed = self.seed;
        Ok(out)
    }

    pub fn translated(&self, offset: Point3) -> Self {
        let curves = self.curves.iter().map(|c| c.map_points(|p| p + offset)).collect();
        Self {
            curves,
            prompt: self.prompt.clone(),
            seed: self.seed,
        }
    }
}

pub fn as_flat_parameters(sketch: &Sketch3D) -> Vec<f64> {
    sketch.to_flat()
}

pub fn from_flat_parameters(flat: &[f64]) -> Result<Sketch3D> {
    if flat.is_empty() || !flat.len().is_multiple_of(CURVE_STRIDE) {
        return Err(Error::Shape(format!(
            "flat parameter vector of length {} is not a positive multiple of {CURVE_STRIDE}",
            flat.len()
        )));
    }
    let curves = flat
        .chunks_exact(CURVE_STRIDE)
        .map(|c| {
            BezierCurve::new([
                Point3::new(c[0], c[1], c[2]),
                Point3::new(c[3], c[4], c[5]),
                Point3::new(c[6], c[7], c[8]),
                Point3::new(c[9], c[10], c[11]),
            ])
        })
        .collect();
    Ok(Sketch3D::new(curves))
}

/// Index of coordinate `coord` (0 = x) of control point `point` on curve `curve`.
#[inline]
pub fn flat_index(curve: usize, point: usize, coord: usize) -> usize {
    CURVE_STRIDE * curve + 3 * point + coord
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v = Point3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Random sketch of `n_curves` short curves clustered near the origin.
///
/// Each curve starts uniformly inside the ball of `radius`; every further
/// control point is the previous one plus an isotropic step whose length is
/// uniform in `[min_step, max_step]`.
pub fn init_sketch(n_curves: usize, seed: u64, radius: f64, min_step: f64, max_step: f64) -> Result<Sketch3D> {
    if n_curves == 0 {
        return Err(Error::config("n_curves", "must be at least 1"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::config("radius", "must be positive and finite"));
    }
    if !(min_step > 0.0) {
        return Err(Error::config("min_step", "must be positive"));
    }
    if min_step > max_step || !max_step.is_finite() {
        return Err(Error::config("max_step", "must be finite and >= min_step"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curves = Vec::with_capacity(n_curves);
    for _ in 0..n_curves {
        // cube root keeps the start point uniform in volume
        let r = radius * rng.random::<f64>().cbrt();
        let p0 = unit_direction(&mut rng) * r;
        let mut control = [p0; 4];
        for j in 1..4 {
            let step = rng.random_range(min_step..=max_step);
            control[j] = control[j - 1] + unit_direction(&mut rng) * step;
        }
        curves.push(BezierCurve::new(control));
    }
    Ok(Sketch3D {
        curves,
        prompt: String::new(),
        seed,
    })
}

pub fn default_init(seed: u64) -> Result<Sketch3D> {
    init_sketch(
        DEFAULT_CURVES,
        seed,
        DEFAULT_INIT_RADIUS,
        DEFAULT_MIN_STEP,
        DEFAULT_MAX_STEP,
    )
}
