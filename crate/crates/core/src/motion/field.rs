//! Displacement fields and the front/side projection–reconstruction.
//!
//! A frame's displacement is flattened per plane into `2·N·4` values: entry
//! `2(4i + j)` holds the first plane coordinate of control point `j` on
//! curve `i`, entry `2(4i + j) + 1` the second. The frontal plane keeps
//! `(x, y)`, the sagittal plane `(y, z)`; reconstruction takes `x` from the
//! front, `z` from the side, and averages the two `y` estimates.

use crate::curves::{Point3, Sketch3D};
use crate::error::{Error, Result};
use crate::projection::{ortho_project, OrthoPlane};

/// Per-frame additive offsets to every control point, `K × N × 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    frames: Vec<Vec<[Point3; 4]>>,
}

impl DisplacementField {
    pub fn zeros(frames: usize, curves: usize) -> Self {
        Self {
            frames: vec![vec![[Point3::zeros(); 4]; curves]; frames],
        }
    }

    pub fn from_frames(frames: Vec<Vec<[Point3; 4]>>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Shape("displacement field needs at least one frame".into()));
        };
        let n = first.len();
        if frames.iter().any(|f| f.len() != n) {
            return Err(Error::Shape("frames disagree on curve count".into()));
        }
        Ok(Self { frames })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn curve_count(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn frame(&self, k: usize) -> &[[Point3; 4]] {
        &self.frames[k]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [[Point3; 4]] {
        &mut self.frames[k]
    }

    pub fn frames(&self) -> &[Vec<[Point3; 4]>] {
        &self.frames
    }

    /// True when frame 0 is exactly zero.
    pub fn is_anchored(&self) -> bool {
        self.frames
            .first()
            .is_none_or(|f| f.iter().flatten().all(|p| p.x == 0.0 && p.y == 0.0 && p.z == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.frames
            .iter()
            .flatten()
            .flatten()
            .all(|p| p.iter().all(|c| c.is_finite()))
    }

    /// Checks the structural invariants: finite values and a zero first frame.
    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::Format("displacement field has non-finite offsets".into()));
        }
        if !self.is_anchored() {
            return Err(Error::Format("frame 0 of a displacement field must be zero".into()));
        }
        Ok(())
    }

    /// The sketch at frame `k`. Frame 0 returns `base` untouched.
    pub fn apply(&self, base: &Sketch3D, k: usize) -> Result<Sketch3D> {
        if base.len() != self.curve_count() {
            return Err(Error::Shape(format!(
                "field for {} curves applied to a sketch of {}",
                self.curve_count(),
                base.len()
            )));
        }
        if k == 0 && self.is_anchored() {
            return Ok(base.clone());
        }
        let mut out = base.clone();
        for (curve, offsets) in out.curves.iter_mut().zip(&self.frames[k]) {
            for j in 0..4 {
                curve.control[j] += offsets[j];
            }
        }
        Ok(out)
    }
}

/// One frame of one plane, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatViewVector {
    pub plane: OrthoPlane,
    pub values: Vec<f64>,
}

impl FlatViewVector {
    pub fn zeros(plane: OrthoPlane, curves: usize) -> Self {
        Self {
            plane,
            values: vec![0.0; 8 * curves],
        }
    }

    pub fn curve_count(&self) -> usize {
        self.values.len() / 8
    }
}

/// Index of the first plane coordinate of control point `point` on `curve`.
#[inline]
pub fn flat_view_index(curve: usize, point: usize) -> usize {
    2 * (curve * 4 + point)
}

fn flatten_points<'a>(points: impl Iterator<Item = &'a [Point3; 4]>, plane: OrthoPlane) -> FlatViewVector {
    let mut values = Vec::new();
    for ctrl in points {
        for p in ctrl {
            let (a, b) = ortho_project(plane, p);
            values.push(a);
            values.push(b);
        }
    }
    FlatViewVector { plane, values }
}

/// Flattens a sketch's control points onto `plane`.
pub fn flatten_view(sketch: &Sketch3D, plane: OrthoPlane) -> FlatViewVector {
    flatten_points(sketch.curves.iter().map(|c| &c.control), plane)
}

/// Flattens frame `k` of a displacement field onto `plane`.
pub fn flatten_displacement(field: &DisplacementField, k: usize, plane: OrthoPlane) -> FlatViewVector {
    flatten_points(field.frame(k).iter(), plane)
}

/// Merges per-frame front and side displacement vectors into 3D offsets.
pub fn reconstruct_3d(front: &[FlatViewVector], side: &[FlatViewVector]) -> Result<DisplacementField> {
    if front.len() != side.len() || front.is_empty() {
        return Err(Error::Shape(format!(
            "{} front frames vs {} side frames",
            front.len(),
            side.len()
        )));
    }
    let n = front[0].curve_count();
    let mut frames = Vec::with_capacity(front.len());
    for (f, s) in front.iter().zip(side) {
        if f.plane != OrthoPlane::Frontal || s.plane != OrthoPlane::Sagittal {
            return Err(Error::Shape("expected frontal and sagittal vectors".into()));
        }
        if f.values.len() != 8 * n || s.values.len() != 8 * n {
            return Err(Error::Shape(format!(
                "flat vectors of length {} and {} for {n} curves",
                f.values.len(),
                s.values.len()
            )));
        }
        let mut frame = vec![[Point3::zeros(); 4]; n];
        for (i, ctrl) in frame.iter_mut().enumerate() {
            for (j, p) in ctrl.iter_mut().enumerate() {
                let m = flat_view_index(i, j);
                let dx = f.values[m];
                let dy = (f.values[m + 1] + s.values[m]) / 2.0;
                let dz = s.values[m + 1];
                *p = Point3::new(dx, dy, dz);
            }
        }
        frames.push(frame);
    }
    Ok(DisplacementField { frames })
}

/// Pulls a gradient on the reconstructed field back onto the front and side
/// vectors. Both `y` inputs receive half of the `y` gradient.
pub fn reconstruct_backward(grad: &DisplacementField) -> (Vec<FlatViewVector>, Vec<FlatViewVector>) {
    let n = grad.curve_count();
    let mut front = Vec::with_capacity(grad.frame_count());
    let mut side = Vec::with_capacity(grad.frame_count());
    for frame in grad.frames() {
        let mut f = FlatViewVector::zeros(OrthoPlane::Frontal, n);
        let mut s = FlatViewVector::zeros(OrthoPlane::Sagittal, n);
        for (i, ctrl) in frame.iter().enumerate() {
            for (j, g) in ctrl.iter().enumerate() {
                let m = flat_view_index(i, j);
                f.values[m] = g.x;
                f.values[m + 1] = 0.5 * g.y;
                s.values[m] = 0.5 * g.y;
                s.values[m + 1] = g.z;
            }
        }
        front.push(f);
        side.push(s);
    }
    (front, side)
}

/// `Σ_{i,j,k} ‖Δp^(k+1) − Δp^(k)‖²` and its gradient.
pub fn smoothness_loss(field: &DisplacementField) -> Result<(f64, DisplacementField)> {
    let k_frames = field.frame_count();
    if k_frames < 2 {
        return Err(Error::Shape("smoothness needs at least two frames".into()));
    }
    let mut grad = DisplacementField::zeros(k_frames, field.curve_count());
    let mut loss = 0.0;
    for k in 0..k_frames - 1 {
        for i in 0..field.curve_count() {
            for j in 0..4 {
                let d = field.frames[k + 1][i][j] - field.frames[k][i][j];
                loss += d.norm_squared();
                grad.frames[k + 1][i][j] += d * 2.0;
                grad.frames[k][i][j] -= d * 2.0;
            }
        }
    }
    Ok((loss, grad))
}

/// Motion amplitude ramp `α = 1 − exp(−β · iter / total)`.
pub fn motion_amplitude(iter: usize, total: usize, beta: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    1.0 - (-beta * iter as f64 / total as f64).exp()
}
