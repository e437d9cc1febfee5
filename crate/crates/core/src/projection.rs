//! Cameras that map world points into pixel space.
//!
//! Perspective [`Viewpoint`]s orbit the origin with y up; azimuth 0 looks down
//! −z from +z. Pixel `u` grows to the right and `v` grows downward, with the
//! principal point at `(W/2, H/2)`. [`OrthoCamera`] is the coordinate-drop
//! projection used for animation frames.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};

use crate::curves::{BezierCurve, Point3};
use crate::error::{Error, Result};

pub type Point2 = Vector2<f64>;

pub const DEFAULT_DISTANCE: f64 = 4.0;
pub const DEFAULT_FOV: f64 = 40.0;
pub const DEFAULT_IMAGE_SIZE: usize = 512;
/// Elevation of the top view; 90° would make the up vector singular.
pub const TOP_ELEVATION: f64 = 89.0;

const NEAR_PLANE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Front,
    Back,
    Left,
    Right,
    Top,
    Custom,
}

impl ViewKind {
    pub const CARDINAL: [ViewKind; 4] = [ViewKind::Front, ViewKind::Back, ViewKind::Left, ViewKind::Right];

    /// Fixed `(azimuth, elevation)` in degrees, `None` for custom views.
    pub fn angles(self) -> Option<(f64, f64)> {
        match self {
            ViewKind::Front => Some((0.0, 0.0)),
            ViewKind::Right => Some((90.0, 0.0)),
            ViewKind::Back => Some((180.0, 0.0)),
            ViewKind::Left => Some((270.0, 0.0)),
            ViewKind::Top => Some((0.0, TOP_ELEVATION)),
            ViewKind::Custom => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Front => "front",
            ViewKind::Back => "back",
            ViewKind::Left => "left",
            ViewKind::Right => "right",
            ViewKind::Top => "top",
            ViewKind::Custom => "custom",
        }
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(ViewKind::Front),
            "back" => Ok(ViewKind::Back),
            "left" => Ok(ViewKind::Left),
            "right" => Ok(ViewKind::Right),
            "top" => Ok(ViewKind::Top),
            "custom" => Ok(ViewKind::Custom),
            other => Err(Error::config("view", format!("unknown view '{other}'"))),
        }
    }
}

/// Sine and cosine of an angle in degrees, exact at multiples of 90°.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        r.to_radians().sin_cos()
    }
}

// Written out so the summation order is fixed.
#[inline]
fn dot(a: &Point3, b: &Point3) -> f64 {
    a.x * b.x + a.y * b.y + a.z * b.z
}

/// Something that maps world points into an image.
pub trait Camera: Sync {
    fn image_size(&self) -> usize;

    /// Pixel position of `p` and the Jacobian `∂(u, v)/∂p`.
    fn project_with_jacobian(&self, p: &Point3) -> Result<(Point2, Matrix2x3<f64>)>;

    fn project(&self, p: &Point3) -> Result<Point2> {
        self.project_with_jacobian(p).map(|(uv, _)| uv)
    }

    /// Distance along the viewing direction; larger is farther.
    fn depth(&self, p: &Point3) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub kind: ViewKind,
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub fov: f64,
    pub image_size: usize,
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    eye: Point3,
    right: Point3,
    up: Point3,
    forward: Point3,
    focal: f64,
    center: f64,
}

impl Viewpoint {
    /// A canonical view at the default distance and field of view.
    pub fn canonical(kind: ViewKind, image_size: usize) -> Result<Self> {
        let (azimuth, elevation) = kind
            .angles()
            .ok_or_else(|| Error::config("view", "custom views need explicit angles"))?;
        Self {
            kind,
            azimuth,
            elevation,
            distance: DEFAULT_DISTANCE,
            fov: DEFAULT_FOV,
            image_size,
        }
        .validated()
    }

    pub fn custom(azimuth: f64, elevation: f64, distance: f64, fov: f64, image_size: usize) -> Result<Self> {
        Self {
            kind: ViewKind::Custom,
            azimuth,
            elevation,
            distance,
            fov,
            image_size,
        }
        .validated()
    }

    pub fn with_distance(mut self, distance: f64) -> Result<Self> {
        self.distance = distance;
        self.validated()
    }

    pub fn with_fov(mut self, fov: f64) -> Result<Self> {
        self.fov = fov;
        self.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.distance > 0.0 && self.distance.is_finite()) {
            return Err(Error::config("distance", "must be positive and finite"));
        }
        if !(self.fov > 0.0 && self.fov < 120.0) {
            return Err(Error::config("fov", "must lie in (0, 120) degrees"));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size", "must be positive"));
        }
        if !(self.azimuth.is_finite() && self.elevation.is_finite()) || self.elevation.abs() >= 90.0 {
            return Err(Error::config(
                "elevation",
                "must be finite and strictly inside (-90, 90)",
            ));
        }
        if let Some((az, el)) = self.kind.angles() {
            if az != self.azimuth || el != self.elevation {
                return Err(Error::config("view", format!("{} view has fixed angles", self.kind)));
            }
        }
        Ok(self)
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.image_size as f64 / (0.5 * self.fov).to_radians().tan()
    }

    fn frame(&self) -> Frame {
        let (sa, ca) = sin_cos_deg(self.azimuth);
        let (se, ce) = sin_cos_deg(self.elevation);
        let eye = Point3::new(sa * ce, se, ca * ce) * self.distance;
        let forward = -eye / eye.norm();
        let world_up = Point3::new(0.0, 1.0, 0.0);
        let right = forward.cross(&world_up);
        let right = right / right.norm();
        let up = right.cross(&forward);
        Frame {
            eye,
            right,
            up,
            forward,
            focal: self.focal(),
            center: 0.5 * self.image_size as f64,
        }
    }
}

impl Camera for Viewpoint {
    fn image_size(&self) -> usize {
        self.image_size
    }

    fn project_with_jacobian(&self, p: &Point3) -> Result<(Point2, Matrix2x3<f64>)> {
        let fr = self.frame();
        let rel = p - fr.eye;
        let xc = dot(&fr.right, &rel);
        let yc = dot(&fr.up, &rel);
        let zc = dot(&fr.forward, &rel);
        if !(zc > NEAR_PLANE) {
            return Err(Error::Projection(format!(
                "point ({}, {}, {}) is not in front of the {} camera",
                p.x, p.y, p.z, self.kind
            )));
        }
        let inv = 1.0 / zc;
        let uv = Point2::new(fr.center + fr.focal * xc * inv, fr.center - fr.focal * yc * inv);
        let du = (fr.right - fr.forward * (xc * inv)) * (fr.focal * inv);
        let dv = (fr.up - fr.forward * (yc * inv)) * (-fr.focal * inv);
        let jac = Matrix2x3::new(du.x, du.y, du.z, dv.x, dv.y, dv.z);
        Ok((uv, jac))
    }

    fn depth(&self, p: &Point3) -> f64 {
        let fr = self.frame();
        dot(&fr.forward, &(p - fr.eye))
    }
}

/// 2D cubic Bézier in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bezier2D {
    pub control: [Point2; 4],
}

impl Bezier2D {
    pub fn new(control: [Point2; 4]) -> Self {
        Self { control }
    }

    #[inline]
    pub fn point_at(&self, t: f64) -> Point2 {
        let b = crate::curves::bernstein(t);
        self.control[0] * b[0] + self.control[1] * b[1] + self.control[2] * b[2] + self.control[3] * b[3]
    }

    pub fn is_finite(&self) -> bool {
        self.control.iter().all(|p| p.x.is_finite() && p.y.is_finite())
    }
}

pub fn project_point(camera: &impl Camera, p: &Point3) -> Result<Point2> {
    camera.project(p)
}

/// Projects the control points; under perspective this approximates the
/// true (rational) image of the curve, and is exact for affine cameras.
pub fn project_curve(camera: &impl Camera, curve: &BezierCurve) -> Result<Bezier2D> {
    Ok(Bezier2D::new([
        camera.project(&curve.control[0])?,
        camera.project(&curve.control[1])?,
        camera.project(&curve.control[2])?,
        camera.project(&curve.control[3])?,
    ]))
}

/// Largest pixel distance between the projected-control-point curve and the
/// projection of the true curve, over `samples` uniform parameters.
pub fn curve_approximation_error(camera: &impl Camera, curve: &BezierCurve, samples: usize) -> Result<f64> {
    let approx = project_curve(camera, curve)?;
    let n = samples.max(2);
    let mut worst: f64 = 0.0;
    for s in 0..n {
        let t = s as f64 / (n - 1) as f64;
        let exact = camera.project(&curve.point_at(t))?;
        worst = worst.max((approx.point_at(t) - exact).norm());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthoPlane {
    /// Keeps `(x, y)`.
    Frontal,
    /// Keeps `(y, z)`.
    Sagittal,
}

impl OrthoPlane {
    pub const BOTH: [OrthoPlane; 2] = [OrthoPlane::Frontal, OrthoPlane::Sagittal];

    pub fn as_str(self) -> &'static str {
        match self {
            OrthoPlane::Frontal => "front",
            OrthoPlane::Sagittal => "side",
        }
    }

    /// View tag used when asking a guidance provider about this plane. The
    /// sagittal image is drawn as seen from +x, like the `right` view.
    pub fn view_tag(self) -> ViewKind {
        match self {
            OrthoPlane::Frontal => ViewKind::Front,
            OrthoPlane::Sagittal => ViewKind::Right,
        }
    }
}

impl FromStr for OrthoPlane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frontal" | "front" => Ok(OrthoPlane::Frontal),
            "sagittal" | "side" => Ok(OrthoPlane::Sagittal),
            other => Err(Error::config("plane", format!("unknown plane '{other}'"))),
        }
    }
}

/// Coordinate drop onto a plane: frontal → `(x, y)`, sagittal → `(y, z)`.
pub fn ortho_project(plane: OrthoPlane, p: &Point3) -> (f64, f64) {
    match plane {
        OrthoPlane::Frontal => (p.x, p.y),
        OrthoPlane::Sagittal => (p.y, p.z),
    }
}

/// Orthographic camera mapping world `[-half_extent, half_extent]²` of a
/// plane onto the whole image, y up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthoCamera {
    pub plane: OrthoPlane,
    pub image_size: usize,
    pub half_extent: f64,
}

impl OrthoCamera {
    pub fn new(plane: OrthoPlane, image_size: usize) -> Self {
        Self {
            plane,
            image_size,
            half_extent: 1.0,
        }
    }
}

impl Camera for OrthoCamera {
    fn image_size(&self) -> usize {
        self.image_size
    }

    fn project_with_jacobian(&self, p: &Point3) -> Result<(Point2, Matrix2x3<f64>)> {
        let scale = 0.5 * self.image_size as f64 / self.half_extent;
        let c = 0.5 * self.image_size as f64;
        let (a, b) = ortho_project(self.plane, p);
        Ok(match self.plane {
            // u from x, v from -y
            OrthoPlane::Frontal => (
                Point2::new(c + scale * a, c - scale * b),
                Matrix2x3::new(scale, 0.0, 0.0, 0.0, -scale, 0.0),
            ),
            // u from -z, v from -y (viewed from +x)
            OrthoPlane::Sagittal => (
                Point2::new(c - scale * b, c - scale * a),
                Matrix2x3::new(0.0, 0.0, -scale, 0.0, -scale, 0.0),
            ),
        })
    }

    fn depth(&self, p: &Point3) -> f64 {
        match self.plane {
            OrthoPlane::Frontal => -p.z,
            OrthoPlane::Sagittal => -p.x,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn front(size: usize) -> Viewpoint {
        Viewpoint::canonical(ViewKind::Front, size).unwrap()
    }

    #[test]
    fn origin_projects_to_center() {
        for fov in [10.0, 40.0, 90.0] {
            let vp = front(512).with_fov(fov).unwrap();
            let uv = project_point(&vp, &Point3::zeros()).unwrap();
            assert_eq!(uv, Point2::new(256.0, 256.0));
        }
    }

    #[test]
    fn pinhole_formula_by_hand() {
        let vp = front(512);
        let uv = project_point(&vp, &Point3::new(0.5, 0.0, 0.0)).unwrap();
        let expected = 256.0 + 256.0 * (0.5 / 4.0) / 20f64.to_radians().tan();
        assert_relative_eq!(uv.x, expected, epsilon = 1e-10);
        assert_relative_eq!(uv.y, 256.0, epsilon = 1e-12);
    }

    #[test]
    fn back_view_mirrors_front() {
        let f = front(512);
        let b = Viewpoint::canonical(ViewKind::Back, 512).unwrap();
        let p = Point3::new(0.3, -0.4, 0.2);
        let mirrored = Point3::new(p.x, p.y, -p.z);
        let a = project_point(&f, &p).unwrap();
        let c = project_point(&b, &mirrored).unwrap();
        assert_relative_eq!(a.x, 512.0 - c.x, epsilon = 1e-9);
        assert_relative_eq!(a.y, c.y, epsilon = 1e-9);
    }

    #[test]
    fn right_view_equals_rotated_front_exactly() {
        let f = front(512);
        let r = Viewpoint::canonical(ViewKind::Right, 512).unwrap();
        for p in [
            Point3::new(0.3, -0.4, 0.2),
            Point3::new(-0.9, 0.1, 0.35),
            Point3::new(0.0, 0.7, -0.6),
        ] {
            // rotation by -90° about y
            let rotated = Point3::new(-p.z, p.y, p.x);
            assert_eq!(project_point(&r, &p).unwrap(), project_point(&f, &rotated).unwrap());
        }
    }

    #[test]
    fn behind_camera_is_an_error() {
        let vp = front(64);
        assert!(matches!(
            project_point(&vp, &Point3::new(0.0, 0.0, 4.0)),
            Err(Error::Projection(_))
        ));
        assert!(matches!(
            project_point(&vp, &Point3::new(0.0, 0.0, 5.0)),
            Err(Error::Projection(_))
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let h = 1e-6;
        for kind in [ViewKind::Front, ViewKind::Left, ViewKind::Top] {
            let vp = Viewpoint::canonical(kind, 256).unwrap();
            let p = Point3::new(0.2, -0.3, 0.4);
            let (_, jac) = vp.project_with_jacobian(&p).unwrap();
            for k in 0..3 {
                let mut e = Point3::zeros();
                e[k] = h;
                let fd = (vp.project(&(p + e)).unwrap() - vp.project(&(p - e)).unwrap()) / (2.0 * h);
                assert_relative_eq!(jac[(0, k)], fd.x, epsilon = 1e-5, max_relative = 1e-6);
                assert_relative_eq!(jac[(1, k)], fd.y, epsilon = 1e-5, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn axis_curve_degenerates_to_center() {
        let vp = front(512);
        let c = BezierCurve::new([
            Point3::new(0.0, 0.0, -0.5),
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.0, 0.0, 0.2),
            Point3::new(0.0, 0.0, 0.9),
        ]);
        let b = project_curve(&vp, &c).unwrap();
        for p in b.control {
            assert_eq!(p, Point2::new(256.0, 256.0));
        }
    }

    #[test]
    fn approximation_error_shrinks_with_distance() {
        let c = BezierCurve::new([
            Point3::new(-0.6, 0.2, 0.5),
            Point3::new(0.1, 0.8, -0.4),
            Point3::new(0.4, -0.5, 0.6),
            Point3::new(0.7, 0.1, -0.3),
        ]);
        let mut prev = f64::INFINITY;
        for d in [4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0] {
            let vp = front(512).with_distance(d).unwrap();
            let e = curve_approximation_error(&vp, &c, 1001).unwrap();
            assert!(e < prev, "error {e} at distance {d} not below {prev}");
            prev = e;
        }
    }

    #[test]
    fn orthographic_approximation_is_exact() {
        let c = BezierCurve::new([
            Point3::new(-0.6, 0.2, 0.5),
            Point3::new(0.1, 0.8, -0.4),
            Point3::new(0.4, -0.5, 0.6),
            Point3::new(0.7, 0.1, -0.3),
        ]);
        for plane in OrthoPlane::BOTH {
            let cam = OrthoCamera::new(plane, 256);
            assert!(curve_approximation_error(&cam, &c, 257).unwrap() < 1e-12);
        }
    }

    #[test]
    fn coordinate_drops() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(ortho_project(OrthoPlane::Frontal, &p), (1.0, 2.0));
        assert_eq!(ortho_project(OrthoPlane::Sagittal, &p), (2.0, 3.0));
        assert_eq!(
            ortho_project(OrthoPlane::Frontal, &p).1,
            ortho_project(OrthoPlane::Sagittal, &p).0
        );
    }

    #[test]
    fn invalid_viewpoints_rejected() {
        assert!(Viewpoint::custom(0.0, 0.0, 0.0, 40.0, 64).is_err());
        assert!(Viewpoint::custom(0.0, 0.0, 4.0, 120.0, 64).is_err());
        assert!(Viewpoint::custom(0.0, 0.0, 4.0, 0.0, 64).is_err());
        assert!(Viewpoint::custom(30.0, 20.0, 4.0, 40.0, 64).is_ok());
    }
}
