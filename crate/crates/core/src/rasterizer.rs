//! Differentiable distance-field rasterization of projected Bézier curves.
//!
//! Every curve contributes `(1/S) Σ_s w(‖pixel − c(t_s)‖)` to a per-pixel
//! stroke field `F`, with `t_s = s/(S−1)` and the compact kernel
//! `w(d) = max(0, 1 − d²/σ²)²`. The displayed intensity is `1 − min(F, 1)`,
//! black strokes on white. Pixel `(x, y)` is sampled at its center
//! `(x + 0.5, y + 0.5)`.
//!
//! The forward pass records every (pixel, sample) pair with `d < σ` in a
//! [`RasterTape`], which is all the backward pass needs.

use nalgebra::Matrix2x3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{bernstein, Point3, Sketch3D};
use crate::error::{Error, Result};
use crate::projection::{Bezier2D, Camera, Point2};

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_SAMPLES: usize = 32;
pub const MIN_SAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterParams {
    /// Kernel radius in pixels.
    pub sigma: f64,
    /// Quadrature samples per curve.
    pub samples: usize,
}

impl Default for RasterParams {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            samples: DEFAULT_SAMPLES,
        }
    }
}

impl RasterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", "must be positive and finite"));
        }
        if self.samples < MIN_SAMPLES {
            return Err(Error::config("samples", format!("must be at least {MIN_SAMPLES}")));
        }
        Ok(())
    }

    #[inline]
    pub fn sample_t(&self, s: usize) -> f64 {
        s as f64 / (self.samples - 1) as f64
    }
}

/// Stroke kernel `max(0, 1 − d²/σ²)²`.
#[inline]
pub fn kernel(d: f64, sigma: f64) -> f64 {
    let r = 1.0 - d * d / (sigma * sigma);
    if r > 0.0 {
        r * r
    } else {
        0.0
    }
}

/// `dw/dd = −4 d (1 − d²/σ²) / σ²` inside the support, 0 outside.
#[inline]
pub fn kernel_derivative(d: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    if d < sigma {
        -4.0 * d * (1.0 - d * d / s2) / s2
    } else {
        0.0
    }
}

/// Grayscale intensity image; 1 is white background, 0 full black.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RasterImage {
    pub fn white(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &RasterImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Mean squared difference to `other`.
    pub fn mse(&self, other: &RasterImage) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sum / self.data.len() as f64)
    }

    /// 8-bit quantization used by PNG export.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// One quadrature sample that landed inside the kernel support of a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapeEntry {
    pub curve: u32,
    pub sample: u32,
    pub point: Point2,
    pub dist: f64,
}

/// Backward-pass cache: per-pixel lists of contributing samples plus the
/// unclamped stroke field.
#[derive(Debug, Clone)]
pub struct RasterTape {
    width: usize,
    height: usize,
    params: RasterParams,
    curves: usize,
    field: Vec<f64>,
    offsets: Vec<usize>,
    entries: Vec<TapeEntry>,
}

impl RasterTape {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn params(&self) -> RasterParams {
        self.params
    }

    pub fn curve_count(&self) -> usize {
        self.curves
    }

    /// Unclamped stroke field `F`, row-major.
    pub fn field(&self) -> &[f64] {
        &self.field
    }

    pub fn entries_at(&self, x: usize, y: usize) -> &[TapeEntry] {
        let p = y * self.width + x;
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    fn row_entries(&self, y: usize) -> (usize, &[TapeEntry]) {
        let start = y * self.width;
        let lo = self.offsets[start];
        let hi = self.offsets[start + self.width];
        (lo, &self.entries[lo..hi])
    }
}

struct CurveSamples {
    points: Vec<Point2>,
    // inflated bounding box rows [ymin, ymax]
    ymin: f64,
    ymax: f64,
}

fn sample_curves(curves: &[Bezier2D], params: &RasterParams) -> Result<Vec<CurveSamples>> {
    curves
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if !c.is_finite() {
                return Err(Error::Render(format!("curve {i} has non-finite control points")));
            }
            let points: Vec<Point2> = (0..params.samples).map(|s| c.point_at(params.sample_t(s))).collect();
            let (ymin, ymax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.y), hi.max(p.y))
            });
            Ok(CurveSamples {
                points,
                ymin: ymin - params.sigma,
                ymax: ymax + params.sigma,
            })
        })
        .collect()
}

/// Renders `curves2d` into a `width × height` image.
pub fn rasterize_sized(
    curves2d: &[Bezier2D],
    width: usize,
    height: usize,
    params: &RasterParams,
) -> Result<(RasterImage, RasterTape)> {
    params.validate()?;
    let sampled = sample_curves(curves2d, params)?;
    let sigma = params.sigma;
    let s2 = sigma * sigma;
    let inv_s = 1.0 / params.samples as f64;

    let rows: Vec<(Vec<f64>, Vec<usize>, Vec<TapeEntry>)> = (0..height)
        .into_par_iter()
        .map(|y| {
            let yc = y as f64 + 0.5;
            let mut hits: Vec<(usize, TapeEntry)> = Vec::new();
            for (ci, cs) in sampled.iter().enumerate() {
                if yc <= cs.ymin || yc >= cs.ymax {
                    continue;
                }
                for (si, q) in cs.points.iter().enumerate() {
                    let dy = yc - q.y;
                    if dy.abs() >= sigma {
                        continue;
                    }
                    let x_lo = (q.x - sigma - 0.5).ceil().max(0.0);
                    let x_hi = (q.x + sigma - 0.5).floor().min(width as f64 - 1.0);
                    if x_hi < x_lo {
                        continue;
                    }
                    for x in x_lo as usize..=x_hi as usize {
                        let dx = x as f64 + 0.5 - q.x;
                        let d2 = dx * dx + dy * dy;
                        if d2 < s2 {
                            hits.push((
                                x,
                                TapeEntry {
                                    curve: ci as u32,
                                    sample: si as u32,
                                    point: *q,
                                    dist: d2.sqrt(),
                                },
                            ));
                        }
                    }
                }
            }
            // stable: keeps (curve, sample) order within a pixel
            hits.sort_by_key(|(x, _)| *x);
            let mut field = vec![0.0; width];
            let mut counts = vec![0usize; width];
            for (x, e) in &hits {
                let r = 1.0 - e.dist * e.dist / s2;
                field[*x] += inv_s * r * r;
                counts[*x] += 1;
            }
            (field, counts, hits.into_iter().map(|(_, e)| e).collect())
        })
        .collect();

    let mut field = Vec::with_capacity(width * height);
    let mut offsets = Vec::with_capacity(width * height + 1);
    let mut entries = Vec::new();
    offsets.push(0);
    for (row_field, counts, row_entries) in rows {
        field.extend_from_slice(&row_field);
        for c in counts {
            let last = *offsets.last().unwrap();
            offsets.push(last + c);
        }
        entries.extend(row_entries);
    }
    let image = RasterImage {
        width,
        height,
        data: field.iter().map(|f| 1.0 - f.min(1.0)).collect(),
    };
    let tape = RasterTape {
        width,
        height,
        params: *params,
        curves: curves2d.len(),
        field,
        offsets,
        entries,
    };
    Ok((image, tape))
}

/// Square-image convenience wrapper around [`rasterize_sized`].
pub fn rasterize(curves2d: &[Bezier2D], image_size: usize, params: &RasterParams) -> Result<(RasterImage, RasterTape)> {
    rasterize_sized(curves2d, image_size, image_size, params)
}

/// Gradient of `Σ grad_image ⊙ intensity` with respect to each curve's 2D
/// control points. Clamped pixels (`F ≥ 1`) pass no gradient.
pub fn backward_2d(tape: &RasterTape, grad_image: &[f64]) -> Result<Vec<[Point2; 4]>> {
    if grad_image.len() != tape.width * tape.height {
        return Err(Error::Shape(format!(
            "gradient image has {} values, tape is {}x{}",
            grad_image.len(),
            tape.width,
            tape.height
        )));
    }
    let params = tape.params;
    let s2 = params.sigma * params.sigma;
    let scale = 4.0 / (params.samples as f64 * s2);
    let ncurves = tape.curves;
    let basis: Vec<[f64; 4]> = (0..params.samples).map(|s| bernstein(params.sample_t(s))).collect();

    let partials: Vec<Option<Vec<[Point2; 4]>>> = (0..tape.height)
        .into_par_iter()
        .map(|y| {
            let (base, row) = tape.row_entries(y);
            if row.is_empty() {
                return None;
            }
            let mut acc = vec![[Point2::zeros(); 4]; ncurves];
            let mut idx = base;
            let row_start = y * tape.width;
            for x in 0..tape.width {
                let p = row_start + x;
                let end = tape.offsets[p + 1];
                let g = grad_image[p];
                if g != 0.0 && tape.field[p] < 1.0 {
                    let pix = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                    for e in &tape.entries[idx..end] {
                        let r = 1.0 - e.dist * e.dist / s2;
                        // intensity = 1 − F, hence the leading minus
                        let dq = (pix - e.point) * (-g * scale * r);
                        let b = basis[e.sample as usize];
                        let slot = &mut acc[e.curve as usize];
                        for j in 0..4 {
                            slot[j] += dq * b[j];
                        }
                    }
                }
                idx = end;
            }
            Some(acc)
        })
        .collect();

    let mut grads = vec![[Point2::zeros(); 4]; ncurves];
    for partial in partials.into_iter().flatten() {
        for (g, p) in grads.iter_mut().zip(partial) {
            for j in 0..4 {
                g[j] += p[j];
            }
        }
    }
    Ok(grads)
}

/// Tape of a full 3D render: the raster tape plus each control point's
/// projection Jacobian.
#[derive(Debug, Clone)]
pub struct ViewTape {
    pub raster: RasterTape,
    pub curves2d: Vec<Bezier2D>,
    jacobians: Vec<[Matrix2x3<f64>; 4]>,
}

/// Projects every curve through `camera` and rasterizes the result.
pub fn render_view(sketch: &Sketch3D, camera: &impl Camera, params: &RasterParams) -> Result<(RasterImage, ViewTape)> {
    if !sketch.is_finite() {
        return Err(Error::Render("sketch has non-finite control points".into()));
    }
    let mut curves2d = Vec::with_capacity(sketch.len());
    let mut jacobians = Vec::with_capacity(sketch.len());
    for curve in &sketch.curves {
        let mut pts = [Point2::zeros(); 4];
        let mut jac = [Matrix2x3::zeros(); 4];
        for j in 0..4 {
            let (uv, jj) = camera.project_with_jacobian(&curve.control[j])?;
            pts[j] = uv;
            jac[j] = jj;
        }
        curves2d.push(Bezier2D::new(pts));
        jacobians.push(jac);
    }
    let size = camera.image_size();
    let (image, raster) = rasterize(&curves2d, size, params)?;
    Ok((
        image,
        ViewTape {
            raster,
            curves2d,
            jacobians,
        },
    ))
}

/// Gradient of `Σ grad_image ⊙ intensity` with respect to every 3D control
/// point of the rendered sketch.
pub fn backward(tape: &ViewTape, grad_image: &[f64]) -> Result<Vec<[Point3; 4]>> {
    let g2 = backward_2d(&tape.raster, grad_image)?;
    Ok(g2
        .iter()
        .zip(&tape.jacobians)
        .map(|(g, jac)| {
            let mut out = [Point3::zeros(); 4];
            for j in 0..4 {
                out[j] = jac[j].transpose() * g[j];
            }
            out
        })
        .collect())
}

/// Non-differentiable RGB render with stroke hue keyed to camera depth
/// (red near, blue far). The nearest sample decides each pixel's hue.
pub fn render_depth_color(sketch: &Sketch3D, camera: &impl Camera, params: &RasterParams) -> Result<Vec<[u8; 3]>> {
    let (image, tape) = render_view(sketch, camera, params)?;
    let depths: Vec<Vec<f64>> = sketch
        .curves
        .iter()
        .map(|c| {
            (0..params.samples)
                .map(|s| camera.depth(&c.point_at(params.sample_t(s))))
                .collect()
        })
        .collect();
    let (lo, hi) = depths
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let size = image.width;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..image.height {
        for x in 0..image.width {
            let ink = 1.0 - image.get(x, y);
            let nearest = tape
                .raster
                .entries_at(x, y)
                .iter()
                .min_by(|a, b| a.dist.total_cmp(&b.dist));
            let rgb = match nearest {
                Some(e) => {
                    let depth = depths[e.curve as usize][e.sample as usize];
                    let hue = 240.0 * (depth - lo) / span;
                    let c = hue_to_rgb(hue);
                    [1.0 - ink + ink * c[0], 1.0 - ink + ink * c[1], 1.0 - ink + ink * c[2]]
                }
                None => [1.0, 1.0, 1.0],
            };
            out.push(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    Ok(out)
}

fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let h = (hue / 60.0).rem_euclid(6.0);
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::BezierCurve;
    use crate::projection::{ViewKind, Viewpoint};
    use approx::assert_relative_eq;

    fn dot_at(x: f64, y: f64) -> Bezier2D {
        Bezier2D::new([Point2::new(x, y); 4])
    }

    fn line(a: Point2, b: Point2) -> Bezier2D {
        Bezier2D::new([a, a + (b - a) / 3.0, a + (b - a) * (2.0 / 3.0), b])
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel(0.0, 2.0), 1.0);
        assert_eq!(kernel(2.0, 2.0), 0.0);
        assert_eq!(kernel(3.0, 2.0), 0.0);
        assert_relative_eq!(kernel(1.0, 2.0), 0.5625, epsilon = 1e-15);
        let h = 1e-6;
        for d in [0.3, 1.0, 1.7] {
            let fd = (kernel(d + h, 2.0) - kernel(d - h, 2.0)) / (2.0 * h);
            assert_relative_eq!(kernel_derivative(d, 2.0), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn empty_list_is_white() {
        let (img, tape) = rasterize(&[], 16, &RasterParams::default()).unwrap();
        assert!(img.data.iter().all(|&v| v == 1.0));
        assert!(tape.field().iter().all(|&f| f == 0.0));
        assert_eq!(tape.entry_count(), 0);
    }

    #[test]
    fn degenerate_curve_is_a_dot() {
        for samples in [8, 32, 100] {
            let params = RasterParams { sigma: 2.0, samples };
            let (img, tape) = rasterize(&[dot_at(8.5, 8.5)], 16, &params).unwrap();
            assert_relative_eq!(tape.field()[8 * 16 + 8], 1.0, epsilon = 1e-12);
            assert_relative_eq!(img.get(8, 8), 0.0, epsilon = 1e-12);
            // radius σ: pixel centers 2 px away are untouched
            assert_eq!(img.get(10, 8), 1.0);
            assert!(img.get(9, 8) < 1.0);
        }
    }

    #[test]
    fn tape_only_records_inside_support() {
        let params = RasterParams::default();
        let curves = [line(Point2::new(3.0, 4.0), Point2::new(28.0, 20.0))];
        let (_, tape) = rasterize(&curves, 32, &params).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                for e in tape.entries_at(x, y) {
                    assert!(e.dist < params.sigma);
                    let pix = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                    assert_relative_eq!((pix - e.point).norm(), e.dist, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn field_matches_brute_force() {
        let params = RasterParams {
            sigma: 2.5,
            samples: 16,
        };
        let curves = [
            Bezier2D::new([
                Point2::new(2.0, 3.0),
                Point2::new(20.0, 1.0),
                Point2::new(5.0, 25.0),
                Point2::new(28.0, 28.0),
            ]),
            dot_at(10.2, 17.9),
        ];
        let (_, tape) = rasterize(&curves, 32, &params).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let pix = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                let mut f = 0.0;
                for c in &curves {
                    for s in 0..params.samples {
                        let q = c.point_at(s as f64 / (params.samples - 1) as f64);
                        f += kernel((pix - q).norm(), params.sigma) / params.samples as f64;
                    }
                }
                assert_relative_eq!(tape.field()[y * 32 + x], f, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let curves = [line(Point2::new(3.0, 4.0), Point2::new(28.0, 20.0))];
        let (_, tape) = rasterize(&curves, 32, &RasterParams::default()).unwrap();
        let g = backward_2d(&tape, &vec![0.0; 32 * 32]).unwrap();
        assert!(g.iter().all(|c| c.iter().all(|p| p.norm() == 0.0)));
    }

    #[test]
    fn gradient_shape_mismatch() {
        let (_, tape) = rasterize(&[dot_at(4.0, 4.0)], 8, &RasterParams::default()).unwrap();
        assert!(matches!(backward_2d(&tape, &[0.0; 10]), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_control_points_rejected() {
        let bad = dot_at(f64::NAN, 1.0);
        assert!(matches!(
            rasterize(&[bad], 8, &RasterParams::default()),
            Err(Error::Render(_))
        ));
    }

    #[test]
    fn falloff_is_monotone_away_from_a_line() {
        let params = RasterParams {
            sigma: 3.0,
            samples: 64,
        };
        let curves = [line(Point2::new(0.0, 10.0), Point2::new(64.0, 10.0))];
        let (_, tape) = rasterize(&curves, 64, &params).unwrap();
        let column: Vec<f64> = (10..16).map(|y| tape.field()[y * 64 + 30]).collect();
        for w in column.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn render_is_order_invariant_and_deterministic() {
        let sketch = crate::curves::init_sketch(5, 3, 0.5, 0.05, 0.2).unwrap();
        let vp = Viewpoint::canonical(ViewKind::Left, 64).unwrap();
        let params = RasterParams::default();
        let (a, _) = render_view(&sketch, &vp, &params).unwrap();
        let (b, _) = render_view(&sketch, &vp, &params).unwrap();
        assert_eq!(a, b);
        let mut reversed = sketch.clone();
        reversed.curves.reverse();
        let (c, _) = render_view(&reversed, &vp, &params).unwrap();
        for (x, y) in a.data.iter().zip(&c.data) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn front_and_back_of_planar_sketch_mirror() {
        let curve = BezierCurve::new([
            Point3::new(-0.5, 0.2, 0.0),
            Point3::new(0.1, 0.6, 0.0),
            Point3::new(0.3, -0.4, 0.0),
            Point3::new(0.6, 0.1, 0.0),
        ]);
        let sketch = Sketch3D::new(vec![curve]);
        let params = RasterParams::default();
        let (f, _) = render_view(&sketch, &Viewpoint::canonical(ViewKind::Front, 64).unwrap(), &params).unwrap();
        let (b, _) = render_view(&sketch, &Viewpoint::canonical(ViewKind::Back, 64).unwrap(), &params).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_relative_eq!(f.get(x, y), b.get(63 - x, y), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn depth_color_has_rgb_pixels() {
        let sketch = crate::curves::init_sketch(3, 1, 0.5, 0.1, 0.3).unwrap();
        let vp = Viewpoint::canonical(ViewKind::Front, 32).unwrap();
        let rgb = render_depth_color(&sketch, &vp, &RasterParams::default()).unwrap();
        assert_eq!(rgb.len(), 32 * 32);
        assert!(rgb.iter().any(|p| p != &[255, 255, 255]));
    }
}
