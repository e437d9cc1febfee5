//! File formats: sketch and animation JSON, PNG, SVG.
//!
//! Sketch JSON is `{"version": 1, "prompt", "seed", "curves": [[[x,y,z]×4]×N]}`;
//! animation JSON is `{"version": 1, "base": <sketch>, "K", "displacements":
//! [[[[dx,dy,dz]×4]×N]×K]}`. Reals are written in scientific notation with at
//! least nine significant digits and as many more as an exact round trip needs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::curves::{BezierCurve, Point3, Sketch3D};
use crate::error::{Error, Result};
use crate::motion::DisplacementField;
use crate::projection::{project_curve, Camera};
use crate::rasterizer::RasterImage;

pub const FORMAT_VERSION: u32 = 1;

/// Shortest scientific representation with ≥ 9 significant digits that
/// parses back to exactly `v`.
pub fn format_real(v: f64) -> Result<String> {
    if !v.is_finite() {
        return Err(Error::Format(format!("cannot serialize non-finite value {v}")));
    }
    for precision in 8..=16 {
        let s = format!("{v:.precision$e}");
        if s.parse::<f64>().ok() == Some(v) {
            return Ok(s);
        }
    }
    Ok(format!("{v:.17e}"))
}

type RawPoint = [Box<RawValue>; 3];

fn raw_point(p: &Point3) -> Result<RawPoint> {
    let f = |v: f64| -> Result<Box<RawValue>> { Ok(RawValue::from_string(format_real(v)?)?) };
    Ok([f(p.x)?, f(p.y)?, f(p.z)?])
}

fn raw_quad(points: &[Point3; 4]) -> Result<[RawPoint; 4]> {
    Ok([
        raw_point(&points[0])?,
        raw_point(&points[1])?,
        raw_point(&points[2])?,
        raw_point(&points[3])?,
    ])
}

#[derive(Serialize)]
struct SketchOut<'a> {
    version: u32,
    prompt: &'a str,
    seed: u64,
    curves: Vec<[RawPoint; 4]>,
}

#[derive(Deserialize)]
struct SketchIn {
    version: u32,
    prompt: String,
    seed: u64,
    curves: Vec<[[f64; 3]; 4]>,
}

#[derive(Serialize)]
struct AnimationOut<'a> {
    version: u32,
    base: SketchOut<'a>,
    #[serde(rename = "K")]
    k: usize,
    displacements: Vec<Vec<[RawPoint; 4]>>,
}

#[derive(Deserialize)]
struct AnimationIn {
    version: u32,
    base: SketchIn,
    #[serde(rename = "K")]
    k: usize,
    displacements: Vec<Vec<[[f64; 3]; 4]>>,
}

fn sketch_out(sketch: &Sketch3D) -> Result<SketchOut<'_>> {
    Ok(SketchOut {
        version: FORMAT_VERSION,
        prompt: &sketch.prompt,
        seed: sketch.seed,
        curves: sketch
            .curves
            .iter()
            .map(|c| raw_quad(&c.control))
            .collect::<Result<_>>()?,
    })
}

fn quad_in(q: &[[f64; 3]; 4]) -> [Point3; 4] {
    q.map(Point3::from)
}

fn sketch_in(s: SketchIn) -> Result<Sketch3D> {
    if s.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported sketch version {}", s.version)));
    }
    if s.curves.is_empty() {
        return Err(Error::Format("sketch has no curves".into()));
    }
    Ok(Sketch3D {
        curves: s.curves.iter().map(|q| BezierCurve::new(quad_in(q))).collect(),
        prompt: s.prompt,
        seed: s.seed,
    })
}

pub fn sketch_to_json(sketch: &Sketch3D) -> Result<String> {
    Ok(serde_json::to_string_pretty(&sketch_out(sketch)?)?)
}

pub fn sketch_from_json(text: &str) -> Result<Sketch3D> {
    sketch_in(serde_json::from_str(text)?)
}

pub fn save_sketch(path: impl AsRef<Path>, sketch: &Sketch3D) -> Result<()> {
    fs::write(path, sketch_to_json(sketch)?)?;
    Ok(())
}

pub fn load_sketch(path: impl AsRef<Path>) -> Result<Sketch3D> {
    sketch_from_json(&fs::read_to_string(path)?)
}

/// A static sketch plus its per-frame displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct Animation {
    pub base: Sketch3D,
    pub field: DisplacementField,
}

impl Animation {
    pub fn frame(&self, k: usize) -> Result<Sketch3D> {
        if k >= self.field.frame_count() {
            return Err(Error::Shape(format!(
                "frame {k} of a {}-frame animation",
                self.field.frame_count()
            )));
        }
        self.field.apply(&self.base, k)
    }
}

pub fn animation_to_json(anim: &Animation) -> Result<String> {
    let out = AnimationOut {
        version: FORMAT_VERSION,
        base: sketch_out(&anim.base)?,
        k: anim.field.frame_count(),
        displacements: anim
            .field
            .frames()
            .iter()
            .map(|f| f.iter().map(raw_quad).collect::<Result<_>>())
            .collect::<Result<_>>()?,
    };
    Ok(serde_json::to_string_pretty(&out)?)
}

pub fn animation_from_json(text: &str) -> Result<Animation> {
    let a: AnimationIn = serde_json::from_str(text)?;
    if a.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported animation version {}", a.version)));
    }
    if a.displacements.len() != a.k {
        return Err(Error::Format(format!(
            "K = {} but {} displacement frames",
            a.k,
            a.displacements.len()
        )));
    }
    let base = sketch_in(a.base)?;
    let frames = a
        .displacements
        .iter()
        .map(|f| f.iter().map(quad_in).collect())
        .collect();
    let field = DisplacementField::from_frames(frames)?;
    if field.curve_count() != base.len() {
        return Err(Error::Format("displacements do not match the base sketch".into()));
    }
    field.validate()?;
    Ok(Animation { base, field })
}

pub fn save_animation(path: impl AsRef<Path>, anim: &Animation) -> Result<()> {
    fs::write(path, animation_to_json(anim)?)?;
    Ok(())
}

pub fn load_animation(path: impl AsRef<Path>) -> Result<Animation> {
    animation_from_json(&fs::read_to_string(path)?)
}

/// Either kind of JSON document, told apart by the `base` key.
#[derive(Debug, Clone, PartialEq)]
pub enum SketchDocument {
    Sketch(Sketch3D),
    Animation(Animation),
}

pub fn load_document(path: impl AsRef<Path>) -> Result<SketchDocument> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("base").is_some() {
        Ok(SketchDocument::Animation(animation_from_json(&text)?))
    } else {
        Ok(SketchDocument::Sketch(sketch_from_json(&text)?))
    }
}

pub fn write_gray_png(path: impl AsRef<Path>, image: &RasterImage) -> Result<()> {
    let buf = GrayImage::from_raw(image.width as u32, image.height as u32, image.to_gray8())
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

pub fn write_rgb_png(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[[u8; 3]]) -> Result<()> {
    let raw: Vec<u8> = pixels.iter().flatten().copied().collect();
    let buf = RgbImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Decodes a PNG into 8-bit grayscale.
pub fn read_gray_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

/// Loads a grayscale PNG as an intensity image in `[0, 1]`.
pub fn read_raster_png(path: impl AsRef<Path>) -> Result<RasterImage> {
    let (w, h, data) = read_gray_png(path)?;
    RasterImage::from_data(w, h, data.into_iter().map(|v| v as f64 / 255.0).collect())
}

/// SVG 1.1 document with one cubic `<path>` per curve, drawn through the
/// projected control points.
pub fn sketch_to_svg(sketch: &Sketch3D, camera: &impl Camera, stroke_width: f64) -> Result<String> {
    let size = camera.image_size();
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for curve in &sketch.curves {
        let c = project_curve(camera, curve)?.control;
        let _ = writeln!(
            out,
            r#"<path d="M {:.4} {:.4} C {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}" fill="none" stroke="black" stroke-width="{stroke_width}" stroke-linecap="round"/>"#,
            c[0].x, c[0].y, c[1].x, c[1].y, c[2].x, c[2].y, c[3].x, c[3].y
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::init_sketch;
    use crate::projection::{ViewKind, Viewpoint};
    use proptest::prelude::*;

    #[test]
    fn real_formatting() {
        assert_eq!(format_real(0.1).unwrap(), "1.00000000e-1");
        assert_eq!(format_real(0.0).unwrap(), "0.00000000e0");
        let v = 0.123456789012345;
        assert_eq!(format_real(v).unwrap().parse::<f64>().unwrap(), v);
        assert!(format_real(f64::NAN).is_err());
    }

    #[test]
    fn sketch_json_round_trip() {
        let s = init_sketch(4, 9, 0.2, 0.001, 0.01)
            .unwrap()
            .with_prompt("a \"quoted\" cat");
        let text = sketch_to_json(&s).unwrap();
        assert_eq!(sketch_from_json(&text).unwrap(), s);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["curves"].as_array().unwrap().len(), 4);
        assert_eq!(v["curves"][0].as_array().unwrap().len(), 4);
    }

    #[test]
    fn animation_json_round_trip() {
        let base = init_sketch(2, 1, 0.2, 0.001, 0.01).unwrap();
        let mut field = DisplacementField::zeros(3, 2);
        field.frame_mut(2)[1][3] = Point3::new(0.25, -1e-7, 3.0);
        let anim = Animation { base, field };
        let text = animation_to_json(&anim).unwrap();
        assert_eq!(animation_from_json(&text).unwrap(), anim);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["K"], 3);
    }

    #[test]
    fn animation_rejects_unanchored_first_frame() {
        let base = init_sketch(1, 1, 0.2, 0.001, 0.01).unwrap();
        let mut field = DisplacementField::zeros(2, 1);
        field.frame_mut(0)[0][0] = Point3::new(1.0, 0.0, 0.0);
        let text = animation_to_json(&Animation { base, field }).unwrap();
        assert!(animation_from_json(&text).is_err());
    }

    #[test]
    fn svg_has_one_path_per_curve() {
        let s = init_sketch(5, 2, 0.2, 0.001, 0.01).unwrap();
        let vp = Viewpoint::canonical(ViewKind::Front, 128).unwrap();
        let svg = sketch_to_svg(&s, &vp, 1.5).unwrap();
        assert_eq!(svg.matches("<path ").count(), 5);
    }

    proptest! {
        #[test]
        fn formatted_reals_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = format_real(v).unwrap();
            prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
            let digits = s.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).count();
            prop_assert!(digits >= 9);
        }
    }
}
