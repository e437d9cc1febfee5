//! Shared motion network: a small tanh MLP with hand-written backward pass.
//!
//! Input for one `(plane, frame)` pair is the base sketch's flat projection
//! onto the plane, a sinusoidal encoding of `k/K`, and a learned 2-value
//! embedding of the plane. Output is that plane's flat displacement vector.
//! The last layer starts at zero, so a fresh model predicts no motion.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::projection::OrthoPlane;

use super::field::FlatViewVector;

pub const DEFAULT_HIDDEN: usize = 256;
/// Frequencies in the frame-time encoding; each yields a sine and a cosine.
pub const TIME_FREQUENCIES: usize = 8;
pub const EMBED_DIM: usize = 2;

#[derive(Debug, Clone, Copy)]
struct Layout {
    input: usize,
    hidden: usize,
    output: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    embed: usize,
    total: usize,
}

impl Layout {
    fn new(n_curves: usize, hidden: usize) -> Self {
        let flat = 8 * n_curves;
        let input = flat + 2 * TIME_FREQUENCIES + EMBED_DIM;
        let output = flat;
        let w1 = 0;
        let b1 = w1 + hidden * input;
        let w2 = b1 + hidden;
        let b2 = w2 + hidden * hidden;
        let w3 = b2 + hidden;
        let b3 = w3 + output * hidden;
        let embed = b3 + output;
        let total = embed + 2 * EMBED_DIM;
        Self {
            input,
            hidden,
            output,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            embed,
            total,
        }
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    plane: OrthoPlane,
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    n_curves: usize,
    layout_hidden: usize,
    params: Vec<f64>,
}

fn plane_slot(plane: OrthoPlane) -> usize {
    match plane {
        OrthoPlane::Frontal => 0,
        OrthoPlane::Sagittal => 1,
    }
}

/// `[sin(2^f π τ), cos(2^f π τ)]` for `f = 0..8`, with `τ = k/K`.
pub fn time_encoding(k: usize, frames: usize) -> [f64; 2 * TIME_FREQUENCIES] {
    let tau = k as f64 / frames.max(1) as f64;
    let mut out = [0.0; 2 * TIME_FREQUENCIES];
    for f in 0..TIME_FREQUENCIES {
        let arg = (1u32 << f) as f64 * std::f64::consts::PI * tau;
        out[2 * f] = arg.sin();
        out[2 * f + 1] = arg.cos();
    }
    out
}

// y += W x for row-major W (rows × cols)
fn matvec_add(w: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *yr += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl MotionModel {
    pub fn new(n_curves: usize, hidden: usize, seed: u64) -> Self {
        let layout = Layout::new(n_curves, hidden);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in slice {
                *w = rng.random_range(-bound..bound);
            }
        };
        xavier(&mut params[layout.w1..layout.b1], layout.input, hidden);
        xavier(&mut params[layout.w2..layout.b2], hidden, hidden);
        for e in &mut params[layout.embed..] {
            *e = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        Self {
            n_curves,
            layout_hidden: hidden,
            params,
        }
    }

    fn layout(&self) -> Layout {
        Layout::new(self.n_curves, self.layout_hidden)
    }

    pub fn n_curves(&self) -> usize {
        self.n_curves
    }

    pub fn hidden(&self) -> usize {
        self.layout_hidden
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// True while the output layer is still all zero.
    pub fn output_layer_is_zero(&self) -> bool {
        let l = self.layout();
        self.params[l.w3..l.embed].iter().all(|&w| w == 0.0)
    }

    fn build_input(&self, base: &FlatViewVector, k: usize, frames: usize) -> Result<Vec<f64>> {
        let l = self.layout();
        if base.values.len() != l.output {
            return Err(Error::Shape(format!(
                "model for {} curves got a flat vector of length {}",
                self.n_curves,
                base.values.len()
            )));
        }
        let mut input = Vec::with_capacity(l.input);
        input.extend_from_slice(&base.values);
        input.extend_from_slice(&time_encoding(k, frames));
        let e = l.embed + EMBED_DIM * plane_slot(base.plane);
        input.extend_from_slice(&self.params[e..e + EMBED_DIM]);
        Ok(input)
    }

    /// Raw (unscaled) displacement vector for frame `k` of `frames` on the
    /// plane of `base`.
    pub fn forward(&self, base: &FlatViewVector, k: usize, frames: usize) -> Result<(FlatViewVector, ForwardCache)> {
        let l = self.layout();
        let p = &self.params;
        let input = self.build_input(base, k, frames)?;

        let mut h1 = p[l.b1..l.b1 + l.hidden].to_vec();
        matvec_add(&p[l.w1..l.b1], &input, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());

        let mut h2 = p[l.b2..l.b2 + l.hidden].to_vec();
        matvec_add(&p[l.w2..l.b2], &h1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());

        let mut out = p[l.b3..l.b3 + l.output].to_vec();
        matvec_add(&p[l.w3..l.b3], &h2, &mut out);

        Ok((
            FlatViewVector {
                plane: base.plane,
                values: out,
            },
            ForwardCache {
                plane: base.plane,
                input,
                h1,
                h2,
            },
        ))
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut [f64]) -> Result<()> {
        let l = self.layout();
        if grad_out.len() != l.output || grads.len() != l.total {
            return Err(Error::Shape("motion model gradient buffers have the wrong size".into()));
        }
        let p = &self.params;

        // output layer
        let mut d_h2 = vec![0.0; l.hidden];
        for (r, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads[l.b3 + r] += g;
            let row = l.w3 + r * l.hidden;
            for c in 0..l.hidden {
                grads[row + c] += g * cache.h2[c];
                d_h2[c] += g * p[row + c];
            }
        }

        let d_a2: Vec<f64> = d_h2.iter().zip(&cache.h2).map(|(d, h)| d * (1.0 - h * h)).collect();
        let mut d_h1 = vec![0.0; l.hidden];
        for (r, &g) in d_a2.iter().enumerate() {
            grads[l.b2 + r] += g;
            let row = l.w2 + r * l.hidden;
            for c in 0..l.hidden {
                grads[row + c] += g * cache.h1[c];
                d_h1[c] += g * p[row + c];
            }
        }

        let d_a1: Vec<f64> = d_h1.iter().zip(&cache.h1).map(|(d, h)| d * (1.0 - h * h)).collect();
        let embed_at = l.input - EMBED_DIM;
        let mut d_embed = [0.0; EMBED_DIM];
        for (r, &g) in d_a1.iter().enumerate() {
            grads[l.b1 + r] += g;
            let row = l.w1 + r * l.input;
            for c in 0..l.input {
                grads[row + c] += g * cache.input[c];
            }
            for (e, d) in d_embed.iter_mut().enumerate() {
                *d += g * p[row + embed_at + e];
            }
        }
        let e = l.embed + EMBED_DIM * plane_slot(cache.plane);
        for (k, d) in d_embed.iter().enumerate() {
            grads[e + k] += d;
        }
        Ok(())
    }

    /// Little-endian: `n_curves: u64`, `hidden: u64`, `len: u64`, params as `f64`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.n_curves as u64).to_le_bytes())?;
        w.write_all(&(self.layout_hidden as u64).to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for x in &self.params {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let n_curves = next(&mut r)? as usize;
        let hidden = next(&mut r)? as usize;
        let len = next(&mut r)? as usize;
        if Layout::new(n_curves, hidden).total != len {
            return Err(Error::Format(
                "motion model header does not match parameter count".into(),
            ));
        }
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf)?;
        Ok(Self {
            n_curves,
            layout_hidden: hidden,
            params: buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}
