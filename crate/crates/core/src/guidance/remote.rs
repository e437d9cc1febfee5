//! HTTP client for an out-of-process guidance service.
//!
//! Endpoints:
//! - `POST /v1/image_sds` `{prompt, cfg, t, seed, image}` → `{grad, weight}`
//! - `POST /v1/video_sds` `{prompt, cfg, t, seed, frames}` → `{grads, weight}`
//! - `GET /v1/health` → `{status, image_model, video_model}`
//!
//! Images travel as `{h, w, data}` where `data` is base64 of row-major
//! little-endian `f32`.

use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::RasterImage;

use super::{GradField, GuidanceProvider, GuidanceRequest, GuidanceResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    pub h: usize,
    pub w: usize,
    pub data: String,
}

pub fn encode_image(width: usize, height: usize, values: &[f64]) -> WireImage {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    WireImage {
        h: height,
        w: width,
        data: STANDARD.encode(bytes),
    }
}

pub fn decode_image(img: &WireImage) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(&img.data)
        .map_err(|e| Error::Protocol(format!("bad base64 payload: {e}")))?;
    if bytes.len() != img.h * img.w * 4 {
        return Err(Error::Protocol(format!(
            "payload of {} bytes for a {}x{} float32 image",
            bytes.len(),
            img.w,
            img.h
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[derive(Debug, Serialize)]
struct ImageSdsRequest<'a> {
    prompt: &'a str,
    cfg: f64,
    t: f64,
    seed: u64,
    image: WireImage,
}

#[derive(Debug, Deserialize)]
struct ImageSdsResponse {
    grad: WireImage,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct VideoSdsRequest<'a> {
    prompt: &'a str,
    cfg: f64,
    t: f64,
    seed: u64,
    frames: Vec<WireImage>,
}

#[derive(Debug, Deserialize)]
struct VideoSdsResponse {
    grads: Vec<WireImage>,
    weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthStatus {
    pub status: String,
    pub image_model: String,
    pub video_model: String,
}

fn to_wire(frame: &RasterImage) -> WireImage {
    encode_image(frame.width, frame.height, &frame.data)
}

fn from_wire(img: &WireImage) -> Result<GradField> {
    Ok(GradField {
        width: img.w,
        height: img.h,
        data: decode_image(img)?,
    })
}

/// Guidance provider backed by the HTTP service. Requests are idempotent
/// (the seed travels with them), so transport failures and 5xx answers are
/// retried up to `max_attempts` times.
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    base_url: String,
    client: reqwest::blocking::Client,
    pub max_attempts: u32,
    pub retry_delay: Duration,
}

impl RemoteProvider {
    pub fn new(base_url: impl Into<String>) -> Result<Self> {
        Self::with_timeout(base_url, Duration::from_secs(300))
    }

    pub fn with_timeout(base_url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
            max_attempts: 3,
            retry_delay: Duration::from_millis(200),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn with_retries<T>(&self, mut attempt: impl FnMut() -> Result<T>) -> Result<T> {
        let mut last = None;
        for n in 0..self.max_attempts.max(1) {
            match attempt() {
                Err(Error::Transport(msg)) => {
                    last = Some(msg);
                    if n + 1 < self.max_attempts {
                        thread::sleep(self.retry_delay * (n + 1));
                    }
                }
                other => return other,
            }
        }
        Err(Error::Transport(last.unwrap_or_default()))
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R> {
        let url = format!("{}{}", self.base_url, path);
        self.with_retries(|| {
            let resp = self
                .client
                .post(&url)
                .json(body)
                .send()
                .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
            read_json(resp, &url)
        })
    }

    pub fn health(&self) -> Result<HealthStatus> {
        let url = format!("{}/v1/health", self.base_url);
        self.with_retries(|| {
            let resp = self
                .client
                .get(&url)
                .send()
                .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
            read_json(resp, &url)
        })
    }
}

fn read_json<R: for<'de> Deserialize<'de>>(resp: reqwest::blocking::Response, url: &str) -> Result<R> {
    let status = resp.status();
    if status.is_server_error() {
        return Err(Error::Transport(format!("{url}: server answered {status}")));
    }
    if !status.is_success() {
        let body = resp.text().unwrap_or_default();
        return Err(Error::Protocol(format!("{url}: {status}: {body}")));
    }
    let bytes = resp.bytes().map_err(|e| Error::Transport(format!("{url}: {e}")))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Protocol(format!("{url}: malformed response: {e}")))
}

impl GuidanceProvider for RemoteProvider {
    fn image_guidance(&self, req: &GuidanceRequest) -> Result<GuidanceResponse> {
        let prompt = req.prompt.image_text();
        let body = ImageSdsRequest {
            prompt: &prompt,
            cfg: req.prompt.cfg_scale,
            t: req.timestep,
            seed: req.seed,
            image: to_wire(&req.frames[0]),
        };
        let resp: ImageSdsResponse = self.post("/v1/image_sds", &body)?;
        Ok(GuidanceResponse {
            grads: vec![from_wire(&resp.grad)?],
            weight: resp.weight,
        })
    }

    fn video_guidance(&self, req: &GuidanceRequest) -> Result<GuidanceResponse> {
        let prompt = req.prompt.video_text();
        let body = VideoSdsRequest {
            prompt: &prompt,
            cfg: req.prompt.cfg_scale,
            t: req.timestep,
            seed: req.seed,
            frames: req.frames.iter().map(to_wire).collect(),
        };
        let resp: VideoSdsResponse = self.post("/v1/video_sds", &body)?;
        Ok(GuidanceResponse {
            grads: resp.grads.iter().map(from_wire).collect::<Result<_>>()?,
            weight: resp.weight,
        })
    }
}

#[cfg(test)]
mod service_tests;
