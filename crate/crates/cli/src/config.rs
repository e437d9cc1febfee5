//! Run configuration: a flat TOML table, overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use curvesketch_core::curves::{DEFAULT_CURVES, DEFAULT_INIT_RADIUS};
use curvesketch_core::guidance::{
    GuidanceProvider, MockProvider, RemoteProvider, TargetImageProvider, TargetVideoProvider,
};
use curvesketch_core::io::read_raster_png;
use curvesketch_core::motion::Stage2Config;
use curvesketch_core::projection::{OrthoPlane, ViewKind};
use curvesketch_core::rasterizer::{DEFAULT_SAMPLES, DEFAULT_SIGMA};
use curvesketch_core::stage1::{cardinal_views, Stage1Config};
use curvesketch_core::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prompt: String,
    pub motion_prompt: String,
    pub seed: u64,
    pub provider: String,
    pub output_dir: PathBuf,
    pub n_curves: usize,
    pub init_radius: f64,
    pub sigma: f64,
    pub samples: usize,

    pub iters: usize,
    pub lr: f64,
    pub lambda_g: f64,
    pub top_view_prob: f64,
    pub image_size: usize,
    pub cfg_scale: f64,
    pub checkpoint_every: usize,

    pub motion_iters: usize,
    pub motion_lr: f64,
    pub frames: usize,
    pub lambda_s: f64,
    pub beta: f64,
    pub motion_cfg_scale: f64,
    pub frame_size: usize,
    pub hidden: usize,
    pub motion_checkpoint_every: usize,

    /// Half-width of the mock provider's uniform gradient noise.
    pub mock_amplitude: f64,
    pub remote_timeout_secs: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s1 = Stage1Config::default();
        let s2 = Stage2Config::default();
        Self {
            prompt: String::new(),
            motion_prompt: String::new(),
            seed: 0,
            provider: "mock".into(),
            output_dir: PathBuf::from("out"),
            n_curves: DEFAULT_CURVES,
            init_radius: DEFAULT_INIT_RADIUS,
            sigma: DEFAULT_SIGMA,
            samples: DEFAULT_SAMPLES,
            iters: s1.iters,
            lr: s1.lr,
            lambda_g: s1.lambda_g,
            top_view_prob: s1.top_view_prob,
            image_size: s1.image_size,
            cfg_scale: s1.cfg_scale,
            checkpoint_every: s1.checkpoint_every,
            motion_iters: s2.iters,
            motion_lr: s2.lr,
            frames: s2.frames,
            lambda_s: s2.lambda_s,
            beta: s2.beta,
            motion_cfg_scale: s2.cfg_scale,
            frame_size: s2.image_size,
            hidden: s2.hidden,
            motion_checkpoint_every: s2.checkpoint_every,
            mock_amplitude: 0.01,
            remote_timeout_secs: 120,
        }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl RunConfig {
    /// Loads `path` (if any) and applies `key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), parse_value(v));
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid config")?;
        Ok(cfg)
    }

    fn check_common(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            bail!(field_error("sigma", "must be positive"));
        }
        if self.samples < curvesketch_core::rasterizer::MIN_SAMPLES {
            bail!(field_error("samples", "too few quadrature samples"));
        }
        ProviderSpec::parse(&self.provider)?;
        Ok(())
    }

    pub fn stage1(&self) -> Result<Stage1Config> {
        self.check_common()?;
        if self.n_curves == 0 {
            bail!(field_error("n_curves", "must be at least 1"));
        }
        if !(self.init_radius > 0.0 && self.init_radius.is_finite()) {
            bail!(field_error("init_radius", "must be positive"));
        }
        if self.image_size == 0 {
            bail!(field_error("image_size", "must be positive"));
        }
        let mut cfg = Stage1Config::with_image_size(self.image_size, self.iters.max(1));
        cfg.iters = self.iters;
        cfg.lr = self.lr;
        cfg.lambda_g = self.lambda_g;
        cfg.top_view_prob = self.top_view_prob;
        cfg.views = cardinal_views(self.image_size);
        cfg.raster.sigma = self.sigma;
        cfg.raster.samples = self.samples;
        cfg.cfg_scale = self.cfg_scale;
        cfg.prompt = self.prompt.clone();
        cfg.seed = self.seed;
        cfg.checkpoint_every = self.checkpoint_every;
        cfg.validate().map_err(|e| anyhow::anyhow!(e))?;
        Ok(cfg)
    }

    pub fn stage2(&self) -> Result<Stage2Config> {
        self.check_common()?;
        let mut cfg = Stage2Config::with_iters(self.motion_iters.max(1));
        cfg.iters = self.motion_iters;
        cfg.lr = self.motion_lr;
        cfg.frames = self.frames;
        cfg.lambda_s = self.lambda_s;
        cfg.beta = self.beta;
        cfg.cfg_scale = self.motion_cfg_scale;
        cfg.image_size = self.frame_size;
        cfg.hidden = self.hidden;
        cfg.raster.sigma = self.sigma;
        cfg.raster.samples = self.samples;
        cfg.prompt = self.prompt.clone();
        cfg.motion_prompt = self.motion_prompt.clone();
        cfg.seed = self.seed;
        cfg.checkpoint_every = self.motion_checkpoint_every;
        cfg.validate().map_err(|e| anyhow::anyhow!(rename_stage2_field(e)))?;
        Ok(cfg)
    }
}

fn field_error(field: &str, message: &str) -> Error {
    Error::config(field, message)
}

/// Maps Stage II field names onto their config keys.
fn rename_stage2_field(e: Error) -> Error {
    match e {
        Error::Config { field, message } => {
            let key = match field.as_str() {
                "iters" => "motion_iters",
                "lr" => "motion_lr",
                "cfg_scale" => "motion_cfg_scale",
                "image_size" => "frame_size",
                "checkpoint_every" => "motion_checkpoint_every",
                other => other,
            };
            Error::config(key, message)
        }
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderSpec {
    Mock,
    Target(PathBuf),
    Remote(String),
}

impl ProviderSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "mock" {
            return Ok(ProviderSpec::Mock);
        }
        if let Some(path) = s.strip_prefix("target:") {
            return Ok(ProviderSpec::Target(PathBuf::from(path)));
        }
        if let Some(url) = s.strip_prefix("remote:") {
            return Ok(ProviderSpec::Remote(url.to_string()));
        }
        bail!(field_error("provider", "expected mock, target:<path> or remote:<url>"))
    }
}

fn remote(url: &str, cfg: &RunConfig) -> Result<Box<dyn GuidanceProvider>> {
    let provider = RemoteProvider::with_timeout(url, Duration::from_secs(cfg.remote_timeout_secs))?;
    let health = provider
        .health()
        .with_context(|| format!("guidance service at {url} is not healthy"))?;
    eprintln!(
        "guidance service ok: image model {}, video model {}",
        health.image_model, health.video_model
    );
    Ok(Box::new(provider))
}

/// Provider for Stage I. A target directory holds `<view>.png` per view
/// and optionally `target.png` for every other view; a target file is used
/// for every view.
pub fn image_provider(cfg: &RunConfig) -> Result<Box<dyn GuidanceProvider>> {
    match ProviderSpec::parse(&cfg.provider)? {
        ProviderSpec::Mock => Ok(Box::new(MockProvider::new(cfg.mock_amplitude))),
        ProviderSpec::Remote(url) => remote(&url, cfg),
        ProviderSpec::Target(path) => {
            if path.is_file() {
                return Ok(Box::new(TargetImageProvider::uniform(read_raster_png(&path)?)));
            }
            if !path.is_dir() {
                bail!(field_error(
                    "provider",
                    &format!("target path {} does not exist", path.display())
                ));
            }
            let mut provider = match path.join("target.png") {
                p if p.is_file() => TargetImageProvider::uniform(read_raster_png(p)?),
                _ => TargetImageProvider::new(),
            };
            let mut found = 0;
            for kind in ViewKind::CARDINAL.iter().chain(&[ViewKind::Top]) {
                let p = path.join(format!("{kind}.png"));
                if p.is_file() {
                    provider = provider.with_target(*kind, read_raster_png(p)?);
                    found += 1;
                }
            }
            if found == 0 && provider.target_for(None).is_none() {
                bail!("no target images in {}", path.display());
            }
            Ok(Box::new(provider))
        }
    }
}

pub fn frame_file(plane: OrthoPlane, k: usize) -> String {
    format!("{}_frame_{k:03}.png", plane.as_str())
}

/// Provider for Stage II. A target directory holds `front_frame_XXX.png` and
/// `side_frame_XXX.png` for every frame.
pub fn video_provider(cfg: &RunConfig) -> Result<Box<dyn GuidanceProvider>> {
    match ProviderSpec::parse(&cfg.provider)? {
        ProviderSpec::Mock => Ok(Box::new(MockProvider::new(cfg.mock_amplitude))),
        ProviderSpec::Remote(url) => remote(&url, cfg),
        ProviderSpec::Target(dir) => {
            let mut provider = TargetVideoProvider::new();
            for plane in OrthoPlane::BOTH {
                let frames = (0..cfg.frames)
                    .map(|k| {
                        let p = dir.join(frame_file(plane, k));
                        read_raster_png(&p).with_context(|| format!("loading target frame {}", p.display()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                provider = provider.with_targets(plane.view_tag(), frames);
            }
            Ok(Box::new(provider))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_library() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stage1().unwrap(), Stage1Config::default());
        assert_eq!(cfg.stage2().unwrap(), Stage2Config::default());
    }

    #[test]
    fn overrides_parse_typed_values() {
        let cfg = RunConfig::load(None, &[("lr".into(), "0.5".into()), ("prompt".into(), "a cat".into())]).unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.prompt, "a cat");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, &[("learning_rate".into(), "1".into())]).unwrap_err();
        assert!(format!("{err:#}").contains("learning_rate"));
    }

    #[test]
    fn invalid_values_name_the_field() {
        let mut cfg = RunConfig::default();
        cfg.lr = -1.0;
        assert!(cfg.stage1().unwrap_err().to_string().contains("lr"));
        let mut cfg = RunConfig::default();
        cfg.motion_lr = 0.0;
        assert!(cfg.stage2().unwrap_err().to_string().contains("motion_lr"));
    }

    #[test]
    fn provider_specs() {
        assert_eq!(ProviderSpec::parse("mock").unwrap(), ProviderSpec::Mock);
        assert_eq!(
            ProviderSpec::parse("target:/tmp/x").unwrap(),
            ProviderSpec::Target("/tmp/x".into())
        );
        assert_eq!(
            ProviderSpec::parse("remote:http://h:1").unwrap(),
            ProviderSpec::Remote("http://h:1".into())
        );
        assert!(ProviderSpec::parse("gpu").is_err());
    }
}
