mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use curvesketch_core::curves::{init_sketch, Sketch3D, DEFAULT_MAX_STEP, DEFAULT_MIN_STEP};
use curvesketch_core::gradcheck;
use curvesketch_core::io::{
    load_document, load_sketch, save_animation, save_sketch, sketch_to_svg, write_gray_png, write_rgb_png, Animation,
    SketchDocument,
};
use curvesketch_core::motion::{optimize_motion, render_frames, MotionModel};
use curvesketch_core::projection::{Camera, OrthoCamera, OrthoPlane, ViewKind, Viewpoint};
use curvesketch_core::rasterizer::{render_depth_color, render_view, RasterParams};
use curvesketch_core::stage1::optimize_structure;

use config::{frame_file, image_provider, video_provider, RunConfig};

#[derive(Parser)]
#[command(
    name = "curvesketch",
    version,
    about = "Text-guided 3D curve sketches and their animation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a static 3D sketch from multi-view guidance.
    Structure {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Learn an animation for an existing sketch.
    Motion {
        /// Sketch produced by `structure`.
        #[arg(long)]
        sketch: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render a sketch or an animation frame to PNG or SVG.
    Render(RenderArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_CASES)]
        cases: usize,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// mock, target:<path> or remote:<url>.
    #[arg(long)]
    provider: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    /// Override any config key, e.g. `--set lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        if let Some(p) = &self.provider {
            overrides.push(("provider".into(), toml_string(p)));
        }
        if let Some(out) = &self.out {
            overrides.push(("output_dir".into(), toml_string(&out.to_string_lossy())));
        }
        if let Some(prompt) = &self.prompt {
            overrides.push(("prompt".into(), toml_string(prompt)));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Clone, Copy, ValueEnum)]
enum Projection {
    Perspective,
    Orthographic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Svg,
}

#[derive(Args)]
struct RenderArgs {
    /// sketch.json or animation.json.
    input: PathBuf,
    /// front, back, left, right or top; front or side for orthographic.
    #[arg(long, default_value = "front", value_parser = ["front", "back", "left", "right", "top", "side"])]
    view: String,
    #[arg(long, value_enum, default_value_t = Projection::Perspective)]
    camera: Projection,
    /// Defaults to the output file's extension.
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long, default_value_t = 512)]
    size: usize,
    /// Animation frame to render.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Color strokes by depth (PNG only).
    #[arg(long)]
    depth_color: bool,
    #[arg(long, default_value_t = curvesketch_core::rasterizer::DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long, default_value_t = 1.5)]
    stroke_width: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Structure { run } => run.load().and_then(|cfg| cmd_structure(&cfg)),
        Command::Motion { sketch, run } => run.load().and_then(|cfg| cmd_motion(&cfg, &sketch)),
        Command::Render(args) => cmd_render(&args),
        Command::Gradcheck { seed, cases, out } => cmd_gradcheck(seed, cases, out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("run_config.toml"), toml::to_string(cfg)?)?;
    Ok(())
}

fn cmd_structure(cfg: &RunConfig) -> Result<ExitCode> {
    let mut s1 = cfg.stage1()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    s1.checkpoint_dir = Some(out.join("checkpoint"));
    write_config(cfg, out)?;
    let provider = image_provider(cfg)?;
    let init = init_sketch(
        cfg.n_curves,
        cfg.seed,
        cfg.init_radius,
        DEFAULT_MIN_STEP,
        DEFAULT_MAX_STEP,
    )?;
    let result = optimize_structure(&init, provider.as_ref(), &s1)?;

    save_sketch(out.join("sketch.json"), &result.sketch)?;
    fs::write(out.join("loss_trace.csv"), result.trace.to_csv())?;
    let views = out.join("views");
    fs::create_dir_all(&views)?;
    for kind in ViewKind::CARDINAL.iter().chain(&[ViewKind::Top]) {
        let vp = Viewpoint::canonical(*kind, cfg.image_size)?;
        let (img, _) = render_view(&result.sketch, &vp, &s1.raster)?;
        write_gray_png(views.join(format!("{kind}.png")), &img)?;
    }
    println!("wrote {}", out.join("sketch.json").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_motion(cfg: &RunConfig, sketch_path: &Path) -> Result<ExitCode> {
    let mut s2 = cfg.stage2()?;
    let base = load_sketch(sketch_path).with_context(|| format!("loading {}", sketch_path.display()))?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    s2.checkpoint_dir = Some(out.join("checkpoint"));
    if s2.prompt.is_empty() {
        s2.prompt = base.prompt.clone();
    }
    write_config(cfg, out)?;
    let provider = video_provider(cfg)?;
    let model = MotionModel::new(base.len(), s2.hidden, cfg.seed);
    let result = optimize_motion(&base, model, provider.as_ref(), &s2)?;

    let anim = Animation {
        base: base.clone(),
        field: result.field,
    };
    save_animation(out.join("animation.json"), &anim)?;
    fs::write(out.join("loss_trace.csv"), result.trace.to_csv())?;
    let frames = out.join("frames");
    fs::create_dir_all(&frames)?;
    for plane in OrthoPlane::BOTH {
        for (k, (img, _)) in render_frames(&base, &anim.field, plane, s2.image_size, &s2.raster)?
            .iter()
            .enumerate()
        {
            write_gray_png(frames.join(frame_file(plane, k)), img)?;
        }
    }
    println!("wrote {}", out.join("animation.json").display());
    Ok(ExitCode::SUCCESS)
}

fn render_with(sketch: &Sketch3D, camera: &impl Camera, args: &RenderArgs, format: Format) -> Result<()> {
    let params = RasterParams {
        sigma: args.sigma,
        ..RasterParams::default()
    };
    let size = camera.image_size();
    match format {
        Format::Svg => {
            if args.depth_color {
                bail!("--depth-color applies to PNG output only");
            }
            fs::write(&args.out, sketch_to_svg(sketch, camera, args.stroke_width)?)?;
        }
        Format::Png if args.depth_color => {
            write_rgb_png(&args.out, size, size, &render_depth_color(sketch, camera, &params)?)?;
        }
        Format::Png => write_gray_png(&args.out, &render_view(sketch, camera, &params)?.0)?,
    }
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<ExitCode> {
    let sketch = match load_document(&args.input).with_context(|| format!("loading {}", args.input.display()))? {
        SketchDocument::Sketch(s) => {
            if args.frame != 0 {
                bail!("--frame needs an animation file");
            }
            s
        }
        SketchDocument::Animation(a) => a.frame(args.frame)?,
    };
    let format = match args.format {
        Some(f) => f,
        None => match args.out.extension().and_then(|e| e.to_str()) {
            Some("svg") => Format::Svg,
            Some("png") => Format::Png,
            _ => bail!("cannot infer the format from {}; pass --format", args.out.display()),
        },
    };
    match args.camera {
        Projection::Perspective => {
            let kind: ViewKind = args.view.parse()?;
            render_with(&sketch, &Viewpoint::canonical(kind, args.size)?, args, format)?;
        }
        Projection::Orthographic => {
            let plane: OrthoPlane = args.view.parse()?;
            render_with(&sketch, &OrthoCamera::new(plane, args.size), args, format)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, cases: usize, out: Option<&Path>) -> Result<ExitCode> {
    let report = gradcheck::run_all(seed, cases)?;
    let json = report.to_json()?;
    println!("{json}");
    if let Some(path) = out {
        fs::write(path, &json)?;
    }
    for c in &report.checks {
        eprintln!(
            "{} {:<16} max rel err {:.3e} (tol {:.0e}, {} cases)",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.tolerance,
            c.cases
        );
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
