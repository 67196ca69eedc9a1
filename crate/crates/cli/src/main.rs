use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use planeformer::geometry::CameraIntrinsics;
use planeformer::harness::{
    evaluate, infer, load_image, parse_line_file, plot_attention, plot_loss_curve, plot_mask_overlay,
    plot_recall_curves, read_inference, read_report, read_run_log, train, write_inference, write_report, EvalOptions,
    InferRequest, ModelPredictor, TrainConfig, TrainOptions, HEADLINE_DEPTH,
};
use planeformer::model::PlaneFormer;
use planeformer::scene::{
    jitter_lines, load_scene, load_split, scene_seed, write_dataset, DatasetManifest, GeneratorConfig, PlanarScene,
};
use planeformer::segmentation::DEFAULT_THRESHOLD;

/// Seed offset for line jitter applied at load time, so it never repeats the
/// generator's own stream.
const JITTER_SALT: u64 = 0x6c69_6e65;

#[derive(Parser)]
#[command(name = "planeformer", version, about = "Piecewise-planar reconstruction from one image and its line segments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Training configuration (TOML key/value file).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Train without the line branch; at eval and infer time, feed an empty line sequence.
    #[arg(long, global = true)]
    no_lines: bool,
    /// Drop the center heads, center losses and center matching term.
    #[arg(long, global = true)]
    no_center: bool,
    /// Number of plane queries. A comma-separated list (20,30,40) runs a sweep.
    #[arg(long, global = true, value_name = "K", value_delimiter = ',')]
    queries: Vec<usize>,
    /// Gaussian endpoint jitter of line segments, in pixels.
    #[arg(long, global = true, value_name = "SIGMA", default_value_t = 0.0)]
    line_noise: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic split.
    GenData {
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        count: usize,
        /// Image size as WIDTHxHEIGHT.
        #[arg(long, default_value = "256x192", value_parser = parse_size)]
        size: (usize, usize),
    },
    /// Train a model on a generated split.
    Train {
        /// Dataset root written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Split scored after every epoch.
        #[arg(long)]
        val_split: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a split.
    Eval {
        /// Checkpoint file; with a --queries sweep, the training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Run a checkpoint on one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG, or .npy holding [H, W, 3] values in [0, 1].
        #[arg(long, required_unless_present = "scene")]
        image: Option<PathBuf>,
        /// One `x1 y1 x2 y2` record per line, pixel units.
        #[arg(long)]
        lines: Option<PathBuf>,
        /// A stored scene directory; supplies image, lines and intrinsics.
        #[arg(long, conflicts_with = "image")]
        scene: Option<PathBuf>,
        /// Camera intrinsics as fx,fy,cx,cy. Defaults to a centered camera with focal 0.9·width.
        #[arg(long, value_delimiter = ',')]
        intrinsics: Option<Vec<f64>>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Render reports, run logs and inference dumps.
    Plot {
        #[command(subcommand)]
        what: PlotCommand,
    },
}

#[derive(Subcommand, Debug)]
enum PlotCommand {
    /// Recall against threshold for one or more eval reports (SVG).
    Recall {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        /// Plot the normal-angle curve instead of the depth curve.
        #[arg(long)]
        normal: bool,
    },
    /// Training loss from a run log (SVG).
    Loss {
        #[arg(long)]
        log: PathBuf,
    },
    /// Mask overlay and per-slot attention maps from an infer directory (PNG).
    Inference {
        #[arg(long)]
        dir: PathBuf,
        /// Slots to render; defaults to the kept ones.
        #[arg(long, value_delimiter = ',')]
        slots: Vec<usize>,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w = w.trim().parse().map_err(|e| format!("width {w:?}: {e}"))?;
    let h = h.trim().parse().map_err(|e| format!("height {h:?}: {e}"))?;
    Ok((w, h))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    if !(c.line_noise >= 0.0) {
        bail!("--line-noise must be non-negative");
    }
    match &cli.command {
        Command::GenData { split, count, size } => gen_data(c, split, *count, *size),
        Command::Train {
            data,
            split,
            val_split,
            epochs,
            resume,
        } => run_train(c, data, split, val_split.as_deref(), *epochs, *resume),
        Command::Eval {
            checkpoint,
            data,
            split,
            threshold,
        } => run_eval(c, checkpoint, data, split, *threshold),
        Command::Infer {
            checkpoint,
            image,
            lines,
            scene,
            intrinsics,
            threshold,
        } => run_infer(
            c,
            checkpoint,
            image.as_deref(),
            lines.as_deref(),
            scene.as_deref(),
            intrinsics.as_deref(),
            *threshold,
        ),
        Command::Plot { what } => run_plot(c, what),
    }
}

fn require_out(c: &Common) -> Result<&Path> {
    c.out.as_deref().context("--out is required for this command")
}

fn gen_data(c: &Common, split: &str, count: usize, (w, h): (usize, usize)) -> Result<()> {
    let root = require_out(c)?;
    let mut generator = GeneratorConfig::default().with_size(w, h);
    generator.line_noise = c.line_noise;
    let entry = write_dataset(&DatasetManifest {
        root: root.to_path_buf(),
        split: split.to_string(),
        count,
        seed: c.seed.unwrap_or(0),
        generator,
    })?;
    info!("wrote {} scenes ({}x{}) to {}", entry.count, entry.width, entry.height, root.join(split).display());
    Ok(())
}

/// The config file (or defaults) with command-line overrides applied.
fn base_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if c.no_lines {
        cfg.use_lines = false;
    }
    if c.no_center {
        cfg.use_center_aux = false;
    }
    Ok(cfg)
}

/// One config per requested query count.
fn sweep(c: &Common, cfg: &TrainConfig) -> Result<Vec<(Option<usize>, TrainConfig)>> {
    if c.queries.is_empty() {
        return Ok(vec![(None, cfg.clone())]);
    }
    c.queries
        .iter()
        .map(|&k| {
            let mut cfg = cfg.clone();
            cfg.model.queries = Some(k);
            cfg.validate()?;
            Ok((Some(k), cfg))
        })
        .collect()
}

fn sweep_dir(root: &Path, k: Option<usize>, multi: bool) -> PathBuf {
    match k {
        Some(k) if multi => root.join(format!("k{k}")),
        _ => root.to_path_buf(),
    }
}

fn load_scenes(c: &Common, data: &Path, split: &str) -> Result<Vec<PlanarScene>> {
    let mut scenes = load_split(data, split).with_context(|| format!("loading split {split:?} from {}", data.display()))?;
    if c.line_noise > 0.0 {
        let seed = c.seed.unwrap_or(0) ^ JITTER_SALT;
        for (i, s) in scenes.iter_mut().enumerate() {
            s.line_segments = jitter_lines(&s.line_segments, c.line_noise, s.width, s.height, scene_seed(seed, i as u64));
        }
    }
    Ok(scenes)
}

fn run_train(
    c: &Common,
    data: &Path,
    split: &str,
    val_split: Option<&str>,
    epochs: Option<usize>,
    resume: bool,
) -> Result<()> {
    let root = require_out(c)?;
    let mut cfg = base_config(c)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let scenes = load_scenes(c, data, split)?;
    let validation = val_split.map(|s| load_scenes(c, data, s)).transpose()?;
    let runs = sweep(c, &cfg)?;
    let multi = runs.len() > 1;
    for (k, cfg) in runs {
        let out = sweep_dir(root, k, multi);
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
        info!("training {} scenes into {}", scenes.len(), out.display());
        let res = train(
            &cfg,
            &scenes,
            &TrainOptions {
                out: out.clone(),
                resume,
                validation: validation.clone(),
                stop_after_epoch: None,
            },
        )?;
        println!(
            "{}: epoch {} loss {:.4} checkpoint {}",
            out.display(),
            res.last_epoch,
            res.epoch_losses.last().copied().unwrap_or(f64::NAN),
            res.checkpoint.display()
        );
    }
    Ok(())
}

fn run_eval(c: &Common, checkpoint: &Path, data: &Path, split: &str, threshold: f64) -> Result<()> {
    let root = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let scenes = load_scenes(c, data, split)?;
    // Only check the architecture when the caller described one.
    let described = c.config.is_some() || c.no_center || !c.queries.is_empty();
    let cfg = base_config(c)?;
    let runs = sweep(c, &cfg)?;
    let multi = runs.len() > 1;
    let label = if c.no_lines { "no_lines" } else { "lines" };
    for (k, cfg) in runs {
        let path = if multi {
            sweep_dir(checkpoint, k, true).join(planeformer::harness::CHECKPOINT_FILE)
        } else {
            checkpoint.to_path_buf()
        };
        let expected = described.then(|| cfg.model_config());
        let (model, _) = PlaneFormer::load(&path, expected.as_ref())?;
        let predictor = ModelPredictor {
            model: &model,
            use_lines: !c.no_lines,
            threshold,
        };
        let opts = EvalOptions {
            label: match k {
                Some(k) if multi => format!("{label} K={k}"),
                _ => label.to_string(),
            },
            ..EvalOptions::default()
        };
        let report = evaluate(&predictor, &scenes, &opts)?;
        let file = match k {
            Some(k) if multi => format!("report_k{k}.jsonl"),
            _ => "report.jsonl".to_string(),
        };
        let out = root.join(file);
        write_report(&out, &report)?;
        let s = &report.summary;
        println!(
            "{}: recall@{HEADLINE_DEPTH}m {:.3} VI {:.3} RI {:.3} SC {:.3} ({} scenes, report {})",
            s.label,
            s.plane_recall_at_depth(HEADLINE_DEPTH),
            s.vi,
            s.ri,
            s.sc,
            s.scenes,
            out.display()
        );
    }
    Ok(())
}

fn run_infer(
    c: &Common,
    checkpoint: &Path,
    image: Option<&Path>,
    lines: Option<&Path>,
    scene: Option<&Path>,
    intrinsics: Option<&[f64]>,
    threshold: f64,
) -> Result<()> {
    let out = require_out(c)?;
    let (model, _) = PlaneFormer::load(checkpoint, None)?;
    let (pixels, width, height, mut segments, mut k) = match (scene, image) {
        (Some(dir), _) => {
            let s = load_scene(dir)?;
            (s.image, s.width, s.height, s.line_segments, Some(s.intrinsics))
        }
        (None, Some(path)) => {
            let (img, w, h) = load_image(path)?;
            (img, w, h, Vec::new(), None)
        }
        (None, None) => bail!("either --image or --scene is required"),
    };
    if let Some(path) = lines {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        segments = parse_line_file(&text, width, height)?;
    }
    if c.line_noise > 0.0 {
        segments = jitter_lines(&segments, c.line_noise, width, height, c.seed.unwrap_or(0) ^ JITTER_SALT);
    }
    if let Some(v) = intrinsics {
        ensure!(v.len() == 4, "--intrinsics takes fx,fy,cx,cy, got {} values", v.len());
        k = Some(CameraIntrinsics::new(v[0], v[1], v[2], v[3], width, height)?);
    }
    let intrinsics = match k {
        Some(k) => k,
        None => GeneratorConfig::default().with_size(width, height).intrinsics()?,
    };
    let req = InferRequest {
        image: pixels,
        width,
        height,
        lines: segments,
        intrinsics,
        use_lines: !c.no_lines,
        threshold,
    };
    let res = infer(&model, &req)?;
    write_inference(out, &req, &res)?;
    let seg = &res.segmentation;
    println!(
        "{} planes kept of {} slots, {} line segments, {} fallback pixels; wrote {}",
        seg.kept.len(),
        res.instances.len(),
        req.lines.len(),
        seg.fallback_pixels,
        out.display()
    );
    for p in &seg.kept {
        let n = p.param.0;
        println!("  slot {:2} p={:.3} n=({:.4}, {:.4}, {:.4})", p.slot, p.prob, n[0], n[1], n[2]);
    }
    Ok(())
}

fn run_plot(c: &Common, what: &PlotCommand) -> Result<()> {
    let out = require_out(c)?;
    match what {
        PlotCommand::Recall { reports, normal } => {
            let mut curves = Vec::new();
            for path in reports {
                let r = read_report(path)?;
                let label = if r.summary.label.is_empty() {
                    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
                } else {
                    r.summary.label.clone()
                };
                let curve = if *normal { r.summary.normal_curve } else { r.summary.depth_curve };
                curves.push((label, curve));
            }
            let x_label = if *normal { "normal threshold (degrees)" } else { "depth threshold (m)" };
            plot_recall_curves(&curves, x_label, out)?;
        }
        PlotCommand::Loss { log } => plot_loss_curve(&read_run_log(log)?, out)?,
        PlotCommand::Inference { dir, slots } => {
            let f = read_inference(dir)?;
            plot_mask_overlay(&f.image, &f.mask, f.width, f.height, &out.join("mask.png"))?;
            let slots: Vec<usize> = if slots.is_empty() {
                f.instances.iter().filter(|i| i.kept).map(|i| i.slot).collect()
            } else {
                slots.clone()
            };
            let a = &f.attention;
            let written = plot_attention(
                &f.image,
                f.width,
                f.height,
                &a.context,
                (a.grid_width, a.grid_height),
                &slots,
                out,
            )?;
            info!("wrote mask.png and {} attention maps", written.len());
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
