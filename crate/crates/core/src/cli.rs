//! Command-line workflow: dataset synthesis, static-set construction,
//! training under either mask mode, outpainting, evaluation, and mask
//! previews.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config failure.
//! `FRAMEFILL_SEED` overrides the default seed when neither a flag nor the
//! config file provides one.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::checkpoint::{self, ModelBundle};
use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::config::Config;
use crate::data::{self, DatasetEntry, DatasetManifest, MotionKind, SynthConfig};
use crate::denoiser::DenoiserConfig;
use crate::diffusion;
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::mask::MaskMode;
use crate::metrics::{self, MetricsConfig};
use crate::pipeline::{self, InferConfig, TrainConfig, Trainer};
use crate::rng::Stream;
use crate::video::VideoTensor;

pub const SEED_ENV: &str = "FRAMEFILL_SEED";

/// Every key the config file schema accepts (commands read subsets, so one
/// file can drive a whole experiment).
const CONFIG_KEYS: &[&str] = &[
    "seed",
    "synth.count",
    "synth.test_count",
    "synth.frames",
    "synth.height",
    "synth.width",
    "synth.kinds",
    "codec.steps",
    "codec.batch_frames",
    "codec.lr",
    "codec.stride",
    "codec.latent_channels",
    "codec.width",
    "train.steps",
    "train.lr",
    "train.batch_size",
    "train.clip_len",
    "denoiser.base_channels",
    "denoiser.ctx_channels",
    "denoiser.attn_dim",
    "denoiser.t_steps",
    "denoiser.n_global",
    "sched.beta_start",
    "sched.beta_end",
    "infer.intervals",
    "infer.steps",
    "infer.canvas",
    "infer.window",
    "infer.fill_iters",
    "eval.bmse_sigma",
];

#[derive(Parser, Debug)]
#[command(
    name = "framefill",
    version,
    about = "Video outpainting with masked spatiotemporal latent diffusion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic frame-sequence dataset with a manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the codec and denoiser; write a model checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Mask regime: m3ddm (per-frame random) or m3ddm-plus (consistent).
        #[arg(long = "mask-mode")]
        mask_mode: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint (fine-tuning/resume).
        #[arg(long = "init-from")]
        init_from: Option<PathBuf>,
    },
    /// Outpaint an input frame directory to a target aspect ratio.
    Outpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Target aspect ratio as W:H.
        #[arg(long = "target-aspect", default_value = "1:1")]
        target_aspect: String,
        /// Coarse-to-fine strides, e.g. 5,3,1.
        #[arg(long)]
        intervals: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Square canvas side; default: smallest valid size covering input.
        #[arg(long)]
        canvas: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compare generated frames against ground truth and write a report.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        /// Evaluation mask ratio (fraction of width removed, split per side).
        #[arg(long = "mask-ratio")]
        mask_ratio: Option<f64>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "")]
        dataset: String,
        #[arg(long = "model-tag", default_value = "")]
        model_tag: String,
        #[arg(long = "bmse-sigma")]
        bmse_sigma: Option<f64>,
    },
    /// Replace every frame of a video with its first frame.
    MakeStatic {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Crop the lateral margins off a video per the evaluation protocol,
    /// producing the outpainting input for a given mask ratio.
    CropEval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "mask-ratio")]
        mask_ratio: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Render sampled training masks as grayscale frames.
    PreviewMasks {
        #[arg(long = "mask-mode")]
        mask_mode: String,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok())
}

fn resolve_seed(flag: Option<u64>, cfg: Option<&Config>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(cfg) = cfg {
        if cfg.get("seed").is_some() {
            return cfg.u64_or("seed", 0);
        }
    }
    Ok(env_seed().unwrap_or(0))
}

fn load_config(path: &Path) -> Result<Config> {
    let cfg = Config::load(path)?;
    cfg.ensure_only(CONFIG_KEYS)?;
    Ok(cfg)
}

fn synth_config(cfg: &Config, seed: u64) -> Result<SynthConfig> {
    let kinds_raw = cfg.str_or("synth.kinds", "pan,object,static");
    let kinds: Vec<MotionKind> = kinds_raw
        .split(',')
        .map(|k| k.trim().parse())
        .collect::<Result<_>>()?;
    Ok(SynthConfig {
        count: cfg.usize_or("synth.count", 32)?,
        t_frames: cfg.usize_or("synth.frames", 16)?,
        height: cfg.usize_or("synth.height", 64)?,
        width: cfg.usize_or("synth.width", 64)?,
        kinds,
        seed,
    })
}

fn codec_train_config(cfg: &Config, seed: u64) -> Result<CodecTrainConfig> {
    let d = CodecTrainConfig::default();
    Ok(CodecTrainConfig {
        codec: CodecConfig {
            stride: cfg.usize_or("codec.stride", 4)?,
            latent_channels: cfg.usize_or("codec.latent_channels", 4)?,
            width: cfg.usize_or("codec.width", 12)?,
        },
        steps: cfg.usize_or("codec.steps", d.steps)?,
        batch_frames: cfg.usize_or("codec.batch_frames", d.batch_frames)?,
        learning_rate: cfg.f64_or("codec.lr", d.learning_rate)?,
        seed: crate::rng::derive_seed(seed, "codec-train", 0),
    })
}

fn train_config(cfg: &Config, mode: MaskMode, seed: u64, latent_channels: usize) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        mask_mode: mode,
        learning_rate: cfg.f64_or("train.lr", d.learning_rate)?,
        steps: cfg.usize_or("train.steps", d.steps)?,
        batch_size: cfg.usize_or("train.batch_size", d.batch_size)?,
        clip_len: cfg.usize_or("train.clip_len", d.clip_len)?,
        seed,
        denoiser: DenoiserConfig {
            latent_channels,
            base_channels: cfg.usize_or("denoiser.base_channels", 32)?,
            ctx_channels: cfg.usize_or("denoiser.ctx_channels", 32)?,
            attn_dim: cfg.usize_or("denoiser.attn_dim", 32)?,
            t_steps: cfg.usize_or("denoiser.t_steps", diffusion::DEFAULT_T_STEPS)?,
            n_global: cfg.usize_or("denoiser.n_global", 16)?,
        },
        beta_start: cfg.f64_or("sched.beta_start", diffusion::DEFAULT_BETA_START)?,
        beta_end: cfg.f64_or("sched.beta_end", diffusion::DEFAULT_BETA_END)?,
    })
}

fn parse_aspect(raw: &str) -> Result<(u32, u32)> {
    let Some((w, h)) = raw.split_once(':') else {
        return Err(Error::Usage(format!(
            "target aspect must be W:H, got `{raw}`"
        )));
    };
    let w: u32 = w
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("bad aspect width `{w}`")))?;
    let h: u32 = h
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("bad aspect height `{h}`")))?;
    if w == 0 || h == 0 {
        return Err(Error::Usage("aspect components must be positive".into()));
    }
    Ok((w, h))
}

fn parse_intervals(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad interval `{p}`")))
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, force } => cmd_synth(&config, &out, force),
        Command::Train {
            config,
            mask_mode,
            data,
            out,
            init_from,
        } => cmd_train(&config, &mask_mode, &data, &out, init_from.as_deref()),
        Command::Outpaint {
            checkpoint,
            input,
            target_aspect,
            intervals,
            steps,
            canvas,
            seed,
            out,
            force,
        } => cmd_outpaint(
            &checkpoint,
            &input,
            &target_aspect,
            intervals.as_deref(),
            steps,
            canvas,
            seed,
            &out,
            force,
        ),
        Command::Eval {
            gt,
            gen,
            mask_ratio,
            report,
            dataset,
            model_tag,
            bmse_sigma,
        } => cmd_eval(&gt, &gen, mask_ratio, &report, &dataset, &model_tag, bmse_sigma),
        Command::MakeStatic { input, out, force } => cmd_make_static(&input, &out, force),
        Command::CropEval {
            input,
            mask_ratio,
            out,
            force,
        } => cmd_crop_eval(&input, mask_ratio, &out, force),
        Command::PreviewMasks {
            mask_mode,
            frames,
            height,
            width,
            seed,
            out,
            force,
        } => cmd_preview_masks(&mask_mode, frames, height, width, seed, &out, force),
    }
}

pub fn cmd_synth(config_path: &Path, out: &Path, force: bool) -> Result<()> {
    let started = Instant::now();
    let cfg = load_config(config_path)?;
    let seed = resolve_seed(None, Some(&cfg))?;
    let scfg = synth_config(&cfg, seed)?;
    let test_count = cfg.usize_or("synth.test_count", 0)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::new();
    let train_videos = data::synth_videos_detailed(&scfg)?;
    let test_videos = if test_count > 0 {
        data::synth_videos_detailed(&SynthConfig {
            count: test_count,
            seed: crate::rng::derive_seed(seed, "synth-test", 0),
            ..scfg.clone()
        })?
    } else {
        Vec::new()
    };

    for (split, videos) in [("train", &train_videos), ("test", &test_videos)] {
        for (i, sv) in videos.iter().enumerate() {
            let name = format!("{split}_{i:04}");
            data::save_frames(&sv.video, &out.join(&name), force)?;
            entries.push(DatasetEntry {
                dir: name,
                split: split.to_string(),
                kind: sv.kind.as_str().to_string(),
            });
        }
    }
    DatasetManifest { videos: entries }.save(&out.join("manifest.json"))?;

    let mut manifest = RunManifest::new("synth", seed).with_config(&cfg);
    manifest.set("resolved.count", scfg.count);
    manifest.set("resolved.test_count", test_count);
    manifest.outputs.push(out.display().to_string());
    manifest.finish(started).save(&out.join("run_manifest.json"))?;
    println!(
        "synth: wrote {} train + {} test videos to {}",
        train_videos.len(),
        test_videos.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(
    config_path: &Path,
    mask_mode: &str,
    data_dir: &Path,
    out: &Path,
    init_from: Option<&Path>,
) -> Result<()> {
    let started = Instant::now();
    let cfg = load_config(config_path)?;
    let mode: MaskMode = mask_mode.parse()?;
    let seed = resolve_seed(None, Some(&cfg))?;

    let ds_manifest = DatasetManifest::load(&data_dir.join("manifest.json"))?;
    let dataset = ds_manifest.load_split(data_dir, Some("train"))?;
    println!("train: {} videos loaded from {}", dataset.len(), data_dir.display());

    let init = match init_from {
        Some(path) => Some(checkpoint::load_bundle(path)?),
        None => None,
    };

    // Codec: reuse the checkpoint's when fine-tuning, else train fresh.
    let codec = match &init {
        Some(bundle) => bundle.codec.clone(),
        None => {
            let ccfg = codec_train_config(&cfg, seed)?;
            println!("train: fitting codec ({} steps)", ccfg.steps);
            let (codec, log) = crate::codec::train_codec(&dataset, &ccfg)?;
            let recon = crate::codec::reconstruction_mse(&dataset, &codec)?;
            println!(
                "train: codec reconstruction mse {recon:.6} (baseline variance {:.6})",
                log.baseline_variance
            );
            let codec_loss_path = out.with_extension("codec_losses.csv");
            let mut csv = String::from("step,loss\n");
            for (i, l) in log.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            std::fs::write(&codec_loss_path, csv)
                .map_err(|e| Error::io(&codec_loss_path, e))?;
            codec
        }
    };

    let tcfg = train_config(&cfg, mode, seed, codec.cfg.latent_channels)?;
    let mut trainer = match &init {
        Some(bundle) => {
            let state = bundle.train_state.clone().ok_or_else(|| {
                Error::Checkpoint("checkpoint has no training state to resume from".into())
            })?;
            Trainer::resume(tcfg.clone(), bundle.denoiser.clone(), state)?
        }
        None => Trainer::new(tcfg.clone())?,
    };

    let start_step = trainer.completed_steps();
    println!(
        "train: mask mode {} ({} steps from step {start_step}, lr {})",
        mode.as_str(),
        tcfg.steps.saturating_sub(start_step),
        tcfg.learning_rate
    );
    let losses = pipeline::train(&mut trainer, &dataset, &codec)?;

    // Loss-curve log.
    let loss_path = out.with_extension("losses.csv");
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", start_step + i, l));
    }
    std::fs::write(&loss_path, csv).map_err(|e| Error::io(&loss_path, e))?;

    let bundle = ModelBundle {
        codec,
        denoiser: trainer.params.clone(),
        beta_start: tcfg.beta_start,
        beta_end: tcfg.beta_end,
        train_cfg: Some(tcfg.clone()),
        train_state: Some(trainer.state()),
    };
    checkpoint::save_bundle(out, &bundle)?;

    let mut manifest = RunManifest::new("train", seed).with_config(&cfg);
    manifest.set("mask.mode", mode.as_str());
    let p = mode.kind_probabilities();
    manifest.set(
        "mask.distribution",
        format!(
            "four_sided={},two_sided={},single_sided={},random={},full_frame={}",
            p[0], p[1], p[2], p[3], p[4]
        ),
    );
    manifest.set("resolved.steps", tcfg.steps);
    if let Some(path) = init_from {
        manifest.checkpoints.push(path.display().to_string());
    }
    manifest.outputs.push(out.display().to_string());
    manifest.outputs.push(loss_path.display().to_string());
    let manifest_path = manifest_path_for(out);
    manifest.finish(started).save(&manifest_path)?;
    if let Some(last) = losses.last() {
        println!("train: final loss {last:.6}; checkpoint at {}", out.display());
    } else {
        println!("train: checkpoint already complete at {}", out.display());
    }
    Ok(())
}

fn manifest_path_for(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

/// Smallest valid square canvas for an input: covers both dimensions and
/// keeps the latent grid even.
fn default_canvas(input: &VideoTensor, stride: usize) -> usize {
    let unit = stride * 2;
    let need = input.height().max(input.width());
    need.div_ceil(unit) * unit
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_outpaint(
    checkpoint_path: &Path,
    input_dir: &Path,
    target_aspect: &str,
    intervals: Option<&str>,
    steps: Option<usize>,
    canvas: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    force: bool,
) -> Result<()> {
    let started = Instant::now();
    let bundle = checkpoint::load_bundle(checkpoint_path)?;
    let input = data::load_frames(input_dir)?;
    let aspect = parse_aspect(target_aspect)?;
    let seed = resolve_seed(seed, None)?;

    let infer = InferConfig {
        intervals: match intervals {
            Some(raw) => parse_intervals(raw)?,
            None => vec![5, 3, 1],
        },
        canvas_size: canvas.unwrap_or_else(|| default_canvas(&input, bundle.codec.cfg.stride)),
        steps: steps.unwrap_or(50),
        seed,
        window: bundle
            .train_cfg
            .as_ref()
            .map(|c| c.clip_len)
            .unwrap_or(16),
        fill_iters: 50,
    };
    let sched = bundle.schedule()?;
    println!(
        "outpaint: {} frames, canvas {}, intervals {:?}, {} steps",
        input.t_frames(),
        infer.canvas_size,
        infer.intervals,
        infer.steps
    );
    let output = pipeline::outpaint(
        &input,
        aspect,
        &bundle.codec,
        &bundle.denoiser,
        &sched,
        &infer,
    )?;
    data::save_frames(&output, out, force)?;

    let mut manifest = RunManifest::new("outpaint", seed);
    manifest.set("target_aspect", format!("{}:{}", aspect.0, aspect.1));
    manifest.set(
        "intervals",
        infer
            .intervals
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    manifest.set("steps", infer.steps);
    manifest.set("canvas", infer.canvas_size);
    manifest.set("window", infer.window);
    manifest.set("fill_iters", infer.fill_iters);
    manifest
        .checkpoints
        .push(checkpoint_path.display().to_string());
    manifest.outputs.push(out.display().to_string());
    manifest.finish(started).save(&out.join("run_manifest.json"))?;
    println!("outpaint: wrote {} frames to {}", output.t_frames(), out.display());
    Ok(())
}

/// Collects (name, video) pairs: either one frame directory or a directory
/// of frame directories.
fn load_video_set(dir: &Path) -> Result<Vec<(String, VideoTensor)>> {
    let has_png = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .any(|e| {
            e.path()
                .extension()
                .and_then(|x| x.to_str())
                .map(|x| x.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        });
    if has_png {
        return Ok(vec![("video".to_string(), data::load_frames(dir)?)]);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no frames or video subdirectories",
            ),
        ));
    }
    subdirs
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, data::load_frames(&p)?))
        })
        .collect()
}

pub fn cmd_eval(
    gt_dir: &Path,
    gen_dir: &Path,
    mask_ratio: Option<f64>,
    report_path: &Path,
    dataset: &str,
    model_tag: &str,
    bmse_sigma: Option<f64>,
) -> Result<()> {
    let started = Instant::now();
    let gts = load_video_set(gt_dir)?;
    let gens = load_video_set(gen_dir)?;
    if gts.len() != gens.len() {
        return Err(Error::ShapeMismatch {
            axis: "time",
            expected: gts.len(),
            actual: gens.len(),
        });
    }

    let mut triples = Vec::with_capacity(gts.len());
    for ((gname, gt), (hname, gen)) in gts.into_iter().zip(gens) {
        if gt.data().dim() != gen.data().dim() {
            return Err(Error::InvalidParam {
                name: "eval inputs",
                message: format!(
                    "{gname} is {:?} but {hname} is {:?}",
                    gt.data().dim(),
                    gen.data().dim()
                ),
            });
        }
        let mask = match mask_ratio {
            Some(r) if r > 0.0 => data::crop_eval_input(&gt, r)?.1,
            _ => crate::video::MaskVideo::new(ndarray::Array3::zeros((
                gt.t_frames(),
                gt.height(),
                gt.width(),
            )))?,
        };
        triples.push((gt, gen, mask));
    }

    let mcfg = MetricsConfig {
        bmse_sigma: bmse_sigma.unwrap_or(1.5),
        mask_ratio,
        dataset: dataset.to_string(),
        model_tag: model_tag.to_string(),
    };
    let report = metrics::evaluate(&triples, &mcfg)?;
    report.save(report_path)?;
    println!("{}", metrics::MetricsReport::CSV_HEADER);
    println!("{}", report.csv_row());

    let mut manifest = RunManifest::new("eval", 0);
    if let Some(r) = mask_ratio {
        manifest.set("mask_ratio", r);
    }
    manifest.set("bmse_sigma", mcfg.bmse_sigma);
    manifest.set("videos", report.per_video.len());
    manifest.outputs.push(report_path.display().to_string());
    manifest
        .finish(started)
        .save(&manifest_path_for(report_path))?;
    Ok(())
}

pub fn cmd_make_static(input: &Path, out: &Path, force: bool) -> Result<()> {
    let started = Instant::now();
    let video = data::load_frames(input)?;
    let static_video = data::make_static(&video);
    data::save_frames(&static_video, out, force)?;
    let mut manifest = RunManifest::new("make-static", 0);
    manifest.set("frames", static_video.t_frames());
    manifest.outputs.push(out.display().to_string());
    manifest.finish(started).save(&out.join("run_manifest.json"))?;
    println!(
        "make-static: wrote {} frames to {}",
        static_video.t_frames(),
        out.display()
    );
    Ok(())
}

pub fn cmd_crop_eval(input: &Path, mask_ratio: f64, out: &Path, force: bool) -> Result<()> {
    let started = Instant::now();
    let video = data::load_frames(input)?;
    let (cropped, mask) = data::crop_eval_input(&video, mask_ratio)?;
    data::save_frames(&cropped, out, force)?;
    let mut manifest = RunManifest::new("crop-eval", 0);
    manifest.set("mask_ratio", mask_ratio);
    manifest.set("kept_width", cropped.width());
    manifest.set("masked_columns", mask.masked_count() / (mask.t_frames() * mask.height()));
    manifest.outputs.push(out.display().to_string());
    manifest.finish(started).save(&out.join("run_manifest.json"))?;
    println!(
        "crop-eval: kept central {} of {} columns into {}",
        cropped.width(),
        video.width(),
        out.display()
    );
    Ok(())
}

pub fn cmd_preview_masks(
    mask_mode: &str,
    frames: usize,
    height: usize,
    width: usize,
    seed: Option<u64>,
    out: &Path,
    force: bool,
) -> Result<()> {
    let started = Instant::now();
    let mode: MaskMode = mask_mode.parse()?;
    let seed = resolve_seed(seed, None)?;
    let mut rng = Stream::derive(seed, "preview-mask", 0);
    let mask = crate::mask::sample_video_mask(mode, frames, height, width, &mut rng);
    data::save_mask_frames(&mask, out, force)?;
    let mut manifest = RunManifest::new("preview-masks", seed);
    manifest.set("mask.mode", mode.as_str());
    manifest.set("frames", frames);
    manifest.outputs.push(out.display().to_string());
    manifest.finish(started).save(&out.join("run_manifest.json"))?;
    println!("preview-masks: wrote {frames} frames to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aspect_parsing() {
        assert_eq!(parse_aspect("16:9").unwrap(), (16, 9));
        assert_eq!(parse_aspect(" 1 : 1 ").unwrap(), (1, 1));
        assert!(parse_aspect("16x9").is_err());
        assert!(parse_aspect("0:1").is_err());
    }

    #[test]
    fn interval_parsing() {
        assert_eq!(parse_intervals("5,3,1").unwrap(), vec![5, 3, 1]);
        assert!(parse_intervals("5,x").is_err());
    }

    #[test]
    fn default_canvas_is_smallest_valid() {
        let v = VideoTensor::new(ndarray::Array4::zeros((1, 64, 22, 3))).unwrap();
        assert_eq!(default_canvas(&v, 4), 64);
        let v = VideoTensor::new(ndarray::Array4::zeros((1, 65, 22, 3))).unwrap();
        assert_eq!(default_canvas(&v, 4), 72);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(Error::Usage("x".into()).exit_code(), 2);
        assert_eq!(
            Error::ConfigParse {
                line: 1,
                message: "m".into()
            }
            .exit_code(),
            2
        );
        assert_eq!(Error::Diverged { step: 3 }.exit_code(), 1);
    }
}
