//! Frame-sequence I/O, synthetic dataset generation, static-set
//! construction, and evaluation-input preparation.
//!
//! The canonical on-disk format is a directory of zero-padded 8-bit PNG
//! frames, which round-trips bit-exactly against the 8-bit quantization of
//! the in-memory video.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::mask::centered_offset;
use crate::rng::Stream;
use crate::video::{MaskVideo, VideoTensor};

/// Motion regime of a synthetic video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    /// Camera translation over a larger hidden scene, so out-of-frame
    /// content is visible in other frames.
    Pan,
    /// Moving shapes over a static background.
    Object,
    /// Every frame equals the first frame.
    Static,
}

impl MotionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MotionKind::Pan => "pan",
            MotionKind::Object => "object",
            MotionKind::Static => "static",
        }
    }
}

impl std::str::FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pan" => Ok(MotionKind::Pan),
            "object" => Ok(MotionKind::Object),
            "static" => Ok(MotionKind::Static),
            other => Err(Error::BadValue {
                key: "motion kind".into(),
                message: format!("unknown kind `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub t_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Motion kinds cycled round-robin over the videos.
    pub kinds: Vec<MotionKind>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 32,
            t_frames: 16,
            height: 64,
            width: 64,
            kinds: vec![MotionKind::Pan, MotionKind::Object, MotionKind::Static],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.t_frames == 0 {
            return Err(Error::InvalidParam {
                name: "synth config",
                message: "count and t_frames must be positive".into(),
            });
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::FrameTooSmall {
                h: self.height,
                w: self.width,
                min: 8,
            });
        }
        if self.kinds.is_empty() {
            return Err(Error::InvalidParam {
                name: "synth config",
                message: "at least one motion kind required".into(),
            });
        }
        Ok(())
    }
}

/// A generated video along with what produced it, for oracle checks.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub video: VideoTensor,
    pub kind: MotionKind,
    /// Hidden scene behind a pan video, `(H, W + v*(T-1), 3)`.
    pub scene: Option<Array3<f64>>,
    /// Pan velocity in pixels per frame.
    pub velocity: Option<usize>,
}

fn saturate(v: f64) -> f64 {
    v.clamp(0.05, 0.95)
}

/// Paints a background plus a few flat-colored shapes onto `(h, w, 3)`.
fn render_scene(rng: &mut Stream, h: usize, w: usize) -> Array3<f64> {
    let mut scene = Array3::zeros((h, w, 3));
    // Background: horizontal gradient between two colors (a flat background
    // is the degenerate case where both ends coincide).
    let c0: Vec<f64> = (0..3).map(|_| saturate(rng.uniform())).collect();
    let c1: Vec<f64> = if rng.uniform() < 0.4 {
        c0.clone()
    } else {
        (0..3).map(|_| saturate(rng.uniform())).collect()
    };
    for i in 0..h {
        for j in 0..w {
            let a = j as f64 / (w.max(2) - 1) as f64;
            for ch in 0..3 {
                scene[[i, j, ch]] = c0[ch] * (1.0 - a) + c1[ch] * a;
            }
        }
    }
    // Shapes.
    let n_shapes = 1 + rng.below(2);
    for _ in 0..n_shapes {
        let color: Vec<f64> = (0..3).map(|_| saturate(rng.uniform())).collect();
        let size = h / 4 + rng.below(h / 4 + 1);
        let ci = rng.below(h) as isize;
        let cj = rng.below(w) as isize;
        let circle = rng.uniform() < 0.5;
        let r = size as isize / 2;
        for di in -r..=r {
            for dj in -r..=r {
                if circle && di * di + dj * dj > r * r {
                    continue;
                }
                let (i, j) = (ci + di, cj + dj);
                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                    continue;
                }
                for ch in 0..3 {
                    scene[[i as usize, j as usize, ch]] = color[ch];
                }
            }
        }
    }
    scene
}

/// Shape set with per-shape velocities for object videos.
struct MovingShape {
    color: [f64; 3],
    size: usize,
    circle: bool,
    ci: isize,
    cj: isize,
    vi: isize,
    vj: isize,
}

fn draw_shape_at(frame: &mut Array3<f64>, s: &MovingShape, step: isize) {
    let (h, w, _) = frame.dim();
    let r = s.size as isize / 2;
    let ci = s.ci + s.vi * step;
    let cj = s.cj + s.vj * step;
    for di in -r..=r {
        for dj in -r..=r {
            if s.circle && di * di + dj * dj > r * r {
                continue;
            }
            let (i, j) = (ci + di, cj + dj);
            if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                continue;
            }
            for ch in 0..3 {
                frame[[i as usize, j as usize, ch]] = s.color[ch];
            }
        }
    }
}

fn synth_one(kind: MotionKind, cfg: &SynthConfig, rng: &mut Stream) -> SynthVideo {
    let (t_len, h, w) = (cfg.t_frames, cfg.height, cfg.width);
    match kind {
        MotionKind::Pan => {
            let v = 1 + rng.below(3);
            let scene_w = w + v * (t_len - 1);
            let scene = render_scene(rng, h, scene_w);
            let mut data = Array4::zeros((t_len, h, w, 3));
            for k in 0..t_len {
                let off = k * v;
                data.index_axis_mut(Axis(0), k)
                    .assign(&scene.slice(ndarray::s![.., off..off + w, ..]));
            }
            SynthVideo {
                video: VideoTensor::new(data).expect("scene values in range"),
                kind,
                scene: Some(scene),
                velocity: Some(v),
            }
        }
        MotionKind::Object => {
            let background = render_scene(rng, h, w);
            let n_shapes = 1 + rng.below(2);
            let shapes: Vec<MovingShape> = (0..n_shapes)
                .map(|_| MovingShape {
                    color: [
                        saturate(rng.uniform()),
                        saturate(rng.uniform()),
                        saturate(rng.uniform()),
                    ],
                    size: h / 4 + rng.below(h / 4 + 1),
                    circle: rng.uniform() < 0.5,
                    ci: rng.below(h) as isize,
                    cj: rng.below(w) as isize,
                    vi: rng.below(5) as isize - 2,
                    vj: rng.below(5) as isize - 2,
                })
                .collect();
            let mut data = Array4::zeros((t_len, h, w, 3));
            for k in 0..t_len {
                let mut frame = background.clone();
                for s in &shapes {
                    draw_shape_at(&mut frame, s, k as isize);
                }
                data.index_axis_mut(Axis(0), k).assign(&frame);
            }
            SynthVideo {
                video: VideoTensor::new(data).expect("values in range"),
                kind,
                scene: None,
                velocity: None,
            }
        }
        MotionKind::Static => {
            let frame = render_scene(rng, h, w);
            let mut data = Array4::zeros((t_len, h, w, 3));
            for k in 0..t_len {
                data.index_axis_mut(Axis(0), k).assign(&frame);
            }
            SynthVideo {
                video: VideoTensor::new(data).expect("values in range"),
                kind,
                scene: None,
                velocity: None,
            }
        }
    }
}

/// Generates the configured number of synthetic videos, deterministically
/// per seed. Kinds cycle round-robin so the mix is balanced.
pub fn synth_videos_detailed(cfg: &SynthConfig) -> Result<Vec<SynthVideo>> {
    cfg.validate()?;
    Ok((0..cfg.count)
        .map(|i| {
            let kind = cfg.kinds[i % cfg.kinds.len()];
            let mut rng = Stream::derive(cfg.seed, "synth-video", i as u64);
            synth_one(kind, cfg, &mut rng)
        })
        .collect())
}

pub fn synth_videos(cfg: &SynthConfig) -> Result<Vec<VideoTensor>> {
    Ok(synth_videos_detailed(cfg)?
        .into_iter()
        .map(|s| s.video)
        .collect())
}

/// Replaces every frame with frame 0.
pub fn make_static(video: &VideoTensor) -> VideoTensor {
    let first = video.frame(0).to_owned();
    let (t_len, h, w, c) = video.data().dim();
    let mut data = Array4::zeros((t_len, h, w, c));
    for t in 0..t_len {
        data.index_axis_mut(Axis(0), t).assign(&first);
    }
    VideoTensor::new(data).expect("copy of valid video")
}

/// Central crop for the evaluation protocol: keeps `(1 - r) * W` columns and
/// returns the full-width mask of the removed columns (half per side, odd
/// remainder to the right).
pub fn crop_eval_input(gt: &VideoTensor, mask_ratio: f64) -> Result<(VideoTensor, MaskVideo)> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::InvalidParam {
            name: "mask_ratio",
            message: format!("ratio {mask_ratio} outside [0, 1)"),
        });
    }
    let w = gt.width();
    let masked_total = (mask_ratio * w as f64).floor() as usize;
    let kept = w - masked_total;
    if kept < 8 {
        return Err(Error::TooNarrow { kept, min: 8 });
    }
    let left = masked_total / 2;
    let input = VideoTensor::new(
        gt.data()
            .slice(ndarray::s![.., .., left..left + kept, ..])
            .to_owned(),
    )?;
    let mut mask = Array3::ones((gt.t_frames(), gt.height(), w));
    mask.slice_mut(ndarray::s![.., .., left..left + kept])
        .fill(0.0);
    let mask = MaskVideo::new(mask)?;
    debug_assert_eq!(centered_offset(w, kept), left);
    Ok((input, mask))
}

fn quantize_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes zero-padded 8-bit PNG frames. Refuses to overwrite a non-empty
/// directory unless `force` is set.
pub fn save_frames(video: &VideoTensor, dir: &Path, force: bool) -> Result<()> {
    prepare_dir(dir, force)?;
    for t in 0..video.t_frames() {
        let frame = video.frame(t);
        let (h, w, _) = frame.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                img.put_pixel(
                    j as u32,
                    i as u32,
                    image::Rgb([
                        quantize_byte(frame[[i, j, 0]]),
                        quantize_byte(frame[[i, j, 1]]),
                        quantize_byte(frame[[i, j, 2]]),
                    ]),
                );
            }
        }
        let path = dir.join(format!("{t:06}.png"));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

/// Writes a mask as 8-bit grayscale frames (0 known / 255 outpaint).
pub fn save_mask_frames(mask: &MaskVideo, dir: &Path, force: bool) -> Result<()> {
    prepare_dir(dir, force)?;
    for t in 0..mask.t_frames() {
        let frame = mask.frame(t);
        let (h, w) = frame.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let v = if frame[[i, j]] == 1.0 { 255u8 } else { 0u8 };
                img.put_pixel(j as u32, i as u32, image::Luma([v]));
            }
        }
        let path = dir.join(format!("{t:06}.png"));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Usage(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Decodes one 8-bit image frame from raw file bytes into `(H, W, 3)`
/// pixels in `[0, 1]`. Rejects frames smaller than 1x1 or over 16k wide.
pub fn decode_frame_bytes(bytes: &[u8]) -> Result<Array3<f64>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Image {
            path: PathBuf::from("<memory>"),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 || w > 16384 || h > 16384 {
        return Err(Error::InvalidParam {
            name: "frame size",
            message: format!("unsupported frame size {h}x{w}"),
        });
    }
    let mut frame = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let px = img.get_pixel(j as u32, i as u32);
            for ch in 0..3 {
                frame[[i, j, ch]] = px[ch] as f64 / 255.0;
            }
        }
    }
    Ok(frame)
}

/// Loads a directory of equally sized 8-bit image frames in name order.
pub fn load_frames(dir: &Path) -> Result<VideoTensor> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .png frames in directory"),
        ));
    }

    let mut frames: Vec<Array3<f64>> = Vec::with_capacity(paths.len());
    let mut dims: Option<(usize, usize)> = None;
    for path in &paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let frame = decode_frame_bytes(&bytes).map_err(|e| match e {
            Error::Image { source, .. } => Error::Image {
                path: path.clone(),
                source,
            },
            other => other,
        })?;
        let (h, w, _) = frame.dim();
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::InvalidParam {
                    name: "frame size",
                    message: format!(
                        "{} is {}x{}, expected {}x{}",
                        path.display(),
                        h,
                        w,
                        d.0,
                        d.1
                    ),
                });
            }
            _ => {}
        }
        frames.push(frame);
    }

    let (h, w) = dims.expect("at least one frame");
    let mut data = Array4::zeros((frames.len(), h, w, 3));
    for (t, frame) in frames.iter().enumerate() {
        data.index_axis_mut(Axis(0), t).assign(frame);
    }
    VideoTensor::new(data)
}

/// One dataset entry in the manifest.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetEntry {
    pub dir: String,
    pub split: String,
    pub kind: String,
}

/// Manifest listing the video directories of a synthesized dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub videos: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads all videos of one split (every video when `split` is `None`).
    pub fn load_split(&self, root: &Path, split: Option<&str>) -> Result<Vec<VideoTensor>> {
        let mut out = Vec::new();
        for entry in &self.videos {
            if let Some(s) = split {
                if entry.split != s {
                    continue;
                }
            }
            out.push(load_frames(&root.join(&entry.dir))?);
        }
        if out.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(out)
    }
}
