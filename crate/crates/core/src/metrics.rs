//! Reference metrics (MSE, PSNR, SSIM) plus the blur metric BMSE, and the
//! evaluation harness producing per-video and aggregate reports.
//!
//! BMSE blurs the generated video and measures the MSE between the blurred
//! and original versions: sharp content changes a lot under blur, so lower
//! BMSE means a blurrier video.

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::video::{validate_pair, MaskVideo, VideoTensor};

/// PSNR value reported for identical inputs (the true value is infinite).
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same_shape(a: &VideoTensor, b: &VideoTensor) -> Result<()> {
    if a.data().dim() != b.data().dim() {
        let (ad, bd) = (a.data().dim(), b.data().dim());
        let axis = if ad.0 != bd.0 {
            "time"
        } else if ad.1 != bd.1 {
            "height"
        } else if ad.2 != bd.2 {
            "width"
        } else {
            "channel"
        };
        return Err(Error::ShapeMismatch {
            axis,
            expected: 0,
            actual: 0,
        });
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn mse(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let diff = a.data() - b.data();
    Ok(diff.mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// `10 log10(peak^2 / mse)` in dB; `+inf` for identical inputs (reports cap
/// it at [`PSNR_CAP_DB`]).
pub fn psnr(a: &VideoTensor, b: &VideoTensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

pub fn cap_psnr(p: f64) -> f64 {
    p.min(PSNR_CAP_DB)
}

/// Largest odd window not exceeding 11 that fits the frame, with the
/// Gaussian width scaled proportionally from the reference 11/1.5 pair.
fn ssim_window(h: usize, w: usize) -> Result<(usize, f64)> {
    let m = h.min(w);
    if m < 3 {
        return Err(Error::FrameTooSmall { h, w, min: 3 });
    }
    let win = m.min(11);
    let win = if win % 2 == 0 { win - 1 } else { win };
    let sigma = 1.5 * win as f64 / 11.0;
    Ok((win, sigma))
}

fn gaussian_kernel_2d(win: usize, sigma: f64) -> Array2<f64> {
    let r = (win / 2) as isize;
    let mut k = Array2::zeros((win, win));
    for i in -r..=r {
        for j in -r..=r {
            let v = (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp();
            k[[(i + r) as usize, (j + r) as usize]] = v;
        }
    }
    let sum = k.sum();
    k.mapv(|v| v / sum)
}

fn ssim_plane(x: &ArrayView2<f64>, y: &ArrayView2<f64>, kernel: &Array2<f64>) -> f64 {
    let (h, w) = x.dim();
    let win = kernel.dim().0;
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for i0 in 0..=(h - win) {
        for j0 in 0..=(w - win) {
            let mut mx = 0.0;
            let mut my = 0.0;
            for i in 0..win {
                for j in 0..win {
                    let k = kernel[[i, j]];
                    mx += k * x[[i0 + i, j0 + j]];
                    my += k * y[[i0 + i, j0 + j]];
                }
            }
            let mut vx = 0.0;
            let mut vy = 0.0;
            let mut cov = 0.0;
            for i in 0..win {
                for j in 0..win {
                    let k = kernel[[i, j]];
                    let dx = x[[i0 + i, j0 + j]] - mx;
                    let dy = y[[i0 + i, j0 + j]] - my;
                    vx += k * dx * dx;
                    vy += k * dy * dy;
                    cov += k * dx * dy;
                }
            }
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    total / count as f64
}

/// Windowed SSIM with a Gaussian window, averaged over window positions,
/// channels, and frames. Peak value 1.0.
pub fn ssim(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let (win, sigma) = ssim_window(a.height(), a.width())?;
    let kernel = gaussian_kernel_2d(win, sigma);
    let (t_len, _, _, c) = a.data().dim();
    let mut total = 0.0;
    for t in 0..t_len {
        for ch in 0..c {
            let x = a
                .data()
                .slice(ndarray::s![t, .., .., ch]);
            let y = b
                .data()
                .slice(ndarray::s![t, .., .., ch]);
            total += ssim_plane(&x, &y, &kernel);
        }
    }
    Ok(total / (t_len * c) as f64)
}

fn reflect(i: isize, n: usize) -> usize {
    // Symmetric reflection including the edge pixel.
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - 1 - i;
    }
    i.clamp(0, n - 1) as usize
}

fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur of each frame with symmetric-reflection padding.
pub fn gaussian_blur(video: &VideoTensor, sigma: f64) -> VideoTensor {
    let kernel = gaussian_kernel_1d(sigma);
    let r = (kernel.len() / 2) as isize;
    let (t_len, h, w, c) = video.data().dim();
    let mut tmp = ndarray::Array4::zeros((t_len, h, w, c));
    // Horizontal pass.
    for t in 0..t_len {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let sj = reflect(j as isize + ki as isize - r, w);
                        acc += kv * video.data()[[t, i, sj, ch]];
                    }
                    tmp[[t, i, j, ch]] = acc;
                }
            }
        }
    }
    // Vertical pass.
    let mut out = ndarray::Array4::zeros((t_len, h, w, c));
    for t in 0..t_len {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let si = reflect(i as isize + ki as isize - r, h);
                        acc += kv * tmp[[t, si, j, ch]];
                    }
                    out[[t, i, j, ch]] = acc;
                }
            }
        }
    }
    VideoTensor::from_unclamped(out).expect("blur of finite input is finite")
}

/// Blur-difference metric: MSE between the video and its Gaussian-blurred
/// copy. Higher means sharper; lower means the video was already blurry.
pub fn bmse(gen: &VideoTensor, sigma: f64) -> f64 {
    let blurred = gaussian_blur(gen, sigma);
    let diff = blurred.data() - gen.data();
    diff.mapv(|d| d * d).mean().unwrap_or(0.0)
}

/// MSE restricted to masked pixels (all channels); `None` for an empty mask.
pub fn masked_mse(a: &VideoTensor, b: &VideoTensor, mask: &MaskVideo) -> Result<Option<f64>> {
    check_same_shape(a, b)?;
    validate_pair(a, mask)?;
    let (t_len, h, w, c) = a.data().dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..t_len {
        for i in 0..h {
            for j in 0..w {
                if mask.data()[[t, i, j]] == 1.0 {
                    for ch in 0..c {
                        let d = a.data()[[t, i, j, ch]] - b.data()[[t, i, j, ch]];
                        total += d * d;
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(total / count as f64))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsConfig {
    pub bmse_sigma: f64,
    pub mask_ratio: Option<f64>,
    pub dataset: String,
    pub model_tag: String,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            bmse_sigma: 1.5,
            mask_ratio: None,
            dataset: String::new(),
            model_tag: String::new(),
        }
    }
}

/// Metric values for one video (or an aggregate mean).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VideoMetrics {
    pub mse: f64,
    /// Capped at [`PSNR_CAP_DB`] for identical inputs.
    pub psnr_db: f64,
    pub ssim: f64,
    pub bmse: f64,
    /// Metrics over the outpainted region only; absent for an empty mask.
    pub masked_mse: Option<f64>,
    pub masked_psnr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub model_tag: String,
    pub mask_ratio: Option<f64>,
    pub bmse_sigma: f64,
    pub per_video: Vec<VideoMetrics>,
    pub mean: VideoMetrics,
}

/// Full-frame and masked-region metrics for one (gt, gen, mask) triple.
pub fn evaluate_video(
    gt: &VideoTensor,
    gen: &VideoTensor,
    mask: &MaskVideo,
    cfg: &MetricsConfig,
) -> Result<VideoMetrics> {
    check_same_shape(gt, gen)?;
    validate_pair(gt, mask)?;
    let m = mse(gt, gen)?;
    let p = cap_psnr(psnr(gt, gen, 1.0)?);
    let s = ssim(gt, gen)?;
    let bm = bmse(gen, cfg.bmse_sigma);
    let mm = masked_mse(gt, gen, mask)?;
    let mp = mm.map(|v| {
        if v == 0.0 {
            PSNR_CAP_DB
        } else {
            cap_psnr(10.0 * (1.0 / v).log10())
        }
    });
    Ok(VideoMetrics {
        mse: m,
        psnr_db: p,
        ssim: s,
        bmse: bm,
        masked_mse: mm,
        masked_psnr_db: mp,
    })
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn aggregate(per_video: &[VideoMetrics]) -> VideoMetrics {
    let masked: Vec<f64> = per_video.iter().filter_map(|v| v.masked_mse).collect();
    let masked_p: Vec<f64> = per_video.iter().filter_map(|v| v.masked_psnr_db).collect();
    VideoMetrics {
        mse: mean_of(per_video.iter().map(|v| v.mse)),
        psnr_db: mean_of(per_video.iter().map(|v| v.psnr_db)),
        ssim: mean_of(per_video.iter().map(|v| v.ssim)),
        bmse: mean_of(per_video.iter().map(|v| v.bmse)),
        masked_mse: if masked.is_empty() {
            None
        } else {
            Some(masked.iter().sum::<f64>() / masked.len() as f64)
        },
        masked_psnr_db: if masked_p.is_empty() {
            None
        } else {
            Some(masked_p.iter().sum::<f64>() / masked_p.len() as f64)
        },
    }
}

/// Evaluates a batch of videos and assembles the report.
pub fn evaluate(
    triples: &[(VideoTensor, VideoTensor, MaskVideo)],
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    if triples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_video = Vec::with_capacity(triples.len());
    for (gt, gen, mask) in triples {
        per_video.push(evaluate_video(gt, gen, mask, cfg)?);
    }
    let mean = aggregate(&per_video);
    Ok(MetricsReport {
        dataset: cfg.dataset.clone(),
        model_tag: cfg.model_tag.clone(),
        mask_ratio: cfg.mask_ratio,
        bmse_sigma: cfg.bmse_sigma,
        per_video,
        mean,
    })
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<MetricsReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_report(&text)
    }

    /// Aggregate row as a delimited table line.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.dataset,
            self.model_tag,
            self.mask_ratio.map_or(String::new(), |r| r.to_string()),
            self.mean.mse,
            self.mean.psnr_db,
            self.mean.ssim,
            self.mean.bmse,
            self.mean
                .masked_mse
                .map_or(String::new(), |v| v.to_string()),
        )
    }

    pub const CSV_HEADER: &'static str =
        "dataset,model,mask_ratio,mse,psnr_db,ssim,bmse,masked_mse";
}

/// Parses a report from JSON text, validating value ranges.
pub fn parse_report(text: &str) -> Result<MetricsReport> {
    let report: MetricsReport = serde_json::from_str(text)?;
    for v in report.per_video.iter().chain([&report.mean]) {
        for (name, value) in [
            ("mse", v.mse),
            ("psnr_db", v.psnr_db),
            ("ssim", v.ssim),
            ("bmse", v.bmse),
        ] {
            if !value.is_finite() {
                return Err(Error::BadValue {
                    key: name.into(),
                    message: "non-finite metric value".into(),
                });
            }
        }
        if !(-1.0..=1.0).contains(&v.ssim) {
            return Err(Error::BadValue {
                key: "ssim".into(),
                message: format!("ssim {} outside [-1, 1]", v.ssim),
            });
        }
    }
    Ok(report)
}
