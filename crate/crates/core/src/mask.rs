//! Mask samplers and outpainting mask geometry.
//!
//! Two training regimes are implemented. `M3ddm` samples an independent mask
//! direction and ratio for every frame of a clip; `M3ddmPlus` samples one
//! strategy per clip and replicates it, so all frames share the same mask.
//! The mask ratio is a fraction of the half-dimension: 1.0 would reach from
//! the frame boundary to the center.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::video::{validate_pair, MaskVideo, VideoTensor};

pub const RATIO_MIN: f64 = 0.15;
pub const RATIO_MAX: f64 = 0.75;

/// Training mask regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskMode {
    /// Independent mask direction and ratio per frame.
    M3ddm,
    /// One mask direction and ratio shared by every frame of the clip.
    M3ddmPlus,
}

impl MaskMode {
    /// Categorical distribution over strategy kinds, in the fixed order
    /// four-sided, two-sided, single-sided, random, full-frame.
    pub fn kind_probabilities(&self) -> [f64; 5] {
        match self {
            MaskMode::M3ddm => [0.2, 0.1, 0.35, 0.1, 0.25],
            MaskMode::M3ddmPlus => [0.3, 0.55, 0.15, 0.0, 0.0],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskMode::M3ddm => "m3ddm",
            MaskMode::M3ddmPlus => "m3ddm-plus",
        }
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m3ddm" => Ok(MaskMode::M3ddm),
            "m3ddm-plus" => Ok(MaskMode::M3ddmPlus),
            other => Err(Error::Usage(format!(
                "unknown mask mode `{other}` (expected m3ddm or m3ddm-plus)"
            ))),
        }
    }
}

/// A frame edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

pub const ALL_SIDES: [Side; 4] = [Side::Left, Side::Right, Side::Top, Side::Bottom];

/// Which opposite pair a two-sided mask covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SidePair {
    LeftRight,
    TopBottom,
}

impl SidePair {
    fn sides(&self) -> [Side; 2] {
        match self {
            SidePair::LeftRight => [Side::Left, Side::Right],
            SidePair::TopBottom => [Side::Top, Side::Bottom],
        }
    }
}

/// Per-side band ratios for the random strategy; `None` leaves a side
/// unmasked. At least one side is masked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideRatios {
    pub left: Option<f64>,
    pub right: Option<f64>,
    pub top: Option<f64>,
    pub bottom: Option<f64>,
}

impl SideRatios {
    fn get(&self, side: Side) -> Option<f64> {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
            Side::Top => self.top,
            Side::Bottom => self.bottom,
        }
    }

    fn any(&self) -> bool {
        self.left.is_some() || self.right.is_some() || self.top.is_some() || self.bottom.is_some()
    }
}

/// A sampled mask geometry for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskStrategy {
    FourSided { ratio: f64 },
    TwoSided { pair: SidePair, ratio: f64 },
    SingleSided { side: Side, ratio: f64 },
    /// Each side independently masked with its own ratio.
    Random { ratios: SideRatios },
    FullFrame,
}

/// Strategy kind, used for distribution checks and manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    FourSided,
    TwoSided,
    SingleSided,
    Random,
    FullFrame,
}

impl MaskStrategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            MaskStrategy::FourSided { .. } => StrategyKind::FourSided,
            MaskStrategy::TwoSided { .. } => StrategyKind::TwoSided,
            MaskStrategy::SingleSided { .. } => StrategyKind::SingleSided,
            MaskStrategy::Random { .. } => StrategyKind::Random,
            MaskStrategy::FullFrame => StrategyKind::FullFrame,
        }
    }

    /// Band ratio for one side, if that side is masked.
    fn side_ratio(&self, side: Side) -> Option<f64> {
        match self {
            MaskStrategy::FourSided { ratio } => Some(*ratio),
            MaskStrategy::TwoSided { pair, ratio } => {
                pair.sides().contains(&side).then_some(*ratio)
            }
            MaskStrategy::SingleSided { side: s, ratio } => (*s == side).then_some(*ratio),
            MaskStrategy::Random { ratios } => ratios.get(side),
            MaskStrategy::FullFrame => None,
        }
    }
}

fn draw_ratio(rng: &mut Stream) -> f64 {
    rng.uniform_in(RATIO_MIN, RATIO_MAX)
}

/// Draws one mask strategy from the mode's categorical distribution.
///
/// Two-sided picks left/right or top/bottom uniformly; single-sided picks
/// one of the four sides uniformly; random masks each side independently
/// with probability 0.5 (resampling an all-unmasked draw).
pub fn sample_strategy(mode: MaskMode, rng: &mut Stream) -> MaskStrategy {
    let p = mode.kind_probabilities();
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut kind = StrategyKind::FullFrame;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            kind = [
                StrategyKind::FourSided,
                StrategyKind::TwoSided,
                StrategyKind::SingleSided,
                StrategyKind::Random,
                StrategyKind::FullFrame,
            ][i];
            break;
        }
    }
    match kind {
        StrategyKind::FourSided => MaskStrategy::FourSided { ratio: draw_ratio(rng) },
        StrategyKind::TwoSided => {
            let pair = if rng.below(2) == 0 {
                SidePair::LeftRight
            } else {
                SidePair::TopBottom
            };
            MaskStrategy::TwoSided { pair, ratio: draw_ratio(rng) }
        }
        StrategyKind::SingleSided => {
            let side = ALL_SIDES[rng.below(4)];
            MaskStrategy::SingleSided { side, ratio: draw_ratio(rng) }
        }
        StrategyKind::Random => loop {
            let pick = |rng: &mut Stream| -> Option<f64> {
                if rng.uniform() < 0.5 {
                    Some(draw_ratio(rng))
                } else {
                    None
                }
            };
            let ratios = SideRatios {
                left: pick(rng),
                right: pick(rng),
                top: pick(rng),
                bottom: pick(rng),
            };
            if ratios.any() {
                break MaskStrategy::Random { ratios };
            }
        },
        StrategyKind::FullFrame => MaskStrategy::FullFrame,
    }
}

/// Band width in pixels for a ratio of the half-dimension: round-half-up of
/// `ratio * dim / 2`, at least one pixel for any positive ratio.
fn band_width(ratio: f64, dim: usize) -> usize {
    if ratio <= 0.0 {
        return 0;
    }
    let w = (ratio * dim as f64 / 2.0).round() as usize;
    w.max(1)
}

/// Renders one frame mask deterministically from a strategy.
pub fn render_frame_mask(strategy: &MaskStrategy, h: usize, w: usize) -> Array2<f64> {
    let mut mask = Array2::zeros((h, w));
    if matches!(strategy, MaskStrategy::FullFrame) {
        mask.fill(1.0);
        return mask;
    }
    for side in ALL_SIDES {
        let Some(ratio) = strategy.side_ratio(side) else {
            continue;
        };
        match side {
            Side::Left => {
                let bw = band_width(ratio, w).min(w);
                mask.slice_mut(ndarray::s![.., ..bw]).fill(1.0);
            }
            Side::Right => {
                let bw = band_width(ratio, w).min(w);
                mask.slice_mut(ndarray::s![.., w - bw..]).fill(1.0);
            }
            Side::Top => {
                let bw = band_width(ratio, h).min(h);
                mask.slice_mut(ndarray::s![..bw, ..]).fill(1.0);
            }
            Side::Bottom => {
                let bw = band_width(ratio, h).min(h);
                mask.slice_mut(ndarray::s![h - bw.., ..]).fill(1.0);
            }
        }
    }
    mask
}

/// Samples a full training mask video for a clip.
pub fn sample_video_mask(
    mode: MaskMode,
    t_frames: usize,
    h: usize,
    w: usize,
    rng: &mut Stream,
) -> MaskVideo {
    let mut data = Array3::zeros((t_frames, h, w));
    match mode {
        MaskMode::M3ddm => {
            for t in 0..t_frames {
                let strategy = sample_strategy(mode, rng);
                let frame = render_frame_mask(&strategy, h, w);
                data.index_axis_mut(ndarray::Axis(0), t).assign(&frame);
            }
        }
        MaskMode::M3ddmPlus => {
            let strategy = sample_strategy(mode, rng);
            let frame = render_frame_mask(&strategy, h, w);
            for t in 0..t_frames {
                data.index_axis_mut(ndarray::Axis(0), t).assign(&frame);
            }
        }
    }
    MaskVideo::new(data).expect("rendered masks are binary")
}

/// Inference-time outpainting mask: zeros on the centered input rectangle,
/// ones elsewhere. Odd margins put the extra row/column at the bottom/right.
pub fn outpaint_mask(
    canvas_h: usize,
    canvas_w: usize,
    input_h: usize,
    input_w: usize,
) -> Result<Array2<f64>> {
    if input_h > canvas_h || input_w > canvas_w {
        return Err(Error::InputExceedsCanvas {
            input_h,
            input_w,
            canvas_h,
            canvas_w,
        });
    }
    let top = (canvas_h - input_h) / 2;
    let left = (canvas_w - input_w) / 2;
    let mut mask = Array2::ones((canvas_h, canvas_w));
    mask.slice_mut(ndarray::s![top..top + input_h, left..left + input_w])
        .fill(0.0);
    Ok(mask)
}

/// Top-left corner of the centered input rectangle inside the canvas.
pub fn centered_offset(canvas: usize, input: usize) -> usize {
    (canvas - input) / 2
}

/// Masked pixels zeroed in every channel, known pixels unchanged.
pub fn apply_mask(video: &VideoTensor, mask: &MaskVideo) -> Result<VideoTensor> {
    validate_pair(video, mask)?;
    let mut data = video.data().clone();
    let (t_frames, h, w, c) = data.dim();
    for t in 0..t_frames {
        for i in 0..h {
            for j in 0..w {
                if mask.data()[[t, i, j]] == 1.0 {
                    for k in 0..c {
                        data[[t, i, j, k]] = 0.0;
                    }
                }
            }
        }
    }
    VideoTensor::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use std::collections::HashMap;

    #[test]
    fn single_sided_left_band_width() {
        // ratio 0.5 of the 64-wide frame's half-dimension: 0.5 * 32 = 16.
        let s = MaskStrategy::SingleSided {
            side: Side::Left,
            ratio: 0.5,
        };
        let m = render_frame_mask(&s, 64, 64);
        for i in 0..64 {
            for j in 0..64 {
                let expect = if j < 16 { 1.0 } else { 0.0 };
                assert_eq!(m[[i, j]], expect, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn full_frame_masks_everything() {
        let m = render_frame_mask(&MaskStrategy::FullFrame, 64, 64);
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 4096);
    }

    #[test]
    fn four_sided_leaves_central_block() {
        let s = MaskStrategy::FourSided { ratio: 0.5 };
        let m = render_frame_mask(&s, 64, 64);
        // Oracle: count the unmasked complement and check its bounds.
        let mut unmasked = 0;
        for i in 0..64 {
            for j in 0..64 {
                if m[[i, j]] == 0.0 {
                    assert!((16..48).contains(&i) && (16..48).contains(&j));
                    unmasked += 1;
                }
            }
        }
        assert_eq!(unmasked, 32 * 32);
    }

    #[test]
    fn minimum_band_is_one_pixel() {
        let s = MaskStrategy::SingleSided {
            side: Side::Top,
            ratio: 0.15,
        };
        // 0.15 * 8 / 2 = 0.6 rounds to 1.
        let m = render_frame_mask(&s, 8, 8);
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 8);
    }

    #[test]
    fn m3ddm_kind_frequencies() {
        let mut rng = Stream::from_seed(11);
        let n = 100_000;
        let mut counts: HashMap<StrategyKind, usize> = HashMap::new();
        for _ in 0..n {
            *counts
                .entry(sample_strategy(MaskMode::M3ddm, &mut rng).kind())
                .or_default() += 1;
        }
        let freq = |k| *counts.get(&k).unwrap_or(&0) as f64 / n as f64;
        assert!((freq(StrategyKind::FourSided) - 0.2).abs() < 0.01);
        assert!((freq(StrategyKind::TwoSided) - 0.1).abs() < 0.01);
        assert!((freq(StrategyKind::SingleSided) - 0.35).abs() < 0.01);
        assert!((freq(StrategyKind::Random) - 0.1).abs() < 0.01);
        assert!((freq(StrategyKind::FullFrame) - 0.25).abs() < 0.01);
    }

    #[test]
    fn m3ddm_plus_kind_frequencies() {
        let mut rng = Stream::from_seed(12);
        let n = 100_000;
        let mut counts: HashMap<StrategyKind, usize> = HashMap::new();
        for _ in 0..n {
            *counts
                .entry(sample_strategy(MaskMode::M3ddmPlus, &mut rng).kind())
                .or_default() += 1;
        }
        let freq = |k| *counts.get(&k).unwrap_or(&0) as f64 / n as f64;
        assert!((freq(StrategyKind::FourSided) - 0.3).abs() < 0.01);
        assert!((freq(StrategyKind::TwoSided) - 0.55).abs() < 0.01);
        assert!((freq(StrategyKind::SingleSided) - 0.15).abs() < 0.01);
        assert_eq!(freq(StrategyKind::Random), 0.0);
        assert_eq!(freq(StrategyKind::FullFrame), 0.0);
    }

    #[test]
    fn same_seed_gives_identical_strategies() {
        let mut a = Stream::from_seed(5);
        let mut b = Stream::from_seed(5);
        for _ in 0..200 {
            assert_eq!(
                sample_strategy(MaskMode::M3ddm, &mut a),
                sample_strategy(MaskMode::M3ddm, &mut b)
            );
        }
    }

    #[test]
    fn plus_mode_masks_are_temporally_identical() {
        for seed in 0..50 {
            let mut rng = Stream::from_seed(seed);
            let m = sample_video_mask(MaskMode::M3ddmPlus, 16, 32, 32, &mut rng);
            let first = m.frame(0).to_owned();
            for t in 1..16 {
                assert_eq!(m.frame(t), first, "seed {seed} frame {t}");
            }
        }
    }

    #[test]
    fn m3ddm_masks_vary_across_frames() {
        let mut found_difference = false;
        for seed in 0..1000 {
            let mut rng = Stream::from_seed(seed);
            let m = sample_video_mask(MaskMode::M3ddm, 16, 32, 32, &mut rng);
            let first = m.frame(0).to_owned();
            if (1..16).any(|t| m.frame(t) != first) {
                found_difference = true;
                break;
            }
        }
        assert!(found_difference);
    }

    #[test]
    fn single_frame_clip_works_in_both_modes() {
        let mut rng = Stream::from_seed(3);
        for mode in [MaskMode::M3ddm, MaskMode::M3ddmPlus] {
            let m = sample_video_mask(mode, 1, 16, 16, &mut rng);
            assert_eq!(m.t_frames(), 1);
        }
    }

    #[test]
    fn outpaint_mask_centers_input() {
        let m = outpaint_mask(64, 64, 64, 32).unwrap();
        let mut masked = 0;
        for i in 0..64 {
            for j in 0..64 {
                if m[[i, j]] == 0.0 {
                    assert!((16..48).contains(&j));
                } else {
                    masked += 1;
                }
            }
        }
        assert_eq!(masked, 64 * 32);
    }

    #[test]
    fn outpaint_mask_identity_when_input_fills_canvas() {
        let m = outpaint_mask(32, 32, 32, 32).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outpaint_mask_odd_margin_goes_right() {
        let m = outpaint_mask(64, 64, 64, 31).unwrap();
        // 33 masked columns: 16 left, 17 right.
        for j in 0..64 {
            let expect = !(16..47).contains(&j);
            assert_eq!(m[[0, j]] == 1.0, expect, "column {j}");
        }
    }

    #[test]
    fn outpaint_mask_rejects_oversized_input() {
        assert!(matches!(
            outpaint_mask(32, 32, 33, 32),
            Err(Error::InputExceedsCanvas { .. })
        ));
    }

    #[test]
    fn apply_mask_identity_and_full() {
        let video = VideoTensor::new(Array4::from_elem((2, 8, 8, 3), 0.5)).unwrap();
        let zeros = MaskVideo::new(Array3::zeros((2, 8, 8))).unwrap();
        let ones = MaskVideo::new(Array3::ones((2, 8, 8))).unwrap();
        assert_eq!(apply_mask(&video, &zeros).unwrap(), video);
        let blanked = apply_mask(&video, &ones).unwrap();
        assert!(blanked.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_touches_only_masked_pixel() {
        let video = VideoTensor::new(Array4::from_elem((2, 8, 8, 3), 0.5)).unwrap();
        let mut m = Array3::zeros((2, 8, 8));
        m[[1, 3, 4]] = 1.0;
        let mask = MaskVideo::new(m).unwrap();
        let out = apply_mask(&video, &mask).unwrap();
        for t in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    for k in 0..3 {
                        let expect = if (t, i, j) == (1, 3, 4) { 0.0 } else { 0.5 };
                        assert_eq!(out.data()[[t, i, j, k]], expect);
                    }
                }
            }
        }
    }
}
