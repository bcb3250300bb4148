//! Noise schedule, forward corruption, training loss, and reverse sampler.
//!
//! The forward process is `Z_t = sqrt(abar_t) Z + sqrt(1 - abar_t) eps` with
//! `abar_0 = 1`. The reverse sampler is ancestral: predict `Z_0` from the
//! noise estimate, form the posterior mean between two schedule points, and
//! add posterior-scaled Gaussian noise except on the final step.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::video::LatentVideo;

/// Default training step count.
pub const DEFAULT_T_STEPS: usize = 200;
/// Default linear beta ramp endpoints. The 200-step default compresses the
/// usual 1000-step ramp so the terminal signal level still satisfies
/// `abar_T < 0.01`.
pub const DEFAULT_BETA_START: f64 = 5e-4;
pub const DEFAULT_BETA_END: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    t_steps: usize,
    beta: Vec<f64>,
    /// `alpha_bar[t]` for t in 0..=T, `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn default_schedule() -> DiffusionSchedule {
        make_schedule(DEFAULT_T_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.t_steps {
            return Err(Error::StepOutOfRange {
                t,
                min,
                max: self.t_steps,
            });
        }
        Ok(())
    }

    /// Evenly strided descending step sequence for n-step inference,
    /// always containing `t_steps`; the implicit final target is step 0.
    pub fn strided_steps(&self, n: usize) -> Vec<usize> {
        let n = n.clamp(1, self.t_steps);
        let mut steps: Vec<usize> = (1..=n)
            .map(|k| ((k as f64) * (self.t_steps as f64) / (n as f64)).round() as usize)
            .filter(|&t| t >= 1)
            .collect();
        steps.dedup();
        steps.reverse();
        steps
    }
}

/// Builds a linear-beta schedule.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_steps < 2 {
        return Err(Error::InvalidParam {
            name: "t_steps",
            message: format!("need at least 2 steps, got {t_steps}"),
        });
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParam {
            name: "beta",
            message: format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            ),
        });
    }
    let beta: Vec<f64> = (0..t_steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
        .collect();
    let mut alpha_bar = Vec::with_capacity(t_steps + 1);
    alpha_bar.push(1.0);
    let mut prod = 1.0;
    for b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    Ok(DiffusionSchedule {
        t_steps,
        beta,
        alpha_bar,
    })
}

/// `Z_t = sqrt(abar_t) Z + sqrt(1 - abar_t) eps`, element-wise.
pub fn forward_diffuse(
    z: &LatentVideo,
    t: usize,
    eps: &LatentVideo,
    sched: &DiffusionSchedule,
) -> Result<LatentVideo> {
    if z.shape4() != eps.shape4() {
        return Err(Error::ShapeMismatch {
            axis: "noise",
            expected: z.data().len(),
            actual: eps.data().len(),
        });
    }
    sched.check_step(t, 0)?;
    let a = sched.alpha_bar(t);
    let out = z.data() * a.sqrt() + eps.data() * (1.0 - a).sqrt();
    LatentVideo::new(out)
}

/// Mean squared element-wise difference between true and predicted noise.
pub fn denoising_loss(eps_true: &LatentVideo, eps_pred: &LatentVideo) -> Result<f64> {
    if eps_true.shape4() != eps_pred.shape4() {
        return Err(Error::ShapeMismatch {
            axis: "noise prediction",
            expected: eps_true.data().len(),
            actual: eps_pred.data().len(),
        });
    }
    let diff = eps_true.data() - eps_pred.data();
    Ok(diff.mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// Predicts `Z_0` from a noised latent and a noise estimate by inverting the
/// forward formula.
pub fn predict_z0(
    z_t: &LatentVideo,
    eps_pred: &LatentVideo,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<LatentVideo> {
    sched.check_step(t, 1)?;
    let a = sched.alpha_bar(t);
    let z0 = (z_t.data() - &(eps_pred.data() * (1.0 - a).sqrt())) / a.sqrt();
    LatentVideo::new(z0)
}

/// Posterior coefficients between two schedule points `t_hi > t_lo`:
/// mean = c0 * Z_0 + c1 * Z_hi, variance var.
fn posterior_coefficients(sched: &DiffusionSchedule, t_hi: usize, t_lo: usize) -> (f64, f64, f64) {
    let a_hi = sched.alpha_bar(t_hi);
    let a_lo = sched.alpha_bar(t_lo);
    let alpha_eff = a_hi / a_lo;
    let beta_eff = 1.0 - alpha_eff;
    let c0 = a_lo.sqrt() * beta_eff / (1.0 - a_hi);
    let c1 = alpha_eff.sqrt() * (1.0 - a_lo) / (1.0 - a_hi);
    let var = beta_eff * (1.0 - a_lo) / (1.0 - a_hi);
    (c0, c1, var)
}

/// One ancestral step from `t_hi` down to `t_lo` with explicit noise.
/// The posterior variance vanishes at `t_lo = 0`, so `xi` is ignored there.
pub fn reverse_step_between_with_noise(
    z_t: &LatentVideo,
    eps_pred: &LatentVideo,
    t_hi: usize,
    t_lo: usize,
    sched: &DiffusionSchedule,
    xi: &LatentVideo,
) -> Result<LatentVideo> {
    sched.check_step(t_hi, 1)?;
    if t_lo >= t_hi {
        return Err(Error::StepOutOfRange {
            t: t_lo,
            min: 0,
            max: t_hi - 1,
        });
    }
    let z0 = predict_z0(z_t, eps_pred, t_hi, sched)?;
    let (c0, c1, var) = posterior_coefficients(sched, t_hi, t_lo);
    let mut out = z0.data() * c0 + z_t.data() * c1;
    if var > 0.0 {
        out = out + xi.data() * var.sqrt();
    }
    LatentVideo::new(out)
}

/// One ancestral step from `t` down to `t - 1`, drawing the step noise from
/// `rng` (none is drawn on the final step).
pub fn reverse_step(
    z_t: &LatentVideo,
    eps_pred: &LatentVideo,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut Stream,
) -> Result<LatentVideo> {
    sched.check_step(t, 1)?;
    let xi = if t > 1 {
        LatentVideo::new(rng.normal_array4(z_t.shape4()))?
    } else {
        LatentVideo::zeros(z_t.shape4())
    };
    reverse_step_between_with_noise(z_t, eps_pred, t, t - 1, sched, &xi)
}

/// Noise predictor abstraction used by the samplers: maps the evolving
/// latent and the current step to a noise estimate.
pub trait NoisePredictor {
    fn predict(&self, z_t: &LatentVideo, t: usize) -> Result<LatentVideo>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&LatentVideo, usize) -> Result<LatentVideo>,
{
    fn predict(&self, z_t: &LatentVideo, t: usize) -> Result<LatentVideo> {
        self(z_t, t)
    }
}

/// Full-schedule ancestral sampling from a pure Gaussian latent.
pub fn sample(
    predictor: &impl NoisePredictor,
    shape: (usize, usize, usize, usize),
    sched: &DiffusionSchedule,
    rng: &mut Stream,
) -> Result<LatentVideo> {
    let init = LatentVideo::new(rng.normal_array4(shape))?;
    sample_from(predictor, init, sched.t_steps(), sched, rng)
}

/// Strided ancestral sampling (`n_steps` denoiser calls) from a pure
/// Gaussian latent.
pub fn sample_strided(
    predictor: &impl NoisePredictor,
    shape: (usize, usize, usize, usize),
    n_steps: usize,
    sched: &DiffusionSchedule,
    rng: &mut Stream,
) -> Result<LatentVideo> {
    let init = LatentVideo::new(rng.normal_array4(shape))?;
    sample_from(predictor, init, n_steps, sched, rng)
}

/// Ancestral sampling from an explicit latent at step `t_steps`, strided to
/// `n_steps` denoiser calls. Used by the outpainting pipeline, which starts
/// from the noised boundary-filled canvas latent rather than pure noise.
pub fn sample_from(
    predictor: &impl NoisePredictor,
    init: LatentVideo,
    n_steps: usize,
    sched: &DiffusionSchedule,
    rng: &mut Stream,
) -> Result<LatentVideo> {
    let steps = sched.strided_steps(n_steps);
    let mut z = init;
    for (i, &t_hi) in steps.iter().enumerate() {
        let t_lo = if i + 1 < steps.len() { steps[i + 1] } else { 0 };
        let eps_pred = predictor.predict(&z, t_hi)?;
        let xi = if t_lo > 0 {
            LatentVideo::new(rng.normal_array4(z.shape4()))?
        } else {
            LatentVideo::zeros(z.shape4())
        };
        z = reverse_step_between_with_noise(&z, &eps_pred, t_hi, t_lo, sched, &xi)?;
    }
    Ok(z)
}
