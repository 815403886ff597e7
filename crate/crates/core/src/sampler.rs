//! Euler sampling from `t = 1` (noise) to `t = 0` (image), with optional region-restricted
//! guidance between a preference-tuned model and its reference.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphkit::CanvasImage;
use crate::velocitynet::{PreparedCondition, VelocityField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub omega: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 32,
            omega: 1.5,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !self.omega.is_finite() {
            return Err(Error::Config(format!("omega {} is not finite", self.omega)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Final state without clamping.
    pub raw: CanvasImage,
    /// `raw` clamped to `[0, 1]`.
    pub image: CanvasImage,
}

/// Per-step statistics passed to a sampling observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub t: f64,
    pub mean_abs_v_inside: f64,
    pub mean_abs_v_outside: f64,
}

/// Standard normal initial noise for `seed`.
pub fn initial_noise(width: usize, height: usize, seed: u64) -> CanvasImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CanvasImage {
        width,
        height,
        data: (0..width * height)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    }
}

/// Runs `x ← x − Δ·v(x, t_k)` for `t_k = k/steps`, `k = steps..1`.
pub fn integrate(
    x1: CanvasImage,
    steps: usize,
    mut velocity: impl FnMut(&CanvasImage, f64, usize) -> Result<CanvasImage>,
) -> Result<SampleOutput> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x1;
    for k in (1..=steps).rev() {
        let t = k as f64 * dt;
        let v = velocity(&x, t, steps - k)?;
        if v.data.len() != x.data.len() {
            return Err(Error::shape(x.data.len(), v.data.len()));
        }
        x.data
            .iter_mut()
            .zip(&v.data)
            .for_each(|(xi, vi)| *xi -= dt * vi);
    }
    let image = x.clamped();
    Ok(SampleOutput { raw: x, image })
}

/// Plain Euler sampling from seeded noise.
pub fn euler_sample<M: VelocityField>(
    model: &M,
    cond: &PreparedCondition,
    cfg: &SampleConfig,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let (w, h) = cond.layout.image_pixels();
    integrate(initial_noise(w, h, cfg.seed), cfg.steps, |x, t, _| {
        model.velocity(x, t, cond)
    })
}

/// `(1 − ω)·v_ref + ω·v_θ`.
pub fn combine_velocities(
    v_ref: &CanvasImage,
    v_theta: &CanvasImage,
    omega: f64,
) -> Result<CanvasImage> {
    if v_ref.width != v_theta.width
        || v_ref.height != v_theta.height
        || v_ref.data.len() != v_theta.data.len()
    {
        return Err(Error::shape(
            format!("{}x{}", v_ref.width, v_ref.height),
            format!("{}x{}", v_theta.width, v_theta.height),
        ));
    }
    Ok(CanvasImage {
        width: v_ref.width,
        height: v_ref.height,
        data: v_ref
            .data
            .iter()
            .zip(&v_theta.data)
            .map(|(r, t)| (1.0 - omega) * r + omega * t)
            .collect(),
    })
}

/// Guided velocity inside the text region, `v_θ` outside; `region_px` is the pixel mask.
pub fn rrg_velocity(
    v_ref: &CanvasImage,
    v_theta: &CanvasImage,
    omega: f64,
    region_px: &[f64],
) -> Result<CanvasImage> {
    let guided = combine_velocities(v_ref, v_theta, omega)?;
    if region_px.len() != guided.data.len() {
        return Err(Error::shape(guided.data.len(), region_px.len()));
    }
    Ok(CanvasImage {
        width: guided.width,
        height: guided.height,
        data: guided
            .data
            .iter()
            .zip(&v_theta.data)
            .zip(region_px)
            .map(|((g, t), m)| m * g + (1.0 - m) * t)
            .collect(),
    })
}

/// Region-restricted guided sampling. `observer` sees every step's guided velocity statistics.
pub fn rrg_sample<M: VelocityField>(
    theta: &M,
    reference: &M,
    cond: &PreparedCondition,
    cfg: &SampleConfig,
    mut observer: impl FnMut(&StepTrace),
) -> Result<SampleOutput> {
    cfg.validate()?;
    if theta.config() != reference.config() {
        return Err(Error::CheckpointMismatch(
            "tuned and reference models have different configurations".into(),
        ));
    }
    let region = cond.text_region_pixels();
    let (w, h) = cond.layout.image_pixels();
    integrate(initial_noise(w, h, cfg.seed), cfg.steps, |x, t, step| {
        let vt = theta.velocity(x, t, cond)?;
        let vr = reference.velocity(x, t, cond)?;
        let v = rrg_velocity(&vr, &vt, cfg.omega, &region)?;
        observer(&trace_step(step, t, &v, &region));
        Ok(v)
    })
}

fn trace_step(step: usize, t: f64, v: &CanvasImage, region: &[f64]) -> StepTrace {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (vi, m) in v.data.iter().zip(region) {
        if *m > 0.5 {
            si += vi.abs();
            ni += 1;
        } else {
            so += vi.abs();
            no += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    StepTrace {
        step,
        t,
        mean_abs_v_inside: mean(si, ni),
        mean_abs_v_outside: mean(so, no),
    }
}

pub fn trace_csv(traces: &[StepTrace]) -> String {
    let mut out = String::from("step,t,mean_abs_v_inside_Phat,mean_abs_v_outside\n");
    for tr in traces {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            tr.step, tr.t, tr.mean_abs_v_inside, tr.mean_abs_v_outside
        );
    }
    out
}
