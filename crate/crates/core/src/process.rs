//! Forward-process math shared by both model families.
//!
//! The flow family uses a stochastic interpolant `x_t = α(t)·x0 + σ(t)·ε` on
//! `t ∈ [0, 1]` and regresses the velocity `α̇(t)·x0 + σ̇(t)·ε`. The denoise
//! family uses a discrete variance schedule over `T` steps and regresses the
//! injected noise.

use std::f64::consts::FRAC_PI_2;

use ndarray::{Array, Array4, Axis, Dimension, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolantKind {
    Linear,
    VariancePreserving,
}

/// Noising path between data (`t = 0`) and Gaussian noise (`t = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interpolant {
    pub kind: InterpolantKind,
}

impl Interpolant {
    pub const LINEAR: Interpolant = Interpolant {
        kind: InterpolantKind::Linear,
    };
    pub const VP: Interpolant = Interpolant {
        kind: InterpolantKind::VariancePreserving,
    };

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            InterpolantKind::Linear => 1.0 - t,
            InterpolantKind::VariancePreserving => (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            InterpolantKind::Linear => t,
            InterpolantKind::VariancePreserving => (FRAC_PI_2 * t).sin(),
        }
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        match self.kind {
            InterpolantKind::Linear => -1.0,
            InterpolantKind::VariancePreserving => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
        }
    }

    pub fn sigma_dot(&self, t: f64) -> f64 {
        match self.kind {
            InterpolantKind::Linear => 1.0,
            InterpolantKind::VariancePreserving => FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
        }
    }
}

/// Discrete variance schedule: `beta[t]`, `alpha[t] = 1 - beta[t]` and the
/// running product `alpha_bar[t]`, indexed from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if let Some(&b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::out_of_range("beta", b, "(0, 1)"));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn constant(steps: usize, beta: f64) -> Result<Self> {
        Self::from_betas(vec![beta; steps])
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::out_of_range(
                "t",
                t as f64,
                format!("[0, {})", self.steps()),
            ));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// A point on either family's time axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Timestep {
    Continuous(f64),
    Discrete(usize),
}

impl Timestep {
    pub fn as_f64(self) -> f64 {
        match self {
            Timestep::Continuous(t) => t,
            Timestep::Discrete(t) => t as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ContinuousFlow,
    DiscreteDenoise { steps: usize },
}

impl Family {
    /// Default upper bound of the teacher time interval.
    pub fn default_k_max(self) -> f64 {
        match self {
            Family::ContinuousFlow => 0.2,
            Family::DiscreteDenoise { .. } => 200.0,
        }
    }

    pub fn validate(self, t: Timestep) -> Result<()> {
        match (self, t) {
            (Family::ContinuousFlow, Timestep::Continuous(v)) => {
                if (0.0..=1.0).contains(&v) {
                    Ok(())
                } else {
                    Err(Error::out_of_range("t", v, "[0, 1]"))
                }
            }
            (Family::DiscreteDenoise { steps }, Timestep::Discrete(v)) => {
                if v < steps {
                    Ok(())
                } else {
                    Err(Error::out_of_range("t", v as f64, format!("[0, {steps})")))
                }
            }
            _ => Err(Error::Config(format!(
                "timestep {t:?} does not belong to family {self:?}"
            ))),
        }
    }

    /// Timestep from a value in family units, validated.
    pub fn timestep(self, v: f64) -> Result<Timestep> {
        let t = match self {
            Family::ContinuousFlow => Timestep::Continuous(v),
            Family::DiscreteDenoise { .. } => {
                if v.fract() != 0.0 || v < 0.0 {
                    return Err(Error::out_of_range("t", v, "non-negative integers"));
                }
                Timestep::Discrete(v as usize)
            }
        };
        self.validate(t)?;
        Ok(t)
    }

    /// Value fed to the sinusoidal timestep embedding. Continuous time is
    /// stretched onto the discrete range so both families see the same
    /// frequency band.
    pub fn model_time(self, t: Timestep) -> f64 {
        match t {
            Timestep::Continuous(v) => v * 1000.0,
            Timestep::Discrete(v) => v as f64,
        }
    }
}

/// Family plus the teacher time-interval bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSpec {
    pub family: Family,
    pub k_max: f64,
}

impl TimeSpec {
    pub fn new(family: Family, k_max: f64) -> Result<Self> {
        if !(k_max >= 0.0) {
            return Err(Error::out_of_range("k_max", k_max, "[0, inf)"));
        }
        if matches!(family, Family::DiscreteDenoise { .. }) && k_max.fract() != 0.0 {
            return Err(Error::Config(format!(
                "k_max {k_max} must be an integer for the discrete family"
            )));
        }
        Ok(TimeSpec { family, k_max })
    }
}

fn check_shapes<S, D: Dimension>(op: &'static str, a: &Array<S, D>, b: &Array<S, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::out_of_range("t", t, "[0, 1]"))
    }
}

fn combine<S: Scalar, D: Dimension>(
    a: f64,
    x0: &Array<S, D>,
    b: f64,
    eps: &Array<S, D>,
) -> Array<S, D> {
    let (a, b) = (S::of(a), S::of(b));
    Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e)
}

/// `α(t)·x0 + σ(t)·ε`.
pub fn interpolant_sample<S: Scalar, D: Dimension>(
    interpolant: &Interpolant,
    x0: &Array<S, D>,
    eps: &Array<S, D>,
    t: f64,
) -> Result<Array<S, D>> {
    check_shapes("interpolant_sample", x0, eps)?;
    check_unit(t)?;
    Ok(combine(interpolant.alpha(t), x0, interpolant.sigma(t), eps))
}

/// `α̇(t)·x0 + σ̇(t)·ε`.
pub fn velocity_target<S: Scalar, D: Dimension>(
    interpolant: &Interpolant,
    x0: &Array<S, D>,
    eps: &Array<S, D>,
    t: f64,
) -> Result<Array<S, D>> {
    check_shapes("velocity_target", x0, eps)?;
    check_unit(t)?;
    Ok(combine(
        interpolant.alpha_dot(t),
        x0,
        interpolant.sigma_dot(t),
        eps,
    ))
}

/// Closed-form marginal `√ᾱ_t·x0 + √(1-ᾱ_t)·ε`.
pub fn ddpm_forward_marginal<S: Scalar, D: Dimension>(
    schedule: &NoiseSchedule,
    x0: &Array<S, D>,
    eps: &Array<S, D>,
    t: usize,
) -> Result<Array<S, D>> {
    check_shapes("ddpm_forward_marginal", x0, eps)?;
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(combine(ab.sqrt(), x0, (1.0 - ab).sqrt(), eps))
}

/// Mean of squared differences over every element, accumulated in `f64`.
pub fn mean_squared_error<S: Scalar, D: Dimension>(
    prediction: &Array<S, D>,
    target: &Array<S, D>,
) -> Result<f64> {
    check_shapes("mean_squared_error", prediction, target)?;
    let n = prediction.len().max(1) as f64;
    let sum = Zip::from(prediction)
        .and(target)
        .fold(0.0f64, |acc, &p, &q| {
            let d = (p - q).f64();
            acc + d * d
        });
    Ok(sum / n)
}

pub fn noise_prediction_loss<S: Scalar, D: Dimension>(
    predicted_eps: &Array<S, D>,
    true_eps: &Array<S, D>,
) -> Result<f64> {
    mean_squared_error(predicted_eps, true_eps)
}

pub fn velocity_loss<S: Scalar, D: Dimension>(
    predicted_v: &Array<S, D>,
    target_v: &Array<S, D>,
) -> Result<f64> {
    mean_squared_error(predicted_v, target_v)
}

/// Uniform timestep: `[0, 1)` for flow, `{0, .., T-1}` for denoise.
pub fn sample_timestep<R: Rng + ?Sized>(family: Family, rng: &mut R) -> Timestep {
    match family {
        Family::ContinuousFlow => Timestep::Continuous(rng.random::<f64>()),
        Family::DiscreteDenoise { steps } => Timestep::Discrete(rng.random_range(0..steps)),
    }
}

/// Interval `k` drawn uniformly from `[0, k_max)` (integer-valued for the
/// discrete family). `k_max = 0` always yields 0.
pub fn sample_interval<R: Rng + ?Sized>(spec: &TimeSpec, rng: &mut R) -> Timestep {
    // Draw unconditionally so that consumption does not depend on k_max.
    let u = rng.random::<f64>();
    match spec.family {
        Family::ContinuousFlow => Timestep::Continuous(u * spec.k_max),
        Family::DiscreteDenoise { .. } => Timestep::Discrete((u * spec.k_max).floor() as usize),
    }
}

/// `max(t - k, 0)` in the family's arithmetic.
pub fn teacher_timestep(spec: &TimeSpec, t: Timestep, k: Timestep) -> Result<Timestep> {
    spec.family.validate(t)?;
    match (t, k) {
        (Timestep::Continuous(t), Timestep::Continuous(k)) => {
            if !(k >= 0.0) {
                return Err(Error::out_of_range("k", k, "[0, k_max]"));
            }
            if k > spec.k_max {
                return Err(Error::out_of_range("k", k, format!("[0, {}]", spec.k_max)));
            }
            Ok(Timestep::Continuous((t - k).max(0.0)))
        }
        (Timestep::Discrete(t), Timestep::Discrete(k)) => {
            if k as f64 > spec.k_max {
                return Err(Error::out_of_range(
                    "k",
                    k as f64,
                    format!("[0, {}]", spec.k_max),
                ));
            }
            Ok(Timestep::Discrete(t.saturating_sub(k)))
        }
        _ => Err(Error::Config(format!(
            "interval {k:?} does not match timestep {t:?}"
        ))),
    }
}

/// A concrete forward process: the family plus its path/schedule.
#[derive(Debug, Clone, PartialEq)]
pub enum Process {
    Flow(Interpolant),
    Denoise(NoiseSchedule),
}

impl Process {
    pub fn family(&self) -> Family {
        match self {
            Process::Flow(_) => Family::ContinuousFlow,
            Process::Denoise(s) => Family::DiscreteDenoise { steps: s.steps() },
        }
    }

    /// Per-sample noised inputs for a `[B, C, H, W]` batch.
    pub fn noised_batch<S: Scalar>(
        &self,
        x0: &Array4<S>,
        eps: &Array4<S>,
        ts: &[Timestep],
    ) -> Result<Array4<S>> {
        self.per_sample(x0, eps, ts, |t| match (self, t) {
            (Process::Flow(i), Timestep::Continuous(t)) => {
                check_unit(t)?;
                Ok((i.alpha(t), i.sigma(t)))
            }
            (Process::Denoise(s), Timestep::Discrete(t)) => {
                s.check(t)?;
                let ab = s.alpha_bar(t);
                Ok((ab.sqrt(), (1.0 - ab).sqrt()))
            }
            _ => Err(Error::Config(format!("timestep {t:?} does not match process"))),
        })
    }

    /// Regression target: velocity for flow, the noise itself for denoise.
    pub fn target_batch<S: Scalar>(
        &self,
        x0: &Array4<S>,
        eps: &Array4<S>,
        ts: &[Timestep],
    ) -> Result<Array4<S>> {
        match self {
            Process::Flow(i) => self.per_sample(x0, eps, ts, |t| {
                let t = t.as_f64();
                check_unit(t)?;
                Ok((i.alpha_dot(t), i.sigma_dot(t)))
            }),
            Process::Denoise(_) => {
                check_shapes("target_batch", x0, eps)?;
                Ok(eps.clone())
            }
        }
    }

    fn per_sample<S: Scalar>(
        &self,
        x0: &Array4<S>,
        eps: &Array4<S>,
        ts: &[Timestep],
        coeffs: impl Fn(Timestep) -> Result<(f64, f64)>,
    ) -> Result<Array4<S>> {
        check_shapes("per_sample", x0, eps)?;
        if ts.len() != x0.len_of(Axis(0)) {
            return Err(Error::ShapeMismatch {
                op: "per_sample timesteps",
                lhs: vec![ts.len()],
                rhs: vec![x0.len_of(Axis(0))],
            });
        }
        let mut out = Array4::zeros(x0.raw_dim());
        for (b, &t) in ts.iter().enumerate() {
            let (a, s) = coeffs(t)?;
            let (a, s) = (S::of(a), S::of(s));
            Zip::from(out.index_axis_mut(Axis(0), b))
                .and(x0.index_axis(Axis(0), b))
                .and(eps.index_axis(Axis(0), b))
                .for_each(|o, &x, &e| *o = a * x + s * e);
        }
        Ok(out)
    }
}

/// Serializable description of a [`Process`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum ProcessConfig {
    Flow {
        interpolant: InterpolantKind,
    },
    Denoise {
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
}

impl Default for ProcessConfig {
    fn default() -> Self {
        ProcessConfig::Flow {
            interpolant: InterpolantKind::Linear,
        }
    }
}

impl ProcessConfig {
    pub fn denoise_default() -> Self {
        ProcessConfig::Denoise {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    pub fn build(&self) -> Result<Process> {
        match *self {
            ProcessConfig::Flow { interpolant } => Ok(Process::Flow(Interpolant { kind: interpolant })),
            ProcessConfig::Denoise {
                steps,
                beta_start,
                beta_end,
            } => Ok(Process::Denoise(NoiseSchedule::linear(steps, beta_start, beta_end)?)),
        }
    }

    pub fn family(&self) -> Family {
        match *self {
            ProcessConfig::Flow { .. } => Family::ContinuousFlow,
            ProcessConfig::Denoise { steps, .. } => Family::DiscreteDenoise { steps },
        }
    }
}
