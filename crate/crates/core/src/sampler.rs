//! Ancestral DDPM sampling and Euler / Euler–Maruyama integration.
//!
//! Every sample owns the stream `(seed, sample index)`, so results do not
//! depend on how samples are chunked into batches.

use ndarray::{s, Array2, Array4, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, DiffusionTransformer, ParamSet};
use crate::process::{Family, Interpolant, NoiseSchedule, Process, Timestep};
use crate::rng::{self, Purpose};
use crate::{Error, Result, Scalar};

/// Anything mapping `(x_t, t, class ids)` to a noise or velocity prediction.
pub trait Predictor<S> {
    fn predict(&self, x: &Array4<S>, t: Timestep, class_ids: &[usize]) -> Result<Array4<S>>;
}

impl<S, F> Predictor<S> for F
where
    F: Fn(&Array4<S>, Timestep, &[usize]) -> Result<Array4<S>>,
{
    fn predict(&self, x: &Array4<S>, t: Timestep, class_ids: &[usize]) -> Result<Array4<S>> {
        self(x, t, class_ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeMode {
    /// Probability-flow ODE.
    Ode,
    /// Reverse SDE with diffusion coefficient `w_t = σ_t`.
    #[default]
    SdeWtSigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    /// Must match the process when set.
    pub family: Option<Family>,
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub sde_mode: SdeMode,
    pub seed: u64,
    pub num_samples: usize,
    /// `None` samples unconditionally (null label).
    pub class_id: Option<usize>,
    /// Samples per predictor call.
    pub batch_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            family: None,
            num_steps: 250,
            guidance_scale: 1.0,
            sde_mode: SdeMode::default(),
            seed: 0,
            num_samples: 16,
            class_id: None,
            batch_size: 64,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 1 {
            return Err(Error::out_of_range("num_steps", 0.0, "[1, inf)"));
        }
        if !(self.guidance_scale >= 1.0) {
            return Err(Error::out_of_range("guidance_scale", self.guidance_scale, "[1, inf)"));
        }
        if self.batch_size == 0 {
            return Err(Error::out_of_range("batch_size", 0.0, "[1, inf)"));
        }
        Ok(())
    }

    pub fn check_family(&self, family: Family) -> Result<()> {
        match self.family {
            Some(f) if f != family => Err(Error::Config(format!(
                "sampler family {f:?} does not match process family {family:?}"
            ))),
            _ => Ok(()),
        }
    }
}

/// `uncond + w·(cond − uncond)`.
pub fn cfg_combine<S: Scalar>(cond: &Array4<S>, uncond: &Array4<S>, w: f64) -> Result<Array4<S>> {
    if cond.shape() != uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            lhs: cond.shape().to_vec(),
            rhs: uncond.shape().to_vec(),
        });
    }
    let w = S::of(w);
    Ok(Zip::from(cond).and(uncond).map_collect(|&c, &u| u + w * (c - u)))
}

/// A trained backbone as a predictor, with optional classifier-free guidance.
pub struct ModelPredictor<'a, S> {
    pub model: &'a DiffusionTransformer,
    pub params: &'a ParamSet<S>,
    pub family: Family,
    pub guidance_scale: f64,
}

impl<S: Scalar> Predictor<S> for ModelPredictor<'_, S> {
    fn predict(&self, x: &Array4<S>, t: Timestep, class_ids: &[usize]) -> Result<Array4<S>> {
        let times = vec![self.family.model_time(t); class_ids.len()];
        let run = |ids: &[usize]| {
            self.model
                .forward_with_taps(
                    self.params,
                    x,
                    Conditioning {
                        times: &times,
                        class_ids: ids,
                    },
                    &[],
                )
                .map(|o| o.prediction)
        };
        let cond = run(class_ids)?;
        if self.guidance_scale == 1.0 {
            return Ok(cond);
        }
        let null = vec![self.model.config().null_class(); class_ids.len()];
        let uncond = run(&null)?;
        cfg_combine(&cond, &uncond, self.guidance_scale)
    }
}

fn normal<S: Scalar>(rng: &mut rng::Rng) -> S {
    S::of(StandardNormal.sample(rng))
}

/// Fills sample rows from their own streams, in order.
fn draw_noise<S: Scalar>(x: &mut Array4<S>, rngs: &mut [rng::Rng]) {
    for (mut row, r) in x.outer_iter_mut().zip(rngs.iter_mut()) {
        row.iter_mut().for_each(|v| *v = normal(r));
    }
}

/// Timesteps visited by ancestral sampling, descending, always starting at
/// `T − 1`.
pub fn respaced_timesteps(total: usize, num_steps: usize) -> Vec<usize> {
    let n = num_steps.min(total).max(1);
    if n == 1 {
        return vec![total - 1];
    }
    let mut ts: Vec<usize> = (0..n)
        .map(|k| ((k as f64) * (total - 1) as f64 / (n - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    ts
}

fn chunks(cfg: &SampleConfig) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..cfg.num_samples)
        .step_by(cfg.batch_size)
        .map(|start| (start, (start + cfg.batch_size).min(cfg.num_samples)))
}

fn class_ids(cfg: &SampleConfig, n: usize, null: usize) -> Vec<usize> {
    vec![cfg.class_id.unwrap_or(null); n]
}

/// Ancestral sampling with a noise predictor and fixed variance
/// `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t` on the respaced grid. The last
/// step adds no noise.
pub fn ddpm_sample<S: Scalar, P: Predictor<S> + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
    sample_shape: (usize, usize, usize),
    null_class: usize,
) -> Result<Array4<S>> {
    cfg.validate()?;
    cfg.check_family(Family::DiscreteDenoise {
        steps: schedule.steps(),
    })?;
    let (c, h, w) = sample_shape;
    let taus = respaced_timesteps(schedule.steps(), cfg.num_steps);
    let mut out = Array4::zeros((cfg.num_samples, c, h, w));
    for (start, end) in chunks(cfg) {
        let mut rngs: Vec<_> = (start..end)
            .map(|i| rng::stream(cfg.seed, i as u64, Purpose::Sample))
            .collect();
        let ids = class_ids(cfg, end - start, null_class);
        let mut x = Array4::zeros((end - start, c, h, w));
        draw_noise(&mut x, &mut rngs);
        for (k, &t) in taus.iter().enumerate() {
            let ab = schedule.alpha_bar(t);
            let ab_prev = taus.get(k + 1).map_or(1.0, |&p| schedule.alpha_bar(p));
            let alpha = ab / ab_prev;
            let beta = 1.0 - alpha;
            let eps = predictor.predict(&x, Timestep::Discrete(t), &ids)?;
            let (a, b) = (S::of(1.0 / alpha.sqrt()), S::of(beta / (1.0 - ab).sqrt()));
            Zip::from(&mut x).and(&eps).for_each(|xv, &e| *xv = a * (*xv - b * e));
            if k + 1 < taus.len() {
                let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
                let sd = S::of(var.sqrt());
                let mut z = Array4::zeros(x.raw_dim());
                draw_noise(&mut z, &mut rngs);
                Zip::from(&mut x).and(&z).for_each(|xv, &zv| *xv += sd * zv);
            }
        }
        out.slice_mut(s![start..end, .., .., ..]).assign(&x);
    }
    Ok(out)
}

/// Score from velocity, `s = (α v − α̇ x) / (σ (α̇ σ − α σ̇))`.
pub fn score_from_velocity<S: Scalar>(interp: &Interpolant, x: &Array4<S>, v: &Array4<S>, t: f64) -> Array4<S> {
    let (a, sg) = (interp.alpha(t), interp.sigma(t));
    let (ad, sd) = (interp.alpha_dot(t), interp.sigma_dot(t));
    let denom = sg * (ad * sg - a * sd);
    let (ca, cx) = (S::of(a / denom), S::of(ad / denom));
    Zip::from(v).and(x).map_collect(|&vv, &xv| ca * vv - cx * xv)
}

/// Integrates from `t = 1` to `t = 0` on a uniform grid.
///
/// `x ← x − h v + ½ w s h + √(w h) z`, where `w = diffusion(t)`. Steps with
/// `w = 0`, the final step, and steps with `t < 1/num_steps` use the plain
/// Euler update.
pub fn euler_maruyama_with<S: Scalar, P: Predictor<S> + ?Sized>(
    predictor: &P,
    interp: &Interpolant,
    cfg: &SampleConfig,
    sample_shape: (usize, usize, usize),
    null_class: usize,
    diffusion: &dyn Fn(f64) -> f64,
) -> Result<Array4<S>> {
    cfg.validate()?;
    cfg.check_family(Family::ContinuousFlow)?;
    let (c, h, w) = sample_shape;
    let n = cfg.num_steps;
    let dt = 1.0 / n as f64;
    let mut out = Array4::zeros((cfg.num_samples, c, h, w));
    for (start, end) in chunks(cfg) {
        let mut rngs: Vec<_> = (start..end)
            .map(|i| rng::stream(cfg.seed, i as u64, Purpose::Sample))
            .collect();
        let ids = class_ids(cfg, end - start, null_class);
        let mut x = Array4::zeros((end - start, c, h, w));
        draw_noise(&mut x, &mut rngs);
        for i in 0..n {
            let t = 1.0 - i as f64 * dt;
            let v = predictor.predict(&x, Timestep::Continuous(t), &ids)?;
            let wt = diffusion(t);
            let stochastic = wt > 0.0 && i + 1 < n && t >= dt;
            if stochastic {
                let score = score_from_velocity(interp, &x, &v, t);
                let mut z = Array4::zeros(x.raw_dim());
                draw_noise(&mut z, &mut rngs);
                let (sh, sdrift, snoise) = (S::of(dt), S::of(0.5 * wt * dt), S::of((wt * dt).sqrt()));
                Zip::from(&mut x)
                    .and(&v)
                    .and(&score)
                    .and(&z)
                    .for_each(|xv, &vv, &sv, &zv| *xv = *xv - sh * vv + sdrift * sv + snoise * zv);
            } else {
                let sh = S::of(dt);
                Zip::from(&mut x).and(&v).for_each(|xv, &vv| *xv -= sh * vv);
            }
        }
        out.slice_mut(s![start..end, .., .., ..]).assign(&x);
    }
    Ok(out)
}

/// Euler (ODE mode) or Euler–Maruyama with `w_t = σ_t` (SDE mode).
pub fn euler_maruyama_sample<S: Scalar, P: Predictor<S> + ?Sized>(
    predictor: &P,
    interp: &Interpolant,
    cfg: &SampleConfig,
    sample_shape: (usize, usize, usize),
    null_class: usize,
) -> Result<Array4<S>> {
    let interp_copy = *interp;
    match cfg.sde_mode {
        SdeMode::Ode => euler_maruyama_with(predictor, interp, cfg, sample_shape, null_class, &|_| 0.0),
        SdeMode::SdeWtSigma => euler_maruyama_with(predictor, interp, cfg, sample_shape, null_class, &move |t| {
            interp_copy.sigma(t)
        }),
    }
}

/// Samples a trained model with the sampler that matches its process.
pub fn sample_model<S: Scalar>(
    model: &DiffusionTransformer,
    params: &ParamSet<S>,
    process: &Process,
    cfg: &SampleConfig,
) -> Result<Array4<S>> {
    let mc = model.config();
    if let Some(c) = cfg.class_id {
        if c >= mc.num_classes {
            return Err(Error::out_of_range("class_id", c as f64, format!("[0, {})", mc.num_classes)));
        }
    }
    let predictor = ModelPredictor {
        model,
        params,
        family: process.family(),
        guidance_scale: cfg.guidance_scale,
    };
    let shape = (mc.channels, mc.input_height, mc.input_width);
    match process {
        Process::Denoise(schedule) => ddpm_sample(&predictor, schedule, cfg, shape, mc.null_class()),
        Process::Flow(interp) => euler_maruyama_sample(&predictor, interp, cfg, shape, mc.null_class()),
    }
}

/// Closed-form posterior quantities for data drawn from an isotropic
/// Gaussian mixture `Σ_k π_k N(μ_k, s² I)`.
///
/// Under `x_t = α x₀ + σ ε`, component `k` gives `x_t ~ N(α μ_k, (α² s² + σ²) I)`,
/// so the posterior means of `x₀` and `ε` and the score are exact. A point
/// mass is the case `s = 0`, a standard normal is one component at the
/// origin with `s = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOracle {
    pub means: Array2<f64>,
    pub std: f64,
    pub weights: Vec<f64>,
}

/// `E[x₀ | x]`, `E[ε | x]` and `∇ log p_t(x)` for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub score: Vec<f64>,
}

impl MixtureOracle {
    pub fn new(means: Array2<f64>, std: f64, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != means.nrows() || weights.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "mixture oracle",
                lhs: means.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        if !(std >= 0.0) || weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("mixture needs std ≥ 0 and positive weights".into()));
        }
        let total: f64 = weights.iter().sum();
        Ok(MixtureOracle {
            means,
            std,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn point_mass(point: &[f64]) -> Self {
        let d = point.len();
        MixtureOracle::new(Array2::from_shape_vec((1, d), point.to_vec()).expect("row"), 0.0, vec![1.0])
            .expect("valid point mass")
    }

    pub fn standard_normal(dim: usize) -> Self {
        MixtureOracle::new(Array2::zeros((1, dim)), 1.0, vec![1.0]).expect("valid normal")
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Posterior at signal scale `alpha` and noise scale `sigma`.
    pub fn posterior(&self, x: &[f64], alpha: f64, sigma: f64) -> Posterior {
        let d = self.dim();
        let var = (alpha * alpha * self.std * self.std + sigma * sigma).max(1e-300);
        let logits: Vec<f64> = self
            .means
            .outer_iter()
            .zip(&self.weights)
            .map(|(mu, &w)| {
                let sq: f64 = x.iter().zip(mu.iter()).map(|(xi, m)| (xi - alpha * m).powi(2)).sum();
                w.ln() - 0.5 * sq / var
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        let mut post = Posterior {
            x0: vec![0.0; d],
            eps: vec![0.0; d],
            score: vec![0.0; d],
        };
        let gain = alpha * self.std * self.std / var;
        for (mu, r) in self.means.outer_iter().zip(unnorm.iter().map(|u| u / z)) {
            for j in 0..d {
                let resid = x[j] - alpha * mu[j];
                post.x0[j] += r * (mu[j] + gain * resid);
                post.eps[j] += r * sigma * resid / var;
                post.score[j] -= r * resid / var;
            }
        }
        post
    }

    /// Exact velocity `α̇ E[x₀|x] + σ̇ E[ε|x]`.
    pub fn velocity(&self, interp: &Interpolant, x: &[f64], t: f64) -> Vec<f64> {
        let p = self.posterior(x, interp.alpha(t), interp.sigma(t));
        let (ad, sd) = (interp.alpha_dot(t), interp.sigma_dot(t));
        p.x0.iter().zip(&p.eps).map(|(a, e)| ad * a + sd * e).collect()
    }

    /// Exact noise prediction `E[ε | x_t]` under a discrete schedule.
    pub fn noise(&self, schedule: &NoiseSchedule, x: &[f64], t: usize) -> Vec<f64> {
        let ab = schedule.alpha_bar(t);
        self.posterior(x, ab.sqrt(), (1.0 - ab).sqrt()).eps
    }

    fn map_rows(&self, x: &Array4<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Array4<f64>> {
        let b = x.len_of(Axis(0));
        let d = x.len() / b.max(1);
        if d != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "mixture oracle input",
                lhs: x.shape().to_vec(),
                rhs: vec![b, self.dim()],
            });
        }
        let mut out = Array4::zeros(x.raw_dim());
        for (i, row) in x.outer_iter().enumerate() {
            let flat: Vec<f64> = row.iter().copied().collect();
            for (o, v) in out.index_axis_mut(Axis(0), i).iter_mut().zip(f(&flat)) {
                *o = v;
            }
        }
        Ok(out)
    }

    /// Velocity predictor over flattened samples.
    pub fn velocity_predictor(&self, interp: Interpolant) -> impl Fn(&Array4<f64>, Timestep, &[usize]) -> Result<Array4<f64>> + '_ {
        move |x, t, _| self.map_rows(x, |row| self.velocity(&interp, row, t.as_f64()))
    }

    /// Noise predictor over flattened samples.
    pub fn noise_predictor<'a>(
        &'a self,
        schedule: &'a NoiseSchedule,
    ) -> impl Fn(&Array4<f64>, Timestep, &[usize]) -> Result<Array4<f64>> + 'a {
        move |x, t, _| match t {
            Timestep::Discrete(t) => self.map_rows(x, |row| self.noise(schedule, row, t)),
            other => Err(Error::Config(format!("noise oracle needs a discrete timestep, got {other:?}"))),
        }
    }
}
