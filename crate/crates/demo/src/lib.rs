//! Browser demo of three pieces of the core crate: the noising paths, oracle
//! sampling trajectories on a 2-D Gaussian mixture, and the EMA teacher
//! tracking a noisy student. Everything is a plain function returning a
//! serialisable struct; the wasm exports only wrap them in JSON.

use std::cell::RefCell;

use ndarray::{Array2, Array4};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use sra_core::backbone::{ParamLayout, ParamSet};
use sra_core::process::{Interpolant, NoiseSchedule, Timestep};
use sra_core::rng::{self, Purpose};
use sra_core::sampler::{euler_maruyama_sample, MixtureOracle, SampleConfig, SdeMode};
use sra_core::sra::{Distance, EmaSchedule, TeacherState};
use sra_core::Result;

#[cfg(target_arch = "wasm32")]
mod wasm;

/// Signal and noise scales on a uniform grid of `t`, plus alignment kernels.
#[derive(Debug, Clone, Serialize)]
pub struct Curves {
    pub t: Vec<f64>,
    pub linear_alpha: Vec<f64>,
    pub linear_sigma: Vec<f64>,
    pub vp_alpha: Vec<f64>,
    pub vp_sigma: Vec<f64>,
    /// `√ᾱ` of the 1000-step linear schedule at `t·(T − 1)`.
    pub ddpm_alpha: Vec<f64>,
    pub ddpm_sigma: Vec<f64>,
    /// Differences at which the kernels are evaluated.
    pub d: Vec<f64>,
    pub smooth_l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub l1: Vec<f64>,
}

pub fn curves(points: usize, beta: f64) -> Result<Curves> {
    let n = points.max(2);
    let t: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let ab = |x: f64| schedule.alpha_bar((x * 999.0).round() as usize);
    let (lin, vp) = (Interpolant::LINEAR, Interpolant::VP);
    let d: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(sra_core::Error::Config(format!("beta must be positive, got {beta}")));
    }
    let kern = |k: Distance| d.iter().map(|&x| k.kernel(x)).collect();
    Ok(Curves {
        linear_alpha: t.iter().map(|&x| lin.alpha(x)).collect(),
        linear_sigma: t.iter().map(|&x| lin.sigma(x)).collect(),
        vp_alpha: t.iter().map(|&x| vp.alpha(x)).collect(),
        vp_sigma: t.iter().map(|&x| vp.sigma(x)).collect(),
        ddpm_alpha: t.iter().map(|&x| ab(x).sqrt()).collect(),
        ddpm_sigma: t.iter().map(|&x| (1.0 - ab(x)).sqrt()).collect(),
        smooth_l1: kern(Distance::SmoothL1 { beta }),
        l2: kern(Distance::L2),
        l1: kern(Distance::L1),
        d,
        t,
    })
}

/// Sampling paths from noise (`t = 1`) to data (`t = 0`).
#[derive(Debug, Clone, Serialize)]
pub struct Trajectories {
    /// `paths[i][k]` is sample `i` after `k` steps.
    pub paths: Vec<Vec<[f64; 2]>>,
    pub means: Vec<[f64; 2]>,
    pub std: f64,
}

/// Four-component mixture on a circle of radius 1.5.
pub fn demo_mixture() -> MixtureOracle {
    let means = Array2::from_shape_fn((4, 2), |(k, j)| {
        let a = std::f64::consts::FRAC_PI_2 * k as f64 + std::f64::consts::FRAC_PI_4;
        1.5 * if j == 0 { a.cos() } else { a.sin() }
    });
    MixtureOracle::new(means, 0.2, vec![0.25; 4]).expect("valid mixture")
}

/// Runs the Euler (ODE) or Euler–Maruyama (SDE) sampler with the exact
/// mixture velocity and records every intermediate state.
pub fn trajectories(num_paths: usize, steps: usize, sde: bool, seed: u64) -> Result<Trajectories> {
    if num_paths == 0 || steps == 0 {
        return Err(sra_core::Error::Config("need at least one path and one step".into()));
    }
    let oracle = demo_mixture();
    let interp = Interpolant::LINEAR;
    let velocity = oracle.velocity_predictor(interp);
    let seen: RefCell<Vec<Array4<f64>>> = RefCell::new(Vec::new());
    let recording = |x: &Array4<f64>, t: Timestep, ids: &[usize]| {
        seen.borrow_mut().push(x.clone());
        velocity(x, t, ids)
    };
    let cfg = SampleConfig {
        num_steps: steps,
        num_samples: num_paths,
        batch_size: num_paths.max(1),
        sde_mode: if sde { SdeMode::SdeWtSigma } else { SdeMode::Ode },
        seed,
        ..SampleConfig::default()
    };
    let last = euler_maruyama_sample(&recording, &interp, &cfg, (1, 1, 2), 0)?;
    let mut states = seen.into_inner();
    states.push(last);
    let paths = (0..num_paths)
        .map(|i| states.iter().map(|x| [x[[i, 0, 0, 0]], x[[i, 0, 0, 1]]]).collect())
        .collect();
    Ok(Trajectories {
        paths,
        means: oracle.means.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
        std: oracle.std,
    })
}

/// A noisy student chasing a target that jumps partway through, and the EMA
/// teacher that follows it.
#[derive(Debug, Clone, Serialize)]
pub struct EmaTrace {
    pub target: Vec<f64>,
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
}

pub fn ema_trace(alpha: f64, steps: usize, noise: f64, seed: u64) -> Result<EmaTrace> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(sra_core::Error::Config(format!("noise must be non-negative, got {noise}")));
    }
    let mut layout = ParamLayout::default();
    layout.add("w", &[1]);
    let mut student = ParamSet {
        layout: layout.into(),
        data: vec![0.0f64],
    };
    let mut teacher = TeacherState::from_student(&student, EmaSchedule::Constant { alpha });
    let mut rng = rng::stream(seed, 0, Purpose::Sample);
    let mut out = EmaTrace {
        target: Vec::with_capacity(steps),
        student: Vec::with_capacity(steps),
        teacher: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let target = if 3 * k < steps { 1.0 } else { -1.0 };
        let z: f64 = StandardNormal.sample(&mut rng);
        student.data[0] += 0.05 * (target - student.data[0]) + noise * z;
        teacher.update(&student)?;
        out.target.push(target);
        out.student.push(student.data[0]);
        out.teacher.push(teacher.params.data[0]);
    }
    Ok(out)
}
