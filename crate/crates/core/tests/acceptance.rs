//! Acceptance suite. Each test prints one `PASS`/`FAIL` line, then asserts.
//!
//! Run with `cargo test -p sra-core --test acceptance -- --nocapture`.
//! The two long training experiments are ignored by default; add
//! `--ignored` to run them.

use std::fs;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sra_core::backbone::{ModelConfig, ParamLayout, ParamSet};
use sra_core::data::{generate_shapes_with, Dataset, ShapesConfig};
use sra_core::diagnostics::{frechet_gaussian_distance, frechet_gaussian_distance_with, COV_SHRINKAGE};
use sra_core::experiment::{run_direction, DirectionConfig, DirectionReport};
use sra_core::process::{Family, Interpolant, NoiseSchedule, ProcessConfig};
use sra_core::sampler::{ddpm_sample, euler_maruyama_sample, euler_maruyama_with, MixtureOracle, SampleConfig, SdeMode};
use sra_core::sra::{ema_update, EmaSchedule, SraConfig};
use sra_core::trainer::{checkpoint_path, read_metrics, StepRngs, TrainConfig, TrainState, Trainer};

fn verdict(id: u32, name: &str, ok: bool, detail: impl AsRef<str>) {
    println!(
        "criterion {id} [{name}]: {} ({})",
        if ok { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    assert!(ok, "criterion {id} failed: {}", detail.as_ref());
}

fn toy_model() -> ModelConfig {
    ModelConfig::toy()
}

fn toy_sra(lambda: f64) -> SraConfig {
    SraConfig {
        student_layer: 1,
        teacher_layer: 2,
        lambda,
        ema: EmaSchedule::Constant { alpha: 0.9 },
        ..SraConfig::for_model(Family::ContinuousFlow, 2)
    }
}

fn toy_data(num: usize) -> Dataset {
    generate_shapes_with(&ShapesConfig {
        num,
        size: 8,
        seed: 5,
        ..ShapesConfig::default()
    })
    .unwrap()
}

fn toy_train(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        total_steps: steps,
        seed: 21,
        ..TrainConfig::default()
    }
}

fn jitter(p: &mut ParamSet<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    p.data.iter_mut().for_each(|v| *v += scale * rng.random_range(-1.0..1.0));
}

#[test]
fn c1_stop_gradient() {
    let start = Instant::now();
    let trainer = Trainer::new(toy_model(), ProcessConfig::default(), toy_train(1), Some(toy_sra(0.2))).unwrap();
    let mut state = trainer.init_state::<f64>();
    // Move away from the zero-initialised modulation so every path carries signal.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    jitter(&mut state.student, &mut rng, 0.05);
    state.teacher.as_mut().unwrap().params = state.student.clone();
    let data = toy_data(16);
    let (x0, labels) = data.batch::<f64>(&(0..8).collect::<Vec<_>>());
    let g = trainer
        .compute_gradients(&state, &x0, &labels, &mut StepRngs::for_step(21, 0))
        .unwrap();
    let teacher_zero = g.teacher.as_ref().unwrap().data.iter().all(|&v| v == 0.0);
    let head_norm = g.head.as_ref().unwrap().squared_norm().sqrt();
    let student_norm = g.student.squared_norm().sqrt();
    let before = state.clone();
    trainer
        .train_step(&mut state, &x0, &labels, &mut StepRngs::for_step(21, 0))
        .unwrap();
    // The teacher moves only through the EMA of the updated student.
    let t = &state.teacher.as_ref().unwrap().params;
    let expect: Vec<f64> = before
        .teacher
        .as_ref()
        .unwrap()
        .params
        .data
        .iter()
        .zip(&state.student.data)
        .map(|(&tp, &sp)| 0.9 * tp + 0.1 * sp)
        .collect();
    let ema_only = t.data.iter().zip(&expect).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    let elapsed = start.elapsed();
    verdict(
        1,
        "stop-gradient",
        teacher_zero && head_norm > 0.0 && student_norm > 0.0 && ema_only && elapsed < Duration::from_secs(10),
        format!(
            "teacher grads all zero: {teacher_zero}, |g_head| {head_norm:.3e}, |g_student| {student_norm:.3e}, teacher = EMA: {ema_only}, {elapsed:.2?}"
        ),
    );
}

#[test]
fn c2_ema_exactness() {
    let start = Instant::now();
    let mut layout = ParamLayout::default();
    layout.add("w", &[5]);
    let layout = Arc::new(layout);
    let mut worst = 0.0f64;
    for alpha in [0.0, 0.9999] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta0: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let students: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut teacher = ParamSet {
            layout: layout.clone(),
            data: theta0.clone(),
        };
        for s in &students {
            let student = ParamSet {
                layout: layout.clone(),
                data: s.clone(),
            };
            ema_update(&mut teacher, &student, alpha).unwrap();
        }
        // Closed form: α^T θ₀ + (1 − α) Σ_k α^(T−k) s_k.
        let t = students.len() as i32;
        for i in 0..5 {
            let mut expect = alpha.powi(t) * theta0[i];
            for (k, s) in students.iter().enumerate() {
                expect += (1.0 - alpha) * alpha.powi(t - 1 - k as i32) * s[i];
            }
            let rel = (teacher.data[i] - expect).abs() / expect.abs().max(1e-12);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "EMA exactness",
        worst < 1e-6 && elapsed < Duration::from_secs(1),
        format!("worst relative error {worst:.2e} over 500 steps at alpha 0 and 0.9999, {elapsed:.2?}"),
    );
}

#[test]
fn c3_joint_loss_gradients() {
    let start = Instant::now();
    let trainer = Trainer::new(toy_model(), ProcessConfig::default(), toy_train(1), Some(toy_sra(0.5))).unwrap();
    let mut state = trainer.init_state::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    jitter(&mut state.student, &mut rng, 0.1);
    jitter(state.head.as_mut().unwrap(), &mut rng, 0.1);
    let mut teacher = state.student.clone();
    jitter(&mut teacher, &mut rng, 0.1);
    state.teacher.as_mut().unwrap().params = teacher;
    let data = toy_data(16);
    let (x0, labels) = data.batch::<f64>(&(0..8).collect::<Vec<_>>());
    let loss = |s: &TrainState<f64>| {
        trainer
            .compute_gradients(s, &x0, &labels, &mut StepRngs::for_step(21, 0))
            .unwrap()
    };
    let g = loss(&state);
    assert!(g.align_loss > 0.0);

    let h = 1e-6;
    let mut worst = 0.0f64;
    let n_student = state.student.data.len();
    let n_head = state.head.as_ref().unwrap().data.len();
    for j in 0..20 {
        let in_head = j >= 15;
        let idx = rng.random_range(0..if in_head { n_head } else { n_student });
        let eval = |delta: f64| {
            let mut s = state.clone();
            let p = if in_head { s.head.as_mut().unwrap() } else { &mut s.student };
            p.data[idx] += delta;
            loss(&s).joint_loss
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = if in_head {
            g.head.as_ref().unwrap().data[idx]
        } else {
            g.student.data[idx]
        };
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "joint-loss gradients",
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("worst relative error {worst:.2e} over 15 student + 5 head parameters, {elapsed:.2?}"),
    );
}

#[test]
fn c4_baseline_reduction() {
    let start = Instant::now();
    let data = toy_data(64);
    let trajectory = |sra: Option<SraConfig>| {
        let trainer = Trainer::new(toy_model(), ProcessConfig::default(), toy_train(100), sra).unwrap();
        let mut traj = Vec::new();
        let mut hook = |s: &TrainState<f32>| {
            traj.push(s.student.data.clone());
            Ok(())
        };
        trainer
            .train_loop(trainer.init_state::<f32>(), &data, None, Some(&mut hook))
            .unwrap();
        traj
    };
    let base = trajectory(None);
    let zero = trajectory(Some(toy_sra(0.0)));
    let identical = base.len() == 100
        && base
            .iter()
            .zip(&zero)
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let elapsed = start.elapsed();
    verdict(
        4,
        "baseline reduction",
        identical && elapsed < Duration::from_secs(60),
        format!("100-step student trajectories bit-identical: {identical}, {elapsed:.2?}"),
    );
}

#[test]
fn c5_sampler_oracles() {
    let start = Instant::now();
    let point = [0.7, -0.3, 0.2, -0.9];
    let oracle = MixtureOracle::point_mass(&point);
    let shape = (1, 2, 2);
    let flat = |x: &Array4<f64>| Array2::from_shape_vec((x.shape()[0], 4), x.iter().copied().collect()).unwrap();

    let interp = Interpolant::LINEAR;
    let vel = oracle.velocity_predictor(interp);
    let ode_cfg = SampleConfig {
        num_steps: 250,
        num_samples: 64,
        sde_mode: SdeMode::Ode,
        seed: 4,
        ..SampleConfig::default()
    };
    let ode = euler_maruyama_sample(&vel, &interp, &ode_cfg, shape, 0).unwrap();
    let ode_err = flat(&ode)
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&point).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);

    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let eps = oracle.noise_predictor(&schedule);
    let ddpm_cfg = SampleConfig {
        family: Some(Family::DiscreteDenoise { steps: 1000 }),
        num_steps: 1000,
        num_samples: 1000,
        seed: 5,
        batch_size: 1000,
        ..SampleConfig::default()
    };
    let ddpm = ddpm_sample(&eps, &schedule, &ddpm_cfg, shape, 0).unwrap();
    let mean: Array1<f64> = flat(&ddpm).mean_axis(ndarray::Axis(0)).unwrap();
    let ddpm_err = mean.iter().zip(&point).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let gauss = MixtureOracle::standard_normal(4);
    let gvel = gauss.velocity_predictor(interp);
    let cfg = SampleConfig {
        num_steps: 100,
        num_samples: 32,
        sde_mode: SdeMode::Ode,
        seed: 6,
        ..SampleConfig::default()
    };
    let a = euler_maruyama_sample(&gvel, &interp, &cfg, shape, 0).unwrap();
    let b = euler_maruyama_with(&gvel, &interp, &cfg, shape, 0, &|_| 0.0).unwrap();
    let bitwise = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());

    let elapsed = start.elapsed();
    verdict(
        5,
        "sampler oracles",
        ode_err < 1e-2 && ddpm_err < 0.05 && bitwise && elapsed < Duration::from_secs(120),
        format!(
            "(a) flow ODE max error {ode_err:.2e}; (b) DDPM mean error {ddpm_err:.3} over 1000 samples; (c) zero-diffusion SDE == ODE bitwise: {bitwise}; {elapsed:.2?}"
        ),
    );
}

#[test]
fn c6_frechet_proxy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Array2::from_shape_fn((400, 3), |_| rng.random_range(-1.0..1.0));
    let same = frechet_gaussian_distance(&a, &a).unwrap().abs();

    let shift = [0.5, -1.25, 2.0];
    let b = Array2::from_shape_fn((400, 3), |(i, j)| a[[i, j]] + shift[j]);
    let expect: f64 = shift.iter().map(|s| s * s).sum();
    let shifted = (frechet_gaussian_distance(&a, &b).unwrap() - expect).abs();

    let x = Array2::from_shape_fn((300, 1), |_| rng.random_range(-1.0..1.0));
    let y = Array2::from_shape_fn((300, 1), |_| 0.3 + 2.0 * rng.random_range(-1.0..1.0));
    let stats = |m: &Array2<f64>| {
        let v: Vec<f64> = m.iter().copied().collect();
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / (v.len() - 1) as f64;
        (mu, var)
    };
    let ((mx, vx), (my, vy)) = (stats(&x), stats(&y));
    // The estimator adds a small ridge; compare with and without it.
    let closed = |eps: f64| (mx - my).powi(2) + ((vx + eps).sqrt() - (vy + eps).sqrt()).powi(2);
    let one_d = (frechet_gaussian_distance(&x, &y).unwrap() - closed(COV_SHRINKAGE))
        .abs()
        .max((frechet_gaussian_distance_with(&x, &y, 0.0).unwrap() - closed(0.0)).abs());

    verdict(
        6,
        "Fréchet proxy",
        same <= 1e-8 && shifted <= 1e-8 && one_d <= 1e-8,
        format!("identical {same:.1e}, mean-shift error {shifted:.1e}, 1-D error {one_d:.1e}"),
    );
}

fn full_report() -> &'static DirectionReport {
    static REPORT: OnceLock<DirectionReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let out = std::env::var_os("SRA_EXPERIMENT_DIR").map(std::path::PathBuf::from);
        run_direction(&DirectionConfig::full(), out.as_deref(), &mut |l| eprintln!("{l}")).unwrap()
    })
}

#[test]
#[ignore = "three seeds of two 20k-step depth-12 runs: days on one CPU core"]
fn c7_effect_direction() {
    let report = full_report();
    let detail: Vec<String> = report
        .seeds
        .iter()
        .map(|s| {
            format!(
                "seed {}: fid {:.4} vs {:.4}, layer-{} probe {:.3} vs {:.3}",
                s.seed,
                s.sra.fid_pixel,
                s.baseline.fid_pixel,
                report.config.eval.probe_layer,
                s.sra.probe,
                s.baseline.probe
            )
        })
        .collect();
    verdict(
        7,
        "effect direction",
        report.effect_holds(),
        format!("{}/{} seeds favour alignment; {}", report.seeds_ahead(), report.seeds.len(), detail.join("; ")),
    );
}

#[test]
#[ignore = "shares the full run with criterion 7"]
fn c8_teacher_ahead() {
    let report = full_report();
    let points: usize = report.seeds.iter().map(|s| s.track.len()).sum();
    let worst = report
        .seeds
        .iter()
        .flat_map(|s| s.track.iter())
        .map(|p| p.teacher - p.student)
        .fold(f64::INFINITY, f64::min);
    verdict(
        8,
        "teacher ahead",
        report.teacher_ahead(),
        format!("{points} tracked checkpoints, smallest teacher-minus-student margin {worst:.3}"),
    );
}

/// The full experiment is ignored by default; say so instead of staying silent.
#[test]
fn c7_c8_status() {
    for (id, name) in [(7, "effect direction"), (8, "teacher ahead")] {
        println!("criterion {id} [{name}]: NOT RUN (full-scale training; run with --ignored)");
    }
}

#[test]
fn c9_checkpoint_resume() {
    let data = toy_data(64);
    let cfg = TrainConfig {
        checkpoint_every: 3,
        ..toy_train(9)
    };
    let trainer = Trainer::new(toy_model(), ProcessConfig::default(), cfg, Some(toy_sra(0.2))).unwrap();
    let full = tempfile::tempdir().unwrap();
    let (state, _) = trainer
        .train_loop(trainer.init_state::<f32>(), &data, Some(full.path()), None)
        .unwrap();

    // Round trip: load then save reproduces the file byte for byte.
    let ckpt = full.path().join("final.ckpt");
    let loaded = trainer.load_state::<f32>(&ckpt).unwrap();
    let again = full.path().join("again.ckpt");
    trainer.save_checkpoint(&loaded, &again).unwrap();
    let round_trip = fs::read(&ckpt).unwrap() == fs::read(&again).unwrap() && loaded == state;

    // Interrupt after step 5, resume from the step-3 checkpoint.
    let part = tempfile::tempdir().unwrap();
    let mut stop = |s: &TrainState<f32>| {
        if s.step == 5 {
            Err(sra_core::Error::Degenerate("interrupted".into()))
        } else {
            Ok(())
        }
    };
    assert!(trainer
        .train_loop(trainer.init_state::<f32>(), &data, Some(part.path()), Some(&mut stop))
        .is_err());
    let resumed = trainer.load_state::<f32>(checkpoint_path(part.path(), 3)).unwrap();
    let (state2, _) = trainer.train_loop(resumed, &data, Some(part.path()), None).unwrap();
    let metrics_equal = read_metrics(full.path().join("metrics.jsonl")).unwrap()
        == read_metrics(part.path().join("metrics.jsonl")).unwrap();
    let final_equal = fs::read(&ckpt).unwrap() == fs::read(part.path().join("final.ckpt")).unwrap();
    verdict(
        9,
        "checkpoint/resume",
        round_trip && metrics_equal && final_equal && state2 == state,
        format!("round trip byte-identical: {round_trip}, resumed metrics identical: {metrics_equal}, final checkpoints identical: {final_equal}"),
    );
}
