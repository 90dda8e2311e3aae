use super::*;
use crate::backbone::ModelConfig;
use crate::data::{generate_shapes, generate_shapes_with, ShapesConfig};
use crate::process::{Family, InterpolantKind, ProcessConfig};
use crate::sra::SraConfig;
use crate::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng))
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

#[test]
fn frechet_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = gaussian(&mut rng, 200, 5);
    assert!(frechet_gaussian_distance(&a, &a).unwrap().abs() < 1e-8);

    let shift = Array1::from(vec![1.0, 2.0, 2.0, 0.0, 0.0]);
    let b = &a + &shift;
    assert!((frechet_gaussian_distance(&a, &b).unwrap() - 9.0).abs() < 1e-8);

    // Scalar closed form (μa − μb)² + (sa − sb)² on the loaded variances.
    let x = gaussian(&mut rng, 50, 1);
    let y = gaussian(&mut rng, 70, 1).mapv(|v| 0.5 * v + 1.3);
    let stats = |m: &Array2<f64>| {
        let n = m.nrows() as f64;
        let mean = m.sum() / n;
        let var = m.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0);
        (mean, var)
    };
    let ((mx, vx), (my, vy)) = (stats(&x), stats(&y));
    for load in [0.0, COV_SHRINKAGE] {
        let closed = (mx - my).powi(2) + ((vx + load).sqrt() - (vy + load).sqrt()).powi(2);
        let got = frechet_gaussian_distance_with(&x, &y, load).unwrap();
        assert!((got - closed).abs() < 1e-8, "{got} vs {closed}");
    }
}

#[test]
fn frechet_is_symmetric_and_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = gaussian(&mut rng, 40, 6);
    let b = gaussian(&mut rng, 60, 6).mapv(|v| v * 1.7 - 0.2);
    let ab = frechet_gaussian_distance(&a, &b).unwrap();
    let ba = frechet_gaussian_distance(&b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-8);
    assert!(ab > 0.0);
    assert!(frechet_gaussian_distance(&a, &gaussian(&mut rng, 40, 5)).is_err());
    let mut bad = a.clone();
    bad[[0, 0]] = f64::NAN;
    assert!(frechet_gaussian_distance(&bad, &b).is_err());
}

#[test]
fn sqrt_product_squares_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for d in [1, 3, 8] {
        let a = random_spd(&mut rng, d);
        let b = random_spd(&mut rng, d);
        let r = sqrt_product(&a, &b).unwrap();
        let prod = &a * &b;
        let rel = (&r * &r - &prod).norm() / prod.norm();
        assert!(rel < 1e-6, "d={d}: {rel}");
    }
    let singular = DMatrix::zeros(2, 2);
    assert!(matches!(sqrt_product(&singular, &DMatrix::identity(2, 2)), Err(Error::MatrixSqrt(_))));
    let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    assert!(matches!(sqrt_psd(&indefinite), Err(Error::MatrixSqrt(_))));
}

#[test]
fn pca_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Rank one.
    let dir = Array1::from(vec![0.6, -0.8, 0.0]);
    let rank1 = Array2::from_shape_fn((30, 3), |(i, j)| (i as f64 - 7.0) * dir[j] + 2.0);
    let p = pca_project(&rank1, 1).unwrap();
    assert!((p.explained_ratio[0] - 1.0).abs() < 1e-10);

    // Isotropic 2-D.
    let iso = gaussian(&mut rng, 20_000, 2);
    let p = pca_project(&iso, 2).unwrap();
    assert!((p.explained_ratio[0] - 0.5).abs() < 0.02 && (p.explained_ratio[1] - 0.5).abs() < 0.02);

    assert!(pca_project(&iso, 0).is_err());
    assert!(pca_project(&iso, 3).is_err());
}

#[test]
fn pca_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = gaussian(&mut rng, 5, 10);
    let p = pca_project(&x, 4).unwrap();
    let centred = &x - &x.mean_axis(Axis(0)).unwrap();
    let svd = to_matrix(&centred).svd(true, true);
    let vt = svd.v_t.unwrap();
    let u = svd.u.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    for (k, &j) in order.iter().take(4).enumerate() {
        let sign = if (0..10).map(|c| vt[(j, c)] * p.components[[k, c]]).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        for c in 0..10 {
            assert!((sign * vt[(j, c)] - p.components[[k, c]]).abs() < 1e-8);
        }
        for r in 0..5 {
            let oracle = sign * u[(r, j)] * svd.singular_values[j];
            assert!((oracle - p.projected[[r, k]]).abs() < 1e-8);
        }
        let ratio = svd.singular_values[j].powi(2) / total;
        assert!((ratio - p.explained_ratio[k]).abs() < 1e-10);
    }
}

#[test]
fn pca_invariants_and_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let basis = gaussian(&mut rng, 3, 7);
    let coef = gaussian(&mut rng, 40, 3);
    let x = coef.dot(&basis) + 0.5;
    let p = pca_project(&x, 3).unwrap();
    assert!(p.explained_ratio.windows(2).all(|w| w[0] >= w[1]));
    assert!(p.explained_ratio.iter().all(|&r| r >= 0.0));
    assert!(p.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
    let gram = p.components.dot(&p.components.t());
    for i in 0..3 {
        for j in 0..3 {
            assert!((gram[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
    }
    let recon = p.projected.dot(&p.components) + &p.mean;
    assert!((&recon - &x).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b)) < 1e-8);
}

fn probe_cfg(seed: u64) -> ProbeConfig {
    ProbeConfig {
        seed,
        ..ProbeConfig::default()
    }
}

#[test]
fn probe_on_one_hot_is_perfect() {
    let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
    let feats = Array2::from_shape_fn((400, 4), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
    assert_eq!(linear_probe(&feats, &labels, &probe_cfg(0)).unwrap(), 1.0);
}

#[test]
fn probe_on_noise_is_near_chance() {
    let labels: Vec<usize> = (0..2000).map(|i| i % 4).collect();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let feats = gaussian(&mut rng, 2000, 16);
        let acc = linear_probe(&feats, &labels, &probe_cfg(seed)).unwrap();
        assert!((0.15..=0.35).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn probe_ignores_duplicated_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let feats = Array2::from_shape_fn((300, 3), |(i, j)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        if labels[i] == j { 3.0 + 0.3 * z } else { 0.3 * z }
    });
    let doubled = ndarray::concatenate(Axis(1), &[feats.view(), feats.view()]).unwrap();
    let a = linear_probe(&feats, &labels, &probe_cfg(1)).unwrap();
    let b = linear_probe(&doubled, &labels, &probe_cfg(1)).unwrap();
    assert_eq!(a, b);
    assert!(a >= 0.99);
}

#[test]
fn probe_rejects_single_class() {
    let feats = Array2::zeros((10, 2));
    assert!(matches!(linear_probe(&feats, &[1; 10], &probe_cfg(0)), Err(Error::Degenerate(_))));
}

#[test]
fn split_is_disjoint_and_covering() {
    let (a, b) = split_indices(101, 0.8, 3);
    assert_eq!(a.len(), 81);
    let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..101).collect::<Vec<_>>());
}

#[test]
fn raw_pixels_separate_the_shapes() {
    let d = generate_shapes(1000, 4, 0).unwrap();
    let acc = linear_probe(&d.flat_pixels(), &d.labels, &probe_cfg(0)).unwrap();
    assert!(acc > 0.9, "{acc}");
}

fn toy_trainer() -> Trainer {
    Trainer::new(
        ModelConfig::toy(),
        ProcessConfig::Flow {
            interpolant: InterpolantKind::Linear,
        },
        TrainConfig {
            total_steps: 0,
            ..TrainConfig::default()
        },
        Some(SraConfig {
            student_layer: 1,
            teacher_layer: 2,
            ..SraConfig::for_model(Family::ContinuousFlow, 2)
        }),
    )
    .unwrap()
}

fn toy_set(n: usize) -> Dataset {
    generate_shapes_with(&ShapesConfig {
        num: n,
        size: 8,
        ..ShapesConfig::default()
    })
    .unwrap()
}

#[test]
fn features_shape_and_determinism() {
    let t = toy_trainer();
    let state = t.init_state::<f64>();
    let d = toy_set(70);
    let f = |seed| {
        extract_features(t.model(), &state.student, t.process(), &d, 1, Timestep::Continuous(0.5), seed).unwrap()
    };
    let a = f(1);
    assert_eq!(a.dim(), (70, 8));
    assert_eq!(a, f(1));
    assert_ne!(a, f(2));
    assert!(extract_features(t.model(), &state.student, t.process(), &d, 3, Timestep::Continuous(0.5), 1).is_err());
    assert!(extract_features(t.model(), &state.student, t.process(), &d, 1, Timestep::Discrete(5), 1).is_err());
}

#[test]
fn constant_tap_gives_constant_features() {
    // All weights zero except the patch-embedding bias c: every gated update
    // vanishes, so each sample's tap is c plus the fixed position table.
    let t = toy_trainer();
    let mut params = ParamSet::<f64>::zeros(t.model().layout().clone());
    let bias = t.model().layout().entries().iter().find(|e| e.name == "patch_embed.bias").unwrap().clone();
    params.data[bias.offset..bias.offset + bias.len()].iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
    let d = toy_set(10);
    let feats = extract_features(t.model(), &params, t.process(), &d, 2, Timestep::Continuous(0.3), 0).unwrap();
    let table: Array2<f64> = crate::backbone::sincos_position_table(8, 4, 4);
    let pos_mean = table.mean_axis(Axis(0)).unwrap();
    for row in feats.outer_iter() {
        for j in 0..8 {
            assert!((row[j] - (j as f64 + pos_mean[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn analysis_grid_and_outputs() {
    let t = toy_trainer();
    let state = t.init_state::<f64>();
    let d = toy_set(80);
    let cfg = AnalyzeConfig {
        probe: ProbeConfig {
            epochs: 2,
            ..ProbeConfig::default()
        },
        ..AnalyzeConfig::default()
    };
    let empty = analyze_checkpoint(&t, &state, &d, &[], &[0.5], &cfg).unwrap();
    assert!(empty.report.cells.is_empty());

    let a = analyze_checkpoint(&t, &state, &d, &[1, 2], &[0.0, 0.5], &cfg).unwrap();
    assert_eq!(a.report.cells.len(), 8);
    assert!(a.report.cells.iter().all(|c| (0.0..=1.0).contains(&c.accuracy)));
    assert!(a.report.get(Role::Teacher, 2, 0.5).is_some());
    let b = analyze_checkpoint(&t, &state, &d, &[1, 2], &[0.0, 0.5], &cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(ProbeReport::from_csv(&a.report.to_csv()).unwrap(), a.report);

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    let pca = Archive::load(dir.path().join("pca.sra")).unwrap();
    assert_eq!(pca.get("student.layer1.t0.5.projected").unwrap().shape, vec![80, 2]);
    assert!(analyze_checkpoint(&t, &state, &d, &[1], &[1.5], &cfg).is_err());
}

#[test]
fn fid_proxy_zero_on_identical_sets() {
    let d = generate_shapes(300, 4, 1).unwrap();
    let f = fid_proxy(&d.images, &d.images, 0).unwrap();
    assert!(f.pixel.abs() < 1e-8 && f.projected.abs() < 1e-8);
    let e = generate_shapes(300, 4, 2).unwrap();
    let g = fid_proxy(&d.images, &e.images, 0).unwrap();
    assert!(g.pixel > 0.0 && g.projected > 0.0);
}
