use sra_demo::{demo_mixture, ema_trace, trajectories};

fn nearest_mean_distance(p: [f64; 2]) -> f64 {
    let m = demo_mixture();
    m.means
        .rows()
        .into_iter()
        .map(|r| ((p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn ode_paths_end_on_the_mixture() {
    let t = trajectories(64, 100, false, 1).unwrap();
    assert_eq!(t.paths.len(), 64);
    for path in &t.paths {
        assert_eq!(path.len(), 101);
        // Within four component standard deviations of some mean.
        assert!(nearest_mean_distance(*path.last().unwrap()) < 4.0 * t.std * 2f64.sqrt());
    }
    assert_eq!(t.means.len(), 4);
}

#[test]
fn paths_are_seeded_and_sde_differs() {
    let a = trajectories(8, 50, true, 3).unwrap();
    let b = trajectories(8, 50, true, 3).unwrap();
    assert_eq!(a.paths, b.paths);
    let ode = trajectories(8, 50, false, 3).unwrap();
    // Same starting noise, different routes.
    assert_eq!(a.paths[0][0], ode.paths[0][0]);
    assert_ne!(a.paths[0][50], ode.paths[0][50]);
    assert!(trajectories(0, 10, false, 0).is_err());
}

#[test]
fn ema_teacher_smooths_and_lags() {
    let copy = ema_trace(0.0, 200, 0.1, 4).unwrap();
    assert_eq!(copy.student, copy.teacher);

    let tr = ema_trace(0.95, 600, 0.1, 4).unwrap();
    let rough = |v: &[f64]| v.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
    assert!(rough(&tr.teacher) < 0.2 * rough(&tr.student));
    // Right after the target flips at step 200 the teacher is further behind.
    let k = 215;
    assert!(tr.teacher[k] > tr.student[k]);
    assert!(ema_trace(1.5, 10, 0.1, 0).is_err());
    assert!(ema_trace(0.5, 10, -1.0, 0).is_err());
}
