mod common;

use common::*;
use rand::Rng;
use switchem::gaussian::gaussian_maximizer;
use switchem::smoothing::{fs_update, path_update};
use switchem::{em_step, EmConfig, EstimatorState, FilterKind, InitialMode, InitialState, ModeId, StepSchedule};
use switchem::em::FilterState;

fn pure_hmm() -> PureHmm {
    PureHmm { mus: vec![1.0, 4.0], vars: vec![1.0, 2.5], tpm: vec![vec![0.9, 0.1], vec![0.25, 0.75]] }
}

fn hmm_observations(hmm: &PureHmm, n: usize, seed: u64) -> Vec<f64> {
    let (model, theta) = hmm.model();
    let traj = switchem::simulate(&model, &theta, n, &InitialState::Known(vec![0.0]), &InitialMode::Known(ModeId::from_index(0)), seed)
        .unwrap();
    traj.y.iter().map(|y| y[0]).collect()
}

fn frozen(smoother: switchem::Smoother, schedule: StepSchedule) -> EmConfig {
    EmConfig { burn_in: usize::MAX, smoother, schedule, ..EmConfig::default() }
}

#[test]
fn rbpf_mode_probabilities_match_exact_hmm_filter() {
    let hmm = pure_hmm();
    let (model, theta) = hmm.model();
    let ys = hmm_observations(&hmm, 300, 5);
    let alpha0 = [0.3, 0.7];
    let exact = hmm.forward(&ys, &alpha0);
    let mut state = EstimatorState::new(
        &model,
        theta,
        FilterKind::RaoBlackwellized,
        20,
        &InitialState::Known(vec![0.0]),
        &InitialMode::Distribution(alpha0.to_vec()),
        1,
    )
    .unwrap();
    let cfg = frozen(switchem::Smoother::PathBased, StepSchedule::default());
    let mut worst = 0.0f64;
    for (t, y) in ys.iter().enumerate() {
        em_step(&mut state, &[*y], &cfg, &model).unwrap();
        let FilterState::RaoBlackwellized(sys) = &state.filter else { unreachable!() };
        for p in &sys.particles {
            for (a, b) in p.alpha.iter().zip(&exact[t]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-10, "max alpha error {worst}");
}

#[test]
fn smoothing_updates_match_enumeration() {
    let mut rng = rng(2024);
    for _ in 0..200 {
        let inst = SmoothingInstance::random(&mut rng, 2, 5);
        let mut fs = inst.new_particles();
        fs_update(&inst.prev, &mut fs, &inst.y, inst.t, &inst.theta, inst.gamma, &inst.model, &inst.layout);
        let want = brute_fs(&inst.model, &inst.theta, &inst.prev, &inst.new_x, &inst.y, inst.t, inst.gamma);
        let err = max_abs_diff(&want, &fs);
        assert!(err <= 1e-12, "fs error {err}");

        let mut path = inst.new_particles();
        path_update(&inst.prev, &inst.ancestors, &mut path, &inst.y, inst.t, &inst.theta, inst.gamma, &inst.model, &inst.layout);
        let want = brute_path(&inst.model, &inst.theta, &inst.prev, &inst.ancestors, &inst.new_x, &inst.y, inst.t, inst.gamma);
        let err = max_abs_diff(&want, &path);
        assert!(err <= 1e-12, "path error {err}");
    }
}

#[test]
fn smoothing_with_three_modes_matches_enumeration() {
    let mut rng = rng(77);
    for _ in 0..50 {
        let inst = SmoothingInstance::random(&mut rng, 3, 4);
        let mut fs = inst.new_particles();
        fs_update(&inst.prev, &mut fs, &inst.y, inst.t, &inst.theta, inst.gamma, &inst.model, &inst.layout);
        let want = brute_fs(&inst.model, &inst.theta, &inst.prev, &inst.new_x, &inst.y, inst.t, inst.gamma);
        assert!(max_abs_diff(&want, &fs) <= 1e-12);
    }
}

#[test]
fn single_particle_fs_equals_path() {
    let mut rng = rng(9);
    for _ in 0..50 {
        let mut inst = SmoothingInstance::random(&mut rng, 2, 1);
        inst.prev.truncate(1);
        inst.prev[0].log_w = 0.0;
        inst.new_x.truncate(1);
        inst.ancestors = vec![0];
        let mut fs = inst.new_particles();
        let mut path = inst.new_particles();
        fs_update(&inst.prev, &mut fs, &inst.y, inst.t, &inst.theta, inst.gamma, &inst.model, &inst.layout);
        path_update(&inst.prev, &inst.ancestors, &mut path, &inst.y, inst.t, &inst.theta, inst.gamma, &inst.model, &inst.layout);
        for l in 0..2 {
            for (a, b) in fs[0].t_stat.row(l).iter().zip(path[0].t_stat.row(l)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn maximizer_matches_newton_on_raw_samples() {
    let mut rng = rng(31);
    let feas = default_feasibility();
    for _ in 0..40 {
        let n = rng.random_range(5..60);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..5.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let mut s3 = [0.0; 4];
        for i in 0..n {
            s3[0] += w[i] * v[i];
            s3[1] += w[i] * v[i] * v[i];
            s3[2] += w[i] * e[i];
            s3[3] += w[i] * e[i] * e[i];
        }
        let s2: f64 = w.iter().sum();
        let p = gaussian_maximizer(&s3, s2, 1, 1, &feas).unwrap();
        let (mv, vv) = newton_gaussian_mle(&v, &w);
        let (me, ve) = newton_gaussian_mle(&e, &w);
        assert!((p.process.mean()[0] - mv).abs() <= 1e-6);
        assert!((p.process.cov()[(0, 0)] - vv).abs() <= 1e-6);
        assert!((p.measurement.mean()[0] - me).abs() <= 1e-6);
        assert!((p.measurement.cov()[(0, 0)] - ve).abs() <= 1e-6);
    }
}

#[test]
fn harmonic_steps_reproduce_offline_smoothed_statistic() {
    let hmm = pure_hmm();
    let (model, theta) = hmm.model();
    let n = 400;
    let ys = hmm_observations(&hmm, n, 12);
    let want = hmm.smoothed_functional(&ys, &[1.0, 0.0]);
    for smoother in [switchem::Smoother::ForwardSmoothing, switchem::Smoother::PathBased] {
        let mut state = EstimatorState::new(
            &model,
            theta.clone(),
            FilterKind::RaoBlackwellized,
            10,
            &InitialState::Known(vec![0.0]),
            &InitialMode::Known(ModeId::from_index(0)),
            3,
        )
        .unwrap();
        let cfg = frozen(smoother, StepSchedule::harmonic());
        for y in &ys {
            em_step(&mut state, &[*y], &cfg, &model).unwrap();
        }
        let got = state.layout().stack(&state.stats);
        for (g, w) in got.iter().zip(&want) {
            let w = w / n as f64;
            assert!((g - w).abs() <= 1e-9 * (1.0 + w.abs()), "{smoother:?}: {g} vs {w}");
        }
    }
}
