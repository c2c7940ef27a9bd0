use mjls_pob::linalg::frobenius_rel_err;
use mjls_pob::model::{
    enumerate_paths, path_probability, trajectory_affine_maps, Basis, Dims, Ellitope, MarkovChain, MjlsModel,
    ModeMatrices, Policy, PolicyLayout,
};
use mjls_pob::oracle::max_quadratic_over_ellitope;
use mjls_pob::random::{random_ellitope, random_model, random_policy, rng, uniform_matrix, ModelShape};
use mjls_pob::simulator::{
    closed_form_moments, exact_avg_quad, exact_mean, mean_and_stderr, rollout, rollout_with, sample_eps, sample_path,
    sample_scenario, sample_uncertainty, scenario_rng, Scenario, UncertaintySampling,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn shape(horizon: usize, modes: usize, ne: usize, known_x0: bool) -> ModelShape {
    ModelShape {
        dims: Dims {
            horizon,
            nx: 2,
            nu: 2,
            nd: 1,
            ne,
            ny: 2,
            modes,
        },
        known_x0,
        with_sigma0: ne > 0,
    }
}

fn market_chain() -> MarkovChain {
    MarkovChain::new(
        DVector::from_vec(vec![0.1, 0.9]),
        DMatrix::from_row_slice(2, 2, &[0.2, 0.3, 0.8, 0.7]),
    )
    .unwrap()
}

#[test]
fn deterministic_chain_forces_its_path() {
    let chain = MarkovChain::new(
        DVector::from_vec(vec![0.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
    )
    .unwrap();
    for i in 0..50 {
        assert_eq!(sample_path(&chain, 4, &mut scenario_rng(1, i)), vec![1, 0, 1, 0]);
    }
}

#[test]
fn initial_mode_frequency() {
    let chain = market_chain();
    let draws = 100_000;
    let mut r = scenario_rng(9, 0);
    let b = (0..draws).filter(|_| sample_path(&chain, 1, &mut r)[0] == 0).count();
    assert!((b as f64 / draws as f64 - 0.1).abs() < 0.01);
}

#[test]
fn path_frequencies_match_probabilities() {
    let chain = market_chain();
    let draws = 50_000usize;
    let mut counts = [0usize; 8];
    let mut r = scenario_rng(10, 0);
    for _ in 0..draws {
        let p = sample_path(&chain, 3, &mut r);
        counts[p[0] * 4 + p[1] * 2 + p[2]] += 1;
    }
    for p in enumerate_paths(2, 3, 8).unwrap() {
        let prob = path_probability(&chain, &p);
        let freq = counts[p[0] * 4 + p[1] * 2 + p[2]] as f64 / draws as f64;
        let sigma = (prob * (1.0 - prob) / draws as f64).sqrt();
        assert!((freq - prob).abs() <= 3.0 * sigma, "{p:?}: {freq} vs {prob}");
    }
}

#[test]
fn unit_ball_boundary_samples() {
    let e = Ellitope::new(vec![DMatrix::identity(3, 3)]).unwrap();
    for i in 0..100 {
        let z = sample_uncertainty(&e, UncertaintySampling::Boundary, &mut scenario_rng(2, i));
        assert!((z.norm() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn boundary_maximum_approaches_brute_force_from_below() {
    let mut r = rng(3);
    let e = random_ellitope(&mut r, 3, 2);
    let a = uniform_matrix(&mut r, 3, 3, 1.0);
    let a = (&a + a.transpose()) * 0.5;
    let b = DVector::from_fn(3, |_, _| r.gen_range(-1.0..1.0));
    let (opt, _) = max_quadratic_over_ellitope(&a, &b, &e, 64, 2000, &mut r);
    let mut best = f64::NEG_INFINITY;
    for i in 0..10_000 {
        let z = sample_uncertainty(&e, UncertaintySampling::Boundary, &mut scenario_rng(4, i));
        assert!(e.level(&z) <= 1.0 + 1e-10);
        best = best.max(z.dot(&(&a * &z)) + 2.0 * b.dot(&z));
    }
    assert!(best <= opt + 1e-9);
    assert!(best >= opt - 0.1 * (1.0 + opt.abs()), "{best} vs {opt}");
}

#[test]
fn zero_everything_gives_zero_trajectory() {
    let mut r = rng(5);
    let model = random_model(&mut r, shape(3, 2, 0, false));
    let layout = PolicyLayout::new(3, 1, 2, 2, 2).unwrap();
    let policy = Policy::zeros(layout, Basis::Purified);
    let sc = Scenario {
        path: vec![0, 1, 1],
        zeta: DVector::zeros(model.n_zeta()),
        eps: DVector::zeros(model.dims().n_eps()),
    };
    let ro = rollout(&model, &policy, &sc).unwrap();
    assert!(ro.w().amax() == 0.0);
    assert!(ro.v.iter().all(|v| v.amax() == 0.0));
}

#[test]
fn rollout_matches_stacked_maps() {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let horizon = 1 + (seed as usize % 4);
        let modes = 1 + (seed as usize % 3);
        let model = random_model(&mut r, shape(horizon, modes, (seed % 2) as usize, seed % 3 == 0));
        let memory = seed as usize % horizon;
        let layout = PolicyLayout::new(horizon, memory, modes, 2, 2).unwrap();
        let policy = random_policy(&mut r, layout, Basis::Purified, 1.0);
        let ellitope = random_ellitope(&mut r, model.n_zeta(), 2);
        for i in 0..5 {
            let sc = sample_scenario(&model, &ellitope, UncertaintySampling::Interior, seed, i);
            let ro = rollout(&model, &policy, &sc).unwrap();
            let maps = trajectory_affine_maps(&model, &policy, &sc.path).unwrap();
            let w = &maps.offset + &maps.zeta_map * &sc.zeta + &maps.eps_map * &sc.eps;
            assert!((ro.w() - &w).amax() <= 1e-10 * (1.0 + w.amax()));
        }
    }
}

#[test]
fn purified_outputs_ignore_the_controls() {
    let mut r = rng(6);
    let model = random_model(&mut r, shape(4, 2, 1, false));
    let ellitope = random_ellitope(&mut r, model.n_zeta(), 2);
    for i in 0..30 {
        let sc = sample_scenario(&model, &ellitope, UncertaintySampling::Boundary, 6, i);
        let reference = rollout_with(&model, &sc, |_, _, _, _| DVector::zeros(2)).unwrap();
        let mut k = 0u64;
        // nonlinear feedback of both output families
        let other = rollout_with(&model, &sc, |t, path, y, v| {
            k += 1;
            DVector::from_vec(vec![
                (y[t][0] * v[0][1]).sin() + path[t] as f64,
                y.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt() - (k as f64).ln(),
            ])
        })
        .unwrap();
        for t in 0..4 {
            assert!((&reference.v[t] - &other.v[t]).amax() <= 1e-10);
        }
        assert!((reference.w() - other.w()).amax() > 1e-3);
    }
}

#[test]
fn noise_free_single_mode_value_is_deterministic() {
    let mut r = rng(7);
    let model = random_model(&mut r, shape(3, 1, 0, false));
    let layout = PolicyLayout::new(3, 0, 1, 2, 2).unwrap();
    let policy = random_policy(&mut r, layout, Basis::Purified, 0.5);
    let ellitope = random_ellitope(&mut r, model.n_zeta(), 1);
    let sc = sample_scenario(&model, &ellitope, UncertaintySampling::Boundary, 7, 0);
    let nw = model.dims().n_w();
    let a = uniform_matrix(&mut r, nw, nw, 1.0);
    let a = &a * a.transpose();
    let beta = DVector::from_fn(nw, |_, _| r.gen_range(-1.0..1.0));
    let w = rollout(&model, &policy, &sc).unwrap().w();
    let direct = w.dot(&(&a * &w)) + 2.0 * beta.dot(&w);
    let exact = exact_avg_quad(&model, &policy, &a, &beta, &sc.zeta).unwrap();
    assert!((direct - exact).abs() <= 1e-10 * (1.0 + direct.abs()));
}

#[test]
fn exact_value_matches_monte_carlo() {
    let mut r = rng(8);
    let model = random_model(&mut r, shape(3, 2, 1, false));
    let layout = PolicyLayout::new(3, 1, 2, 2, 2).unwrap();
    let policy = random_policy(&mut r, layout, Basis::Purified, 0.5);
    let ellitope = random_ellitope(&mut r, model.n_zeta(), 2);
    let zeta = sample_uncertainty(&ellitope, UncertaintySampling::Boundary, &mut r);
    let nw = model.dims().n_w();
    let a = uniform_matrix(&mut r, nw, nw, 1.0);
    let a = &a * a.transpose();
    let beta = DVector::from_fn(nw, |_, _| r.gen_range(-1.0..1.0));
    let exact = exact_avg_quad(&model, &policy, &a, &beta, &zeta).unwrap();
    let values: Vec<f64> = (0..100_000u64)
        .map(|i| {
            let mut s = scenario_rng(80, i);
            let sc = Scenario {
                path: sample_path(model.chain(), 3, &mut s),
                zeta: zeta.clone(),
                eps: sample_eps(&model, &mut s),
            };
            let w = rollout(&model, &policy, &sc).unwrap().w();
            w.dot(&(&a * &w)) + 2.0 * beta.dot(&w)
        })
        .collect();
    let (mean, se) = mean_and_stderr(&values);
    assert!((mean - exact).abs() <= 3.0 * se, "{mean} ± {se} vs {exact}");
}

#[test]
fn closed_form_moments_match_samples() {
    let mut r = rng(9);
    let model = random_model(&mut r, shape(3, 1, 1, false));
    let layout = PolicyLayout::new(3, 0, 1, 2, 2).unwrap();
    let policy = random_policy(&mut r, layout, Basis::Purified, 0.5);
    let ellitope = random_ellitope(&mut r, model.n_zeta(), 1);
    let zeta = sample_uncertainty(&ellitope, UncertaintySampling::Boundary, &mut r);
    let (mu, cov) = closed_form_moments(&model, &policy, &zeta).unwrap();
    let n = 100_000u64;
    let ws: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut s = scenario_rng(90, i);
            let sc = Scenario {
                path: vec![0; 3],
                zeta: zeta.clone(),
                eps: sample_eps(&model, &mut s),
            };
            rollout(&model, &policy, &sc).unwrap().w()
        })
        .collect();
    let nw = mu.len();
    let mean = ws.iter().fold(DVector::zeros(nw), |acc, w| acc + w) / n as f64;
    let mut scov = DMatrix::zeros(nw, nw);
    for w in &ws {
        let c = w - &mean;
        scov += &c * c.transpose();
    }
    scov /= (n - 1) as f64;
    assert!(frobenius_rel_err(&scov, &cov) <= 0.05);
    for i in 0..nw {
        let se = (cov[(i, i)] / n as f64).sqrt();
        assert!((mean[i] - mu[i]).abs() <= 3.0 * se + 1e-12, "coordinate {i}");
    }
    // agrees with the enumerated mean on the single path
    assert!((exact_mean(&model, &policy, &zeta).unwrap() - &mu).amax() < 1e-12);
}

#[test]
fn noise_free_covariance_vanishes() {
    let mut r = rng(10);
    let model = random_model(&mut r, shape(2, 1, 0, false));
    let policy = random_policy(&mut r, PolicyLayout::new(2, 1, 1, 2, 2).unwrap(), Basis::Purified, 1.0);
    let (_, cov) = closed_form_moments(&model, &policy, &DVector::zeros(model.n_zeta())).unwrap();
    assert_eq!(cov.amax(), 0.0);
}

#[test]
fn scenarios_are_reproducible() {
    let mut r = rng(11);
    let model = random_model(&mut r, shape(3, 2, 1, false));
    let e = random_ellitope(&mut r, model.n_zeta(), 2);
    let a = sample_scenario(&model, &e, UncertaintySampling::Boundary, 42, 17);
    let b = sample_scenario(&model, &e, UncertaintySampling::Boundary, 42, 17);
    assert_eq!(a, b);
}

#[test]
fn dimension_mismatch_is_reported() {
    let dims = Dims {
        horizon: 1,
        nx: 1,
        nu: 1,
        nd: 1,
        ne: 0,
        ny: 1,
        modes: 1,
    };
    let chain = MarkovChain::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let model = MjlsModel::new(dims, chain, DMatrix::zeros(1, 1), vec![vec![ModeMatrices::zeros(&dims)]], None).unwrap();
    let policy = Policy::zeros(PolicyLayout::new(1, 0, 1, 1, 1).unwrap(), Basis::Purified);
    let sc = Scenario {
        path: vec![0],
        zeta: DVector::zeros(3),
        eps: DVector::zeros(1),
    };
    assert!(rollout(&model, &policy, &sc).is_err());
}
