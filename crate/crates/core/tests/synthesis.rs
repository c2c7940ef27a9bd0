use mjls_pob::linalg::min_eigenvalue;
use mjls_pob::model::{Dims, Ellitope, MarkovChain, MjlsModel, ModeMatrices};
use mjls_pob::oracle::max_quadratic_over_ellitope;
use mjls_pob::random::{random_ellitope, random_model, random_psd, rng, uniform_matrix, ModelShape};
use mjls_pob::simulator::{exact_avg_quad, sample_uncertainty, scenario_rng, UncertaintySampling};
use mjls_pob::synthesis::{
    critical_level, dual_certificate, s_lemma_bound, synthesize, tightness_factor, AvgQuadSpec, ClarabelSolver,
    ConicProgram, ConicSolver, CovSpec, MeanQuadSpec, Objective, PsdBlock, SolverSettings, SolverStatus, SpecSet,
    SynthesisOptions,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// x1 = u0 + d0, y0 = d0, x0 = 0 known, |d0| ≤ 1.
fn scalar_toy() -> MjlsModel {
    let dims = Dims {
        horizon: 1,
        nx: 1,
        nu: 1,
        nd: 1,
        ne: 0,
        ny: 1,
        modes: 1,
    };
    let mut mm = ModeMatrices::zeros(&dims);
    mm.a[(0, 0)] = 1.0;
    mm.b[(0, 0)] = 1.0;
    mm.bd[(0, 0)] = 1.0;
    mm.dd[(0, 0)] = 1.0;
    let chain = MarkovChain::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
    MjlsModel::new(dims, chain, DMatrix::zeros(1, 1), vec![vec![mm]], Some(DVector::zeros(1))).unwrap()
}

fn unit_interval() -> Ellitope {
    Ellitope::new(vec![DMatrix::identity(1, 1)]).unwrap()
}

fn toy_specs(gamma: Option<f64>) -> SpecSet {
    SpecSet {
        avg_quad: vec![AvgQuadSpec {
            label: "energy".into(),
            a: DMatrix::identity(2, 2),
            beta: DVector::zeros(2),
            gamma,
        }],
        mean_quad: vec![],
        cov: vec![],
        ellitope: unit_interval(),
        objective: gamma.is_none().then(|| Objective {
            gamma_weights: vec![1.0],
            chi_weights: None,
        }),
    }
}

// max_d (h + (H+1)d)² + (h + H d)² is minimized at h = 0, H = -1/2 with value 1/2.
#[test]
fn scalar_toy_optimum_is_exact() {
    let model = scalar_toy();
    let (out, policy) = synthesize(&model, &toy_specs(None), &SynthesisOptions::with_memory(0), &ClarabelSolver).unwrap();
    assert_eq!(out.status, SolverStatus::Feasible);
    assert!((out.gammas[0].1 - 0.5).abs() < 1e-6, "{}", out.gammas[0].1);
    assert!(policy.as_vec()[0].abs() < 1e-4);
    assert!((policy.as_vec()[1] + 0.5).abs() < 1e-4);
}

#[test]
fn scalar_toy_threshold() {
    let model = scalar_toy();
    let opts = SynthesisOptions::with_memory(0);
    let (above, _) = synthesize(&model, &toy_specs(Some(0.5 + 1e-3)), &opts, &ClarabelSolver).unwrap();
    assert_eq!(above.status, SolverStatus::Feasible);
    let (below, _) = synthesize(&model, &toy_specs(Some(0.5 - 1e-3)), &opts, &ClarabelSolver).unwrap();
    assert_eq!(below.status, SolverStatus::Infeasible);
    // one quadratic: the critical level is γ itself
    assert_eq!(below.critical[0].gamma_minus, 0.5 - 1e-3);
}

#[test]
fn negative_level_on_psd_quadratic_is_infeasible() {
    let mut r = rng(11);
    let model = random_model(
        &mut r,
        ModelShape {
            dims: Dims {
                horizon: 2,
                nx: 2,
                nu: 1,
                nd: 1,
                ne: 1,
                ny: 1,
                modes: 2,
            },
            known_x0: false,
            with_sigma0: true,
        },
    );
    let nw = model.dims().n_w();
    let ellitope = random_ellitope(&mut r, model.n_zeta(), 2);
    let specs = SpecSet {
        avg_quad: vec![AvgQuadSpec {
            label: "neg".into(),
            a: DMatrix::identity(nw, nw),
            beta: DVector::zeros(nw),
            gamma: Some(-1e6),
        }],
        mean_quad: vec![],
        cov: vec![],
        ellitope,
        objective: None,
    };
    let (out, _) = synthesize(&model, &specs, &SynthesisOptions::with_memory(1), &ClarabelSolver).unwrap();
    assert_eq!(out.status, SolverStatus::Infeasible);
    let c = &out.critical[0];
    assert_eq!(c.gamma_minus, critical_level(c.gamma, c.psi, 2, None));
    // γ < Ψ here, so the certified level sits strictly between them
    assert!(c.gamma < c.gamma_minus && c.gamma_minus < c.psi);
}

#[test]
fn slack_levels_are_feasible() {
    let mut r = rng(12);
    let model = random_model(
        &mut r,
        ModelShape {
            dims: Dims {
                horizon: 3,
                nx: 2,
                nu: 1,
                nd: 1,
                ne: 1,
                ny: 1,
                modes: 2,
            },
            known_x0: false,
            with_sigma0: false,
        },
    );
    let nw = model.dims().n_w();
    let specs = SpecSet {
        avg_quad: vec![AvgQuadSpec {
            label: "slack".into(),
            a: DMatrix::identity(nw, nw),
            beta: DVector::zeros(nw),
            gamma: Some(1e6),
        }],
        mean_quad: vec![MeanQuadSpec {
            label: "mean".into(),
            a: DMatrix::identity(nw, nw),
            beta: DVector::zeros(nw),
            gamma: Some(1e6),
        }],
        cov: vec![],
        ellitope: random_ellitope(&mut r, model.n_zeta(), 3),
        objective: None,
    };
    let (out, _) = synthesize(&model, &specs, &SynthesisOptions::with_memory(1), &ClarabelSolver).unwrap();
    assert_eq!(out.status, SolverStatus::Feasible);
}

// Minimizing the robust level, then checking it by exact enumeration at boundary samples.
#[test]
fn certified_level_bounds_exact_expectations() {
    for seed in 0..3u64 {
        let mut r = rng(100 + seed);
        let model = random_model(
            &mut r,
            ModelShape {
                dims: Dims {
                    horizon: 3,
                    nx: 2,
                    nu: 1,
                    nd: 1,
                    ne: 1,
                    ny: 1,
                    modes: 2,
                },
                known_x0: seed % 2 == 1,
                with_sigma0: true,
            },
        );
        let nw = model.dims().n_w();
        let a = random_psd(&mut r, nw, 3) + DMatrix::identity(nw, nw) * 0.1;
        let beta = DVector::from_fn(nw, |_, _| r.gen_range(-0.5..0.5));
        let ellitope = random_ellitope(&mut r, model.n_zeta(), 1 + seed as usize);
        let specs = SpecSet {
            avg_quad: vec![AvgQuadSpec {
                label: "q".into(),
                a: a.clone(),
                beta: beta.clone(),
                gamma: None,
            }],
            mean_quad: vec![],
            cov: vec![],
            ellitope: ellitope.clone(),
            objective: Some(Objective {
                gamma_weights: vec![1.0],
                chi_weights: None,
            }),
        };
        let (out, policy) = synthesize(&model, &specs, &SynthesisOptions::with_memory(1), &ClarabelSolver).unwrap();
        assert_eq!(out.status, SolverStatus::Feasible);
        let gamma = out.gammas[0].1;
        for i in 0..200 {
            let mode = if i % 4 == 3 {
                UncertaintySampling::Interior
            } else {
                UncertaintySampling::Boundary
            };
            let zeta = sample_uncertainty(&ellitope, mode, &mut scenario_rng(seed, i));
            let v = exact_avg_quad(&model, &policy, &a, &beta, &zeta).unwrap();
            assert!(v <= gamma + 1e-6, "seed {seed} sample {i}: {v} > {gamma}");
        }
    }
}

#[test]
fn s_lemma_sandwich() {
    let mut r = rng(5);
    let settings = SolverSettings::default();
    for inst in 0..30 {
        let n = 1 + inst % 4;
        let s = 1 + inst % 3;
        let ellitope = random_ellitope(&mut r, n, s);
        let a = uniform_matrix(&mut r, n, n, 1.0);
        let a = (&a + a.transpose()) * 0.5;
        let b = DVector::from_fn(n, |_, _| r.gen_range(-1.0..=1.0));
        let (sdp, res) = s_lemma_bound(&a, &b, &ellitope, &ClarabelSolver, &settings).unwrap();
        assert_eq!(res.status, SolverStatus::Feasible);
        let (opt, zeta) = max_quadratic_over_ellitope(&a, &b, &ellitope, 64, 2000, &mut r);
        assert!(ellitope.level(&zeta) <= 1.0 + 1e-10);
        assert!(opt <= sdp + 1e-6, "instance {inst}: {opt} > {sdp}");
        assert!(sdp <= tightness_factor(s) * opt + 1e-6, "instance {inst}");
        if s == 1 {
            assert!((sdp - opt).abs() <= 1e-4 * (1.0 + opt.abs()), "instance {inst}: {sdp} vs {opt}");
        }
    }
}

#[test]
fn random_sdp_duality_gap() {
    let mut r = rng(8);
    for _ in 0..5 {
        // min ⟨c, x⟩ s.t. Σ x_i G_i + I ⪰ 0 and x bounded through a box block
        let n = 3;
        let k = 4;
        let mut prog = ConicProgram::new();
        let x = prog.add_vars(k, "x");
        let mut blk = PsdBlock::new(n, "lmi");
        blk.add_const_matrix(0, &DMatrix::identity(n, n));
        for i in 0..k {
            let g = uniform_matrix(&mut r, n, n, 1.0);
            blk.add_var_matrix(0, &(&g + g.transpose()), x + i, 1.0);
            prog.set_objective(x + i, r.gen_range(-1.0..1.0));
            let mut bx = PsdBlock::new(2, "box");
            bx.add_const(0, 0, 1.0);
            bx.add_const(1, 1, 1.0);
            bx.add_var(0, 1, x + i, 1.0);
            prog.add_psd(bx);
        }
        prog.add_psd(blk);
        let res = ClarabelSolver.solve(&prog, &SolverSettings::default()).unwrap();
        assert_eq!(res.status, SolverStatus::Feasible);
        let (dual, stationarity, psd_min, _) = dual_certificate(&prog, &res.z);
        assert!(stationarity < 1e-6);
        assert!(psd_min > -1e-7);
        assert!((res.objective - dual).abs() < 1e-6, "{} vs {}", res.objective, dual);
    }
}

#[test]
fn covariance_bound_single_mode() {
    let mut r = rng(21);
    let model = random_model(
        &mut r,
        ModelShape {
            dims: Dims {
                horizon: 3,
                nx: 2,
                nu: 1,
                nd: 1,
                ne: 1,
                ny: 1,
                modes: 1,
            },
            known_x0: false,
            with_sigma0: true,
        },
    );
    let nw = model.dims().n_w();
    let q = DMatrix::identity(nw, nw);
    let sigma_tilde = DMatrix::identity(nw, nw) * 2.0;
    let specs = SpecSet {
        avg_quad: vec![AvgQuadSpec {
            label: "energy".into(),
            a: DMatrix::identity(nw, nw),
            beta: DVector::zeros(nw),
            gamma: Some(1e4),
        }],
        mean_quad: vec![],
        cov: vec![CovSpec {
            label: "cov".into(),
            q: q.clone(),
            sigma_tilde: sigma_tilde.clone(),
        }],
        ellitope: random_ellitope(&mut r, model.n_zeta(), 1),
        objective: None,
    };
    let (out, policy) = synthesize(&model, &specs, &SynthesisOptions::with_memory(0), &ClarabelSolver).unwrap();
    assert_eq!(out.status, SolverStatus::Feasible);
    let (_, cov) =
        mjls_pob::simulator::closed_form_moments(&model, &policy, &DVector::zeros(model.n_zeta())).unwrap();
    assert!(min_eigenvalue(&(sigma_tilde - &q * cov * q.transpose())) >= -1e-7);
}

#[test]
fn covariance_bound_rejects_switching_models() {
    let mut r = rng(22);
    let model = random_model(
        &mut r,
        ModelShape {
            dims: Dims {
                horizon: 2,
                nx: 1,
                nu: 1,
                nd: 1,
                ne: 1,
                ny: 1,
                modes: 2,
            },
            known_x0: false,
            with_sigma0: false,
        },
    );
    let nw = model.dims().n_w();
    let specs = SpecSet {
        avg_quad: vec![],
        mean_quad: vec![],
        cov: vec![CovSpec {
            label: "cov".into(),
            q: DMatrix::identity(nw, nw),
            sigma_tilde: DMatrix::identity(nw, nw),
        }],
        ellitope: random_ellitope(&mut r, model.n_zeta(), 1),
        objective: None,
    };
    assert!(synthesize(&model, &specs, &SynthesisOptions::with_memory(0), &ClarabelSolver).is_err());
}

#[test]
fn emitted_blocks_are_symmetric() {
    let mut r = rng(31);
    let mut blk = PsdBlock::new(4, "b");
    for _ in 0..30 {
        let i = r.gen_range(0..4);
        let j = r.gen_range(0..4);
        blk.add_var(i, j, r.gen_range(0..3), r.gen_range(-1.0..1.0));
        blk.add_const(i, j, r.gen_range(-1.0..1.0));
    }
    let x = DVector::from_fn(3, |_, _| r.gen_range(-1.0..1.0));
    let m = blk.eval(&x);
    assert!((&m - m.transpose()).amax() <= 1e-12);
}
