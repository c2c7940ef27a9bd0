use mjls_pob::portfolio::{
    build_portfolio_model, naive_rebalance_income, portfolio_specs, spec_constant, PortfolioParams,
};
use mjls_pob::simulator::{exact_avg_quad, sample_uncertainty, scenario_rng, UncertaintySampling};
use mjls_pob::synthesis::{synthesize, ClarabelSolver, SolverStatus, SynthesisOptions};
use nalgebra::DMatrix;

#[test]
fn naive_income_reference() {
    let u = naive_rebalance_income(&PortfolioParams::default()).unwrap();
    assert!((u + 17.675).abs() < 1e-3, "{u}");
}

#[test]
fn naive_income_trivial_cases() {
    let p = PortfolioParams {
        r_bar: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        ..Default::default()
    };
    assert_eq!(naive_rebalance_income(&p).unwrap(), 0.0);
    let p = PortfolioParams {
        r_bar: vec![vec![0.02, 0.04]],
        pi: vec![1.0],
        p: vec![vec![1.0]],
        ..Default::default()
    };
    let expected = 3.0 * (-0.02 / 1.02 * 100.0 - 0.04 / 1.04 * 100.0);
    assert!((naive_rebalance_income(&p).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn model_structure() {
    let (model, ellitope) = build_portfolio_model(&PortfolioParams::default()).unwrap();
    assert_eq!(ellitope.count(), 6);
    assert_eq!(model.n_zeta(), 6);
    let a_b = &model.mats(0, 0).a;
    assert_eq!(*a_b, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.02, 1.01])));
}

#[test]
fn synthesized_policy_meets_the_levels() {
    let params = PortfolioParams::default();
    let (model, ellitope) = build_portfolio_model(&params).unwrap();
    let specs = portfolio_specs(&params, ellitope.clone()).unwrap();
    let (out, policy) = synthesize(&model, &specs, &SynthesisOptions::with_memory(2), &ClarabelSolver).unwrap();
    assert_eq!(out.status, SolverStatus::Feasible, "{}", out.solver.raw_status);
    let levels = [params.rho, params.mu[0], params.mu[1], params.mu[2]];
    for i in 0..20 {
        let zeta = sample_uncertainty(&ellitope, UncertaintySampling::Boundary, &mut scenario_rng(4, i));
        for (spec, level) in specs.avg_quad.iter().zip(levels) {
            let v = exact_avg_quad(&model, &policy, &spec.a, &spec.beta, &zeta).unwrap()
                + spec_constant(&params, &spec.label).unwrap();
            eprintln!("{} {v} {level}", spec.label);
            assert!(v <= level + 1e-6, "{}: {v} > {level}", spec.label);
        }
    }
}

#[test]
fn example_run_groups_paths() {
    let params = PortfolioParams::default();
    let (model, ellitope) = build_portfolio_model(&params).unwrap();
    let specs = portfolio_specs(&params, ellitope).unwrap();
    let (_, policy) = synthesize(&model, &specs, &SynthesisOptions::with_memory(2), &ClarabelSolver).unwrap();
    let run = mjls_pob::portfolio::evaluate_policy(&params, &model, &specs, &policy, 20, 100, 1).unwrap();
    eprintln!("{}", serde_json::to_string_pretty(&run).unwrap());
    assert_eq!(run.scenarios.len(), 8);
    assert!(run.exact_checks.iter().all(|c| c.satisfied));
    let total: f64 = run.scenarios.iter().map(|s| s.probability).sum();
    assert!((total - 1.0).abs() < 1e-12);
}
