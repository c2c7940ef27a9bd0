//! Randomized self-checks: recursions against path enumeration, assembled maps
//! against enumerated ones, the S-lemma bound against brute-force maximization,
//! purified-output invariance, POB/OB conversion and policy dimensions.
//!
//! Every suite reports its largest observed error next to the tolerance it is
//! held to. `fault` flips the sign of one recursion step so the harness can be
//! shown to catch a broken recursion.

use std::collections::HashSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::equivalence::{control_gap, ob_to_pob, pob_to_ob};
use crate::expectation::{
    assemble_m, assemble_m_enumerated, assemble_v, assemble_v_enumerated, brute_force_linear, brute_force_quadratic,
    expected_product_linear_impl, expected_product_quadratic_impl, AssemblyOptions, Channel, SpecQuadratic,
};
use crate::linalg::{frobenius_rel_err, min_eigenvalue};
use crate::model::{dim_of_policy, enumerate_paths, history_window, Basis, Dims, PolicyLayout, MAX_PATHS};
use crate::oracle::max_quadratic_over_ellitope;
use crate::random::{
    random_chain, random_ellitope, random_factor_sequence, random_model, random_policy, random_psd, rng,
    uniform_matrix, ModelShape,
};
use crate::simulator::{rollout, rollout_with, sample_scenario, UncertaintySampling};
use crate::synthesis::{s_lemma_bound, tightness_factor, ClarabelSolver, SolverSettings, SolverStatus};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sizes {
    Small,
    Medium,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub sizes: Sizes,
    /// Time index whose recursion step is sign-flipped.
    pub fault: Option<usize>,
}

impl VerifyOptions {
    pub fn new(seed: u64, sizes: Sizes) -> Self {
        VerifyOptions {
            seed,
            sizes,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub sizes: Sizes,
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
    pub seconds: f64,
}

struct Counts {
    recursion: usize,
    assembly: usize,
    sandwich: usize,
    invariance: (usize, usize),
    equivalence: (usize, usize),
    convexity: usize,
}

fn counts(sizes: Sizes) -> Counts {
    match sizes {
        Sizes::Small => Counts {
            recursion: 60,
            assembly: 6,
            sandwich: 12,
            invariance: (20, 5),
            equivalence: (6, 10),
            convexity: 30,
        },
        Sizes::Medium => Counts {
            recursion: 200,
            assembly: 16,
            sandwich: 50,
            invariance: (100, 5),
            equivalence: (20, 50),
            convexity: 100,
        },
    }
}

fn timed(name: &str, tolerance: f64, f: impl FnOnce() -> Result<(usize, f64)>) -> Result<SuiteResult> {
    let start = Instant::now();
    let (cases, max_error) = f()?;
    Ok(SuiteResult {
        name: name.into(),
        cases,
        max_error,
        tolerance,
        // NaN fails
        passed: max_error <= tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let start = Instant::now();
    let c = counts(opts.sizes);
    let seed = opts.seed;
    let suites = vec![
        timed("linear_recursion", 1e-10, || linear_recursion(seed, c.recursion, opts.fault))?,
        timed("quadratic_recursion", 1e-10, || quadratic_recursion(seed, c.recursion, opts.fault))?,
        timed("assembly_m", 1e-10, || assembly_m(seed, c.assembly))?,
        timed("assembly_v", 1e-10, || assembly_v(seed, c.assembly))?,
        timed("s_lemma_sandwich", 1e-6, || sandwich(seed, c.sandwich, false))?,
        timed("s_lemma_single_ellipsoid", 1e-4, || sandwich(seed, c.sandwich, true))?,
        timed("purified_invariance", 1e-10, || invariance(seed, c.invariance))?,
        timed("pob_ob_equivalence", 1e-8, || equivalence(seed, c.equivalence))?,
        timed("policy_dimension", 0.0, policy_dimension)?,
        timed("v_convexity", 1e-9, || convexity(seed, c.convexity))?,
    ];
    let passed = suites.iter().all(|s| s.passed);
    Ok(VerifyReport {
        seed,
        sizes: opts.sizes,
        suites,
        passed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn history_shape(r: &mut impl Rng, case: usize, n: usize) -> Option<(usize, usize)> {
    (!case.is_multiple_of(3)).then(|| (r.gen_range(0..n), r.gen_range(0..n)))
}

fn linear_recursion(seed: u64, cases: usize, fault: Option<usize>) -> Result<(usize, f64)> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let m = r.gen_range(1..=3);
        let n = r.gen_range(1..=6);
        let chain = random_chain(&mut r, m);
        let hist = history_shape(&mut r, case, n);
        let seq = random_factor_sequence(&mut r, m, n, 3, hist);
        let fast = expected_product_linear_impl(&chain, &seq, fault)?;
        let slow = brute_force_linear(&chain, &seq, MAX_PATHS)?;
        worst = worst.max(frobenius_rel_err(&fast, &slow));
    }
    Ok((cases, worst))
}

fn quadratic_recursion(seed: u64, cases: usize, fault: Option<usize>) -> Result<(usize, f64)> {
    let mut r = rng(seed.wrapping_add(1));
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let m = r.gen_range(1..=3);
        let n = r.gen_range(1..=6);
        let chain = random_chain(&mut r, m);
        let hist = history_shape(&mut r, case, n);
        let left = random_factor_sequence(&mut r, m, n, 3, hist);
        let right_hist = if case % 2 == 0 { hist } else { None };
        let right = random_factor_sequence(&mut r, m, n, 3, right_hist);
        let s = uniform_matrix(&mut r, left.output_dim(), right.output_dim(), 1.0);
        let fast = expected_product_quadratic_impl(&chain, &left, &s, &right, fault)?;
        let slow = brute_force_quadratic(&chain, &left, &s, &right, MAX_PATHS)?;
        worst = worst.max(frobenius_rel_err(&fast, &slow));
    }
    Ok((cases, worst))
}

fn small_shape(r: &mut impl Rng, case: usize) -> (ModelShape, usize) {
    let n = r.gen_range(1..=3);
    let dims = Dims {
        horizon: n,
        nx: r.gen_range(1..=2),
        nu: r.gen_range(1..=2),
        nd: r.gen_range(1..=2),
        ne: r.gen_range(0..=1),
        ny: r.gen_range(1..=2),
        modes: r.gen_range(1..=2),
    };
    let memory = r.gen_range(0..n);
    let shape = ModelShape {
        dims,
        known_x0: case.is_multiple_of(2),
        with_sigma0: case.is_multiple_of(3),
    };
    (shape, memory)
}

fn scaled_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / (1.0 + b.amax())
}

fn assembly_m(seed: u64, cases: usize) -> Result<(usize, f64)> {
    let mut r = rng(seed.wrapping_add(2));
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (sh, memory) = small_shape(&mut r, case);
        let model = random_model(&mut r, sh);
        let d = sh.dims;
        let layout = PolicyLayout::new(d.horizon, memory, d.modes, d.nu, d.ny)?;
        let fast = assemble_m(&model, &layout, Channel::Zeta)?;
        let slow = assemble_m_enumerated(&model, &layout, MAX_PATHS)?;
        worst = worst.max(scaled_gap(&fast.m0, &slow.m0));
        for (a, b) in fast.mk.iter().zip(&slow.mk) {
            worst = worst.max(scaled_gap(a, b));
        }
    }
    Ok((cases, worst))
}

fn assembly_v(seed: u64, cases: usize) -> Result<(usize, f64)> {
    let mut r = rng(seed.wrapping_add(3));
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (sh, memory) = small_shape(&mut r, case);
        let model = random_model(&mut r, sh);
        let d = sh.dims;
        let layout = PolicyLayout::new(d.horizon, memory, d.modes, d.nu, d.ny)?;
        let spec = SpecQuadratic {
            a: random_psd(&mut r, d.n_w(), 2),
        };
        let fast = assemble_v(&model, &layout, &spec, &AssemblyOptions::default())?;
        let (v0, lk, gram) = assemble_v_enumerated(&model, &layout, &spec, true, MAX_PATHS)?;
        worst = worst.max(scaled_gap(&fast.v0, &v0));
        for (a, b) in fast.lk.iter().zip(&lk) {
            worst = worst.max(scaled_gap(a, b));
        }
        // the quadratic part through a random χ
        let chi = random_policy(&mut r, layout.clone(), Basis::Purified, 1.0).as_vec().clone();
        let exact = fast.eval(&chi);
        let mut direct = fast.affine_part(&chi);
        let n_c = fast.n_c;
        let mut y = DMatrix::zeros(gram.nrows(), n_c);
        for k in 0..chi.len() {
            for c in 0..n_c {
                y[(k * n_c + c, c)] = chi[k];
            }
        }
        direct += y.tr_mul(&(&gram * &y));
        worst = worst.max(scaled_gap(&exact, &direct));
    }
    Ok((cases, worst))
}

/// With `single` the error is the relative gap on s = 1 instances; otherwise the
/// largest violation of Opt_bf ≤ SDP ≤ Θ(s)·Opt_bf.
fn sandwich(seed: u64, cases: usize, single: bool) -> Result<(usize, f64)> {
    let mut r = rng(seed.wrapping_add(4));
    let settings = SolverSettings::default();
    let mut worst: f64 = 0.0;
    let mut seen = 0;
    for inst in 0..cases {
        let n = 1 + inst % 4;
        let s = if single { 1 } else { 1 + inst % 3 };
        let ellitope = random_ellitope(&mut r, n, s);
        let a = uniform_matrix(&mut r, n, n, 1.0);
        let a = (&a + a.transpose()) * 0.5;
        let b = DVector::from_fn(n, |_, _| r.gen_range(-1.0..=1.0));
        let (sdp, res) = s_lemma_bound(&a, &b, &ellitope, &ClarabelSolver, &settings)?;
        if res.status != SolverStatus::Feasible {
            return Ok((inst + 1, f64::INFINITY));
        }
        let (opt, _) = max_quadratic_over_ellitope(&a, &b, &ellitope, 64, 2000, &mut r);
        let err = if single {
            (sdp - opt).abs() / (1.0 + opt.abs())
        } else {
            (opt - sdp).max(sdp - tightness_factor(s) * opt).max(0.0)
        };
        worst = worst.max(err);
        seen += 1;
    }
    Ok((seen, worst))
}

fn invariance(seed: u64, (scenarios, policies): (usize, usize)) -> Result<(usize, f64)> {
    let mut r = rng(seed.wrapping_add(5));
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let groups = scenarios.div_ceil(10);
    for g in 0..groups {
        let horizon = r.gen_range(1..=4);
        let dims = Dims {
            horizon,
            nx: 2,
            nu: 2,
            nd: 2,
            ne: 1,
            ny: 2,
            modes: r.gen_range(1..=3),
        };
        let model = random_model(
            &mut r,
            ModelShape {
                dims,
                known_x0: g % 2 == 0,
                with_sigma0: true,
            },
        );
        let ellitope = random_ellitope(&mut r, model.n_zeta(), 2);
        let layout = PolicyLayout::new(horizon, r.gen_range(0..horizon), dims.modes, 2, 2)?;
        let pols: Vec<_> = (0..policies)
            .map(|i| {
                let basis = if i % 2 == 0 { Basis::Purified } else { Basis::Outputs };
                random_policy(&mut r, layout.clone(), basis, 1.0)
            })
            .collect();
        for i in 0..10.min(scenarios - g * 10) {
            let sc = sample_scenario(&model, &ellitope, UncertaintySampling::Interior, seed, (g * 10 + i) as u64);
            let reference = rollout_with(&model, &sc, |_, _, _, _| DVector::zeros(2))?;
            for p in &pols {
                let ro = rollout(&model, p, &sc)?;
                for (a, b) in ro.v.iter().zip(&reference.v) {
                    worst = worst.max((a - b).amax());
                }
                cases += 1;
            }
        }
    }
    Ok((cases, worst))
}

fn equivalence(seed: u64, (models, scenarios): (usize, usize)) -> Result<(usize, f64)> {
    let mut r = rng(seed.wrapping_add(6));
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for i in 0..models {
        let horizon = 1 + i % 4;
        let dims = Dims {
            horizon,
            nx: 2,
            nu: 2,
            nd: 1,
            ne: 1,
            ny: 2,
            modes: 2,
        };
        let model = random_model(
            &mut r,
            ModelShape {
                dims,
                known_x0: i % 2 == 0,
                with_sigma0: true,
            },
        );
        let layout = PolicyLayout::new(horizon, horizon - 1, 2, 2, 2)?;
        let ob = random_policy(&mut r, layout.clone(), Basis::Outputs, 0.7);
        let pob = random_policy(&mut r, layout, Basis::Purified, 0.7);
        let ob_as_pob = ob_to_pob(&model, &ob)?;
        let pob_as_ob = pob_to_ob(&model, &pob)?;
        let pob_round = ob_to_pob(&model, &pob_as_ob)?;
        let ob_round = pob_to_ob(&model, &ob_as_pob)?;
        let ellitope = random_ellitope(&mut r, model.n_zeta(), 2);
        for k in 0..scenarios {
            let sc = sample_scenario(&model, &ellitope, UncertaintySampling::Boundary, seed, (i * scenarios + k) as u64);
            worst = worst
                .max(control_gap(&model, &ob, &ob_as_pob, &sc)?)
                .max(control_gap(&model, &pob, &pob_as_ob, &sc)?)
                .max(control_gap(&model, &pob, &pob_round, &sc)?)
                .max(control_gap(&model, &ob, &ob_round, &sc)?);
            cases += 1;
        }
    }
    Ok((cases, worst))
}

/// Slot count from distinct history windows seen on actual mode paths.
pub fn enumerated_slot_count(horizon: usize, memory: usize, modes: usize, nu: usize, ny: usize) -> Result<usize> {
    let paths = enumerate_paths(modes, horizon, MAX_PATHS)?;
    let mut total = 0;
    for t in 0..horizon {
        let windows: HashSet<&[usize]> = paths.iter().map(|p| history_window(p, t, memory)).collect();
        // one offset of size nu, plus one nu×ny gain per j ≤ t
        for _ in windows {
            total += nu;
            for _ in 0..=t {
                total += nu * ny;
            }
        }
    }
    Ok(total)
}

/// Number of (N ≤ 6, T ≤ N−1, m ≤ 3, n_u, n_y ≤ 2) shapes whose closed-form
/// count differs from enumeration or from the layout's slot list.
fn policy_dimension() -> Result<(usize, f64)> {
    let mut cases = 0;
    let mut mismatches = 0;
    for n in 1..=6 {
        for memory in 0..n {
            for m in 1..=3 {
                for nu in 1..=2 {
                    for ny in 1..=2 {
                        let closed = dim_of_policy(n, memory, m, nu, ny)?;
                        let listed = PolicyLayout::new(n, memory, m, nu, ny)?.slots().len();
                        let counted = enumerated_slot_count(n, memory, m, nu, ny)?;
                        if closed != counted || listed != counted {
                            mismatches += 1;
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok((cases, mismatches as f64))
}

/// Largest violation of V(μχ₁ + (1−μ)χ₂) ⪯ μV(χ₁) + (1−μ)V(χ₂), as −min-eig.
fn convexity(seed: u64, cases: usize) -> Result<(usize, f64)> {
    let mut r = rng(seed.wrapping_add(7));
    let mut worst: f64 = 0.0;
    let per_model = 10;
    let mut done = 0;
    let mut case = 0;
    while done < cases {
        let (sh, memory) = small_shape(&mut r, case);
        case += 1;
        let model = random_model(&mut r, sh);
        let d = sh.dims;
        let layout = PolicyLayout::new(d.horizon, memory, d.modes, d.nu, d.ny)?;
        let spec = SpecQuadratic {
            a: random_psd(&mut r, d.n_w(), 3),
        };
        let v = assemble_v(&model, &layout, &spec, &AssemblyOptions::default())?;
        for _ in 0..per_model.min(cases - done) {
            let c1 = random_policy(&mut r, layout.clone(), Basis::Purified, 2.0).as_vec().clone();
            let c2 = random_policy(&mut r, layout.clone(), Basis::Purified, 2.0).as_vec().clone();
            let mu: f64 = r.gen();
            let mid = &c1 * mu + &c2 * (1.0 - mu);
            let gap = v.eval(&c1) * mu + v.eval(&c2) * (1.0 - mu) - v.eval(&mid);
            worst = worst.max(-min_eigenvalue(&gap));
            done += 1;
        }
    }
    Ok((done, worst))
}
