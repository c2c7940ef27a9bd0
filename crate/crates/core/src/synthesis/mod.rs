//! Semidefinite synthesis of POB policies from quadratic specifications.
//!
//! Each averaged (or mean) quadratic specification
//! `E[⟨A w, w⟩ + 2⟨β, w⟩] ≤ γ for all ζ in the ellitope` becomes, through the
//! S-lemma, two LMIs in (χ, λ, X): the certificate block F[ξ] ⪰ 0 and the
//! epigraph X ⪰ V(χ) written as a Schur complement with the Gram factor of V.
//! Covariance bounds (single-mode models) become one Schur block each. All
//! specifications share χ and are solved jointly.

pub mod conic;

use nalgebra::{DMatrix, DVector};

pub use conic::{
    dual_certificate, ClarabelSolver, ConicProgram, ConicSolver, PsdBlock, SolverResult, SolverSettings, SolverStatus,
};

use crate::error::{check_shape, dim_err, Error, Result};
use crate::expectation::{
    assemble_m, assemble_v, AffineMapM, AssemblyOptions, Channel, QuadraticFormV, SpecQuadratic,
};
use crate::linalg::{min_eigenvalue, psd_sqrt, symmetrize};
use crate::model::{Basis, Ellitope, MjlsModel, Policy, PolicyLayout};

/// Approximation factor of the S-lemma relaxation for an ellitope of `s` quadratics.
pub fn tightness_factor(s: usize) -> f64 {
    assert!(s >= 1, "ellitope needs at least one quadratic");
    if s == 1 {
        1.0
    } else {
        let l = ((s + 1) as f64).ln();
        2.0 * l + 2.0 * l.sqrt() + 1.0
    }
}

/// Default slack used by [`critical_level`].
pub fn default_critical_eps(gamma: f64) -> f64 {
    1e-9 * (1.0 + gamma.abs())
}

/// Largest level γ⁻ certified infeasible when the relaxation at γ fails.
/// `psi` is the objective value at ζ = 0.
pub fn critical_level(gamma: f64, psi: f64, s: usize, eps: Option<f64>) -> f64 {
    if s == 1 {
        return gamma;
    }
    let eps = eps.unwrap_or_else(|| default_critical_eps(gamma));
    (gamma - psi) / tightness_factor(s) + psi - eps
}

/// Relaxation value of max { ζᵀAζ + 2⟨b, ζ⟩ : ζ in the ellitope }:
/// min ω s.t. [[ω − Σλ_i, −bᵀ], [−b, Σλ_i Q_i − A]] ⪰ 0, λ ≥ 0.
pub fn s_lemma_bound(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    ellitope: &Ellitope,
    solver: &dyn ConicSolver,
    settings: &SolverSettings,
) -> Result<(f64, SolverResult)> {
    let n = ellitope.dim();
    check_shape("quadratic", a, n, n)?;
    if b.len() != n {
        return Err(dim_err("linear term", n, b.len()));
    }
    let s = ellitope.count();
    let mut prog = ConicProgram::new();
    let omega = prog.add_vars(1, "omega");
    let lambda = prog.add_vars(s, "lambda");
    prog.set_objective(omega, 1.0);
    let mut blk = PsdBlock::new(n + 1, "s-lemma");
    blk.add_var(0, 0, omega, 1.0);
    for i in 0..s {
        prog.add_nonneg(lambda + i);
        blk.add_var(0, 0, lambda + i, -1.0);
        blk.add_var_matrix(1, &ellitope.qs()[i], lambda + i, 1.0);
    }
    for j in 0..n {
        blk.add_const(0, 1 + j, -b[j]);
    }
    blk.add_const_matrix(1, &(-symmetrize(a)));
    prog.add_psd(blk);
    let res = solver.solve(&prog, settings)?;
    Ok((res.objective, res))
}

/// `E[⟨A w, w⟩ + 2⟨β, w⟩] ≤ γ` over all mode paths and disturbances.
/// `gamma = None` makes γ a decision variable (for objectives).
#[derive(Debug, Clone, PartialEq)]
pub struct AvgQuadSpec {
    pub label: String,
    pub a: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub gamma: Option<f64>,
}

/// `⟨Â E[w], E[w]⟩ + 2⟨β̂, E[w]⟩ ≤ γ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanQuadSpec {
    pub label: String,
    pub a: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub gamma: Option<f64>,
}

/// `Q Σ_w Qᵀ ⪯ Σ̃` for single-mode models.
#[derive(Debug, Clone, PartialEq)]
pub struct CovSpec {
    pub label: String,
    pub q: DMatrix<f64>,
    pub sigma_tilde: DMatrix<f64>,
}

/// Linear objective: weights on the variable γ's (averaged specs first, then mean specs) and on χ.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Objective {
    pub gamma_weights: Vec<f64>,
    pub chi_weights: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecSet {
    pub avg_quad: Vec<AvgQuadSpec>,
    pub mean_quad: Vec<MeanQuadSpec>,
    pub cov: Vec<CovSpec>,
    pub ellitope: Ellitope,
    pub objective: Option<Objective>,
}

/// Pre-assembled quadratic constraint handed to the SDP builder.
#[derive(Debug, Clone)]
pub struct RawQuadConstraint {
    pub label: String,
    pub m: AffineMapM,
    pub second_moment: SecondMoment,
    pub beta: DVector<f64>,
    pub gamma: Option<f64>,
}

/// How X ⪰ V(χ) is expressed.
#[derive(Debug, Clone)]
pub enum SecondMoment {
    /// V(χ) = V0 + Σ χ_k L_k + Z(χ)ᵀZ(χ).
    Averaged(QuadraticFormV),
    /// V(χ) = M(χ)ᵀ RᵀR M(χ), with `R` a square root of Â (rows with zero norm dropped).
    Mean(DMatrix<f64>),
}

impl RawQuadConstraint {
    pub fn v_at(&self, chi: &DVector<f64>) -> DMatrix<f64> {
        match &self.second_moment {
            SecondMoment::Averaged(v) => v.eval(chi),
            SecondMoment::Mean(r) => {
                let rm = r * self.m.eval(chi);
                rm.tr_mul(&rm)
            }
        }
    }

    /// Ψ[χ]: the averaged objective at ζ = 0.
    pub fn psi(&self, chi: &DVector<f64>) -> f64 {
        let v = self.v_at(chi);
        let m = self.m.eval(chi);
        v[(0, 0)] + 2.0 * self.beta.dot(&m.column(0))
    }

    /// max over the ellitope is not computed here; this is the quadratic in ζ_e.
    pub fn value_at(&self, chi: &DVector<f64>, zeta: &DVector<f64>) -> f64 {
        let mut ze = DVector::zeros(zeta.len() + 1);
        ze[0] = 1.0;
        ze.rows_mut(1, zeta.len()).copy_from(zeta);
        let v = self.v_at(chi);
        let m = self.m.eval(chi);
        ze.dot(&(&v * &ze)) + 2.0 * self.beta.dot(&(&m * &ze))
    }
}

/// Covariance constraint pre-assembled: Σ_w(χ) = Bs(χ) Σ_ε Bs(χ)ᵀ.
#[derive(Debug, Clone)]
pub struct RawCovConstraint {
    pub label: String,
    pub q: DMatrix<f64>,
    pub sigma_tilde: DMatrix<f64>,
    pub bs: AffineMapM,
    pub sigma_eps_root: DMatrix<f64>,
}

impl RawCovConstraint {
    pub fn sigma_w(&self, chi: &DVector<f64>) -> DMatrix<f64> {
        let b = self.bs.eval(chi) * &self.sigma_eps_root;
        &b * b.transpose()
    }

    pub fn margin(&self, chi: &DVector<f64>) -> f64 {
        let qs = &self.q * self.sigma_w(chi) * self.q.transpose();
        min_eigenvalue(&(&self.sigma_tilde - qs))
    }
}

/// Variable indices of one robust quadratic certificate.
#[derive(Debug, Clone)]
pub struct CertificateVars {
    pub lambda: usize,
    pub x: usize,
    pub gamma: std::result::Result<f64, usize>,
}

fn svec_pos(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

/// Add λ ≥ 0, X, the certificate block F[ξ] ⪰ 0 and the epigraph block X ⪰ V(χ).
pub fn build_robust_block(
    prog: &mut ConicProgram,
    chi_start: usize,
    c: &RawQuadConstraint,
    ellitope: &Ellitope,
) -> Result<CertificateVars> {
    let n_c = c.m.m0.ncols();
    let n_zeta = n_c - 1;
    if ellitope.dim() != n_zeta {
        return Err(dim_err("ellitope dimension", n_zeta, ellitope.dim()));
    }
    if c.beta.len() != c.m.m0.nrows() {
        return Err(dim_err(&format!("β of {}", c.label), c.m.m0.nrows(), c.beta.len()));
    }
    let s = ellitope.count();
    let lambda = prog.add_vars(s, &format!("{}.lambda", c.label));
    for i in 0..s {
        prog.add_nonneg(lambda + i);
    }
    let x = prog.add_vars(n_c * (n_c + 1) / 2, &format!("{}.X", c.label));
    let gamma = match c.gamma {
        Some(g) => Ok(g),
        None => Err(prog.add_vars(1, &format!("{}.gamma", c.label))),
    };
    let xv = |i: usize, j: usize| x + svec_pos(i, j);

    // certificate block
    let mut f = PsdBlock::new(n_c, format!("{}.certificate", c.label));
    match gamma {
        Ok(g) => f.add_const(0, 0, g),
        Err(v) => f.add_var(0, 0, v, 1.0),
    }
    f.add_var(0, 0, xv(0, 0), -1.0);
    let bm0 = c.m.m0.tr_mul(&c.beta);
    f.add_const(0, 0, -2.0 * bm0[0]);
    for i in 0..s {
        f.add_var(0, 0, lambda + i, -1.0);
    }
    for col in 1..n_c {
        f.add_var(0, col, xv(0, col), -1.0);
        f.add_const(0, col, -bm0[col]);
    }
    for (k, mk) in c.m.mk.iter().enumerate() {
        let bmk = mk.tr_mul(&c.beta);
        f.add_var(0, 0, chi_start + k, -2.0 * bmk[0]);
        for col in 1..n_c {
            f.add_var(0, col, chi_start + k, -bmk[col]);
        }
    }
    for (i, q) in ellitope.qs().iter().enumerate() {
        for cj in 0..n_zeta {
            for ci in 0..=cj {
                f.add_var(1 + ci, 1 + cj, lambda + i, q[(ci, cj)]);
            }
        }
    }
    for cj in 1..n_c {
        for ci in 1..=cj {
            f.add_var(ci, cj, xv(ci, cj), -1.0);
        }
    }
    prog.add_psd(f);

    // epigraph block X ⪰ V(χ)
    match &c.second_moment {
        SecondMoment::Averaged(v) => {
            if v.n_c != n_c {
                return Err(dim_err("V dimension", n_c, v.n_c));
            }
            let r = v.rank();
            let mut e = PsdBlock::new(n_c + r, format!("{}.epigraph", c.label));
            for cj in 0..n_c {
                for ci in 0..=cj {
                    e.add_var(ci, cj, xv(ci, cj), 1.0);
                    e.add_const(ci, cj, -v.v0[(ci, cj)]);
                    for (k, l) in v.lk.iter().enumerate() {
                        e.add_var(ci, cj, chi_start + k, -l[(ci, cj)]);
                    }
                }
            }
            for rho in 0..r {
                e.add_const(n_c + rho, n_c + rho, 1.0);
                for (a, &idx) in v.active.iter().enumerate() {
                    e.add_var(idx % n_c, n_c + rho, chi_start + idx / n_c, v.factor[(rho, a)]);
                }
            }
            prog.add_psd(e);
        }
        SecondMoment::Mean(root) => {
            let r = root.nrows();
            let mut e = PsdBlock::new(n_c + r, format!("{}.epigraph", c.label));
            for cj in 0..n_c {
                for ci in 0..=cj {
                    e.add_var(ci, cj, xv(ci, cj), 1.0);
                }
            }
            let rm0 = root * &c.m.m0;
            let rmk: Vec<DMatrix<f64>> = c.m.mk.iter().map(|mk| root * mk).collect();
            for rho in 0..r {
                e.add_const(n_c + rho, n_c + rho, 1.0);
                for col in 0..n_c {
                    e.add_const(col, n_c + rho, rm0[(rho, col)]);
                    for (k, rk) in rmk.iter().enumerate() {
                        e.add_var(col, n_c + rho, chi_start + k, rk[(rho, col)]);
                    }
                }
            }
            prog.add_psd(e);
        }
    }
    Ok(CertificateVars { lambda, x, gamma })
}

/// Add the Schur block [[Σ̃, Q Bs(χ) Σ_ε^{1/2}], [·ᵀ, I]] ⪰ 0.
pub fn build_cov_block(prog: &mut ConicProgram, chi_start: usize, c: &RawCovConstraint) -> Result<()> {
    let q_rows = c.q.nrows();
    check_shape(&format!("Sigma_tilde of {}", c.label), &c.sigma_tilde, q_rows, q_rows)?;
    let r = c.sigma_eps_root.ncols();
    let mut e = PsdBlock::new(q_rows + r, format!("{}.covariance", c.label));
    e.add_const_matrix(0, &symmetrize(&c.sigma_tilde));
    let base = &c.q * &c.bs.m0 * &c.sigma_eps_root;
    let parts: Vec<DMatrix<f64>> = c.bs.mk.iter().map(|mk| &c.q * mk * &c.sigma_eps_root).collect();
    for rho in 0..r {
        e.add_const(q_rows + rho, q_rows + rho, 1.0);
        for i in 0..q_rows {
            e.add_const(i, q_rows + rho, base[(i, rho)]);
            for (k, p) in parts.iter().enumerate() {
                e.add_var(i, q_rows + rho, chi_start + k, p[(i, rho)]);
            }
        }
    }
    prog.add_psd(e);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub memory: usize,
    pub solver: SolverSettings,
    pub assembly: AssemblyOptions,
    pub critical_eps: Option<f64>,
}

impl SynthesisOptions {
    pub fn with_memory(memory: usize) -> Self {
        SynthesisOptions {
            memory,
            solver: SolverSettings::default(),
            assembly: AssemblyOptions::default(),
            critical_eps: None,
        }
    }
}

/// γ⁻ diagnostics for one quadratic specification.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CriticalLevel {
    pub label: String,
    pub gamma: f64,
    pub psi: f64,
    pub gamma_minus: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChiSource {
    SolverIterate,
    ZeroFallback,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub status: SolverStatus,
    pub chi: DVector<f64>,
    pub chi_source: ChiSource,
    /// γ used or found per quadratic specification (averaged first, then mean).
    pub gammas: Vec<(String, f64)>,
    pub critical: Vec<CriticalLevel>,
    pub solver: SolverResult,
    /// Largest |V_exact(χ) − V_factored(χ)| over averaged specs.
    pub factor_error: f64,
    pub gram_ranks: Vec<usize>,
    pub num_vars: usize,
}

/// Build and solve the joint SDP for pre-assembled constraints with `k` policy parameters.
pub fn solve_constraints(
    k: usize,
    quads: &[RawQuadConstraint],
    covs: &[RawCovConstraint],
    ellitope: &Ellitope,
    objective: Option<&Objective>,
    opts: &SynthesisOptions,
    solver: &dyn ConicSolver,
) -> Result<SynthesisOutcome> {
    let mut prog = ConicProgram::new();
    let chi_start = prog.add_vars(k, "chi");
    let mut certs = Vec::with_capacity(quads.len());
    for q in quads {
        certs.push(build_robust_block(&mut prog, chi_start, q, ellitope)?);
    }
    for c in covs {
        build_cov_block(&mut prog, chi_start, c)?;
    }
    if let Some(obj) = objective {
        for (gi, cert) in certs.iter().enumerate() {
            if let Err(v) = cert.gamma {
                if let Some(&w) = obj.gamma_weights.get(gi) {
                    prog.set_objective(v, w);
                }
            }
        }
        if let Some(cw) = &obj.chi_weights {
            if cw.len() != k {
                return Err(dim_err("objective chi weights", k, cw.len()));
            }
            for (i, &w) in cw.iter().enumerate() {
                prog.set_objective(chi_start + i, w);
            }
        }
    }
    let res = solver.solve(&prog, &opts.solver)?;
    let finite = res.x.iter().all(|v| v.is_finite());
    let (chi, chi_source) = if finite && res.x.len() == prog.num_vars() {
        (res.x.rows(chi_start, k).into_owned(), ChiSource::SolverIterate)
    } else {
        (DVector::zeros(k), ChiSource::ZeroFallback)
    };
    let s = ellitope.count();
    let mut gammas = Vec::new();
    let mut critical = Vec::new();
    let mut factor_error: f64 = 0.0;
    let mut gram_ranks = Vec::new();
    for (q, cert) in quads.iter().zip(&certs) {
        let g = match cert.gamma {
            Ok(g) => g,
            Err(v) => {
                if finite {
                    res.x[v]
                } else {
                    f64::NAN
                }
            }
        };
        gammas.push((q.label.clone(), g));
        let psi = q.psi(&chi);
        critical.push(CriticalLevel {
            label: q.label.clone(),
            gamma: g,
            psi,
            gamma_minus: critical_level(g, psi, s, opts.critical_eps),
        });
        if let SecondMoment::Averaged(v) = &q.second_moment {
            factor_error = factor_error.max((v.eval(&chi) - v.eval_factored(&chi)).amax());
            gram_ranks.push(v.rank());
        }
    }
    Ok(SynthesisOutcome {
        status: res.status,
        chi,
        chi_source,
        gammas,
        critical,
        solver: res,
        factor_error,
        gram_ranks,
        num_vars: prog.num_vars(),
    })
}

fn check_convex_weight(label: &str, a: &DMatrix<f64>) -> Result<()> {
    let scale = 1.0 + a.amax();
    if (a - a.transpose()).amax() > 1e-9 * scale || min_eigenvalue(a) < -1e-9 * scale {
        return Err(Error::Invalid(format!("{label}: weight matrix A must be symmetric PSD")));
    }
    Ok(())
}

/// Assemble M, V (and covariance maps) for every specification.
pub fn assemble_constraints(
    model: &MjlsModel,
    layout: &PolicyLayout,
    specs: &SpecSet,
    opts: &AssemblyOptions,
) -> Result<(Vec<RawQuadConstraint>, Vec<RawCovConstraint>)> {
    let n_w = model.dims().n_w();
    if specs.ellitope.dim() != model.n_zeta() {
        return Err(dim_err("ellitope dimension vs n_zeta", model.n_zeta(), specs.ellitope.dim()));
    }
    let m = assemble_m(model, layout, Channel::Zeta)?;
    let mut quads = Vec::new();
    for sp in &specs.avg_quad {
        check_shape(&sp.label, &sp.a, n_w, n_w)?;
        check_convex_weight(&sp.label, &sp.a)?;
        let v = assemble_v(model, layout, &SpecQuadratic { a: sp.a.clone() }, opts)?;
        quads.push(RawQuadConstraint {
            label: sp.label.clone(),
            m: m.clone(),
            second_moment: SecondMoment::Averaged(v),
            beta: sp.beta.clone(),
            gamma: sp.gamma,
        });
    }
    for sp in &specs.mean_quad {
        check_shape(&sp.label, &sp.a, n_w, n_w)?;
        check_convex_weight(&sp.label, &sp.a)?;
        let root = nonzero_rows(&psd_sqrt(&sp.a));
        quads.push(RawQuadConstraint {
            label: sp.label.clone(),
            m: m.clone(),
            second_moment: SecondMoment::Mean(root),
            beta: sp.beta.clone(),
            gamma: sp.gamma,
        });
    }
    let mut covs = Vec::new();
    if !specs.cov.is_empty() {
        if model.dims().modes != 1 {
            return Err(Error::Unsupported(
                "covariance bounds are only available for single-mode models".into(),
            ));
        }
        let bs = assemble_m(model, layout, Channel::Eps)?;
        let root = psd_sqrt(&model.sigma_eps());
        let keep: Vec<usize> = (0..root.ncols())
            .filter(|&c| root.column(c).amax() > 1e-14 * root.amax().max(1e-300))
            .collect();
        let root = root.select_columns(keep.iter());
        for sp in &specs.cov {
            if sp.q.ncols() != n_w {
                return Err(dim_err(&sp.label, n_w, sp.q.ncols()));
            }
            covs.push(RawCovConstraint {
                label: sp.label.clone(),
                q: sp.q.clone(),
                sigma_tilde: sp.sigma_tilde.clone(),
                bs: bs.clone(),
                sigma_eps_root: root.clone(),
            });
        }
    }
    Ok((quads, covs))
}

fn nonzero_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = m.amax().max(1e-300);
    let keep: Vec<usize> = (0..m.nrows()).filter(|&r| m.row(r).amax() > 1e-12 * scale).collect();
    m.select_rows(keep.iter())
}

/// Full pipeline: assemble, solve, and return the policy with diagnostics.
pub fn synthesize(
    model: &MjlsModel,
    specs: &SpecSet,
    opts: &SynthesisOptions,
    solver: &dyn ConicSolver,
) -> Result<(SynthesisOutcome, Policy)> {
    if specs.avg_quad.is_empty() && specs.mean_quad.is_empty() && specs.cov.is_empty() {
        return Err(Error::Invalid("specification set is empty".into()));
    }
    let d = model.dims();
    let layout = PolicyLayout::new(d.horizon, opts.memory, d.modes, d.nu, d.ny)?;
    let (quads, covs) = assemble_constraints(model, &layout, specs, &opts.assembly)?;
    let out = solve_constraints(
        layout.dim(),
        &quads,
        &covs,
        &specs.ellitope,
        specs.objective.as_ref(),
        opts,
        solver,
    )?;
    let policy = Policy::from_vec(layout, Basis::Purified, out.chi.clone())?;
    Ok((out, policy))
}
