//! Solver-agnostic conic program (linear objective, equalities, nonnegativity,
//! symmetric PSD blocks affine in the variables) and its Clarabel adapter.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus as ClStatus, SupportedConeT};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;

/// Symmetric matrix M(x) = M_0 + Σ_v x_v M_v stored through its upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdBlock {
    pub dim: usize,
    pub label: String,
    /// (i, j, var, coef) with i ≤ j; `var = None` is the constant part.
    entries: Vec<(usize, usize, Option<usize>, f64)>,
}

impl PsdBlock {
    pub fn new(dim: usize, label: impl Into<String>) -> Self {
        PsdBlock {
            dim,
            label: label.into(),
            entries: Vec::new(),
        }
    }

    fn push(&mut self, i: usize, j: usize, var: Option<usize>, coef: f64) {
        assert!(i < self.dim && j < self.dim, "entry outside block {}", self.label);
        if coef != 0.0 {
            let (i, j) = if i <= j { (i, j) } else { (j, i) };
            self.entries.push((i, j, var, coef));
        }
    }

    /// Adds `v` to entries (i, j) and (j, i).
    pub fn add_const(&mut self, i: usize, j: usize, v: f64) {
        self.push(i, j, None, v);
    }

    /// Adds `coef · x_var` to entries (i, j) and (j, i).
    pub fn add_var(&mut self, i: usize, j: usize, var: usize, coef: f64) {
        self.push(i, j, Some(var), coef);
    }

    /// Adds the symmetric matrix `m` (only its upper triangle is read) at offset (r, r).
    pub fn add_const_matrix(&mut self, r: usize, m: &DMatrix<f64>) {
        for j in 0..m.ncols() {
            for i in 0..=j {
                self.add_const(r + i, r + j, m[(i, j)]);
            }
        }
    }

    /// Adds `coef · x_var · m` (symmetric, upper triangle read) at offset (r, r).
    pub fn add_var_matrix(&mut self, r: usize, m: &DMatrix<f64>, var: usize, coef: f64) {
        for j in 0..m.ncols() {
            for i in 0..=j {
                self.add_var(r + i, r + j, var, coef * m[(i, j)]);
            }
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(i, j, var, c) in &self.entries {
            let v = match var {
                Some(k) => c * x[k],
                None => c,
            };
            m[(i, j)] += v;
            if i != j {
                m[(j, i)] += v;
            }
        }
        m
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProgram {
    num_vars: usize,
    labels: Vec<String>,
    objective: Vec<f64>,
    nonneg: Vec<usize>,
    equalities: Vec<(Vec<(usize, f64)>, f64)>,
    psd: Vec<PsdBlock>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `n` variables and returns the index of the first.
    pub fn add_vars(&mut self, n: usize, label: &str) -> usize {
        let start = self.num_vars;
        for i in 0..n {
            self.labels.push(format!("{label}[{i}]"));
        }
        self.num_vars += n;
        self.objective.resize(self.num_vars, 0.0);
        start
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn label(&self, var: usize) -> &str {
        &self.labels[var]
    }

    pub fn set_objective(&mut self, var: usize, c: f64) {
        self.objective[var] = c;
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn add_nonneg(&mut self, var: usize) {
        self.nonneg.push(var);
    }

    pub fn add_equality(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.equalities.push((terms, rhs));
    }

    pub fn add_psd(&mut self, block: PsdBlock) {
        self.psd.push(block);
    }

    pub fn psd_blocks(&self) -> &[PsdBlock] {
        &self.psd
    }

    pub fn nonneg_vars(&self) -> &[usize] {
        &self.nonneg
    }

    /// Smallest eigenvalue over all PSD blocks and nonnegative variables at `x`.
    pub fn min_cone_margin(&self, x: &DVector<f64>) -> f64 {
        let psd = self
            .psd
            .iter()
            .map(|b| min_eigenvalue(&b.eval(x)))
            .fold(f64::INFINITY, f64::min);
        self.nonneg.iter().map(|&v| x[v]).fold(psd, f64::min)
    }

    pub fn max_equality_residual(&self, x: &DVector<f64>) -> f64 {
        self.equalities
            .iter()
            .map(|(terms, rhs)| (terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>() - rhs).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Feasible,
    Infeasible,
    Inaccurate,
    Failed,
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub tol: f64,
    pub tol_psd: f64,
    pub max_iter: u32,
    pub deterministic: bool,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-8,
            tol_psd: 1e-7,
            max_iter: 200,
            deterministic: false,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub status: SolverStatus,
    /// Backend status name, for diagnostics.
    pub raw_status: String,
    pub x: DVector<f64>,
    /// Dual vector in the adapter's row order (equalities, nonnegatives, PSD blocks in svec form).
    pub z: DVector<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// max(0, -λ_min) over PSD blocks and nonnegative variables at `x`.
    pub max_psd_violation: f64,
}

pub trait ConicSolver {
    fn solve(&self, program: &ConicProgram, settings: &SolverSettings) -> Result<SolverResult>;
}

/// Upper-triangle column-major position of (i, j), i ≤ j.
fn svec_index(i: usize, j: usize) -> usize {
    j * (j + 1) / 2 + i
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ClarabelSolver;

struct Lowered {
    a: CscMatrix<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
}

fn lower(p: &ConicProgram) -> Lowered {
    let (mut ri, mut ci, mut vals) = (Vec::new(), Vec::new(), Vec::new());
    let mut b = Vec::new();
    let mut cones = Vec::new();
    let mut row = 0;
    if !p.equalities.is_empty() {
        for (terms, rhs) in &p.equalities {
            for &(v, c) in terms {
                ri.push(row);
                ci.push(v);
                vals.push(c);
            }
            b.push(*rhs);
            row += 1;
        }
        cones.push(SupportedConeT::ZeroConeT(p.equalities.len()));
    }
    if !p.nonneg.is_empty() {
        for &v in &p.nonneg {
            ri.push(row);
            ci.push(v);
            vals.push(-1.0);
            b.push(0.0);
            row += 1;
        }
        cones.push(SupportedConeT::NonnegativeConeT(p.nonneg.len()));
    }
    let sqrt2 = std::f64::consts::SQRT_2;
    for blk in &p.psd {
        let len = blk.dim * (blk.dim + 1) / 2;
        let mut bb = vec![0.0; len];
        for &(i, j, var, c) in &blk.entries {
            let s = if i == j { 1.0 } else { sqrt2 };
            let r = svec_index(i, j);
            match var {
                None => bb[r] += s * c,
                Some(v) => {
                    ri.push(row + r);
                    ci.push(v);
                    vals.push(-s * c);
                }
            }
        }
        b.extend(bb);
        row += len;
        cones.push(SupportedConeT::PSDTriangleConeT(blk.dim));
    }
    Lowered {
        a: CscMatrix::new_from_triplets(row, p.num_vars, ri, ci, vals),
        b,
        cones,
    }
}

impl ConicSolver for ClarabelSolver {
    fn solve(&self, program: &ConicProgram, settings: &SolverSettings) -> Result<SolverResult> {
        let n = program.num_vars;
        let low = lower(program);
        let pmat = CscMatrix::<f64>::zeros((n, n));
        let cfg = DefaultSettingsBuilder::default()
            .verbose(settings.verbose)
            .max_iter(settings.max_iter)
            .tol_gap_abs(settings.tol)
            .tol_gap_rel(settings.tol)
            .tol_feas(settings.tol)
            .max_threads(if settings.deterministic { 1 } else { 0 })
            .build()
            .map_err(|e| Error::Solver(format!("settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&pmat, &program.objective, &low.a, &low.b, &low.cones, cfg)
            .map_err(|e| Error::Solver(format!("setup: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let x = DVector::from_vec(sol.x.clone());
        let finite = x.iter().all(|v| v.is_finite());
        let violation = if finite {
            (-program.min_cone_margin(&x)).max(0.0)
        } else {
            f64::INFINITY
        };
        let status = match sol.status {
            ClStatus::Solved if violation <= settings.tol_psd => SolverStatus::Feasible,
            ClStatus::Solved | ClStatus::AlmostSolved => SolverStatus::Inaccurate,
            ClStatus::PrimalInfeasible | ClStatus::AlmostPrimalInfeasible => SolverStatus::Infeasible,
            _ => SolverStatus::Failed,
        };
        Ok(SolverResult {
            status,
            raw_status: format!("{:?}", sol.status),
            x,
            z: DVector::from_vec(sol.z.clone()),
            objective: sol.obj_val,
            dual_objective: sol.obj_val_dual,
            iterations: sol.iterations,
            primal_residual: sol.r_prim,
            dual_residual: sol.r_dual,
            max_psd_violation: violation,
        })
    }
}

/// Independent weak-duality check: returns (dual objective -bᵀz, stationarity residual ‖c + Aᵀz‖∞,
/// most negative eigenvalue of the dual PSD blocks, most negative dual nonnegative entry).
pub fn dual_certificate(program: &ConicProgram, z: &DVector<f64>) -> (f64, f64, f64, f64) {
    let low = lower(program);
    let m = low.b.len();
    let bz: f64 = (0..m).map(|r| low.b[r] * z[r]).sum();
    let mut grad = DVector::from_column_slice(&program.objective);
    for col in 0..low.a.n {
        for idx in low.a.colptr[col]..low.a.colptr[col + 1] {
            grad[col] += low.a.nzval[idx] * z[low.a.rowval[idx]];
        }
    }
    let mut row = program.equalities.len();
    let mut nonneg_min = f64::INFINITY;
    for _ in &program.nonneg {
        nonneg_min = nonneg_min.min(z[row]);
        row += 1;
    }
    let mut psd_min = f64::INFINITY;
    for blk in &program.psd {
        let mut zm = DMatrix::zeros(blk.dim, blk.dim);
        for j in 0..blk.dim {
            for i in 0..=j {
                let v = z[row + svec_index(i, j)];
                if i == j {
                    zm[(i, i)] = v;
                } else {
                    zm[(i, j)] = v / std::f64::consts::SQRT_2;
                    zm[(j, i)] = v / std::f64::consts::SQRT_2;
                }
            }
        }
        psd_min = psd_min.min(min_eigenvalue(&zm));
        row += blk.dim * (blk.dim + 1) / 2;
    }
    (-bz, grad.amax(), psd_min, nonneg_min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_psd_bound() {
        // max y s.t. [[1, y], [y, 1]] ⪰ 0  →  y = 1
        let mut p = ConicProgram::new();
        let y = p.add_vars(1, "y");
        p.set_objective(y, -1.0);
        let mut b = PsdBlock::new(2, "unit");
        b.add_const(0, 0, 1.0);
        b.add_const(1, 1, 1.0);
        b.add_var(0, 1, y, 1.0);
        p.add_psd(b);
        let r = ClarabelSolver.solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(r.status, SolverStatus::Feasible);
        assert!((r.x[y] - 1.0).abs() < 1e-6);
        let (dual_obj, stat, psd_min, _) = dual_certificate(&p, &r.z);
        assert!((dual_obj - r.objective).abs() < 1e-6);
        assert!(stat < 1e-6);
        assert!(psd_min > -1e-7);
    }

    #[test]
    fn detects_infeasibility() {
        // x ≥ 0 and [[-1 - x]] ⪰ 0
        let mut p = ConicProgram::new();
        let x = p.add_vars(1, "x");
        p.add_nonneg(x);
        let mut b = PsdBlock::new(1, "neg");
        b.add_const(0, 0, -1.0);
        b.add_var(0, 0, x, -1.0);
        p.add_psd(b);
        let r = ClarabelSolver.solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(r.status, SolverStatus::Infeasible);
    }
}
