//! MJLS data model: dimensions, Markov chain, per-mode matrices, ellitopes and path utilities.

mod policy;
mod stacked;

pub use policy::{dim_of_policy, Basis, Policy, PolicyLayout, Slot, SlotKind};
pub use stacked::{build_stacked, trajectory_affine_maps, StackedOperators, TrajectoryMaps};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_shape, dim_err, Error, Result};

/// Default cap on the number of enumerated mode paths.
pub const MAX_PATHS: usize = 1 << 20;

const PROB_TOL: f64 = 1e-9;

/// Finite-state Markov chain. `p[(next, current)]`, so columns sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    pi: DVector<f64>,
    p: DMatrix<f64>,
}

impl MarkovChain {
    pub fn new(pi: DVector<f64>, p: DMatrix<f64>) -> Result<Self> {
        let m = pi.len();
        if m == 0 {
            return Err(Error::Invalid("chain needs at least one mode".into()));
        }
        check_shape("transition matrix", &p, m, m)?;
        if pi.iter().any(|&x| x < -PROB_TOL) || (pi.sum() - 1.0).abs() > PROB_TOL {
            return Err(Error::Invalid(format!(
                "initial distribution must be a probability vector (sum {})",
                pi.sum()
            )));
        }
        for c in 0..m {
            let col = p.column(c);
            if col.iter().any(|&x| x < -PROB_TOL) || (col.sum() - 1.0).abs() > PROB_TOL {
                return Err(Error::Invalid(format!(
                    "transition matrix column {c} must sum to one (got {})",
                    col.sum()
                )));
            }
        }
        Ok(MarkovChain { pi, p })
    }

    pub fn modes(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Pr(θ_{t+1} = next | θ_t = current).
    pub fn transition(&self, next: usize, current: usize) -> f64 {
        self.p[(next, current)]
    }

    /// Distribution of θ_t.
    pub fn marginal(&self, t: usize) -> DVector<f64> {
        let mut d = self.pi.clone();
        for _ in 0..t {
            d = &self.p * d;
        }
        d
    }
}

/// Problem dimensions. `horizon` is N.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub nd: usize,
    pub ne: usize,
    pub ny: usize,
    pub modes: usize,
}

impl Dims {
    pub fn n_w(&self) -> usize {
        self.horizon * (self.nx + self.nu)
    }
    pub fn n_eps(&self) -> usize {
        self.nx + self.horizon * self.ne
    }
}

/// Matrices of one (time, mode) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub bd: DMatrix<f64>,
    pub bs: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dd: DMatrix<f64>,
    pub ds: DMatrix<f64>,
}

impl ModeMatrices {
    pub fn zeros(d: &Dims) -> Self {
        ModeMatrices {
            a: DMatrix::zeros(d.nx, d.nx),
            b: DMatrix::zeros(d.nx, d.nu),
            bd: DMatrix::zeros(d.nx, d.nd),
            bs: DMatrix::zeros(d.nx, d.ne),
            c: DMatrix::zeros(d.ny, d.nx),
            dd: DMatrix::zeros(d.ny, d.nd),
            ds: DMatrix::zeros(d.ny, d.ne),
        }
    }

    fn check(&self, d: &Dims, t: usize, k: usize) -> Result<()> {
        let ctx = |n: &str| format!("{n} at t={t}, mode={k}");
        check_shape(&ctx("A"), &self.a, d.nx, d.nx)?;
        check_shape(&ctx("B"), &self.b, d.nx, d.nu)?;
        check_shape(&ctx("Bd"), &self.bd, d.nx, d.nd)?;
        check_shape(&ctx("Bs"), &self.bs, d.nx, d.ne)?;
        check_shape(&ctx("C"), &self.c, d.ny, d.nx)?;
        check_shape(&ctx("Dd"), &self.dd, d.ny, d.nd)?;
        check_shape(&ctx("Ds"), &self.ds, d.ny, d.ne)?;
        Ok(())
    }
}

/// Finite-horizon MJLS with uncertain-but-bounded and Gaussian disturbances.
///
/// `x0 = z + s0`, where `z` is part of ζ unless a known initial state is given,
/// in which case `z` is fixed and ζ = (d_0, ..., d_{N-1}).
#[derive(Debug, Clone, PartialEq)]
pub struct MjlsModel {
    dims: Dims,
    chain: MarkovChain,
    sigma0: DMatrix<f64>,
    mats: Vec<Vec<ModeMatrices>>,
    x0_known: Option<DVector<f64>>,
}

impl MjlsModel {
    pub fn new(
        dims: Dims,
        chain: MarkovChain,
        sigma0: DMatrix<f64>,
        mats: Vec<Vec<ModeMatrices>>,
        x0_known: Option<DVector<f64>>,
    ) -> Result<Self> {
        if dims.horizon == 0 {
            return Err(Error::Invalid("horizon must be positive".into()));
        }
        if chain.modes() != dims.modes {
            return Err(dim_err("mode count", dims.modes, chain.modes()));
        }
        check_shape("Sigma0", &sigma0, dims.nx, dims.nx)?;
        if (&sigma0 - sigma0.transpose()).amax() > 1e-9 * (1.0 + sigma0.amax())
            || crate::linalg::min_eigenvalue(&sigma0) < -1e-9 * (1.0 + sigma0.amax())
        {
            return Err(Error::Invalid("Sigma0 must be symmetric PSD".into()));
        }
        if mats.len() != dims.horizon {
            return Err(dim_err("matrices per time", dims.horizon, mats.len()));
        }
        for (t, row) in mats.iter().enumerate() {
            if row.len() != dims.modes {
                return Err(dim_err(&format!("modes at t={t}"), dims.modes, row.len()));
            }
            for (k, mm) in row.iter().enumerate() {
                mm.check(&dims, t, k)?;
            }
        }
        if let Some(z) = &x0_known {
            if z.len() != dims.nx {
                return Err(dim_err("x0_known", dims.nx, z.len()));
            }
        }
        Ok(MjlsModel {
            dims,
            chain,
            sigma0,
            mats,
            x0_known,
        })
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }
    pub fn horizon(&self) -> usize {
        self.dims.horizon
    }
    pub fn chain(&self) -> &MarkovChain {
        &self.chain
    }
    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma0
    }
    pub fn x0_known(&self) -> Option<&DVector<f64>> {
        self.x0_known.as_ref()
    }
    pub fn mats(&self, t: usize, mode: usize) -> &ModeMatrices {
        &self.mats[t][mode]
    }
    pub fn all_mats(&self) -> &[Vec<ModeMatrices>] {
        &self.mats
    }

    /// Dimension of ζ: (z, d_0..d_{N-1}), or only the d's when x0 is known.
    pub fn n_zeta(&self) -> usize {
        let z = if self.x0_known.is_some() { 0 } else { self.dims.nx };
        z + self.dims.horizon * self.dims.nd
    }

    /// Σ_ε = blockdiag(Σ0, I).
    pub fn sigma_eps(&self) -> DMatrix<f64> {
        let d = &self.dims;
        let mut s = DMatrix::zeros(d.n_eps(), d.n_eps());
        s.view_mut((0, 0), (d.nx, d.nx)).copy_from(&self.sigma0);
        for i in d.nx..d.n_eps() {
            s[(i, i)] = 1.0;
        }
        s
    }

    pub fn has_noise(&self) -> bool {
        self.dims.ne > 0 || self.sigma0.amax() > 0.0
    }
}

/// (A_t[θ], B_t[θ], Bd_t[θ], Bs_t[θ]).
pub fn state_transition(
    model: &MjlsModel,
    t: usize,
    mode: usize,
) -> (&DMatrix<f64>, &DMatrix<f64>, &DMatrix<f64>, &DMatrix<f64>) {
    let m = model.mats(t, mode);
    (&m.a, &m.b, &m.bd, &m.bs)
}

/// Intersection of ellipsoids {ζ : ζᵀ Q_i ζ ≤ 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellitope {
    qs: Vec<DMatrix<f64>>,
}

impl Ellitope {
    pub fn new(qs: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = qs.first() else {
            return Err(Error::Invalid("ellitope needs at least one quadratic".into()));
        };
        let n = first.nrows();
        let mut sum = DMatrix::zeros(n, n);
        for (i, q) in qs.iter().enumerate() {
            check_shape(&format!("ellitope Q{i}"), q, n, n)?;
            if (q - q.transpose()).amax() > 1e-9 * (1.0 + q.amax())
                || crate::linalg::min_eigenvalue(q) < -1e-9 * (1.0 + q.amax())
            {
                return Err(Error::Invalid(format!("ellitope Q{i} must be symmetric PSD")));
            }
            sum += q;
        }
        if n > 0 && crate::linalg::min_eigenvalue(&sum) <= 1e-12 {
            return Err(Error::Invalid("sum of ellitope quadratics must be positive definite".into()));
        }
        Ok(Ellitope { qs })
    }

    pub fn dim(&self) -> usize {
        self.qs[0].nrows()
    }
    pub fn count(&self) -> usize {
        self.qs.len()
    }
    pub fn qs(&self) -> &[DMatrix<f64>] {
        &self.qs
    }
    pub fn q_sum(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.qs.iter().fold(DMatrix::zeros(n, n), |acc, q| acc + q)
    }

    /// max_i ζᵀ Q_i ζ; the point is inside iff this is ≤ 1.
    pub fn level(&self, zeta: &DVector<f64>) -> f64 {
        self.qs
            .iter()
            .map(|q| zeta.dot(&(q * zeta)))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Number of modes of the window θ_{[t,T]} = (θ_{max(0,t-T)}, ..., θ_t).
pub fn window_len(t: usize, memory: usize) -> usize {
    memory.min(t) + 1
}

/// Lexicographic index of a window (earliest mode most significant).
pub fn window_index(window: &[usize], m: usize) -> usize {
    window.iter().fold(0, |acc, &k| acc * m + k)
}

/// Inverse of [`window_index`] for a window of length `len`.
pub fn window_from_index(mut idx: usize, len: usize, m: usize) -> Vec<usize> {
    let mut w = vec![0; len];
    for slot in w.iter_mut().rev() {
        *slot = idx % m;
        idx /= m;
    }
    w
}

/// Window θ_{[t,T]} of a full path.
pub fn history_window(path: &[usize], t: usize, memory: usize) -> &[usize] {
    let start = t - memory.min(t);
    &path[start..=t]
}

pub fn checked_pow(m: usize, e: usize) -> Option<usize> {
    let mut acc: usize = 1;
    for _ in 0..e {
        acc = acc.checked_mul(m)?;
    }
    Some(acc)
}

/// All m^N mode paths in lexicographic order, subject to `limit`.
pub fn enumerate_paths(m: usize, horizon: usize, limit: usize) -> Result<Vec<Vec<usize>>> {
    let count = checked_pow(m, horizon).filter(|&c| c <= limit).ok_or(Error::TooLarge {
        what: "mode path enumeration".into(),
        needed: (m as u128).saturating_pow(horizon as u32),
        limit: limit as u128,
    })?;
    Ok((0..count).map(|i| window_from_index(i, horizon, m)).collect())
}

/// Pr(θ_0..θ_{N-1}) = π_{θ_0} Π P[θ_{t+1}, θ_t].
pub fn path_probability(chain: &MarkovChain, path: &[usize]) -> f64 {
    let Some(&first) = path.first() else {
        return 1.0;
    };
    path.windows(2)
        .fold(chain.pi()[first], |p, w| p * chain.transition(w[1], w[0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> MarkovChain {
        MarkovChain::new(
            DVector::from_vec(vec![0.1, 0.9]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.3, 0.8, 0.7]),
        )
        .unwrap()
    }

    #[test]
    fn path_probabilities_sum_to_one() {
        let c = chain();
        let paths = enumerate_paths(2, 4, MAX_PATHS).unwrap();
        let total: f64 = paths.iter().map(|p| path_probability(&c, p)).sum();
        assert!((total - 1.0).abs() < 1e-14);
        assert!((path_probability(&c, &[0, 0, 1]) - 0.1 * 0.2 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn marginals_match_hand_values() {
        let c = chain();
        let m1 = c.marginal(1);
        assert!((m1[0] - 0.29).abs() < 1e-12);
        let m2 = c.marginal(2);
        assert!((m2[0] - 0.271).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_chain() {
        let bad = MarkovChain::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.3, 0.7, 0.7]),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn windows_round_trip() {
        for idx in 0..27 {
            let w = window_from_index(idx, 3, 3);
            assert_eq!(window_index(&w, 3), idx);
        }
        let path = [1, 0, 1, 1];
        assert_eq!(history_window(&path, 3, 1), &[1, 1]);
        assert_eq!(history_window(&path, 1, 5), &[1, 0]);
    }

    #[test]
    fn enumeration_guard() {
        assert!(enumerate_paths(3, 40, MAX_PATHS).is_err());
    }

    #[test]
    fn ellitope_requires_definite_sum() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(Ellitope::new(vec![q.clone()]).is_err());
        let q2 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
        assert!(Ellitope::new(vec![q, q2]).is_ok());
    }
}
