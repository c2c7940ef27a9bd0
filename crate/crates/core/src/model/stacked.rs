//! Stacked (whole-horizon) operators along a fixed mode path and the resulting
//! affine maps from (ζ, ε) to the trajectory w = (x_1..x_N, u_0..u_{N-1}).

use nalgebra::{DMatrix, DVector};

use super::{Basis, MjlsModel, Policy};
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StackedOperators {
    /// Rows Γ[k,0] for k = 1..N.
    pub a_bar: DMatrix<f64>,
    /// Block (t, j) = Γ[t+1, j+1] B_j for j ≤ t.
    pub b_bar: DMatrix<f64>,
    pub bd_bar: DMatrix<f64>,
    pub bs_bar: DMatrix<f64>,
    /// Rows C_k Γ[k,0] for k = 0..N-1.
    pub c_bar: DMatrix<f64>,
    /// Block (k, j) = Dd_j if k = j, C_k Γ[k, j+1] Bd_j if k > j.
    pub dd_bar: DMatrix<f64>,
    pub ds_bar: DMatrix<f64>,
}

/// Γ[t, τ] for all 0 ≤ τ ≤ t ≤ N, indexed `gamma[t][tau]`.
fn transition_products(model: &MjlsModel, path: &[usize]) -> Vec<Vec<DMatrix<f64>>> {
    let n = model.horizon();
    let nx = model.dims().nx;
    let mut g: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n + 1);
    for t in 0..=n {
        let mut row = Vec::with_capacity(t + 1);
        for tau in 0..=t {
            if tau == t {
                row.push(DMatrix::identity(nx, nx));
            } else {
                let prev: &DMatrix<f64> = &g[t - 1][tau];
                row.push(&model.mats(t - 1, path[t - 1]).a * prev);
            }
        }
        g.push(row);
    }
    g
}

pub fn build_stacked(model: &MjlsModel, path: &[usize]) -> Result<StackedOperators> {
    let d = model.dims();
    let n = d.horizon;
    if path.len() != n {
        return Err(dim_err("mode path length", n, path.len()));
    }
    if let Some(&bad) = path.iter().find(|&&k| k >= d.modes) {
        return Err(Error::Invalid(format!("mode {bad} out of range")));
    }
    let g = transition_products(model, path);
    let mut a_bar = DMatrix::zeros(n * d.nx, d.nx);
    let mut b_bar = DMatrix::zeros(n * d.nx, n * d.nu);
    let mut bd_bar = DMatrix::zeros(n * d.nx, n * d.nd);
    let mut bs_bar = DMatrix::zeros(n * d.nx, n * d.ne);
    let mut c_bar = DMatrix::zeros(n * d.ny, d.nx);
    let mut dd_bar = DMatrix::zeros(n * d.ny, n * d.nd);
    let mut ds_bar = DMatrix::zeros(n * d.ny, n * d.ne);
    for t in 0..n {
        a_bar.view_mut((t * d.nx, 0), (d.nx, d.nx)).copy_from(&g[t + 1][0]);
        for j in 0..=t {
            let mj = model.mats(j, path[j]);
            let phi = &g[t + 1][j + 1];
            b_bar.view_mut((t * d.nx, j * d.nu), (d.nx, d.nu)).copy_from(&(phi * &mj.b));
            bd_bar.view_mut((t * d.nx, j * d.nd), (d.nx, d.nd)).copy_from(&(phi * &mj.bd));
            bs_bar.view_mut((t * d.nx, j * d.ne), (d.nx, d.ne)).copy_from(&(phi * &mj.bs));
        }
    }
    for k in 0..n {
        let mk = model.mats(k, path[k]);
        c_bar.view_mut((k * d.ny, 0), (d.ny, d.nx)).copy_from(&(&mk.c * &g[k][0]));
        for j in 0..=k {
            let mj = model.mats(j, path[j]);
            let (bd, bs) = if j == k {
                (mk.dd.clone(), mk.ds.clone())
            } else {
                let cg = &mk.c * &g[k][j + 1];
                (&cg * &mj.bd, &cg * &mj.bs)
            };
            dd_bar.view_mut((k * d.ny, j * d.nd), (d.ny, d.nd)).copy_from(&bd);
            ds_bar.view_mut((k * d.ny, j * d.ne), (d.ny, d.ne)).copy_from(&bs);
        }
    }
    Ok(StackedOperators {
        a_bar,
        b_bar,
        bd_bar,
        bs_bar,
        c_bar,
        dd_bar,
        ds_bar,
    })
}

/// w = offset + zeta_map · ζ + eps_map · ε along one mode path.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMaps {
    pub offset: DVector<f64>,
    pub zeta_map: DMatrix<f64>,
    pub eps_map: DMatrix<f64>,
}

impl TrajectoryMaps {
    /// The (n_w × (1 + n_ζ)) matrix [offset | zeta_map] acting on ζ_e = (1, ζ).
    pub fn extended(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.offset.len(), 1 + self.zeta_map.ncols());
        m.set_column(0, &self.offset);
        m.view_mut((0, 1), (self.zeta_map.nrows(), self.zeta_map.ncols()))
            .copy_from(&self.zeta_map);
        m
    }
}

pub fn trajectory_affine_maps(model: &MjlsModel, policy: &Policy, path: &[usize]) -> Result<TrajectoryMaps> {
    if policy.basis() != Basis::Purified {
        return Err(Error::Invalid("trajectory maps need a purified-output policy".into()));
    }
    let d = model.dims();
    let l = policy.layout();
    if l.horizon != d.horizon || l.modes != d.modes || l.nu != d.nu || l.ny != d.ny {
        return Err(dim_err(
            "policy layout vs model",
            format!("N={} m={} nu={} ny={}", d.horizon, d.modes, d.nu, d.ny),
            format!("N={} m={} nu={} ny={}", l.horizon, l.modes, l.nu, l.ny),
        ));
    }
    let s = build_stacked(model, path)?;
    let (h, big_h) = policy.stacked(path);
    let n = d.horizon;
    let nxs = n * d.nx;
    let n_w = d.n_w();
    let bh = &s.b_bar * &big_h;

    let mut offset = DVector::zeros(n_w);
    offset.rows_mut(0, nxs).copy_from(&(&s.b_bar * &h));
    offset.rows_mut(nxs, n * d.nu).copy_from(&h);

    // columns for x0 (shared by z and s0)
    let x0_top = &bh * &s.c_bar + &s.a_bar;
    let x0_bot = &big_h * &s.c_bar;
    let stack = |top: DMatrix<f64>, bot: DMatrix<f64>| {
        let mut m = DMatrix::zeros(n_w, top.ncols());
        m.view_mut((0, 0), (nxs, top.ncols())).copy_from(&top);
        m.view_mut((nxs, 0), (n * d.nu, top.ncols())).copy_from(&bot);
        m
    };
    let x0_cols = stack(x0_top, x0_bot);
    let d_cols = stack(&bh * &s.dd_bar + &s.bd_bar, &big_h * &s.dd_bar);
    let e_cols = stack(&bh * &s.ds_bar + &s.bs_bar, &big_h * &s.ds_bar);

    let zeta_map = match model.x0_known() {
        Some(z) => {
            offset += &x0_cols * z;
            d_cols
        }
        None => {
            let mut m = DMatrix::zeros(n_w, d.nx + n * d.nd);
            m.view_mut((0, 0), (n_w, d.nx)).copy_from(&x0_cols);
            m.view_mut((0, d.nx), (n_w, n * d.nd)).copy_from(&d_cols);
            m
        }
    };
    let mut eps_map = DMatrix::zeros(n_w, d.n_eps());
    eps_map.view_mut((0, 0), (n_w, d.nx)).copy_from(&x0_cols);
    eps_map.view_mut((0, d.nx), (n_w, n * d.ne)).copy_from(&e_cols);
    Ok(TrajectoryMaps {
        offset,
        zeta_map,
        eps_map,
    })
}
