//! Multiperiod two-regime portfolio example.
//!
//! Positions x_t, transactions u_t, x_{t+1} = (1 + r(θ_t)) ⊙ (x_t + u_t). With the
//! baseline returns r̄ the model is A = B = diag(1 + r̄(θ)) plus a disturbance
//! d_t = (r − r̄) ⊙ (x_t + u_t), bounded coordinate-wise through the transaction
//! limit α and the return uncertainty γ.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dims, Ellitope, MarkovChain, MjlsModel, ModeMatrices, Policy};
use crate::simulator::{five_numbers, scenario_rng};
use crate::synthesis::{AvgQuadSpec, SpecSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioParams {
    /// Baseline returns per mode, `r_bar[mode][asset]`.
    pub r_bar: Vec<Vec<f64>>,
    /// Return uncertainty per asset.
    pub gamma: Vec<f64>,
    /// Transaction size bound per asset.
    pub alpha: Vec<f64>,
    pub x_tar: Vec<f64>,
    pub pi: Vec<f64>,
    /// Column-stochastic, `p[next][current]`.
    pub p: Vec<Vec<f64>>,
    pub horizon: usize,
    /// Level of the income deviation specification.
    pub rho: f64,
    /// Levels of the allocation drift specifications for t = 1..N.
    pub mu: Vec<f64>,
}

impl Default for PortfolioParams {
    /// Two assets (risk-free and regime dependent), recession/expansion, three periods.
    fn default() -> Self {
        PortfolioParams {
            r_bar: vec![vec![0.02, 0.01], vec![0.02, 0.05]],
            gamma: vec![0.001, 0.005],
            alpha: vec![10.0, 10.0],
            x_tar: vec![100.0, 100.0],
            pi: vec![0.1, 0.9],
            p: vec![vec![0.2, 0.3], vec![0.8, 0.7]],
            horizon: 3,
            rho: 0.3,
            mu: vec![5.0, 10.0, 20.0],
        }
    }
}

impl PortfolioParams {
    pub fn assets(&self) -> usize {
        self.x_tar.len()
    }
    pub fn modes(&self) -> usize {
        self.r_bar.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.assets();
        if n == 0 || self.modes() == 0 || self.horizon == 0 {
            return Err(Error::Invalid("portfolio needs assets, modes and a horizon".into()));
        }
        if self.r_bar.iter().any(|r| r.len() != n) || self.gamma.len() != n || self.alpha.len() != n {
            return Err(Error::Invalid("per-asset vectors must all have the asset count".into()));
        }
        if self.r_bar.iter().flatten().any(|&r| r <= -1.0) {
            return Err(Error::Invalid("baseline returns must exceed -1".into()));
        }
        if self.gamma.iter().chain(&self.alpha).any(|&v| v <= 0.0) {
            return Err(Error::Invalid("gamma and alpha must be positive".into()));
        }
        if self.mu.len() != self.horizon {
            return Err(Error::Invalid(format!("need {} drift levels", self.horizon)));
        }
        Ok(())
    }

    pub fn chain(&self) -> Result<MarkovChain> {
        let m = self.modes();
        if self.pi.len() != m || self.p.len() != m || self.p.iter().any(|r| r.len() != m) {
            return Err(Error::Invalid("chain dimensions must match the mode count".into()));
        }
        MarkovChain::new(
            DVector::from_column_slice(&self.pi),
            DMatrix::from_fn(m, m, |i, j| self.p[i][j]),
        )
    }
}

/// Per-time disturbance bounds `q[(t, i)]` with d_{t,i}² ≤ q[(t, i)].
pub fn bound_levels(params: &PortfolioParams) -> DMatrix<f64> {
    let n = params.assets();
    DMatrix::from_fn(params.horizon, n, |t, i| {
        let growth = params
            .r_bar
            .iter()
            .map(|r| 1.0 + r[i])
            .fold(f64::NEG_INFINITY, f64::max);
        // (M^{t+1} − 1)/(M − 1), which tends to t + 1 as M → 1
        let geometric = if (growth - 1.0).abs() < 1e-12 {
            (t + 1) as f64
        } else {
            (growth.powi(t as i32 + 1) - 1.0) / (growth - 1.0)
        };
        let bound = growth.powi(t as i32) * params.x_tar[i].abs() + geometric * params.alpha[i] + params.alpha[i];
        (params.gamma[i] * bound).powi(2)
    })
}

/// Known x0 = x_tar, A = B = diag(1 + r̄(θ)), Bd = C = I, no Gaussian noise; the
/// ellitope bounds each d_{t,i} separately.
pub fn build_portfolio_model(params: &PortfolioParams) -> Result<(MjlsModel, Ellitope)> {
    params.validate()?;
    let n = params.assets();
    let big_n = params.horizon;
    let dims = Dims {
        horizon: big_n,
        nx: n,
        nu: n,
        nd: n,
        ne: 0,
        ny: n,
        modes: params.modes(),
    };
    let per_mode: Vec<ModeMatrices> = params
        .r_bar
        .iter()
        .map(|r| {
            let growth = DMatrix::from_diagonal(&DVector::from_iterator(n, r.iter().map(|v| 1.0 + v)));
            ModeMatrices {
                a: growth.clone(),
                b: growth,
                bd: DMatrix::identity(n, n),
                bs: DMatrix::zeros(n, 0),
                c: DMatrix::identity(n, n),
                dd: DMatrix::zeros(n, n),
                ds: DMatrix::zeros(n, 0),
            }
        })
        .collect();
    let model = MjlsModel::new(
        dims,
        params.chain()?,
        DMatrix::zeros(n, n),
        vec![per_mode; big_n],
        Some(DVector::from_column_slice(&params.x_tar)),
    )?;
    let q = bound_levels(params);
    let nz = big_n * n;
    let qs = (0..big_n)
        .flat_map(|t| (0..n).map(move |i| (t, i)))
        .map(|(t, i)| {
            let mut m = DMatrix::zeros(nz, nz);
            m[(t * n + i, t * n + i)] = 1.0 / q[(t, i)];
            m
        })
        .collect();
    Ok((model, Ellitope::new(qs)?))
}

/// Expected total income of the naive policy u_{t,i} = −r̄_i(θ_t)/(1 + r̄_i(θ_t)) x_tar,i,
/// which keeps x_t = x_tar under the baseline returns.
pub fn naive_rebalance_income(params: &PortfolioParams) -> Result<f64> {
    params.validate()?;
    let chain = params.chain()?;
    let mut total = 0.0;
    for t in 0..params.horizon {
        let marginal = chain.marginal(t);
        for (k, r) in params.r_bar.iter().enumerate() {
            for (i, &ri) in r.iter().enumerate() {
                total += marginal[k] * (-ri / (1.0 + ri)) * params.x_tar[i];
            }
        }
    }
    Ok(total)
}

/// Income specification E[(U_tar − Σ⟨1, u_t⟩)²] ≤ ρ and drift specifications
/// E‖x_t − x_tar‖² ≤ μ_t, with their constants moved into γ.
pub fn portfolio_specs(params: &PortfolioParams, ellitope: Ellitope) -> Result<SpecSet> {
    params.validate()?;
    let u_tar = naive_rebalance_income(params)?;
    let n = params.assets();
    let big_n = params.horizon;
    let nw = 2 * big_n * n;
    let u_off = big_n * n;
    let mut avg_quad = Vec::with_capacity(1 + big_n);

    let mut a = DMatrix::zeros(nw, nw);
    a.view_mut((u_off, u_off), (u_off, u_off)).fill(1.0);
    let mut beta = DVector::zeros(nw);
    beta.rows_mut(u_off, u_off).fill(-u_tar);
    avg_quad.push(AvgQuadSpec {
        label: "income".into(),
        a,
        beta,
        gamma: Some(params.rho - u_tar * u_tar),
    });

    let x_tar = DVector::from_column_slice(&params.x_tar);
    for t in 1..=big_n {
        let mut a = DMatrix::zeros(nw, nw);
        let o = (t - 1) * n;
        a.view_mut((o, o), (n, n)).fill_with_identity();
        let mut beta = DVector::zeros(nw);
        beta.rows_mut(o, n).copy_from(&(-&x_tar));
        avg_quad.push(AvgQuadSpec {
            label: format!("drift_x{t}"),
            a,
            beta,
            gamma: Some(params.mu[t - 1] - x_tar.norm_squared()),
        });
    }
    Ok(SpecSet {
        avg_quad,
        mean_quad: vec![],
        cov: vec![],
        ellitope,
        objective: None,
    })
}

/// Constant added back to a specification value to recover the original quadratic.
pub fn spec_constant(params: &PortfolioParams, label: &str) -> Result<f64> {
    if label == "income" {
        let u = naive_rebalance_income(params)?;
        Ok(u * u)
    } else {
        Ok(params.x_tar.iter().map(|v| v * v).sum())
    }
}

/// One closed-loop run under actual returns r = r̄(θ) + γ ⊙ U[−1, 1].
#[derive(Debug, Clone)]
pub struct ReturnsRun {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Disturbance implied by the realized returns.
    pub d: Vec<DVector<f64>>,
}

/// Run the POB policy on the nonlinear return dynamics along `path`.
pub fn simulate_returns(
    params: &PortfolioParams,
    model: &MjlsModel,
    policy: &Policy,
    path: &[usize],
    seed: u64,
    index: u64,
) -> Result<ReturnsRun> {
    let n = params.assets();
    if path.len() != params.horizon {
        return Err(Error::Invalid("path length must equal the horizon".into()));
    }
    let mut rng = scenario_rng(seed, index);
    let mut x = vec![DVector::from_column_slice(&params.x_tar)];
    let mut xhat = DVector::zeros(n);
    let (mut us, mut vs, mut ds) = (Vec::new(), Vec::new(), Vec::new());
    for (t, &k) in path.iter().enumerate() {
        let mm = model.mats(t, k);
        let y = &mm.c * &x[t];
        vs.push(&y - &mm.c * &xhat);
        let u = policy.control(t, path, &vs);
        let r = DVector::from_fn(n, |i, _| params.r_bar[k][i] + params.gamma[i] * rng.gen_range(-1.0..=1.0));
        let next = (&x[t] + &u).component_mul(&r.add_scalar(1.0));
        ds.push(&next - &mm.a * &x[t] - &mm.b * &u);
        xhat = &mm.a * &xhat + &mm.b * &u;
        x.push(next);
        us.push(u);
    }
    Ok(ReturnsRun { x, u: us, d: ds })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExactCheck {
    pub spec_id: String,
    pub level: f64,
    /// Largest exact expectation over the boundary samples.
    pub worst_exact: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathSummary {
    /// Mode letters, `b` for mode 1 and `g` for mode 2 (digits beyond two modes).
    pub path: String,
    pub probability: f64,
    pub mean_income_deviation: f64,
    pub mean_drift: Vec<f64>,
    /// `states[t][asset]` five-number summary of x_t.
    #[serde(skip)]
    pub states: Vec<Vec<[f64; 5]>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupComparison {
    pub first_mode_1_mean: f64,
    pub first_mode_2_mean: f64,
    /// Paths starting in mode 1 (recession) show the larger mean income deviation.
    pub ordering_holds: bool,
    /// Probability-weighted average over all paths.
    pub expected_income_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PortfolioRun {
    pub u_tar: f64,
    pub exact_checks: Vec<ExactCheck>,
    pub scenarios: Vec<PathSummary>,
    pub groups: GroupComparison,
    /// Share of simulated disturbances inside the ellitope.
    pub disturbance_in_set: f64,
}

pub fn path_label(path: &[usize]) -> String {
    path.iter()
        .map(|&k| match k {
            0 => 'b',
            1 => 'g',
            k => char::from_digit((k + 1) as u32, 36).unwrap_or('?'),
        })
        .collect()
}

/// Exact checks at `probes` boundary samples and `samples` return realizations per
/// mode path (the same draws for every path).
pub fn evaluate_policy(
    params: &PortfolioParams,
    model: &MjlsModel,
    specs: &SpecSet,
    policy: &Policy,
    probes: u64,
    samples: u64,
    seed: u64,
) -> Result<PortfolioRun> {
    use crate::model::{enumerate_paths, path_probability, MAX_PATHS};
    use crate::simulator::{exact_avg_quad, sample_uncertainty, UncertaintySampling};
    use rayon::prelude::*;

    let u_tar = naive_rebalance_income(params)?;
    let mut levels = vec![params.rho];
    levels.extend(&params.mu);
    let zetas: Vec<DVector<f64>> = (0..probes)
        .map(|i| sample_uncertainty(&specs.ellitope, UncertaintySampling::Boundary, &mut scenario_rng(seed, i)))
        .collect();
    let mut exact_checks = Vec::new();
    for (spec, &level) in specs.avg_quad.iter().zip(&levels) {
        let c = spec_constant(params, &spec.label)?;
        let values = zetas
            .par_iter()
            .map(|z| exact_avg_quad(model, policy, &spec.a, &spec.beta, z).map(|v| v + c))
            .collect::<Result<Vec<f64>>>()?;
        let worst = values.into_iter().fold(f64::NEG_INFINITY, f64::max);
        exact_checks.push(ExactCheck {
            spec_id: spec.label.clone(),
            level,
            worst_exact: worst,
            satisfied: worst <= level + 1e-6,
        });
    }

    let x_tar = DVector::from_column_slice(&params.x_tar);
    let n = params.assets();
    let paths = enumerate_paths(params.modes(), params.horizon, MAX_PATHS)?;
    let mut scenarios = Vec::with_capacity(paths.len());
    let (mut inside, mut total) = (0usize, 0usize);
    for path in &paths {
        let runs = (0..samples)
            .into_par_iter()
            .map(|i| simulate_returns(params, model, policy, path, seed.wrapping_add(1), i))
            .collect::<Result<Vec<_>>>()?;
        let income: Vec<f64> = runs
            .iter()
            .map(|r| (u_tar - r.u.iter().map(|u| u.sum()).sum::<f64>()).powi(2))
            .collect();
        let mean_drift = (1..=params.horizon)
            .map(|t| runs.iter().map(|r| (&r.x[t] - &x_tar).norm_squared()).sum::<f64>() / samples as f64)
            .collect();
        let states = (0..=params.horizon)
            .map(|t| {
                (0..n)
                    .map(|i| five_numbers(&runs.iter().map(|r| r.x[t][i]).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        for r in &runs {
            let mut zeta = DVector::zeros(model.n_zeta());
            for (t, d) in r.d.iter().enumerate() {
                zeta.rows_mut(t * n, n).copy_from(d);
            }
            total += 1;
            if specs.ellitope.level(&zeta) <= 1.0 + 1e-12 {
                inside += 1;
            }
        }
        scenarios.push(PathSummary {
            path: path_label(path),
            probability: path_probability(model.chain(), path),
            mean_income_deviation: income.iter().sum::<f64>() / samples as f64,
            mean_drift,
            states,
        });
    }
    let group_mean = |first: usize| {
        let g: Vec<&PathSummary> = scenarios
            .iter()
            .zip(&paths)
            .filter(|(_, p)| p[0] == first)
            .map(|(s, _)| s)
            .collect();
        g.iter().map(|s| s.mean_income_deviation).sum::<f64>() / g.len().max(1) as f64
    };
    let (g1, g2) = (group_mean(0), group_mean(1.min(params.modes() - 1)));
    let groups = GroupComparison {
        first_mode_1_mean: g1,
        first_mode_2_mean: g2,
        ordering_holds: g1 > g2,
        expected_income_deviation: scenarios.iter().map(|s| s.probability * s.mean_income_deviation).sum(),
    };
    Ok(PortfolioRun {
        u_tar,
        exact_checks,
        scenarios,
        groups,
        disturbance_in_set: inside as f64 / total.max(1) as f64,
    })
}

/// `path,t,asset,min,q1,median,q3,max` rows.
pub fn boxplot_csv(run: &PortfolioRun) -> String {
    let mut out = String::from("path,t,asset,min,q1,median,q3,max\n");
    for s in &run.scenarios {
        for (t, per_asset) in s.states.iter().enumerate() {
            for (i, f) in per_asset.iter().enumerate() {
                out += &format!(
                    "{},{},{},{},{},{},{},{}\n",
                    s.path,
                    t,
                    i + 1,
                    f[0],
                    f[1],
                    f[2],
                    f[3],
                    f[4]
                );
            }
        }
    }
    out
}

/// `path,probability,mean_income_deviation` rows.
pub fn income_csv(run: &PortfolioRun) -> String {
    let mut out = String::from("path,probability,mean_income_deviation\n");
    for s in &run.scenarios {
        out += &format!("{},{},{}\n", s.path, s.probability, s.mean_income_deviation);
    }
    out
}
